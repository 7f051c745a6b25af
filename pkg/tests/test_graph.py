import itertools

import pytest
from hypothesis import given, strategies as st

from compass.graph import (
    BatchParams, Mode, ModalitySpec, build_graph, default_modalities, assemble_batch, sample_negatives, GraphSpec,
)


def mods(n, l, window=4):
    return [ModalitySpec(f"s{i}", "spatial", 3) for i in range(n)] + [ModalitySpec(f"t{i}", "temporal", 2, window) for i in range(l)]


class FakeSeq:
    def __init__(self, n):
        self.n = n

    def __len__(self):
        return self.n


FAKE = [FakeSeq(40)] * 5


@pytest.mark.parametrize("n,l", [(n, l) for n in range(5) for l in range(5) if n + l >= 1])
def test_edge_and_space_counts(n, l):
    if n >= 1:
        assert len(build_graph(mods(n, l), Mode.COMPASS).edges) == 2 * n + l
    else:
        with pytest.raises(ValueError):
            build_graph(mods(n, l), Mode.COMPASS)
    N = n + l
    assert len(build_graph(mods(n, l), Mode.DISJOINT).spaces) == N * (N - 1) // 2


def test_compass_heads_are_shared():
    g = build_graph(default_modalities(), Mode.COMPASS)
    assert set(g.heads) == {"F_s", "F_m"}
    assert {e.head for e in g.edges if e.space == "O_m"} == {"F_m"}
    assert g.head_for("rgb", "O_s") == "F_s" and g.head_for("rgb", "O_m") == "F_m"
    with pytest.raises(KeyError):
        g.head_for("flow", "O_s")


def test_joint_has_one_head_and_cmc_one_per_modality():
    assert len(build_graph(default_modalities(), Mode.JOINT).heads) == 1
    assert len(build_graph(default_modalities(), Mode.CMC).heads) == 3


def test_loss_classes():
    g = build_graph(default_modalities(), Mode.COMPASS)
    assert g.loss_classes() == ["temporal", "spatial", "spatiotemporal"]
    rgb_only = build_graph(default_modalities(names=("rgb",)), Mode.COMPASS)
    assert rgb_only.loss_classes() == ["spatiotemporal"]
    assert len(build_graph(default_modalities(), Mode.DISJOINT).loss_classes()) == 3


def test_graph_serialisation_round_trip():
    for mode in Mode:
        g = build_graph(default_modalities(), mode)
        assert GraphSpec.from_dict(g.to_dict()) == g


def test_invalid_modalities():
    with pytest.raises(ValueError):
        ModalitySpec("x", "spectral", 1)
    with pytest.raises(ValueError):
        ModalitySpec("f", "temporal", 2, 1)
    with pytest.raises(ValueError):
        build_graph([ModalitySpec("a", "spatial", 1)] * 2, Mode.COMPASS)


@given(st.integers(2, 30), st.data())
def test_negatives_exclude_positive_and_are_distinct(span, data):
    K = data.draw(st.integers(1, span - 1))
    t = data.draw(st.integers(0, span - 1))
    seed = data.draw(st.integers(0, 2**31))
    negs = sample_negatives(span, t, K, seed)
    times = [j for j, _ in negs]
    assert len(times) == K == len(set(times)) and t not in times
    assert all(0 <= j < span for j in times)
    assert negs == sample_negatives(span, t, K, seed)


def test_too_few_negative_candidates():
    with pytest.raises(ValueError, match="K=8"):
        sample_negatives(8, 0, 8, 0)


@given(st.integers(3, 10), st.integers(1, 3), st.integers(1, 4), st.integers(0, 10**6))
def test_batch_terms_are_well_formed(span, k, windows, seed):
    if span - k < 1:
        return
    params = BatchParams(span=span, horizon=k, negatives=min(5, span * windows - 1), windows=windows, stride=1)
    g = build_graph(default_modalities(), Mode.COMPASS)
    for b in assemble_batch(FAKE, g, params, seed):
        for t in b.terms:
            assert t.time not in t.negatives
            assert len(set(t.negatives)) == params.negatives
            assert 0 <= t.time < b.n_slots
            if b.horizon:
                assert t.time == t.anchor_time + t.step and 1 <= t.step <= k
                assert t.anchor_time % span < span - k
            else:
                assert t.time == t.anchor_time and t.modality != t.anchor


def test_temporal_term_count():
    p = BatchParams(span=6, horizon=2, negatives=5, windows=1)
    g = build_graph(mods(2, 1), Mode.COMPASS)
    tb = {b.kind: b for b in assemble_batch(FAKE, g, p, 0)}
    assert len(tb["temporal"].terms) == (6 - 2) * 2 * 1
    assert len(tb["spatial"].terms) == 6  # one anchor, one other spatial modality
    assert len(tb["spatiotemporal"].terms) == (6 - 2) * 2 * 3


def test_adding_a_modality_adds_temporal_terms():
    p = BatchParams(span=6, horizon=2, negatives=5)
    g1 = build_graph(mods(1, 1), Mode.COMPASS)
    g2 = build_graph(mods(1, 2), Mode.COMPASS)
    n1 = len(next(b for b in assemble_batch(FAKE, g1, p, 0) if b.kind == "temporal").terms)
    n2 = len(next(b for b in assemble_batch(FAKE, g2, p, 0) if b.kind == "temporal").terms)
    assert n2 - n1 == (6 - 2) * 2


def test_cpc_has_no_cross_modal_positives():
    g = build_graph(mods(1, 1), Mode.CPC)
    (b,) = assemble_batch(FAKE, g, BatchParams(span=6, horizon=2, negatives=5), 1)
    assert b.terms and all(t.anchor == t.modality for t in b.terms)


def test_window_pool_keeps_negatives_in_window():
    p = BatchParams(span=6, horizon=2, negatives=5, windows=3, negative_pool="window")
    g = build_graph(default_modalities(), Mode.COMPASS)
    for b in assemble_batch(FAKE, g, p, 3):
        for t in b.terms:
            assert {n // 6 for n in t.negatives} == {t.time // 6}


def test_round_robin_anchor_rotates():
    g = build_graph(default_modalities(), Mode.COMPASS)
    seen = set()
    for step in range(2):
        b = next(b for b in assemble_batch(FAKE, g, BatchParams(step=step), 0) if b.kind == "spatial")
        seen.update(b.anchors)
    assert seen == {"rgb", "depth"}


def test_short_sequence_error_names_requirement():
    g = build_graph(default_modalities(), Mode.COMPASS)
    need = BatchParams().required_length()
    with pytest.raises(ValueError, match=str(need)):
        assemble_batch([FakeSeq(need - 1)], g, BatchParams(), 0)


def test_horizon_must_leave_an_anchor():
    g = build_graph(default_modalities(), Mode.COMPASS)
    with pytest.raises(ValueError):
        assemble_batch(FAKE, g, BatchParams(span=3, horizon=3, negatives=2), 0)


def test_frame_of_maps_slots():
    g = build_graph(default_modalities(), Mode.COMPASS)
    b = assemble_batch(FAKE, g, BatchParams(windows=2), 9)[0]
    seq, start = b.windows[1]
    assert b.frame_of(b.span + 2) == (seq, start + 2 * b.stride)


def test_batches_deterministic_in_seed():
    g = build_graph(default_modalities(), Mode.COMPASS)
    p = BatchParams(windows=3)
    assert assemble_batch(FAKE, g, p, 4) == assemble_batch(FAKE, g, p, 4)
    assert assemble_batch(FAKE, g, p, 4) != assemble_batch(FAKE, g, p, 5)


def test_disjoint_pairs_cover_all_combinations():
    g = build_graph(default_modalities(), Mode.DISJOINT)
    spaces = {tuple(sorted(e.source for e in g.edges if e.space == s)) for s in g.spaces}
    assert spaces == {tuple(sorted(c)) for c in itertools.combinations(["rgb", "depth", "flow"], 2)}
