import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from compass.errors import NumericError
from compass.graph import BatchParams, Mode, ModalitySpec, build_graph, assemble_batch
from compass.model import init_params
from compass.objectives import (
    LITERAL, TRAINING, SimilarityConfig, WindowCodes, info_nce, info_nce_term, sum_components, total_loss,
)

from oracles import nce, params_numpy, reference_losses

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


class FakeSeq:
    def __len__(self):
        return 60


def small_setup(seed=0, d=8, B=6, K=5, k=2, L=3, windows=1, anchor_policy="all"):
    mods = [ModalitySpec("a", "spatial", 3), ModalitySpec("b", "spatial", 1), ModalitySpec("f", "temporal", 2, 4)]
    g = build_graph(mods, Mode.COMPASS)
    model = init_params(g, d=d, seed=seed, precision=64, width=4)
    params = BatchParams(span=B, horizon=k, negatives=K, windows=windows, anchor_policy=anchor_policy)
    batches = assemble_batch([FakeSeq()] * 3, g, params, seed)
    rng = np.random.default_rng(seed)
    n = B * windows
    codes = WindowCodes(
        slot={m: torch.as_tensor(rng.normal(size=(n, d))) for m in ("a", "b", "f")},
        context={m: torch.as_tensor(rng.normal(size=(n, L, d))) for m in ("a", "b")},
    )
    return g, model, batches, codes


@pytest.mark.parametrize("simcfg", [LITERAL, TRAINING])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_components_match_loop_oracle(simcfg, seed):
    g, model, batches, codes = small_setup(seed)
    got = total_loss(codes, batches, model, simcfg).components
    ref = reference_losses(codes, batches, params_numpy(model), g, model.normalize, simcfg.normalize, simcfg.temperature)
    for name in ("L_m", "L_s", "L_sm"):
        assert abs(float(got[name]) - ref[name]) <= 1e-6 * abs(ref[name])


def test_equal_codes_give_log_k_plus_one():
    g, model, batches, codes = small_setup(K=5)
    v = torch.ones(8, dtype=torch.float64)
    codes = WindowCodes(slot={m: v.expand(6, 8).clone() for m in codes.slot},
                        context={m: v.expand(6, 3, 8).clone() for m in codes.context})
    comps = total_loss(codes, batches, model, LITERAL).components
    for c in comps.values():
        assert abs(float(c.detach()) - math.log(6)) <= 1e-12


@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite),
       arrays(np.float64, (3, 4), elements=finite))
def test_info_nce_matches_scalar_formula(a, p, n):
    got = info_nce_term(a, p, n)
    assert got >= 0
    assert math.isclose(got, nce(a, p, list(n), False, 1.0), rel_tol=1e-9, abs_tol=1e-9)


@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite),
       arrays(np.float64, (5, 4), elements=finite), st.permutations(range(5)))
def test_negative_order_is_irrelevant(a, p, n, perm):
    assert math.isclose(info_nce_term(a, p, n), info_nce_term(a, p, n[list(perm)]), rel_tol=1e-12, abs_tol=1e-12)


def test_extreme_scores_stay_finite():
    a = torch.tensor([[1e3, 0.0]], dtype=torch.float64)
    loss, _, _ = info_nce(a, torch.tensor([[1e3, 0.0]], dtype=torch.float64), torch.tensor([[[-1e3, 0.0]]], dtype=torch.float64), LITERAL)
    assert float(loss) == 0.0
    loss, _, _ = info_nce(a, torch.tensor([[-1e3, 0.0]], dtype=torch.float64), torch.tensor([[[1e3, 0.0]]], dtype=torch.float64), LITERAL)
    assert math.isclose(float(loss), 2e6, rel_tol=1e-12)


def test_info_nce_term_validation():
    with pytest.raises(ValueError):
        info_nce_term([1.0, 0.0], [1.0, 0.0], np.zeros((0, 2)))
    with pytest.raises(ValueError):
        info_nce_term([1.0, 0.0], [1.0, 0.0, 2.0], [[0.0, 1.0]])
    with pytest.raises(NumericError):
        info_nce_term([float("nan"), 0.0], [1.0, 0.0], [[0.0, 1.0]])


def test_temperature_must_be_positive():
    with pytest.raises(ValueError):
        SimilarityConfig(temperature=0.0)


def test_sum_components_order_and_masking():
    comps = {"L_sm": torch.tensor(3.0), "L_m": torch.tensor(1.0), "L_s": torch.tensor(2.0)}
    assert float(sum_components(comps)) == 6.0
    assert float(sum_components(comps, {"L_s": 0})) == 4.0
    with pytest.raises(ValueError):
        sum_components(comps, {"L_s": 0, "L_m": 0, "L_sm": 0})


def test_non_finite_code_is_reported():
    g, model, batches, codes = small_setup()
    codes.slot["f"][2, 0] = float("inf")
    with pytest.raises(NumericError):
        total_loss(codes, batches, model, LITERAL)


def test_term_table_lists_every_term():
    g, model, batches, codes = small_setup()
    bd = total_loss(codes, batches, model, LITERAL)
    assert len(bd.table) == sum(len(b.terms) for b in batches)
    csv_text = bd.table.to_csv()
    assert csv_text.splitlines()[0].startswith("component,anchor")
    losses = [float(r.split(",")[-1]) for r in csv_text.splitlines()[1:]]
    assert all(v >= 0 for v in losses)
