"""End-to-end acceptance checks, one test per criterion.

Pretraining runs are shared through session fixtures; the slow ones take a
few minutes each on one CPU core.
"""

import math
import time

import numpy as np
import pytest
import torch

from compass import evaluation as ev
from compass.graph import BatchParams, Mode, ModalitySpec, build_graph, assemble_batch
from compass.model import init_params
from compass.objectives import LITERAL, TRAINING, WindowCodes, total_loss
from compass.synthworld import environment_jobs, generate_dataset, read_dataset, write_dataset
from compass.trainer import (
    Checkpoint, TrainConfig, finetune, load_checkpoint, load_finetuned, objective, parameter_bytes, pretrain,
    save_checkpoint, save_finetuned,
)

from oracles import finite_difference, params_numpy, reference_losses, rpe_bruteforce

PRETRAIN_ENVS = range(100, 116)
FINETUNE_ENVS = range(0, 10)
PROBE_SEEDS = (0, 1, 2)


class _Fake:
    def __init__(self, n):
        self.n = n

    def __len__(self):
        return self.n


@pytest.fixture(scope="session")
def pretrain_data():
    return generate_dataset(environment_jobs(PRETRAIN_ENVS, 13, seed=0)[:200], T=40)


@pytest.fixture(scope="session")
def finetune_data():
    return generate_dataset(environment_jobs(FINETUNE_ENVS, 8, seed=1), T=40)


@pytest.fixture(scope="session")
def pretrained(pretrain_data):
    """Seed -> (checkpoint, wall seconds) for 2000-step COMPASS runs."""
    out = {}
    for s in PROBE_SEEDS:
        t0 = time.perf_counter()
        ck = pretrain(TrainConfig(seed=s, steps=2000), pretrain_data)
        out[s] = (ck, time.perf_counter() - t0)
    return out


def scratch(ck: Checkpoint, seed: int) -> Checkpoint:
    m = ck.model
    cfg = TrainConfig.from_dict({**ck.config.to_dict(), "mode": "SCRATCH", "seed": seed})
    return Checkpoint(model=init_params(m.graph, d=m.d, seed=seed, crop=m.crop, normalize=m.normalize,
                                        width=cfg.width), config=cfg)


# ----------------------------------------------------------------- 1

def _random_loss_setup(seed, K=5, B=6, k=2, d=8, L=3):
    mods = [ModalitySpec("rgb", "spatial", 3), ModalitySpec("depth", "spatial", 1), ModalitySpec("flow", "temporal", 2, 4)]
    g = build_graph(mods, Mode.COMPASS)
    model = init_params(g, d=d, seed=seed, precision=64, width=4)
    params = BatchParams(span=B, horizon=k, negatives=K, anchor_policy="all")
    batches = assemble_batch([_Fake(60)], g, params, seed)
    rng = np.random.default_rng([seed, 99])
    codes = WindowCodes(slot={m.name: torch.as_tensor(rng.normal(size=(B, d))) for m in mods},
                        context={m.name: torch.as_tensor(rng.normal(size=(B, L, d))) for m in mods[:2]})
    return g, model, batches, codes


def test_criterion_1_loss_oracle(criterion):
    worst, elapsed = 0.0, 0.0
    for seed in range(5):
        g, model, batches, codes = _random_loss_setup(seed)
        for simcfg in (LITERAL, TRAINING):
            t0 = time.perf_counter()
            got = total_loss(codes, batches, model, simcfg).components
            elapsed += time.perf_counter() - t0
            ref = reference_losses(codes, batches, params_numpy(model), g, model.normalize,
                                   simcfg.normalize, simcfg.temperature)
            for name in ("L_m", "L_s", "L_sm"):
                worst = max(worst, abs(float(got[name].detach()) - ref[name]) / abs(ref[name]))
    ok = worst <= 1e-6 and elapsed < 1.0
    criterion(1, ok, f"max rel err {worst:.2e}, package time {elapsed:.3f}s for 10 batches")
    assert ok


# ----------------------------------------------------------------- 2

def test_criterion_2_uniform_scores(criterion):
    K = 7
    g, model, batches, codes = _random_loss_setup(0, K=K, B=8)
    v = torch.full((8,), 0.3, dtype=torch.float64)
    codes = WindowCodes(slot={m: v.expand(8, 8).clone() for m in codes.slot},
                        context={m: v.expand(8, 3, 8).clone() for m in codes.context})
    worst = 0.0
    for simcfg in (LITERAL, TRAINING):
        comps = total_loss(codes, batches, model, simcfg).components
        worst = max(worst, max(abs(float(c.detach()) - math.log(K + 1)) for c in comps.values()))
    ok = worst <= 1e-12
    criterion(2, ok, f"|L - log(8)| max {worst:.1e} (log 8 = {math.log(8):.7f})")
    assert ok


# ----------------------------------------------------------------- 3

def test_criterion_3_gradient_check(criterion):
    t0 = time.perf_counter()
    data = generate_dataset(environment_jobs(range(4), 2, seed=9), T=40)
    cfg = TrainConfig(precision=64, windows_per_step=2)
    model = init_params(cfg.graph(), seed=0, precision=64)
    loss = lambda: objective(model, data, cfg, 0, seed=(11,)).total.detach()
    model.zero_grad()
    objective(model, data, cfg, 0, seed=(11,)).total.backward()
    rng = np.random.default_rng(0)
    worst, per_group = 0.0, {}
    with torch.no_grad():
        for group, plist in model.parameter_groups().items():
            sizes = [p.numel() for _, p in plist]
            errs = []
            for flat_idx in rng.choice(sum(sizes), 20, replace=False):
                k = 0
                while flat_idx >= sizes[k]:
                    flat_idx -= sizes[k]
                    k += 1
                p = plist[k][1]
                a = p.grad.view(-1)[flat_idx].item()
                n = finite_difference(loss, p, int(flat_idx), h=1e-5)
                errs.append(abs(a - n) / max(abs(a), abs(n), 1e-7))
            per_group[group] = max(errs)
            worst = max(worst, per_group[group])
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    criterion(3, ok, f"max rel err {worst:.2e} over {len(per_group)} groups, {elapsed:.1f}s")
    assert ok


# ----------------------------------------------------------------- 4

def test_criterion_4_graph_structure(criterion):
    checked = 0
    for n in range(5):
        for l in range(5):
            if n + l == 0:
                continue
            mods = [ModalitySpec(f"s{i}", "spatial", 3) for i in range(n)]
            mods += [ModalitySpec(f"t{i}", "temporal", 2, 4) for i in range(l)]
            if n:
                assert len(build_graph(mods, Mode.COMPASS).edges) == 2 * n + l
            assert len(build_graph(mods, Mode.DISJOINT).spaces) == (n + l) * (n + l - 1) // 2
            checked += 1
    criterion(4, True, f"{checked} (n, l) combinations enumerated")


# ----------------------------------------------------------------- 5

def test_criterion_5_pretraining(criterion, pretrained):
    ck, seconds = pretrained[0]
    init, final = ck.eval_loss["initial"]["total"], ck.eval_loss["final"]["total"]
    ratio = final / init
    ok = ratio <= 0.5 and seconds <= 600
    criterion(5, ok, f"held-out total {init:.3f} -> {final:.3f} (x{ratio:.3f}) in {seconds:.0f}s")
    assert ok


# ----------------------------------------------------------------- 6

def test_criterion_6_probes(criterion, pretrained, finetune_data):
    rows, ok = [], True
    for s in PROBE_SEEDS:
        ck = pretrained[s][0]
        rnd = scratch(ck, s).model
        m_pre = ev.linear_probe(ck.model, "O_m", "motion", finetune_data, seed=s).r2
        m_rnd = ev.linear_probe(rnd, "O_m", "motion", finetune_data, seed=s).r2
        s_pre = ev.linear_probe(ck.model, "O_s", "obstacle_distance", finetune_data, seed=s).r2
        s_rnd = ev.linear_probe(rnd, "O_s", "obstacle_distance", finetune_data, seed=s).r2
        v_pre = ev.linear_probe(ck.model, "O_m", "motion", finetune_data, seed=s, source="rgb").r2
        v_rnd = ev.linear_probe(rnd, "O_m", "motion", finetune_data, seed=s, source="rgb").r2
        passed = m_pre >= 0.5 and m_pre - m_rnd >= 0.2 and s_pre - s_rnd >= 0.2
        ok &= passed
        rows.append(f"seed {s}: O_m {m_pre:.2f} vs {m_rnd:.2f}, O_s {s_pre:.2f} vs {s_rnd:.2f} "
                    f"[rgb->O_m {v_pre:.2f} vs {v_rnd:.2f}]")
    criterion(6, ok, "; ".join(rows))
    assert ok


# ----------------------------------------------------------------- 7

def test_criterion_7_unseen_ordering(criterion, pretrained, finetune_data):
    split = ev.finetune_split(finetune_data)
    res = {"compass": [], "scratch": []}
    for s in range(5):
        ck = pretrained[PROBE_SEEDS[s % len(PROBE_SEEDS)]][0]
        for name, base in (("compass", ck), ("scratch", scratch(ck, s))):
            _, model = finetune(base, "steering", split["train"], seed=s)
            seen = ev.steering_l1(model, split["seen"], "seen").mean[0]
            unseen = ev.steering_l1(model, split["unseen"], "unseen").mean[0]
            res[name].append((seen, unseen))
    c, b = np.array(res["compass"]), np.array(res["scratch"])
    med_c, med_b = np.median(c[:, 1]), np.median(b[:, 1])
    gap_wins = int(np.sum((c[:, 1] - c[:, 0]) <= (b[:, 1] - b[:, 0])))
    ok = med_c <= med_b and gap_wins >= 3
    criterion(7, ok, f"unseen median L1 compass {med_c:.4f} vs scratch {med_b:.4f}; gap no larger in {gap_wins}/5 seeds")
    assert ok


# ----------------------------------------------------------------- 8

def test_criterion_8_data_efficiency(criterion, pretrained, finetune_data):
    split = ev.finetune_split(finetune_data)
    ck = pretrained[0][0]
    rep = ev.data_efficiency_sweep(ck, scratch(ck, 0), "velocity", split["train"], split["seen"] + split["unseen"],
                                   fractions=(0.1, 0.25, 0.4, 1.0), seeds=(0, 1, 2))
    cmp = rep.comparison(0.4, 1.0)
    curve = ", ".join(f"{r['fraction']:.2f}: {r['pretrained_median']:.4f}/{r['scratch_median']:.4f}" for r in rep.curve())
    ok = len(rep.curve()) == 4 and cmp["pretrained_median"] <= 1.1 * cmp["scratch_median"]
    criterion(8, ok, f"40% pretrained / 100% scratch = {cmp['ratio']:.3f}; curve (pre/scratch) {curve}; "
                     f"monotone {rep.monotone()}")
    assert ok


# ----------------------------------------------------------------- 9

def test_criterion_9_rpe(criterion):
    n = 120
    line = ev.Trajectory(np.column_stack([np.arange(n), np.zeros(n), np.zeros(n)]))
    same = ev.rpe_drift(line, line)
    scaled = ev.Trajectory(np.column_stack([1.05 * np.arange(n), np.zeros(n), np.zeros(n)]))
    t_rel, _ = ev.rpe_drift(scaled, line)
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        rel = np.column_stack([rng.uniform(0.5, 1.5, 100), rng.normal(0, 0.3, 100), rng.normal(0, 0.1, 100)])
        gt = ev.compose_trajectory(rel)
        est = ev.compose_trajectory(rel + rng.normal(0, 0.05, rel.shape))
        got = np.array(ev.rpe_drift(est, gt))
        ref = np.array(rpe_bruteforce(est.poses, gt.poses, ev.DEFAULT_SEGMENTS))
        worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1.0))))
    ok = same == (0.0, 0.0) and abs(t_rel - 5.0) <= 0.01 and worst <= 1e-9
    criterion(9, ok, f"identity {same}, scaled t_rel {t_rel:.4f}%, oracle deviation {worst:.1e}")
    assert ok


# ----------------------------------------------------------------- 10

def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_determinism(criterion, tmp_path):
    jobs = environment_jobs(range(3), 2, seed=4)
    write_dataset(generate_dataset(jobs, T=40), tmp_path / "d1")
    write_dataset(generate_dataset(jobs, T=40), tmp_path / "d2")
    data_same = _tree(tmp_path / "d1") == _tree(tmp_path / "d2")
    data = read_dataset(tmp_path / "d1")
    data_rt = data == generate_dataset(jobs, T=40)

    cfg = TrainConfig(steps=15, seed=7, windows_per_step=2, eval_batches=2)
    a, b = pretrain(cfg, data), pretrain(cfg, data)
    hist_same = a.history == b.history and a.eval_loss == b.eval_loss
    save_checkpoint(a, tmp_path / "c1")
    save_checkpoint(b, tmp_path / "c2")
    ckpt_same = _tree(tmp_path / "c1") == _tree(tmp_path / "c2")
    back = load_checkpoint(tmp_path / "c1")
    ckpt_rt = parameter_bytes(back.model) == parameter_bytes(a.model) and back.history == a.history

    _, ft = finetune(a, "steering", data, steps=3)
    save_finetuned(ft, a.config, tmp_path / "f")
    x = data[0].rgb
    ft_rt = np.array_equal(load_finetuned(tmp_path / "f").predict(x), ft.predict(x))

    checks = dict(dataset_bytes=data_same, dataset_round_trip=data_rt, history=hist_same,
                  checkpoint_bytes=ckpt_same, checkpoint_round_trip=ckpt_rt, finetuned_round_trip=ft_rt)
    ok = all(checks.values())
    criterion(10, ok, ", ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()))
    assert ok
