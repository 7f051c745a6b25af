"""Downstream metrics, trajectory drift, linear probes and data-efficiency sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import NumericError
from .synthworld import SequenceRecord, is_seen, relative_pose, rot2, wrap_angle
from .trainer import Checkpoint, TASK_MODALITY, finetune, task_samples

DEFAULT_SEGMENTS = tuple(range(10, 90, 10))
VELOCITY_COLUMNS = ("vx", "vy", "vz", "vyaw")


# ----------------------------------------------------------------- reports

@dataclass
class MetricsReport:
    """Per-seed metric values with their aggregate; ``values`` is ``(n, len(columns))``."""

    task: str
    columns: tuple
    values: np.ndarray
    split: str = "all"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.shape[1] != len(self.columns):
            raise ValueError(f"{len(self.columns)} columns but values have shape {self.values.shape}")
        if self.split not in ("seen", "unseen", "all"):
            raise ValueError(f"split tag must be seen, unseen or all, got {self.split!r}")

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    @property
    def mean(self) -> np.ndarray:
        return self.values.mean(0)

    @property
    def std(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros(len(self.columns))
        return self.values.std(0, ddof=1)

    @property
    def median(self) -> np.ndarray:
        return np.median(self.values, 0)

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        if (other.task, other.columns, other.split) != (self.task, self.columns, self.split):
            raise ValueError("can only merge reports of the same task, columns and split")
        return MetricsReport(self.task, self.columns, np.vstack([self.values, other.values]), self.split, self.config)

    def to_dict(self) -> dict:
        return {
            "task": self.task, "split": self.split, "columns": list(self.columns), "n": self.n,
            "values": self.values.tolist(), "mean": self.mean.tolist(), "std": self.std.tolist(),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["task"], tuple(d["columns"]), np.asarray(d["values"]), d["split"], d.get("config", {}))

    def to_csv(self) -> str:
        rows = ["seed," + ",".join(self.columns)]
        rows += [f"{k}," + ",".join(repr(float(v)) for v in row) for k, row in enumerate(self.values)]
        rows.append("mean," + ",".join(repr(float(v)) for v in self.mean))
        rows.append("std," + ",".join(repr(float(v)) for v in self.std))
        return "\n".join(rows) + "\n"


def split_records(records: Sequence[SequenceRecord], split: str) -> list[SequenceRecord]:
    if split == "all":
        return list(records)
    want = split == "seen"
    return [r for r in records if is_seen(r.config.environment_id) == want]


def finetune_split(records: Sequence[SequenceRecord], holdout: int = 3) -> dict[str, list[SequenceRecord]]:
    """``train`` = seen environments minus the last ``holdout`` sequences of each;
    ``seen``/``unseen`` = those held-out sequences, grouped by environment parity."""
    by_env: dict[int, list[SequenceRecord]] = {}
    for r in records:
        by_env.setdefault(r.config.environment_id, []).append(r)
    out = {"train": [], "seen": [], "unseen": []}
    for env in sorted(by_env):
        group = by_env[env]
        if len(group) <= holdout:
            raise ValueError(f"environment {env} has {len(group)} sequences; need more than holdout={holdout}")
        tag = "seen" if is_seen(env) else "unseen"
        if tag == "seen":
            out["train"] += group[:-holdout]
        out[tag] += group[-holdout:]
    return out


def _predict(model, x) -> np.ndarray:
    if hasattr(model, "predict"):
        return np.asarray(model.predict(x), dtype=np.float64)
    return np.asarray(model(x), dtype=np.float64)


def _task_errors(models, records, task: str, reducer: Callable) -> np.ndarray:
    if not len(records):
        raise ValueError(f"{task}: evaluation split is empty")
    if not isinstance(models, (list, tuple)):
        models = [models]
    x, y = task_samples(records, task)
    return np.stack([reducer(_predict(m, x).reshape(y.shape), y) for m in models])


def steering_l1(models, records: Sequence[SequenceRecord], split: str = "all", config: dict | None = None) -> MetricsReport:
    """Per-frame mean absolute steering error; one row per model (seed)."""
    vals = _task_errors(models, records, "steering", lambda p, y: [np.abs(p - y).mean()])
    return MetricsReport("steering", ("l1",), vals, split, config or {})


def velocity_errors(models, records: Sequence[SequenceRecord], split: str = "all", config: dict | None = None) -> MetricsReport:
    vals = _task_errors(models, records, "velocity", lambda p, y: np.abs(p - y).mean(0))
    return MetricsReport("velocity", VELOCITY_COLUMNS, vals, split, config or {})


# ----------------------------------------------------------------- trajectories

@dataclass
class Trajectory:
    poses: np.ndarray  # (n, 3): x, y, theta

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 3)
        if len(self.poses) == 0:
            raise ValueError("trajectory must hold at least one pose")
        if not np.isfinite(self.poses).all():
            raise NumericError("trajectory contains non-finite poses")

    def __len__(self) -> int:
        return len(self.poses)

    def path_length(self) -> np.ndarray:
        """Cumulative travelled distance at each pose."""
        steps = np.linalg.norm(np.diff(self.poses[:, :2], axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def transformed(self, pose) -> "Trajectory":
        """Apply a global rigid motion ``pose`` to every pose."""
        x, y, th = pose
        xy = self.poses[:, :2] @ rot2(th).T + np.array([x, y])
        return Trajectory(np.column_stack([xy, wrap_angle(self.poses[:, 2] + th)]))


def compose_pose(a, b) -> np.ndarray:
    """``a`` followed by ``b`` expressed in ``a``'s body frame."""
    xy = np.asarray(a[:2]) + rot2(a[2]) @ np.asarray(b[:2], dtype=np.float64)
    return np.array([xy[0], xy[1], wrap_angle(a[2] + b[2])])


def invert_pose(a) -> np.ndarray:
    xy = -(rot2(-a[2]) @ np.asarray(a[:2], dtype=np.float64))
    return np.array([xy[0], xy[1], wrap_angle(-a[2])])


def compose_trajectory(relposes) -> Trajectory:
    rel = np.asarray(relposes, dtype=np.float64).reshape(-1, 3)
    if len(rel) == 0:
        raise ValueError("need at least one relative pose")
    if not np.isfinite(rel).all():
        raise NumericError("non-finite relative pose")
    poses = [np.zeros(3)]
    for r in rel:
        poses.append(compose_pose(poses[-1], r))
    return Trajectory(np.stack(poses))


def relative_poses(traj: Trajectory) -> np.ndarray:
    p = traj.poses
    return np.stack([relative_pose(p[i], p[i + 1]) for i in range(len(p) - 1)])


def rpe_drift(estimated: Trajectory, truth: Trajectory, lengths: Sequence[float] = DEFAULT_SEGMENTS) -> tuple[float, float]:
    """Segment drift ``(t_rel %, r_rel deg per 100 units)``.

    For each length ``L`` and start ``i`` the segment ends at the first pose
    whose travelled distance along ``truth`` reaches ``L``. Errors are RMSE
    over starts, then averaged across lengths with at least one segment.
    """
    if len(estimated) != len(truth):
        raise ValueError(f"trajectories differ in length: {len(estimated)} vs {len(truth)}")
    lengths = sorted(float(L) for L in lengths)
    if not lengths or lengths[0] <= 0:
        raise ValueError("segment lengths must be positive")
    dist = truth.path_length()
    if dist[-1] < lengths[0]:
        raise ValueError(f"trajectory path length {dist[-1]:.3f} shorter than smallest segment {lengths[0]}")
    est, gt = estimated.poses, truth.poses
    t_rms, r_rms = [], []
    for L in lengths:
        ends = np.searchsorted(dist, dist + L - 1e-12, side="left")
        starts = np.nonzero(ends < len(dist))[0]
        if len(starts) == 0:
            continue
        t_err, r_err = [], []
        for i in starts:
            j = ends[i]
            rel_gt = relative_pose(gt[i], gt[j])
            rel_est = relative_pose(est[i], est[j])
            e = compose_pose(invert_pose(rel_est), rel_gt)
            t_err.append(math.hypot(e[0], e[1]) / L)
            r_err.append(abs(e[2]) / L)
        t_rms.append(math.sqrt(np.mean(np.square(t_err))))
        r_rms.append(math.sqrt(np.mean(np.square(r_err))))
    return 100.0 * float(np.mean(t_rms)), float(np.degrees(np.mean(r_rms))) * 100.0


def odometry_drift(model, record: SequenceRecord, lengths: Sequence[float] = DEFAULT_SEGMENTS,
                   window: int = 4) -> tuple[Trajectory, Trajectory, tuple[float, float]]:
    """Chain a window-level odometry model along one sequence and score it."""
    x, _ = task_samples([record], "odometry", window=window, stride=window)
    rel = _predict(model, x).reshape(-1, 3)
    est = compose_trajectory(rel)
    gt = record.trajectory.poses[: window * len(rel) + 1: window]
    # the reference goes through the same composition as the estimate
    truth = compose_trajectory(relative_poses(Trajectory(gt)))
    return est, truth, rpe_drift(est, truth, lengths)


# ----------------------------------------------------------------- probes

PROBE_SPACE = {"motion": "O_m", "obstacle_distance": "O_s"}


@dataclass(frozen=True)
class ProbeResult:
    r2: float
    per_target: tuple
    degenerate: bool
    n_train: int
    n_test: int


def fit_probe(codes, targets, seed: int = 0) -> ProbeResult:
    """Least-squares affine probe fit on a random half, scored by R² on the other half."""
    X = np.asarray(codes, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    Y = Y.reshape(len(Y), -1)
    if len(X) != len(Y) or len(X) < 4:
        raise ValueError(f"probe needs matching code/target rows (at least 4); got {len(X)} and {len(Y)}")
    perm = np.random.default_rng([seed, 23]).permutation(len(X))
    tr, te = perm[: len(X) // 2], perm[len(X) // 2:]
    zero = ProbeResult(0.0, (0.0,) * Y.shape[1], True, len(tr), len(te))
    if np.all(X.std(0) < 1e-12 * np.maximum(1.0, np.abs(X).max(0))):
        return zero
    A = np.column_stack([X, np.ones(len(X))])
    W, *_ = np.linalg.lstsq(A[tr], Y[tr], rcond=None)
    resid = Y[te] - A[te] @ W
    sst = ((Y[te] - Y[te].mean(0)) ** 2).sum(0)
    r2 = 1.0 - (resid ** 2).sum(0) / np.where(sst > 0, sst, np.nan)
    r2 = np.where(sst > 0, r2, 0.0)
    return ProbeResult(float(r2.mean()), tuple(float(v) for v in r2), False, len(tr), len(te))


def _window_targets(records, span: int, stride: int):
    starts = [(k, t) for k, r in enumerate(records) for t in range(0, len(r) - span, stride)]
    y = np.stack([relative_pose(records[k].trajectory.poses[t], records[k].trajectory.poses[t + span]) for k, t in starts])
    return starts, y


def probe_features(model, space: str, target: str, records: Sequence[SequenceRecord], stride: int = 2,
                   source: str | None = None, window: int = 4):
    """Frozen codes in ``space`` with the matching ground truth.

    ``O_m``/``motion``: codes of a ``window``-step stretch against the rigid
    motion across it. ``source`` picks the modality feeding ``O_m``; a spatial
    source goes through the aggregation head over the ``window + 1`` frames,
    a temporal one encodes its own window. Default: the first temporal
    modality, else the first spatial one.
    ``O_s``/``obstacle_distance``: frame codes against the crop's mean depth.
    """
    if PROBE_SPACE.get(target) != space:
        raise ValueError(f"target {target!r} is probed from {PROBE_SPACE.get(target)}, not {space!r}")
    if not records:
        raise ValueError("probe split is empty")
    graph = model.graph
    with torch.no_grad():
        if space == "O_s":
            name = source or graph.spatial[0]
            ts = [np.arange(0, len(r), stride) for r in records]
            z = model.encode(name, np.concatenate([r.modality(name)[t] for r, t in zip(records, ts)]))
            codes = model.project(graph.head_for(name, "O_s"), z, normalize=False)
            y = np.concatenate([r.depth[t].reshape(len(t), -1).mean(1) for r, t in zip(records, ts)])
            return codes.double().numpy(), y
        name = source or (graph.temporal or graph.spatial)[0]
        spec = graph.modality(name)
        if spec.kind == "temporal":
            starts, y = _window_targets(records, spec.window, stride)
            z = model.encode(name, np.stack([records[k].modality(name)[t: t + spec.window] for k, t in starts]))
        else:
            starts, y = _window_targets(records, window, stride)
            x = np.stack([records[k].modality(name)[t: t + window + 1] for k, t in starts])
            frames = model.encode(name, x.reshape(-1, *x.shape[2:]))
            z = model.aggregate(frames.reshape(len(x), window + 1, -1))
        codes = model.project(graph.head_for(name, "O_m"), z, normalize=False)
    return codes.double().numpy(), y


def linear_probe(model, space: str, target: str, records: Sequence[SequenceRecord], seed: int = 0,
                 source: str | None = None) -> ProbeResult:
    codes, y = probe_features(model, space, target, records, source=source)
    return fit_probe(codes, y, seed)
# ----------------------------------------------------------------- sweeps

def _task_score(task: str, model, records) -> float:
    if task == "steering":
        return float(steering_l1(model, records).mean[0])
    if task == "velocity":
        return float(velocity_errors(model, records).mean.mean())
    rel = []
    for r in records:
        _, _, (t_rel, _) = odometry_drift(model, r)
        rel.append(t_rel)
    return float(np.mean(rel))


@dataclass
class SweepReport:
    task: str
    fractions: tuple
    seeds: tuple
    pretrained: np.ndarray  # (len(fractions), len(seeds))
    scratch: np.ndarray

    def curve(self) -> list[dict]:
        out = []
        for k, f in enumerate(self.fractions):
            row = {"fraction": f}
            for name, arr in (("pretrained", self.pretrained[k]), ("scratch", self.scratch[k])):
                row[f"{name}_mean"] = float(arr.mean())
                row[f"{name}_std"] = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
                row[f"{name}_median"] = float(np.median(arr))
            out.append(row)
        return out

    def monotone(self) -> dict:
        """Whether medians fall as the fraction grows; reported, never enforced."""
        order = np.argsort(self.fractions)
        res = {}
        for name, arr in (("pretrained", self.pretrained), ("scratch", self.scratch)):
            med = np.median(arr, 1)[order]
            res[name] = bool(np.all(np.diff(med) <= 0))
        return res

    def comparison(self, low: float = 0.4, full: float = 1.0) -> dict | None:
        """Pretrained at ``low`` against scratch at ``full``."""
        if low not in self.fractions or full not in self.fractions:
            return None
        a = float(np.median(self.pretrained[self.fractions.index(low)]))
        b = float(np.median(self.scratch[self.fractions.index(full)]))
        return {"pretrained_fraction": low, "scratch_fraction": full,
                "pretrained_median": a, "scratch_median": b, "ratio": a / b if b else math.inf}

    def to_dict(self) -> dict:
        return {"task": self.task, "fractions": list(self.fractions), "seeds": list(self.seeds),
                "pretrained": self.pretrained.tolist(), "scratch": self.scratch.tolist(),
                "curve": self.curve(), "monotone": self.monotone(), "comparison": self.comparison()}

    def to_csv(self) -> str:
        rows = self.curve()
        cols = list(rows[0])
        return "\n".join([",".join(cols)] + [",".join(repr(r[c]) for c in cols) for r in rows]) + "\n"


def data_efficiency_sweep(checkpoint: Checkpoint, scratch: Checkpoint, task: str, train_records, eval_records,
                          fractions: Sequence[float] = (0.1, 0.25, 0.4, 1.0), seeds: Sequence[int] = (0, 1, 2),
                          **finetune_kw) -> SweepReport:
    if task not in TASK_MODALITY:
        raise ValueError(f"unknown task {task!r}")
    fractions = tuple(float(f) for f in fractions)
    for f in fractions:
        if not 0 < f <= 1:
            raise ValueError(f"fraction {f} outside (0, 1]")
    res = {"pretrained": np.zeros((len(fractions), len(seeds))), "scratch": np.zeros((len(fractions), len(seeds)))}
    for name, ckpt in (("pretrained", checkpoint), ("scratch", scratch)):
        for i, f in enumerate(fractions):
            for j, s in enumerate(seeds):
                _, model = finetune(ckpt, task, train_records, fraction=f, seed=s, **finetune_kw)
                res[name][i, j] = _task_score(task, model, eval_records)
    return SweepReport(task, fractions, tuple(seeds), res["pretrained"], res["scratch"])
