"""Pretraining, baseline training, finetuning and checkpoint files."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import _rawio
from .errors import DivergenceError, FormatError, NumericError, ShapeError
from .graph import (
    BatchParams, ConnectionBatch, GraphSpec, Mode, build_graph, default_modalities, assemble_batch, with_step,
)
from .model import CompassModel, init_params
from .objectives import SimilarityConfig, WindowCodes, mean_breakdown, total_loss
from .synthworld import SequenceRecord, read_dataset, relative_pose

log = logging.getLogger(__name__)

MODES = ("COMPASS", "CPC", "CMC", "JOINT", "DISJOINT", "RGB_ONLY", "SCRATCH")
CHECKPOINT_FORMAT = "compass-checkpoint/1"


@dataclass
class TrainConfig:
    mode: str = "COMPASS"
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    normalize: bool = True
    temperature: float = 0.1
    d: int = 32
    width: int = 16
    precision: int = 32
    windows_per_step: int = 4
    negative_pool: str = "batch"
    span: int = 8
    horizon: int = 3
    negatives: int = 7
    window: int = 4
    stride: int = 4
    context: int = 4
    eval_batches: int = 16
    modalities: tuple = ("rgb", "depth", "flow")
    dataset: str | None = None
    threads: int = 1

    def __post_init__(self):
        self.mode = str(self.mode).upper()
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.steps < 1:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        self.modalities = tuple(self.modalities)

    @property
    def simcfg(self) -> SimilarityConfig:
        return SimilarityConfig(normalize=self.normalize, temperature=self.temperature)

    def batch_params(self, step: int = 0) -> BatchParams:
        return BatchParams(
            span=self.span, horizon=self.horizon, negatives=self.negatives, window=self.window,
            stride=self.stride, context=self.context, windows=self.windows_per_step,
            negative_pool=self.negative_pool, step=step,
        )

    def graph(self) -> GraphSpec:
        if self.mode == "RGB_ONLY":
            return build_graph(default_modalities(self.window, ("rgb",)), Mode.COMPASS)
        mode = Mode.COMPASS if self.mode == "SCRATCH" else Mode(self.mode)
        return build_graph(default_modalities(self.window, self.modalities), mode)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Checkpoint:
    model: CompassModel
    config: TrainConfig
    step: int = 0
    history: list = field(default_factory=list)
    eval_loss: dict = field(default_factory=dict)

    @property
    def graph(self) -> GraphSpec:
        return self.model.graph


# ----------------------------------------------------------------- data to codes

def _crop_of(dataset) -> int:
    return int(dataset[0].rgb.shape[1])


def _slot_frames(batch: ConnectionBatch, contiguous: bool) -> list[np.ndarray]:
    out = []
    for _, start in batch.windows:
        slots = start + batch.stride * np.arange(batch.span)
        out.append(np.arange(start, slots[-1] + batch.context) if contiguous else slots)
    return out


def encode_batch(model: CompassModel, dataset: Sequence[SequenceRecord], batches: list[ConnectionBatch]) -> WindowCodes:
    """Encode every sample the batches' windows touch, one forward pass per modality."""
    geo = batches[0]
    needs_context = any(b.kind in ("spatiotemporal", "predictive") for b in batches)
    codes = WindowCodes(slot={}, context={})
    for spec in model.graph.modalities:
        name = spec.name
        if spec.kind == "spatial":
            idx = _slot_frames(geo, needs_context)
            arr = np.concatenate([dataset[seq].modality(name)[i] for (seq, _), i in zip(geo.windows, idx)])
            z = model.encode(name, arr)
            if needs_context:
                per = len(idx[0])
                base = (per * torch.arange(len(geo.windows)))[:, None] + geo.stride * torch.arange(geo.span)[None, :]
                base = base.reshape(-1)
                codes.slot[name] = z[base]
                codes.context[name] = z[base[:, None] + torch.arange(geo.context)[None, :]]
            else:
                codes.slot[name] = z
        else:
            arr = []
            for seq, start in geo.windows:
                flow = dataset[seq].modality(name)
                starts = start + geo.stride * np.arange(geo.span)
                arr.append(np.stack([flow[s: s + spec.window] for s in starts]))
            codes.slot[name] = model.encode(name, np.concatenate(arr))
    return codes


def objective(model: CompassModel, dataset, config: TrainConfig, step: int, seed):
    batches = assemble_batch(dataset, model.graph, config.batch_params(step), seed=seed)
    codes = encode_batch(model, dataset, batches)
    return total_loss(codes, batches, model, config.simcfg, with_table=False)


def evaluate_loss(model: CompassModel, dataset, config: TrainConfig, n_batches: int | None = None) -> dict:
    """Mean objective over a fixed set of batches, independent of the training stream."""
    n = n_batches or config.eval_batches
    with torch.no_grad():
        parts = [objective(model, dataset, config, k, seed=(7_919, config.seed, k)).components for k in range(n)]
        return mean_breakdown(parts).as_floats()


def _load(dataset, config: TrainConfig):
    if dataset is not None:
        return dataset
    if not config.dataset:
        raise ValueError("no dataset given: pass records or set TrainConfig.dataset")
    return read_dataset(config.dataset)


def _init_model(config: TrainConfig, dataset) -> CompassModel:
    return init_params(config.graph(), d=config.d, seed=config.seed, precision=config.precision,
                       crop=_crop_of(dataset), normalize=config.normalize, width=config.width)


def pretrain(config: TrainConfig, dataset=None, log_every: int = 0) -> Checkpoint:
    """Minimise the mode's contrastive objective with AdamW; SCRATCH returns the init."""
    dataset = _load(dataset, config)
    if config.threads:
        torch.set_num_threads(config.threads)
    graph = config.graph()
    check_graph_structure(graph)
    model = _init_model(config, dataset)
    if config.mode == "SCRATCH":
        return Checkpoint(model=model, config=config, step=0)
    if not graph.loss_classes():
        raise ValueError(f"graph for mode {config.mode} has no trainable loss")
    need = config.batch_params().required_length()
    short = [k for k, r in enumerate(dataset) if len(r) < need]
    if short:
        raise ValueError(f"sequence {short[0]} has {len(dataset[short[0]])} frames, need at least {need}")

    eval_initial = evaluate_loss(model, dataset, config)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for step in range(config.steps):
            try:
                bd = objective(model, dataset, config, step, seed=(config.seed, step))
            except NumericError as exc:
                raise DivergenceError(step, exc.component or "encoder") from exc
            for name, v in bd.components.items():
                if not torch.isfinite(v):
                    raise DivergenceError(step, name)
            opt.zero_grad(set_to_none=True)
            bd.total.backward()
            opt.step()
            row = {"step": step, **bd.as_floats()}
            history.append(row)
            if log_every and step % log_every == 0:
                log.info("step %d total %.4f", step, row["total"])
    eval_final = evaluate_loss(model, dataset, config)
    return Checkpoint(model=model, config=config, step=config.steps, history=history,
                      eval_loss={"initial": eval_initial, "final": eval_final})


def train_baseline(config: TrainConfig, dataset=None, log_every: int = 0) -> Checkpoint:
    if config.mode == "COMPASS":
        raise ValueError("train_baseline expects a baseline mode, not COMPASS")
    return pretrain(config, dataset, log_every)


def check_graph_structure(graph: GraphSpec) -> None:
    """Structural invariants of each mode; raises AssertionError-like ValueError."""
    n, l = len(graph.spatial), len(graph.temporal)
    N = n + l
    if graph.mode is Mode.COMPASS:
        ok = len(graph.edges) == 2 * n + l and set(graph.heads) <= {"F_s", "F_m"}
    elif graph.mode is Mode.DISJOINT:
        ok = len(graph.spaces) == N * (N - 1) // 2
    elif graph.mode is Mode.JOINT:
        ok = len(graph.edges) == N and len(graph.heads) == 1
    elif graph.mode is Mode.CMC:
        ok = len(graph.edges) == N and len(graph.heads) == N
    else:
        ok = len(graph.edges) == N
    if not ok:
        raise ValueError(f"graph for mode {graph.mode.value} violates its structural invariant")


def loss_history_csv(history: list[dict], path=None) -> str:
    if not history:
        text = "step,total\n"
    else:
        cols = list(history[0])
        lines = [",".join(cols)]
        for row in history:
            lines.append(",".join(str(row[c]) if c == "step" else repr(float(row[c])) for c in cols))
        text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


# ----------------------------------------------------------------- finetuning

TASK_MODALITY = {"steering": "rgb", "velocity": "rgb", "odometry": "flow"}
TASK_OUTPUTS = {"steering": 1, "velocity": 4, "odometry": 3}


def task_samples(records: Sequence[SequenceRecord], task: str, window: int = 4, stride: int = 1):
    """``(inputs, targets)`` for a downstream task.

    Odometry pairs each flow window ``[t, t + window)`` with the rigid motion
    from frame ``t`` to ``t + window`` in the frame-``t`` body frame.
    """
    if task not in TASK_MODALITY:
        raise ValueError(f"unknown task {task!r}; expected one of {list(TASK_MODALITY)}")
    xs, ys = [], []
    for r in records:
        T = len(r)
        if task == "odometry":
            ts = np.arange(0, T - window, stride)
            xs.append(np.stack([r.flow[t: t + window] for t in ts]))
            ys.append(np.stack([relative_pose(r.trajectory.poses[t], r.trajectory.poses[t + window]) for t in ts]))
        else:
            ts = np.arange(0, T - 1, stride)
            xs.append(r.rgb[ts])
            cols = slice(0, 1) if task == "steering" else slice(1, 5)
            ys.append(r.labels[ts, cols].astype(np.float64))
    if not xs:
        raise ValueError("no records to draw samples from")
    return np.concatenate(xs), np.concatenate(ys)


class TaskHead(nn.Module):
    """Two-layer regression head with target standardisation."""

    def __init__(self, task: str, d: int, hidden: int = 64):
        super().__init__()
        if task not in TASK_OUTPUTS:
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.modality = TASK_MODALITY[task]
        self.net = nn.Sequential(nn.Linear(d, hidden), nn.SiLU(), nn.Linear(hidden, TASK_OUTPUTS[task]))
        self.register_buffer("mean", torch.zeros(TASK_OUTPUTS[task]))
        self.register_buffer("std", torch.ones(TASK_OUTPUTS[task]))

    def raw(self, z):
        return self.net(z)

    def forward(self, z):
        out = self.net(z)
        if self.task == "steering":
            return torch.sigmoid(out)
        return out * self.std + self.mean


class FinetunedModel(nn.Module):
    def __init__(self, backbone: CompassModel, head: TaskHead):
        super().__init__()
        self.backbone = backbone
        self.head = head

    @property
    def task(self) -> str:
        return self.head.task

    def forward(self, x):
        return self.head(self.backbone.encode(self.head.modality, x))

    def predict(self, inputs, batch_size: int = 256) -> np.ndarray:
        self.eval()
        outs = []
        with torch.no_grad():
            for i in range(0, len(inputs), batch_size):
                outs.append(self(inputs[i: i + batch_size]).double().numpy())
        return np.concatenate(outs)


def fraction_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    if not 0 < fraction <= 1:
        raise ValueError(f"data fraction must be in (0, 1], got {fraction}")
    k = math.ceil(round(fraction * n, 9))
    return np.sort(np.random.default_rng([seed, 31]).permutation(n)[:k])


def finetune(checkpoint: Checkpoint, task: str, records: Sequence[SequenceRecord], fraction: float = 1.0,
             freeze_encoder: bool = False, seed: int = 0, steps: int = 600, batch_size: int = 64,
             lr: float = 1e-3, hidden: int = 64, encoder_lr: float | None = None):
    """Train a task head (and the task's encoder unless frozen) on a data fraction.

    Returns ``(head, model)`` where ``model`` wraps a copy of the backbone.
    ``encoder_lr`` overrides the step size of the unfrozen encoder.
    """
    if task not in TASK_MODALITY:
        raise ValueError(f"unknown task {task!r}; expected one of {list(TASK_MODALITY)}")
    modality = TASK_MODALITY[task]
    if modality not in checkpoint.model.encoders:
        raise ValueError(f"checkpoint has no {modality!r} encoder required by task {task!r}")
    subset = fraction_subset(len(records), fraction, seed)
    window = checkpoint.model.graph.modality(modality).window
    x, y = task_samples([records[i] for i in subset], task, window=window)

    backbone = copy.deepcopy(checkpoint.model)
    dtype = backbone.dtype
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = TaskHead(task, backbone.d, hidden).to(dtype)
    yt = torch.as_tensor(y, dtype=dtype)
    if task != "steering":
        head.mean.copy_(yt.mean(0))
        head.std.copy_(yt.std(0).clamp_min(1e-6))
    model = FinetunedModel(backbone, head)
    encoder = backbone.encoders[modality]
    for p in backbone.parameters():
        p.requires_grad_(False)
    if not freeze_encoder:
        for p in encoder.parameters():
            p.requires_grad_(True)
    groups = [{"params": list(head.parameters()), "lr": lr}]
    if not freeze_encoder:
        groups.append({"params": list(encoder.parameters()), "lr": lr if encoder_lr is None else encoder_lr})
    opt = torch.optim.AdamW(groups, lr=lr, weight_decay=0.0)
    rng = np.random.default_rng([seed, 17])
    n = len(x)
    for _ in range(steps):
        idx = rng.integers(n, size=min(batch_size, n))
        z = backbone.encode(modality, x[idx])
        if task == "steering":
            loss = (head(z) - yt[idx]).abs().mean()
        else:
            loss = ((head.raw(z) - (yt[idx] - head.mean) / head.std) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return head, model


# ----------------------------------------------------------------- checkpoint io

def _param_file(name: str) -> str:
    return name.replace(".", "__") + ".bin"


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    root = Path(path)
    (root / "params").mkdir(parents=True, exist_ok=True)
    model = ckpt.model
    entries = {}
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        entries[name] = _rawio.write_array(root / "params" / _param_file(name), arr)
        entries[name]["file"] = "params/" + entries[name]["file"]
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "graph": model.graph.to_dict(),
        "config": ckpt.config.to_dict(),
        "model": {"d": model.d, "crop": model.crop, "normalize": model.normalize,
                  "width": model.encoders[model.graph.names[0]].conv[0].out_channels,
                  "precision": 64 if model.dtype == torch.float64 else 32},
        "step": ckpt.step,
        "history": ckpt.history,
        "eval_loss": ckpt.eval_loss,
        "params": entries,
    }
    _rawio.write_json(root / "manifest.json", manifest)
    return root


def load_checkpoint(path, graph: GraphSpec | None = None) -> Checkpoint:
    root = Path(path)
    m = _rawio.read_json(root / "manifest.json")
    try:
        if m["format"] != CHECKPOINT_FORMAT:
            raise FormatError(f"{root / 'manifest.json'}: unsupported format {m['format']!r}")
        stored_graph = GraphSpec.from_dict(m["graph"])
        cfg = TrainConfig.from_dict(m["config"])
        spec = m["model"]
        entries = m["params"]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{root / 'manifest.json'}: {exc}") from exc
    target_graph = graph or stored_graph
    model = init_params(target_graph, d=spec["d"], seed=0, precision=spec["precision"], crop=spec["crop"],
                        normalize=spec["normalize"], width=spec["width"])
    state = model.state_dict()
    missing = [k for k in state if k not in entries]
    if missing:
        raise ShapeError(f"checkpoint lacks component {missing[0]!r} required by the target graph")
    for name, entry in entries.items():
        if name not in state:
            raise ShapeError(f"checkpoint component {name!r} has no counterpart in the target graph")
        if list(entry["shape"]) != list(state[name].shape):
            raise ShapeError(f"component {name!r}: checkpoint shape {tuple(entry['shape'])} vs model {tuple(state[name].shape)}")
        _rawio.check_entry(root, {**entry, "file": entry["file"]})
    loaded = {}
    for name, entry in entries.items():
        sub = root / Path(entry["file"]).parent
        arr = _rawio.read_array(sub, {**entry, "file": Path(entry["file"]).name})
        loaded[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(loaded)
    return Checkpoint(model=model, config=cfg, step=int(m["step"]), history=list(m["history"]),
                      eval_loss=dict(m.get("eval_loss", {})))


def parameter_bytes(model: nn.Module, prefix: str = "") -> dict[str, bytes]:
    return {k: v.detach().cpu().numpy().tobytes() for k, v in model.state_dict().items() if k.startswith(prefix)}


def save_finetuned(model: FinetunedModel, config: TrainConfig, path) -> Path:
    """Backbone as a regular checkpoint plus ``head/`` with the task head."""
    root = save_checkpoint(Checkpoint(model=model.backbone, config=config), path)
    head = model.head
    entries = {}
    (root / "head").mkdir(exist_ok=True)
    for name, tensor in head.state_dict().items():
        entries[name] = _rawio.write_array(root / "head" / _param_file(name), tensor.detach().cpu().numpy())
    _rawio.write_json(root / "head" / "head.json", {
        "task": head.task, "hidden": head.net[0].out_features, "params": entries,
    })
    return root


def load_finetuned(path) -> FinetunedModel:
    root = Path(path)
    ckpt = load_checkpoint(root)
    meta = _rawio.read_json(root / "head" / "head.json")
    head = TaskHead(meta["task"], ckpt.model.d, meta["hidden"]).to(ckpt.model.dtype)
    state = head.state_dict()
    for name, entry in meta["params"].items():
        if name not in state or list(entry["shape"]) != list(state[name].shape):
            raise ShapeError(f"task head component {name!r} does not match a {meta['task']} head")
        state[name] = torch.from_numpy(_rawio.read_array(root / "head", entry).copy())
    head.load_state_dict(state)
    model = FinetunedModel(ckpt.model, head)
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()
