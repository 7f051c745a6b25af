"""Multimodal graph: which modality feeds which latent space, and batch assembly.

A :class:`GraphSpec` lists edges ``(source modality, target space, connection)``
plus the projection head each edge uses. :func:`assemble_batch` turns a graph
into index-only :class:`ConnectionBatch` objects over one time window of one
sequence; the loss module turns those indices into codes.

Time slots: slot ``b`` of a window starts at frame ``start + b * stride``. The
spatial sample of a slot is that frame, the temporal sample is the flow window
``[f, f + window)``, and the spatio-temporal context is frames ``[f, f + context)``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

SPATIAL = "spatial"
TEMPORAL = "temporal"
SPATIO_TEMPORAL = "spatio-temporal"

STATE_SPACE = "O_s"
MOTION_SPACE = "O_m"
JOINT_SPACE = "joint"


class Mode(str, Enum):
    COMPASS = "COMPASS"
    JOINT = "JOINT"
    DISJOINT = "DISJOINT"
    CPC = "CPC"
    CMC = "CMC"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown graph mode {value!r}; expected one of {[m.value for m in cls]}") from None


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    kind: str
    channels: int
    window: int = 1

    def __post_init__(self):
        if self.kind not in (SPATIAL, TEMPORAL):
            raise ValueError(f"modality kind must be {SPATIAL!r} or {TEMPORAL!r}, got {self.kind!r}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.kind == TEMPORAL and self.window < 2:
            raise ValueError(f"temporal modality {self.name!r} needs window >= 2")
        if self.kind == SPATIAL and self.window != 1:
            raise ValueError(f"spatial modality {self.name!r} must have window 1")


def default_modalities(window: int = 4, names: Sequence[str] = ("rgb", "depth", "flow")) -> list[ModalitySpec]:
    known = {
        "rgb": ModalitySpec("rgb", SPATIAL, 3),
        "depth": ModalitySpec("depth", SPATIAL, 1),
        "flow": ModalitySpec("flow", TEMPORAL, 2, window),
    }
    return [known[n] for n in names]


@dataclass(frozen=True)
class Edge:
    source: str
    space: str
    connection: str
    head: str


@dataclass(frozen=True)
class GraphSpec:
    modalities: tuple
    mode: Mode
    edges: tuple

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.modalities]

    @property
    def spatial(self) -> list[str]:
        return [m.name for m in self.modalities if m.kind == SPATIAL]

    @property
    def temporal(self) -> list[str]:
        return [m.name for m in self.modalities if m.kind == TEMPORAL]

    def modality(self, name: str) -> ModalitySpec:
        for m in self.modalities:
            if m.name == name:
                return m
        raise KeyError(name)

    @property
    def spaces(self) -> list[str]:
        return list(dict.fromkeys(e.space for e in self.edges))

    @property
    def heads(self) -> list[str]:
        return list(dict.fromkeys(e.head for e in self.edges))

    def head_for(self, modality: str, space: str) -> str:
        for e in self.edges:
            if e.source == modality and e.space == space:
                return e.head
        raise KeyError(f"no edge from {modality!r} into {space!r}")

    def loss_classes(self) -> list[str]:
        """Batch classes that carry a well-defined contrastive loss for this graph."""
        if self.mode is Mode.COMPASS:
            out = []
            if self.temporal:
                out.append("temporal")
            if len(self.spatial) >= 2:
                out.append("spatial")
            out.append("spatiotemporal")
            return out
        if self.mode is Mode.CPC:
            return ["predictive"]
        if self.mode is Mode.DISJOINT:
            return [f"pair:{s}" for s in self.spaces]
        return ["instance"] if len(self.modalities) >= 2 else []

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "modalities": [asdict(m) for m in self.modalities],
            "edges": [asdict(e) for e in self.edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GraphSpec":
        graph = build_graph([ModalitySpec(**m) for m in d["modalities"]], d["mode"])
        if [asdict(e) for e in graph.edges] != list(d.get("edges", [])):
            raise ValueError("serialized edges do not match the graph rebuilt from its modalities")
        return graph


def pair_space(a: str, b: str) -> str:
    return f"pair({a},{b})"


def build_graph(modalities: Sequence[ModalitySpec], mode) -> GraphSpec:
    mode = Mode.parse(mode)
    mods = tuple(modalities)
    if not mods:
        raise ValueError("graph needs at least one modality")
    names = [m.name for m in mods]
    if len(set(names)) != len(names):
        raise ValueError(f"modality names must be unique, got {names}")
    spatial = [m.name for m in mods if m.kind == SPATIAL]
    temporal = [m.name for m in mods if m.kind == TEMPORAL]
    edges: list[Edge] = []
    if mode is Mode.COMPASS:
        if not spatial:
            raise ValueError("COMPASS mode needs at least one spatial modality")
        edges += [Edge(s, STATE_SPACE, SPATIAL, "F_s") for s in spatial]
        edges += [Edge(t, MOTION_SPACE, TEMPORAL, "F_m") for t in temporal]
        edges += [Edge(s, MOTION_SPACE, SPATIO_TEMPORAL, "F_m") for s in spatial]
    elif mode is Mode.JOINT:
        edges += [Edge(n, JOINT_SPACE, SPATIAL, "F_joint") for n in names]
    elif mode is Mode.CMC:
        edges += [Edge(n, JOINT_SPACE, SPATIAL, f"F_cmc_{n}") for n in names]
    elif mode is Mode.DISJOINT:
        for a, b in itertools.combinations(names, 2):
            space = pair_space(a, b)
            edges += [Edge(a, space, SPATIAL, f"F_{a}_{b}_{a}"), Edge(b, space, SPATIAL, f"F_{a}_{b}_{b}")]
    elif mode is Mode.CPC:
        # one predictive space per modality; shared motion head and predictor as in COMPASS
        for m in mods:
            conn = TEMPORAL if m.kind == TEMPORAL else SPATIO_TEMPORAL
            edges.append(Edge(m.name, f"self({m.name})", conn, "F_m"))
    return GraphSpec(mods, mode, tuple(edges))


# ------------------------------------------------------------------ batches

@dataclass(frozen=True)
class BatchParams:
    """Geometry of one optimisation step's contrastive batch.

    ``windows`` sequence windows of ``span`` slots each are stacked; slot ids
    run ``0 .. windows * span - 1``. ``negative_pool="batch"`` lets negatives
    come from any other slot of the stack, ``"window"`` restricts them to the
    anchor's own window.
    """

    span: int = 8
    horizon: int = 3
    negatives: int = 7
    window: int = 4
    stride: int = 4
    context: int = 4
    windows: int = 1
    negative_pool: str = "batch"
    anchor_policy: str = "round_robin"
    step: int = 0

    def __post_init__(self):
        if self.negatives < 1:
            raise ValueError(f"negatives per anchor K must be >= 1, got {self.negatives}")
        if self.horizon < 1:
            raise ValueError(f"prediction horizon k must be >= 1, got {self.horizon}")
        if self.span < 2 or self.stride < 1 or self.context < 1 or self.window < 1 or self.windows < 1:
            raise ValueError("span >= 2, stride >= 1, context >= 1, window >= 1 and windows >= 1 required")
        if self.anchor_policy not in ("round_robin", "all"):
            raise ValueError(f"unknown anchor policy {self.anchor_policy!r}")
        if self.negative_pool not in ("batch", "window"):
            raise ValueError(f"unknown negative pool {self.negative_pool!r}")

    @property
    def pool_size(self) -> int:
        return self.span * (self.windows if self.negative_pool == "batch" else 1)

    def required_length(self) -> int:
        """Frames a sequence needs so every slot's samples exist."""
        last = (self.span - 1) * self.stride
        return last + max(self.window + 1, self.context)


@dataclass(frozen=True)
class Term:
    """One contrastive term: anchor sample vs. one positive and its negatives.

    Times are slot ids in the stacked batch. ``step`` is the prediction
    offset (0 for instance-level terms).
    """

    anchor: str
    anchor_time: int
    step: int
    modality: str
    time: int
    negatives: tuple


@dataclass(frozen=True)
class ConnectionBatch:
    kind: str
    space: str
    anchors: tuple
    targets: tuple
    windows: tuple  # (sequence index, start frame) per window
    span: int
    horizon: int
    stride: int
    window: int
    context: int
    terms: tuple = field(repr=False)

    @property
    def n_slots(self) -> int:
        return self.span * len(self.windows)

    def positive_pairs(self, anchor: str | None = None, anchor_time: int | None = None) -> list[tuple]:
        return [
            (t.time, t.modality)
            for t in self.terms
            if (anchor is None or t.anchor == anchor) and (anchor_time is None or t.anchor_time == anchor_time)
        ]

    def frame_of(self, slot: int) -> tuple[int, int]:
        """``(sequence, frame)`` of a slot id."""
        seq, start = self.windows[slot // self.span]
        return seq, start + (slot % self.span) * self.stride


def seed_key(seed) -> tuple:
    """Flatten nested int/tuple seeds into one tuple usable by ``default_rng``."""
    if isinstance(seed, (tuple, list)):
        return tuple(x for part in seed for x in seed_key(part))
    return (int(seed),)


def sample_negatives(span, anchor_time: int, K: int, seed, modality: str = "") -> list[tuple[int, str]]:
    """``K`` distinct ``(time, modality)`` slots with time != ``anchor_time``.

    ``span`` is a slot count (times ``0 .. span-1``) or an explicit iterable of times.
    """
    times = range(span) if isinstance(span, int) else span
    candidates = [int(j) for j in times if j != anchor_time]
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if len(candidates) < K:
        raise ValueError(f"only {len(candidates)} eligible negative times, need K={K}")
    if len(candidates) == K:
        chosen = candidates
    else:
        rng = np.random.default_rng(seed_key(seed))
        chosen = sorted(int(j) for j in rng.choice(candidates, size=K, replace=False))
    return [(j, modality) for j in chosen]


def _choose_anchor(eligible: list[str], params: BatchParams) -> tuple:
    if params.anchor_policy == "all":
        return tuple(eligible)
    return (eligible[params.step % len(eligible)],)


def _pool(params: BatchParams, slot: int):
    if params.negative_pool == "batch":
        return params.span * params.windows
    w = slot // params.span
    return range(w * params.span, (w + 1) * params.span)


def _predictive_terms(anchors, targets_for, params: BatchParams, seed_base) -> list[Term]:
    B, k, K = params.span, params.horizon, params.negatives
    terms = []
    for a in anchors:
        for w in range(params.windows):
            for t in range(w * B, w * B + B - k):
                for j in range(1, k + 1):
                    for i in targets_for(a):
                        seed = (*seed_base, len(terms))
                        negs = tuple(n for n, _ in sample_negatives(_pool(params, t + j), t + j, K, seed))
                        terms.append(Term(a, t, j, i, t + j, negs))
    return terms


def _instance_terms(pairs, params: BatchParams, seed_base) -> list[Term]:
    K = params.negatives
    terms = []
    for a, i in pairs:
        for t in range(params.span * params.windows):
            negs = tuple(n for n, _ in sample_negatives(_pool(params, t), t, K, (*seed_base, len(terms))))
            terms.append(Term(a, t, 0, i, t, negs))
    return terms


def assemble_batch(dataset, graph: GraphSpec, params: BatchParams, seed, sequences: Sequence[int] | None = None) -> list[ConnectionBatch]:
    """Index-only batches, one per loss class of ``graph``.

    ``params.windows`` windows are drawn from ``seed`` (sequence and start
    frame each) unless ``sequences`` pins the sequence of each window.
    ``dataset`` only needs ``len`` on its items.
    """
    if params.span - params.horizon < 1:
        raise ValueError(f"span {params.span} leaves no anchor slot for horizon {params.horizon}")
    if params.pool_size - 1 < params.negatives:
        raise ValueError(f"negative pool of {params.pool_size} slots has only {params.pool_size - 1} "
                         f"other times, K={params.negatives}")
    need = params.required_length()
    lengths = [len(r) for r in dataset]
    if not lengths:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed_key(seed))
    windows = []
    for w in range(params.windows):
        seq = int(rng.integers(len(lengths))) if sequences is None else int(sequences[w])
        if lengths[seq] < need:
            raise ValueError(f"sequence {seq} has {lengths[seq]} frames; span/horizon/window require at least {need}")
        windows.append((seq, int(rng.integers(lengths[seq] - need + 1))))
    common = dict(windows=tuple(windows), span=params.span, stride=params.stride,
                  window=params.window, context=params.context)
    spatial, temporal = graph.spatial, graph.temporal
    o_m_members = tuple(temporal + spatial)
    batches = []
    for cls in graph.loss_classes():
        base = (seed, len(batches))
        if cls == "temporal":
            anchors = _choose_anchor(temporal, params)
            terms = _predictive_terms(anchors, lambda a: temporal, params, base)
            batches.append(ConnectionBatch("temporal", MOTION_SPACE, anchors, tuple(temporal), horizon=params.horizon, terms=tuple(terms), **common))
        elif cls == "spatial":
            anchors = _choose_anchor(spatial, params)
            pairs = [(a, i) for a in anchors for i in spatial if i != a]
            terms = _instance_terms(pairs, params, base)
            batches.append(ConnectionBatch("spatial", STATE_SPACE, anchors, tuple(spatial), horizon=0, terms=tuple(terms), **common))
        elif cls == "spatiotemporal":
            anchors = _choose_anchor(spatial, params)
            terms = _predictive_terms(anchors, lambda a: o_m_members, params, base)
            batches.append(ConnectionBatch("spatiotemporal", MOTION_SPACE, anchors, o_m_members, horizon=params.horizon, terms=tuple(terms), **common))
        elif cls == "predictive":
            names = tuple(graph.names)
            terms = _predictive_terms(names, lambda a: (a,), params, base)
            batches.append(ConnectionBatch("predictive", MOTION_SPACE, names, names, horizon=params.horizon, terms=tuple(terms), **common))
        elif cls == "instance":
            names = graph.names
            pairs = [(a, i) for a in names for i in names if i != a]
            terms = _instance_terms(pairs, params, base)
            batches.append(ConnectionBatch("instance", JOINT_SPACE, tuple(names), tuple(names), horizon=0, terms=tuple(terms), **common))
        elif cls.startswith("pair:"):
            space = cls[len("pair:"):]
            a, b = [e.source for e in graph.edges if e.space == space]
            terms = _instance_terms([(a, b), (b, a)], params, base)
            batches.append(ConnectionBatch(cls, space, (a, b), (a, b), horizon=0, terms=tuple(terms), **common))
    return batches


def with_step(params: BatchParams, step: int) -> BatchParams:
    return replace(params, step=step)
