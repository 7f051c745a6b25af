"""Contrastive objectives over the multimodal graph.

Every loss here is an InfoNCE mean over the terms listed in a
:class:`~compass.graph.ConnectionBatch`. Scores are dot products of
(optionally L2-normalised) codes divided by a temperature; with
``normalize=False, temperature=1`` the raw-dot-product form is reproduced
exactly.

Codes arrive pre-encoded in a :class:`WindowCodes`; the projection,
aggregation and prediction heads are applied here so the losses see the same
shared modules the graph names.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .errors import NumericError
from .graph import MOTION_SPACE, STATE_SPACE, TEMPORAL, ConnectionBatch

COMPONENT_ORDER = ("L_m", "L_s", "L_sm")
KIND_COMPONENT = {"temporal": "L_m", "spatial": "L_s", "spatiotemporal": "L_sm", "predictive": "L_cpc", "instance": "L_inst"}


@dataclass(frozen=True)
class SimilarityConfig:
    normalize: bool = False
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


LITERAL = SimilarityConfig(normalize=False, temperature=1.0)
TRAINING = SimilarityConfig(normalize=True, temperature=0.1)


@dataclass
class WindowCodes:
    """Encoder outputs for one window.

    ``slot[m]`` is ``(n_slots, d)``: one code per time slot (a frame for spatial
    modalities, a window for temporal ones). ``context[m]`` is ``(n_slots, L, d)``:
    the per-frame codes each spatial slot's aggregation runs over.
    """

    slot: dict
    context: dict = field(default_factory=dict)


def softplus(x: Tensor) -> Tensor:
    return torch.clamp(x, min=0) + torch.log1p(torch.exp(-torch.abs(x)))


def scores(anchor: Tensor, others: Tensor, simcfg: SimilarityConfig) -> Tensor:
    """``anchor (..., d)`` against ``others (..., M, d)`` -> ``(..., M)``."""
    if simcfg.normalize:
        anchor = torch.nn.functional.normalize(anchor, dim=-1, eps=1e-12)
        others = torch.nn.functional.normalize(others, dim=-1, eps=1e-12)
    return (anchor.unsqueeze(-2) * others).sum(-1) / simcfg.temperature


def info_nce(anchors: Tensor, positives: Tensor, negatives: Tensor, simcfg: SimilarityConfig):
    """Per-term losses ``(n,)`` plus positive scores and log-partitions.

    ``-log(e^{s+} / (e^{s+} + sum e^{s-}))`` is evaluated as
    ``softplus(logsumexp(s- - s+))``, which stays accurate when the positive
    dominates and never overflows.
    """
    s_pos = scores(anchors, positives.unsqueeze(-2), simcfg)[..., 0]
    s_neg = scores(anchors, negatives, simcfg)
    loss = softplus(torch.logsumexp(s_neg - s_pos.unsqueeze(-1), dim=-1))
    return loss, s_pos, s_pos + loss


def info_nce_term(anchor, positive, negatives, simcfg: SimilarityConfig = LITERAL) -> float:
    a = torch.as_tensor(np.asarray(anchor, dtype=np.float64))
    p = torch.as_tensor(np.asarray(positive, dtype=np.float64))
    n = torch.as_tensor(np.asarray(negatives, dtype=np.float64))
    if n.ndim == 1:
        n = n.unsqueeze(0)
    if n.shape[0] == 0 or n.numel() == 0:
        raise ValueError("info_nce_term needs at least one negative")
    if not (a.shape == p.shape == n.shape[1:]):
        raise ValueError(f"width mismatch: anchor {tuple(a.shape)}, positive {tuple(p.shape)}, negatives {tuple(n.shape)}")
    if not (torch.isfinite(a).all() and torch.isfinite(p).all() and torch.isfinite(n).all()):
        raise NumericError("non-finite input to info_nce_term")
    loss, _, _ = info_nce(a[None], p[None], n[None], simcfg)
    return float(loss[0])


# ----------------------------------------------------------------- term tables

@dataclass
class TermTable:
    rows: list = field(default_factory=list)

    COLUMNS = ("component", "anchor", "anchor_time", "step", "modality", "time", "positive_score", "log_partition", "loss")

    def extend(self, component: str, batch: ConnectionBatch, s_pos: Tensor, log_z: Tensor, loss: Tensor) -> None:
        for term, sp, lz, ls in zip(batch.terms, s_pos.detach().tolist(), log_z.detach().tolist(), loss.detach().tolist()):
            self.rows.append((component, term.anchor, term.anchor_time, term.step, term.modality, term.time, sp, lz, ls))

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([*r[:6], *(repr(float(v)) for v in r[6:])])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


# ----------------------------------------------------------------- term gather

def _evaluate_terms(batch: ConnectionBatch, anchor_vecs: dict, targets: dict, simcfg: SimilarityConfig):
    """Vectorised InfoNCE over ``batch.terms`` in their listed order.

    ``anchor_vecs[a]`` is ``(n_slots, d)`` for instance terms or
    ``(n_slots, k, d)`` for predictive ones; ``targets[i]`` is ``(n_slots, d)``.
    """
    groups = defaultdict(list)
    for n, term in enumerate(batch.terms):
        groups[(term.anchor, term.modality)].append(n)
    A, Pp, Nn, order = [], [], [], []
    for (a, i), idx in groups.items():
        ts = [batch.terms[n] for n in idx]
        at = torch.tensor([t.anchor_time for t in ts])
        if batch.horizon:
            st = torch.tensor([t.step - 1 for t in ts])
            A.append(anchor_vecs[a][at, st])
        else:
            A.append(anchor_vecs[a][at])
        Pp.append(targets[i][torch.tensor([t.time for t in ts])])
        Nn.append(targets[i][torch.tensor([t.negatives for t in ts])])
        order += idx
    loss, s_pos, log_z = info_nce(torch.cat(A), torch.cat(Pp), torch.cat(Nn), simcfg)
    inv = torch.empty(len(order), dtype=torch.long)
    inv[torch.tensor(order)] = torch.arange(len(order))
    loss, s_pos, log_z = loss[inv], s_pos[inv], log_z[inv]
    bad = ~torch.isfinite(loss)
    if bad.any():
        t = batch.terms[int(bad.nonzero()[0, 0])]
        raise NumericError(f"non-finite {batch.kind} term at t={t.time}, i={t.modality}, a={t.anchor}")
    return loss, s_pos, log_z


def _predictions(model, base: Tensor, batch: ConnectionBatch) -> Tensor:
    # every slot gets predictions; terms only read the anchor slots
    return model.predict_future(base, batch.horizon)


def _motion_code(model, codes: WindowCodes, name: str) -> Tensor:
    """Code of ``name`` in the motion space: temporal modalities project their
    window code, spatial ones aggregate their frame codes first."""
    if model.graph.modality(name).kind == TEMPORAL:
        return model.project("F_m", codes.slot[name])
    return model.project("F_m", model.aggregate(codes.context[name]))


def _finish(component, batch, result, table):
    loss, s_pos, log_z = result
    if table is not None:
        table.extend(component, batch, s_pos, log_z, loss)
    return loss.mean()


def loss_temporal(codes: WindowCodes, batch: ConnectionBatch, model, simcfg: SimilarityConfig, table: TermTable | None = None) -> Tensor:
    if batch.kind != "temporal":
        raise ValueError(f"loss_temporal needs a temporal batch, got {batch.kind!r}")
    targets = {i: model.project("F_m", codes.slot[i]) for i in batch.targets}
    anchors = {a: _predictions(model, targets[a], batch) for a in batch.anchors}
    return _finish("L_m", batch, _evaluate_terms(batch, anchors, targets, simcfg), table)


def loss_spatial(codes: WindowCodes, batch: ConnectionBatch, model, simcfg: SimilarityConfig, table: TermTable | None = None) -> Tensor:
    if batch.kind != "spatial":
        raise ValueError(f"loss_spatial needs a spatial batch, got {batch.kind!r}")
    if len(batch.targets) < 2:
        raise ValueError("spatial loss needs at least two spatial modalities")
    z = {m: model.project(model.graph.head_for(m, STATE_SPACE), codes.slot[m]) for m in batch.targets}
    return _finish("L_s", batch, _evaluate_terms(batch, z, z, simcfg), table)


def loss_spatiotemporal(codes: WindowCodes, batch: ConnectionBatch, model, simcfg: SimilarityConfig, table: TermTable | None = None) -> Tensor:
    if batch.kind != "spatiotemporal":
        raise ValueError(f"loss_spatiotemporal needs a spatio-temporal batch, got {batch.kind!r}")
    for a in batch.anchors:
        if codes.context[a].shape[-2] < 1:
            raise ValueError("spatio-temporal window must hold at least one frame")
    targets = {i: _motion_code(model, codes, i) for i in batch.targets}
    anchors = {a: _predictions(model, targets[a], batch) for a in batch.anchors}
    return _finish("L_sm", batch, _evaluate_terms(batch, anchors, targets, simcfg), table)


def loss_predictive(codes: WindowCodes, batch: ConnectionBatch, model, simcfg: SimilarityConfig, table: TermTable | None = None) -> Tensor:
    """Per-modality future prediction with only the modality's own positives."""
    if batch.kind != "predictive":
        raise ValueError(f"loss_predictive needs a predictive batch, got {batch.kind!r}")
    targets = {i: _motion_code(model, codes, i) for i in batch.targets}
    anchors = {a: _predictions(model, targets[a], batch) for a in batch.anchors}
    return _finish("L_cpc", batch, _evaluate_terms(batch, anchors, targets, simcfg), table)


def loss_instance(codes: WindowCodes, batch: ConnectionBatch, model, simcfg: SimilarityConfig, table: TermTable | None = None) -> Tensor:
    """Instance-level cross-modal loss; heads chosen per (modality, space) edge."""
    name = component_name(batch)
    z = {m: model.project(model.graph.head_for(m, batch.space), codes.slot[m]) for m in batch.targets}
    return _finish(name, batch, _evaluate_terms(batch, z, z, simcfg), table)


LOSSES = {
    "temporal": loss_temporal,
    "spatial": loss_spatial,
    "spatiotemporal": loss_spatiotemporal,
    "predictive": loss_predictive,
    "instance": loss_instance,
}


def component_name(batch: ConnectionBatch) -> str:
    if batch.kind.startswith("pair:"):
        return f"L_{batch.space}"
    return KIND_COMPONENT[batch.kind]


def _class_of(batch: ConnectionBatch) -> str:
    return batch.kind


@dataclass
class LossBreakdown:
    components: dict
    total: Tensor
    table: TermTable | None = None

    def _get(self, name):
        return self.components.get(name, torch.zeros(()))

    @property
    def L_m(self) -> Tensor:
        return self._get("L_m")

    @property
    def L_s(self) -> Tensor:
        return self._get("L_s")

    @property
    def L_sm(self) -> Tensor:
        return self._get("L_sm")

    def as_floats(self) -> dict:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        out["total"] = float(self.total.detach())
        return out


def _ordered(names):
    head = [n for n in COMPONENT_ORDER if n in names]
    return head + sorted(n for n in names if n not in COMPONENT_ORDER)


def sum_components(components: dict, weights: dict | None = None) -> Tensor:
    """Left-to-right sum in canonical order; zero-weight components are skipped."""
    weights = weights or {}
    total = None
    for name in _ordered(components):
        w = weights.get(name, 1.0)
        if w == 0:
            continue
        term = components[name] if w == 1.0 else w * components[name]
        total = term if total is None else total + term
    if total is None:
        raise ValueError("every loss component is masked")
    return total


def window_components(codes: WindowCodes, batches, model, simcfg: SimilarityConfig, table: TermTable | None = None) -> dict:
    present = {_class_of(b) for b in batches}
    for cls in model.graph.loss_classes():
        if cls not in present:
            raise ValueError(f"missing batch for loss class {cls!r}")
    comps = {}
    for b in batches:
        fn = LOSSES["instance"] if b.kind.startswith("pair:") else LOSSES[b.kind]
        name = component_name(b)
        try:
            comps[name] = fn(codes, b, model, simcfg, table)
        except NumericError as exc:
            exc.component = exc.component or name
            raise
    return comps


def total_loss(codes: WindowCodes, batches, model, simcfg: SimilarityConfig, weights: dict | None = None,
               with_table: bool = True) -> LossBreakdown:
    table = TermTable() if with_table else None
    comps = window_components(codes, batches, model, simcfg, table)
    return LossBreakdown(comps, sum_components(comps, weights), table)


def mean_breakdown(parts: list[dict], weights: dict | None = None) -> LossBreakdown:
    """Average per-window components, then sum them."""
    names = _ordered(parts[0])
    comps = {n: torch.stack([p[n] for p in parts]).mean() for n in names}
    return LossBreakdown(comps, sum_components(comps, weights))


__all__ = [
    "SimilarityConfig", "LITERAL", "TRAINING", "WindowCodes", "info_nce", "info_nce_term",
    "loss_temporal", "loss_spatial", "loss_spatiotemporal", "loss_predictive", "loss_instance",
    "total_loss", "LossBreakdown", "TermTable", "MOTION_SPACE",
]
