"""Per-modality encoders and the shared projection, aggregation and prediction heads."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import NumericError, ShapeError
from .graph import SPATIAL, GraphSpec, ModalitySpec

PRECISIONS = {"float32": torch.float32, "float64": torch.float64, 32: torch.float32, 64: torch.float64}

# fixed (offset, scale) per modality so every input reaches the first layer centred and O(1)
INPUT_AFFINE = {"rgb": (0.5, 4.0), "depth": (3.0, 0.5), "flow": (0.0, 0.5)}


class SpatialEncoder(nn.Module):
    """Three strided 3x3 convolutions (group-normalised), flatten, affine to ``d``."""

    def __init__(self, channels: int, crop: int, d: int, width: int = 16):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(channels, width, 3, stride=2, padding=1), nn.GroupNorm(4, width), nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.GroupNorm(4, 2 * width), nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.GroupNorm(4, 2 * width), nn.SiLU(),
        )
        side = crop
        for _ in range(3):
            side = (side + 1) // 2
        self.fc = nn.Linear(2 * width * side * side, d)

    def forward(self, x: Tensor) -> Tensor:
        # x: (N, C, H, W)
        return self.fc(self.conv(x).flatten(1))


class TemporalEncoder(nn.Module):
    """Two spatio-temporal convolutions over a window, pool, affine to ``d``."""

    def __init__(self, channels: int, window: int, crop: int, d: int, width: int = 16):
        super().__init__()
        kt = 2 if window >= 3 else 1
        self.conv = nn.Sequential(
            nn.Conv3d(channels, width, (kt, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)), nn.GroupNorm(4, width), nn.SiLU(),
            nn.Conv3d(width, 2 * width, (kt, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)), nn.GroupNorm(4, 2 * width), nn.SiLU(),
            nn.AvgPool3d((1, 2, 2)),
        )
        t_out = window - 2 * (kt - 1)
        side = (((crop + 1) // 2 + 1) // 2) // 2
        self.fc = nn.Linear(2 * width * t_out * side * side, d)

    def forward(self, x: Tensor) -> Tensor:
        # x: (N, C, T, H, W)
        return self.fc(self.conv(x).flatten(1))


class Aggregator(nn.Module):
    """Bidirectional GRU over a sequence of codes; final states mixed back to ``d``."""

    def __init__(self, d: int):
        super().__init__()
        self.gru = nn.GRU(d, d, batch_first=True, bidirectional=True)
        self.out = nn.Linear(2 * d, d)

    def forward(self, seq: Tensor) -> Tensor:
        # seq: (N, L, d)
        _, h = self.gru(seq)
        return self.out(torch.cat([h[0], h[1]], dim=-1))


class Predictor(nn.Module):
    def __init__(self, d: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 2 * d
        self.net = nn.Sequential(nn.Linear(d, hidden), nn.SiLU(), nn.Linear(hidden, d))

    def forward(self, z: Tensor) -> Tensor:
        return self.net(z)


class CompassModel(nn.Module):
    """All trainable parts for one graph.

    Encoders are per modality; projection heads are keyed by the head names the
    graph assigns, so every edge that names ``F_m`` goes through the very same
    module. ``G`` and ``P`` exist once.
    """

    def __init__(self, graph: GraphSpec, d: int = 32, crop: int = 32, normalize: bool = True, width: int = 16):
        super().__init__()
        if d < 2:
            raise ValueError(f"latent width d must be >= 2, got {d}")
        self.graph = graph
        self.d = d
        self.crop = crop
        self.normalize = normalize
        self.encoders = nn.ModuleDict()
        for m in graph.modalities:
            if m.kind == SPATIAL:
                self.encoders[m.name] = SpatialEncoder(m.channels, crop, d, width)
            else:
                self.encoders[m.name] = TemporalEncoder(m.channels, m.window, crop, d, width)
        self.heads = nn.ModuleDict({h: nn.Linear(d, d) for h in graph.heads})
        self.G = Aggregator(d)
        self.P = Predictor(d)
        for head in self.heads.values():
            nn.init.zeros_(head.bias)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {}
        for name, p in self.named_parameters():
            parts = name.split(".")
            key = ".".join(parts[:2]) if parts[0] in ("encoders", "heads") else parts[0]
            groups.setdefault(key, []).append((name, p))
        return groups

    # ------------------------------------------------------------ encoding
    def expected_shape(self, spec: ModalitySpec) -> tuple:
        S = self.crop
        if spec.kind == SPATIAL:
            return (S, S, spec.channels)
        return (spec.window, S, S, spec.channels)

    def as_input(self, modality: str, x) -> Tensor:
        """Channels-last sample(s) -> channels-first tensor on the model's dtype."""
        spec = self.graph.modality(modality)
        x = torch.as_tensor(np.asarray(x) if not isinstance(x, Tensor) else x).to(self.dtype)
        want = self.expected_shape(spec)
        if spec.channels == 1 and x.shape[-1] != 1 and tuple(x.shape[-len(want) + 1:]) == want[:-1]:
            x = x.unsqueeze(-1)
        if tuple(x.shape[-len(want):]) != want or x.ndim not in (len(want), len(want) + 1):
            raise ShapeError(f"{modality}: expected sample shape {want} (optionally batched), got {tuple(x.shape)}")
        if x.ndim == len(want):
            x = x.unsqueeze(0)
        offset, scale = INPUT_AFFINE.get(modality, (0.0, 1.0))
        x = (x - offset) * scale
        if spec.kind == SPATIAL:
            return x.permute(0, 3, 1, 2)
        return x.permute(0, 4, 1, 2, 3)

    def encode(self, modality: str, x) -> Tensor:
        """Latent codes ``(N, d)`` for channels-last samples of ``modality``."""
        if modality not in self.encoders:
            raise ValueError(f"model has no encoder for modality {modality!r}")
        return self.encoders[modality](self.as_input(modality, x))

    # ------------------------------------------------------------ heads
    def project(self, head: str, z: Tensor, normalize: bool | None = None) -> Tensor:
        if not torch.isfinite(z).all():
            raise NumericError(f"non-finite code passed to projection head {head}")
        out = self.heads[head](z)
        if self.normalize if normalize is None else normalize:
            out = F.normalize(out, dim=-1, eps=1e-12)
        return out

    def project_state(self, z: Tensor, normalize: bool | None = None) -> Tensor:
        return self.project("F_s", z, normalize)

    def project_motion(self, z: Tensor, normalize: bool | None = None) -> Tensor:
        return self.project("F_m", z, normalize)

    def aggregate(self, seq: Tensor) -> Tensor:
        """Context ``(N, d)`` from codes ``(N, L, d)`` or ``(L, d)``."""
        if seq.ndim == 2:
            seq = seq.unsqueeze(0)
        if seq.shape[-2] < 1:
            raise ValueError("cannot aggregate an empty sequence")
        return self.G(seq)

    def predict_future(self, code: Tensor, k: int) -> Tensor:
        """``k`` recursive predictions ``(..., k, d)``: P(code), P(P(code)), ..."""
        if k < 1:
            raise ValueError(f"prediction horizon k must be >= 1, got {k}")
        out = []
        z = code
        for _ in range(k):
            z = self.P(z)
            out.append(z)
        return torch.stack(out, dim=-2)


def init_params(graph: GraphSpec, d: int = 32, seed: int = 0, precision=32, crop: int = 32,
                normalize: bool = True, width: int = 16) -> CompassModel:
    """Deterministic initialisation (torch defaults, zero projection biases)."""
    if d < 2:
        raise ValueError(f"latent width d must be >= 2, got {d}")
    try:
        dtype = PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"precision must be 32 or 64, got {precision!r}") from None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = CompassModel(graph, d=d, crop=crop, normalize=normalize, width=width)
    return model.to(dtype)


def encode(model: CompassModel, modality: str, x) -> Tensor:
    return model.encode(modality, x)


def project_state(model: CompassModel, z: Tensor, normalize: bool | None = None) -> Tensor:
    return model.project_state(z, normalize)


def project_motion(model: CompassModel, z: Tensor, normalize: bool | None = None) -> Tensor:
    return model.project_motion(z, normalize)


def aggregate(model: CompassModel, seq: Tensor) -> Tensor:
    return model.aggregate(seq)


def predict_future(model: CompassModel, code: Tensor, k: int) -> Tensor:
    return model.predict_future(code, k)
