"""Session-aware temporal contrastive learning (frequency mask, encoder, sampler, NT-Xent)."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .features import SpectrogramSet
from .training import TrainingDiverged, state_snapshot, torch_seeded

log = logging.getLogger(__name__)

MASK_MODES = ("learnable", "frozen", "none")


class InsufficientSessionsError(ValueError):
    pass


def init_frequency_mask(fr: int) -> np.ndarray:
    """Descending log-scale weights: M[k] = log(fr / (k + 1)) / log(fr), M = [1] for fr = 1."""
    if fr < 1:
        raise ValueError("fr must be >= 1")
    if fr == 1:
        return np.ones(1)
    k = np.arange(fr)
    return np.log(fr / (k + 1)) / np.log(fr)


def apply_mask(mask, x):
    """Scale the trailing (frequency) axis of ``x`` by ``mask``."""
    if mask.shape[-1] != x.shape[-1]:
        raise ValueError(f"mask length {mask.shape[-1]} does not match {x.shape[-1]} frequency bins")
    return x * mask


@dataclass(frozen=True)
class ContrastiveConfig:
    batch_sessions: int = 8
    temperature: float = 0.5
    embedding_dim: int = 64
    conv_channels: tuple[int, ...] = (8, 2)  # narrow last layer: learned maps stay a minority of the backbone
    kernel_size: tuple[int, int] = (3, 3)  # (time, frequency); odd sizes keep the map shape
    projection_hidden: int = 128
    epochs: int = 5  # longer runs fit session identity and shift hidden-cell boundaries
    steps_per_epoch: int | None = None
    learning_rate: float = 1e-3
    mask_mode: str = "learnable"
    keep_input: bool = True  # backbone output = [masked input, conv features] along channels

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "kernel_size", tuple(self.kernel_size))
        if len(self.kernel_size) != 2 or any(k < 1 or k % 2 == 0 for k in self.kernel_size):
            raise ValueError("kernel_size must be two odd positive integers")
        if self.batch_sessions < 2:
            raise ValueError("batch_sessions must be >= 2")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("epochs and learning_rate must be positive")


class SatclEncoder(nn.Module):
    """Frequency mask -> shape-preserving conv stack per modality -> flatten/concat -> projection MLP."""

    def __init__(self, input_shapes: Sequence[tuple[int, int, int]], cfg: ContrastiveConfig = ContrastiveConfig()):
        super().__init__()
        self.cfg = cfg
        self.input_shapes = [tuple(int(v) for v in s) for s in input_shapes]
        if not cfg.keep_input and cfg.conv_channels[-1] <= max(s[0] for s in self.input_shapes):
            raise ValueError("encoder must increase the feature dimension")
        self.masks = nn.ParameterList(
            nn.Parameter(torch.tensor(init_frequency_mask(s[2]), dtype=torch.float32),
                         requires_grad=cfg.mask_mode == "learnable")
            for s in self.input_shapes
        )
        self.backbones = nn.ModuleList()
        for f, t, fr in self.input_shapes:
            layers, c_in = [], f
            for c in cfg.conv_channels:
                k = cfg.kernel_size
                layers += [nn.Conv2d(c_in, c, kernel_size=k, padding=(k[0] // 2, k[1] // 2)), nn.ReLU()]
                c_in = c
            self.backbones.append(nn.Sequential(*layers))
        flat = sum(math.prod(s) for s in self.backbone_shapes)
        self.projection = nn.Sequential(
            nn.Linear(flat, cfg.projection_hidden), nn.ReLU(), nn.Linear(cfg.projection_hidden, cfg.embedding_dim)
        )
        n = len(self.input_shapes)
        self.register_buffer("in_mean", torch.zeros(n))
        self.register_buffer("in_std", torch.ones(n))

    @property
    def backbone_shapes(self) -> list[tuple[int, int, int]]:
        extra = self.cfg.keep_input
        return [(self.cfg.conv_channels[-1] + (f if extra else 0), t, fr) for f, t, fr in self.input_shapes]

    def set_standardization(self, tensors: Sequence[np.ndarray]) -> None:
        for m, t in enumerate(tensors):
            self.in_mean[m] = float(np.mean(t))
            self.in_std[m] = float(np.std(t)) or 1.0

    def backbone(self, xs: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(xs) != len(self.input_shapes):
            raise ValueError(f"expected {len(self.input_shapes)} modalities, got {len(xs)}")
        out = []
        for m, x in enumerate(xs):
            if tuple(x.shape[1:]) != self.input_shapes[m]:
                raise ValueError(f"modality shape {tuple(x.shape[1:])} does not match {self.input_shapes[m]}")
            x = (x - self.in_mean[m]) / self.in_std[m]
            if self.cfg.mask_mode != "none":
                x = apply_mask(self.masks[m], x)
            y = self.backbones[m](x)
            out.append(torch.cat([x, y], dim=1) if self.cfg.keep_input else y)
        return out

    def forward(self, xs):
        feats = self.backbone(xs)
        h = self.projection(torch.cat([f.flatten(1) for f in feats], dim=1))
        return feats, h


def sample_session_batch(session_index: Mapping[str, np.ndarray], batch_sessions: int,
                         rng: np.random.Generator) -> np.ndarray:
    """2B row indices: B distinct sessions, two distinct samples each, pairs adjacent."""
    names = sorted(session_index)
    eligible = [s for s in names if len(session_index[s]) >= 2]
    if len(eligible) < batch_sessions:
        ineligible = [s for s in names if len(session_index[s]) < 2]
        raise InsufficientSessionsError(
            f"need {batch_sessions} sessions with >= 2 samples, have {len(eligible)}; "
            f"ineligible: {ineligible}"
        )
    chosen = rng.choice(len(eligible), size=batch_sessions, replace=False)
    out = np.empty(2 * batch_sessions, dtype=np.int64)
    for k, s in enumerate(chosen):
        rows = session_index[eligible[s]]
        out[2 * k : 2 * k + 2] = rows[rng.choice(len(rows), size=2, replace=False)]
    return out


def _as_tensor(h) -> torch.Tensor:
    if isinstance(h, torch.Tensor):
        return h
    return torch.as_tensor(np.asarray(h, dtype=np.float64))


def _normalized(h: torch.Tensor) -> torch.Tensor:
    norms = h.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    return h / norms


def nt_xent_pair(h, i: int, j: int, tau: float) -> torch.Tensor:
    """-log( exp(sim(h_i, h_j)/tau) / sum_{k != i} exp(sim(h_i, h_k)/tau) ), 0-based indices."""
    h = _normalized(_as_tensor(h))
    sims = h @ h[i] / tau
    others = torch.cat([sims[:i], sims[i + 1 :]])
    return torch.logsumexp(others, dim=0) - sims[j]


def batch_loss(h, tau: float) -> torch.Tensor:
    """Mean NT-Xent over both directions of every adjacent pair (2k, 2k+1)."""
    h = _as_tensor(h)
    n = h.shape[0]
    if n % 2:
        raise ValueError("batch must contain an even number of embeddings")
    if n < 4:
        raise ValueError("need at least two pairs: a single pair has no negatives")
    z = _normalized(h)
    sims = z @ z.T / tau
    eye = torch.eye(n, dtype=torch.bool)
    sims = sims.masked_fill(eye, float("-inf"))
    partner = torch.arange(n) ^ 1
    return (torch.logsumexp(sims, dim=1) - sims[torch.arange(n), partner]).mean()


def build_encoder(input_shapes, cfg: ContrastiveConfig = ContrastiveConfig(), seed: int = 0) -> SatclEncoder:
    with torch_seeded(seed):
        return SatclEncoder(input_shapes, cfg)


def collapse_ratio(h: np.ndarray) -> float:
    """Share of the embedding covariance trace held by the top eigenvalue."""
    h = np.asarray(h, dtype=np.float64)
    cov = np.cov(h, rowvar=False)
    eig = np.linalg.eigvalsh(np.atleast_2d(cov))
    tr = eig.sum()
    return float(eig[-1] / tr) if tr > 0 else 1.0


def train_satcl(specs: SpectrogramSet, cfg: ContrastiveConfig, rng: np.random.Generator, seed: int = 0,
                encoder: SatclEncoder | None = None):
    """Contrastive training on session pairs; returns (encoder, per-batch loss curve)."""
    if encoder is None:
        encoder = build_encoder(specs.shapes, cfg, seed)
    encoder.set_standardization(specs.tensors)
    index = specs.session_index()
    eligible = sum(len(v) >= 2 for v in index.values())
    if eligible < cfg.batch_sessions:
        sample_session_batch(index, cfg.batch_sessions, rng)  # raises with the ineligible list
    steps = cfg.steps_per_epoch or max(1, len(specs) // (2 * cfg.batch_sessions))
    xs_all = [torch.from_numpy(np.ascontiguousarray(t)) for t in specs.tensors]
    opt = torch.optim.Adam([p for p in encoder.parameters() if p.requires_grad], lr=cfg.learning_rate)
    curve = []
    last_good = state_snapshot(encoder)
    encoder.train()
    with torch_seeded(seed + 1):
        for epoch in range(cfg.epochs):
            for _ in range(steps):
                rows = torch.from_numpy(sample_session_batch(index, cfg.batch_sessions, rng))
                _, h = encoder([x[rows] for x in xs_all])
                loss = batch_loss(h, cfg.temperature)
                if not torch.isfinite(loss):
                    encoder.load_state_dict(last_good)
                    raise TrainingDiverged(f"contrastive loss non-finite at epoch {epoch}", last_good, epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                curve.append(loss.item())
            last_good = state_snapshot(encoder)
            ratio = collapse_ratio(h.detach().numpy())
            if ratio > 0.99:
                warnings.warn(f"embedding collapse: top eigenvalue holds {ratio:.1%} of the trace (epoch {epoch})")
            log.debug("satcl epoch %d loss %.4f top-eig share %.3f", epoch, np.mean(curve[-steps:]), ratio)
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    encoder.loss_curve = curve
    return encoder, curve


def encode_features(encoder: SatclEncoder, tensors: Sequence[np.ndarray], batch_size: int = 256):
    """Frozen forward pass: (per-modality backbone maps, projected embeddings) as numpy."""
    encoder.eval()
    n = tensors[0].shape[0]
    feats = [[] for _ in tensors]
    hs = []
    with torch.no_grad():
        for start in range(0, n, batch_size):
            xs = [torch.from_numpy(np.ascontiguousarray(t[start : start + batch_size])) for t in tensors]
            f, h = encoder(xs)
            for m, v in enumerate(f):
                feats[m].append(v.numpy())
            hs.append(h.numpy())
    return [np.concatenate(f) for f in feats], np.concatenate(hs)


def encoder_header(encoder: SatclEncoder) -> dict:
    return {"satcl": asdict(encoder.cfg), "input_shapes": [list(s) for s in encoder.input_shapes]}


def encoder_from_header(header: dict) -> SatclEncoder:
    return SatclEncoder([tuple(s) for s in header["input_shapes"]], ContrastiveConfig(**header["satcl"]))


def parameter_digest(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
