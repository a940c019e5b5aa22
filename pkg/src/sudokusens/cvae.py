"""Conditional VAE over multimodal spectrograms, used to synthesize unseen Sudoku cells."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .datamodel import AttributeSchema, SudokuMatrix
from .features import SpectrogramSet
from .training import OptimizerConfig, TrainingDiverged, minibatches, state_snapshot, torch_seeded

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6


def embed_condition(condition: Sequence[str], schema: AttributeSchema) -> np.ndarray:
    """Concatenated one-hot blocks, one per attribute, in schema order."""
    condition = schema.validate(condition)
    blocks = []
    for (name, values), v in zip(schema.attributes, condition):
        b = np.zeros(len(values), dtype=np.float32)
        b[values.index(v)] = 1.0
        blocks.append(b)
    return np.concatenate(blocks)


def embed_conditions(conditions: Sequence[Sequence[str]], schema: AttributeSchema) -> np.ndarray:
    return np.stack([embed_condition(c, schema) for c in conditions])


@dataclass(frozen=True)
class CvaeConfig:
    latent_dim: int = 32
    conv_channels: tuple[int, ...] = (8, 16, 16)
    cond_width: int = 32
    hidden: int = 256
    beta: float = 1.0
    cond_layers: int = 1  # depth of g(c); 1 makes the embedding additive over attributes

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if self.latent_dim < 1 or self.cond_width < 1 or self.hidden < 1 or not self.conv_channels or self.cond_layers < 1:
            raise ValueError("CVAE sizes must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


@dataclass(frozen=True)
class InterpolationConfig:
    ratio: float | None = 1.0
    count: int | None = None  # exact T per unseen cell; overrides ratio
    pseudo_session_size: int = 16
    observation_noise: bool = True  # add residual-scale Gaussian noise to decoded means

    def __post_init__(self):
        if self.count is not None and self.count < 0:
            raise ValueError("count must be >= 0")
        if self.ratio is not None and self.ratio < 0:
            raise ValueError("ratio must be >= 0")
        if self.pseudo_session_size < 1:
            raise ValueError("pseudo_session_size must be >= 1")

    def per_cell(self, avg_real_per_seen_cell: float) -> int:
        if self.count is not None:
            return self.count
        return int(round((self.ratio or 0.0) * avg_real_per_seen_cell))


def _freq_sizes(fr: int, n_layers: int) -> list[int]:
    sizes = [fr]
    for _ in range(n_layers):
        sizes.append((sizes[-1] - 1) // 2 + 1)  # kernel 3, stride 2, padding 1
    return sizes


class _ModalityEncoder(nn.Module):
    def __init__(self, shape, channels):
        super().__init__()
        f, t, fr = shape
        layers, c_in = [], f
        for c in channels:
            layers += [nn.Conv2d(c_in, c, kernel_size=3, stride=(1, 2), padding=1), nn.ReLU()]
            c_in = c
        self.net = nn.Sequential(*layers)
        self.out_shape = (channels[-1], t, _freq_sizes(fr, len(channels))[-1])

    def forward(self, x):
        return self.net(x).flatten(1)


class _ModalityDecoder(nn.Module):
    def __init__(self, shape, channels):
        super().__init__()
        f, t, fr = shape
        sizes = _freq_sizes(fr, len(channels))
        self.start = (channels[-1], t, sizes[-1])
        layers = []
        rev = list(channels[::-1]) + [f]
        for i in range(len(channels)):
            target, cur = sizes[-2 - i], sizes[-1 - i]
            pad = target - ((cur - 1) * 2 - 2 + 3)
            layers.append(nn.ConvTranspose2d(rev[i], rev[i + 1], kernel_size=3, stride=(1, 2),
                                             padding=1, output_padding=(0, pad)))
            if i < len(channels) - 1:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def forward(self, flat):
        return self.net(flat.view(-1, *self.start))


class ConditionalVAE(nn.Module):
    """Encoder q(z | x, c), decoder p(x | z, c) and condition MLP g(c).

    Inputs are standardized per modality with the stored ``in_mean``/``in_std``
    buffers; ``decode`` returns spectrograms in the original scale.
    """

    def __init__(self, input_shapes: Sequence[tuple[int, int, int]], cond_dim: int, cfg: CvaeConfig = CvaeConfig()):
        super().__init__()
        self.cfg = cfg
        self.input_shapes = [tuple(int(v) for v in s) for s in input_shapes]
        self.cond_dim = int(cond_dim)
        w = cfg.cond_width
        layers = [nn.Linear(cond_dim, w)]
        for _ in range(cfg.cond_layers - 1):
            layers += [nn.ReLU(), nn.Linear(w, w)]
        self.cond_mlp = nn.Sequential(*layers)
        self.encoders = nn.ModuleList(_ModalityEncoder(s, cfg.conv_channels) for s in self.input_shapes)
        flat = sum(math.prod(e.out_shape) for e in self.encoders)
        self.enc_fuse = nn.Sequential(nn.Linear(flat + w, cfg.hidden), nn.ReLU())
        self.mu_head = nn.Linear(cfg.hidden, cfg.latent_dim)
        self.log_sigma_head = nn.Linear(cfg.hidden, cfg.latent_dim)
        self.decoders = nn.ModuleList(_ModalityDecoder(s, cfg.conv_channels) for s in self.input_shapes)
        self.dec_sizes = [math.prod(d.start) for d in self.decoders]
        self.dec_fuse = nn.Sequential(
            nn.Linear(cfg.latent_dim + w, cfg.hidden), nn.ReLU(), nn.Linear(cfg.hidden, sum(self.dec_sizes)), nn.ReLU()
        )
        n = len(self.input_shapes)
        self.register_buffer("in_mean", torch.zeros(n))
        self.register_buffer("in_std", torch.ones(n))
        # per (feature, frequency) residual std of training reconstructions, original units
        for m, (f, _, fr) in enumerate(self.input_shapes):
            self.register_buffer(f"resid_std_{m}", torch.zeros(f, 1, fr))

    def set_standardization(self, tensors: Sequence[np.ndarray]) -> None:
        for m, t in enumerate(tensors):
            self.in_mean[m] = float(np.mean(t))
            self.in_std[m] = float(np.std(t)) or 1.0

    def residual_std(self, m: int) -> torch.Tensor:
        return getattr(self, f"resid_std_{m}")

    @torch.no_grad()
    def fit_residual_scale(self, xs: Sequence[torch.Tensor], c: torch.Tensor, batch_size: int = 256) -> None:
        """Maximum-likelihood std of x - decode(mu(x, c), c) per feature and frequency bin."""
        sums = [torch.zeros(x.shape[1], x.shape[3]) for x in xs]
        n = xs[0].shape[0]
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            batch = [x[sl] for x in xs]
            mu, _ = self.encode(batch, c[sl])
            for m, (x, y) in enumerate(zip(batch, self.decode(mu, c[sl]))):
                sums[m] += (x - y).pow(2).sum(dim=(0, 2))
        for m, (s, x) in enumerate(zip(sums, xs)):
            self.residual_std(m).copy_((s / (n * x.shape[2])).sqrt().unsqueeze(1))

    def _check(self, xs):
        if len(xs) != len(self.input_shapes):
            raise ValueError(f"expected {len(self.input_shapes)} modalities, got {len(xs)}")
        for x, s in zip(xs, self.input_shapes):
            if tuple(x.shape[1:]) != s:
                raise ValueError(f"modality shape {tuple(x.shape[1:])} does not match model shape {s}")

    def encode(self, xs: Sequence[torch.Tensor], c: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check(xs)
        feats = [enc((x - self.in_mean[m]) / self.in_std[m]) for m, (enc, x) in enumerate(zip(self.encoders, xs))]
        h = self.enc_fuse(torch.cat(feats + [self.cond_mlp(c)], dim=1))
        sigma = torch.clamp(torch.exp(self.log_sigma_head(h)), min=SIGMA_FLOOR)
        return self.mu_head(h), sigma

    def decode(self, z: torch.Tensor, c: torch.Tensor) -> list[torch.Tensor]:
        if z.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"latent code has dim {z.shape[-1]}, model expects {self.cfg.latent_dim}")
        flat = self.dec_fuse(torch.cat([z, self.cond_mlp(c)], dim=1))
        parts = torch.split(flat, self.dec_sizes, dim=1)
        return [dec(p) * self.in_std[m] + self.in_mean[m] for m, (dec, p) in enumerate(zip(self.decoders, parts))]


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, generator: torch.Generator | None = None,
                   noise: torch.Tensor | None = None) -> torch.Tensor:
    """z = mu + sigma * eps with eps ~ N(0, I)."""
    if noise is None:
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.clamp(sigma, min=SIGMA_FLOOR) * noise


def kl_standard_normal(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)) per row."""
    return 0.5 * torch.sum(mu**2 + sigma**2 - 1.0 - torch.log(sigma**2), dim=-1)


def gaussian_recon(xs: Sequence[torch.Tensor], xhat: Sequence[torch.Tensor], model: ConditionalVAE) -> torch.Tensor:
    """Unit-variance Gaussian NLL (constants dropped) per row, in standardized units."""
    total = 0.0
    for m, (x, y) in enumerate(zip(xs, xhat)):
        d = (x - y) / model.in_std[m]
        total = total + 0.5 * d.pow(2).flatten(1).sum(dim=1)
    return total


def elbo_loss(model: ConditionalVAE, xs: Sequence[torch.Tensor], c: torch.Tensor,
              generator: torch.Generator | None = None, noise: torch.Tensor | None = None):
    """Negative ELBO: (total, recon, kl), each averaged over the batch."""
    mu, sigma = model.encode(xs, c)
    z = reparameterize(mu, sigma, generator, noise)
    xhat = model.decode(z, c)
    recon = gaussian_recon(xs, xhat, model).mean()
    kl = kl_standard_normal(mu, sigma).mean()
    total = recon + model.cfg.beta * kl
    if not torch.isfinite(total):
        raise FloatingPointError(
            f"non-finite ELBO: recon={recon.item()!r} kl={kl.item()!r} "
            f"max|mu|={mu.abs().max().item():.3g} sigma range=({sigma.min().item():.3g}, {sigma.max().item():.3g})"
        )
    return total, recon, kl


def build_cvae(input_shapes, schema: AttributeSchema, cfg: CvaeConfig = CvaeConfig(), seed: int = 0) -> ConditionalVAE:
    cond_dim = sum(len(v) for _, v in schema.attributes)
    with torch_seeded(seed):
        return ConditionalVAE(input_shapes, cond_dim, cfg)


def train_cvae(model: ConditionalVAE, specs: SpectrogramSet, schema: AttributeSchema,
               opt_cfg: OptimizerConfig, rng: np.random.Generator, torch_gen: torch.Generator):
    """Fit on a (real) spectrogram set; returns (model, per-epoch mean losses)."""
    if len(specs) == 0:
        raise ValueError("empty training set")
    model.set_standardization(specs.tensors)
    xs_all = [torch.from_numpy(np.ascontiguousarray(t)) for t in specs.tensors]
    c_all = torch.from_numpy(embed_conditions(specs.conditions, schema))
    opt = opt_cfg.build(model.parameters())
    curve = []
    last_good = state_snapshot(model)
    model.train()
    for epoch in range(opt_cfg.epochs):
        tot = rec = kl = 0.0
        n = 0
        for idx in minibatches(len(specs), opt_cfg.batch_size, rng):
            idx_t = torch.from_numpy(idx)
            xs = [x[idx_t] for x in xs_all]
            try:
                total, r, k = elbo_loss(model, xs, c_all[idx_t], torch_gen)
            except FloatingPointError as err:
                model.load_state_dict(last_good)
                raise TrainingDiverged(str(err), last_good, epoch) from err
            opt.zero_grad()
            total.backward()
            opt.step()
            b = len(idx)
            tot, rec, kl, n = tot + total.item() * b, rec + r.item() * b, kl + k.item() * b, n + b
        curve.append({"epoch": epoch, "total": tot / n, "recon": rec / n, "kl": kl / n})
        last_good = state_snapshot(model)
        log.debug("cvae epoch %d total %.3f recon %.3f kl %.3f", epoch, tot / n, rec / n, kl / n)
    model.eval()
    model.fit_residual_scale(xs_all, c_all)
    model.loss_curve = curve
    return model, curve


def interpolate(model: ConditionalVAE, matrix: SudokuMatrix, schema: AttributeSchema, class_attribute: str,
                cfg: InterpolationConfig, avg_real_per_seen_cell: float, torch_gen: torch.Generator,
                batch_size: int = 256) -> SpectrogramSet | None:
    """Decode prior draws z ~ N(0, I) with each unseen cell's condition.

    With ``cfg.observation_noise`` each decoded mean gets Gaussian noise at the
    residual scale fitted after training, i.e. a draw from p(x | z, c) rather than
    its mean. Samples are grouped into pseudo-sessions of ``cfg.pseudo_session_size``.
    Returns None when nothing is generated.
    """
    n_cell = cfg.per_cell(avg_real_per_seen_cell)
    cells = matrix.unseen_cells
    if n_cell == 0 or not cells:
        return None
    ci = schema.index(class_attribute)
    per_mod = [[] for _ in model.input_shapes]
    labels, conds, sids, stamps = [], [], [], []
    model.eval()
    with torch.no_grad():
        for cls, env in cells:
            cond = list(env)
            cond.insert(ci, cls)
            cond = tuple(cond)
            onehot = torch.from_numpy(embed_condition(cond, schema))
            tag = "_".join(env)
            for start in range(0, n_cell, batch_size):
                b = min(batch_size, n_cell - start)
                z = torch.randn((b, model.cfg.latent_dim), generator=torch_gen)
                out = model.decode(z, onehot.expand(b, -1))
                if cfg.observation_noise:
                    out = [o + model.residual_std(m) * torch.randn(o.shape, generator=torch_gen)
                           for m, o in enumerate(out)]
                for m, o in enumerate(out):
                    per_mod[m].append(o.numpy().astype(np.float32))
            for k in range(n_cell):
                labels.append(cls)
                conds.append(cond)
                sids.append(f"synth__{cls}__{tag}__p{k // cfg.pseudo_session_size}")
                stamps.append(k % cfg.pseudo_session_size)
    return SpectrogramSet([np.concatenate(p) for p in per_mod], np.array(labels, dtype=object), conds,
                          np.array(sids, dtype=object), np.array(stamps), np.ones(len(labels), dtype=bool))


def cvae_header(model: ConditionalVAE) -> dict:
    return {"cvae": asdict(model.cfg), "input_shapes": [list(s) for s in model.input_shapes],
            "cond_dim": model.cond_dim}


def cvae_from_header(header: dict) -> ConditionalVAE:
    cfg = CvaeConfig(**header["cvae"])
    return ConditionalVAE([tuple(s) for s in header["input_shapes"]], header["cond_dim"], cfg)
