"""Seeding, optimizer settings and the finite-difference gradient oracle shared by all trainers."""

from __future__ import annotations

import contextlib
import copy
import os
import zlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

STREAMS = ("data", "init", "training", "sampling")


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; carries the last finite parameter snapshot."""

    def __init__(self, message: str, last_good_state: dict | None = None, epoch: int | None = None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.epoch = epoch


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.method not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def build(self, params) -> torch.optim.Optimizer:
        params = [p for p in params if p.requires_grad]
        if self.method == "adam":
            return torch.optim.Adam(params, lr=self.learning_rate, weight_decay=self.weight_decay)
        return torch.optim.SGD(params, lr=self.learning_rate, weight_decay=self.weight_decay)


class RngStreams:
    """Named, independently seeded random streams fanned out from one master seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def _seq(self, name: str) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])

    def numpy(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self._seq(name))

    def int_seed(self, name: str) -> int:
        return int(self._seq(name).generate_state(1, dtype=np.uint32)[0])

    def torch(self, name: str) -> torch.Generator:
        return torch.Generator().manual_seed(self.int_seed(name))

    def child(self, name: str) -> "RngStreams":
        return RngStreams(self.int_seed(name))


def seed_everything(seed: int) -> RngStreams:
    """Return the stream family for ``seed`` and pin torch's CPU thread count.

    ``SUDOKU_AUG_THREADS`` caps intra-op parallelism so reductions are reproducible.
    """
    threads = os.environ.get("SUDOKU_AUG_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    return RngStreams(seed)


@contextlib.contextmanager
def torch_seeded(seed: int) -> Iterator[None]:
    """Run a block against torch's global RNG seeded with ``seed`` without leaking state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def state_snapshot(module: torch.nn.Module) -> dict:
    return copy.deepcopy({k: v.detach().clone() for k, v in module.state_dict().items()})


def check_finite(loss: torch.Tensor, what: str, module: torch.nn.Module | None = None,
                 last_good: dict | None = None, epoch: int | None = None) -> None:
    if not torch.isfinite(loss).all():
        raise TrainingDiverged(f"{what} became non-finite ({loss.item()!r}) at epoch {epoch}",
                               last_good, epoch)


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-6,
    max_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    At most ``max_coords`` coordinates are probed, spread across all tensors.
    Relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValueError(f"non-finite loss {loss.item()!r}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    if total <= max_coords:
        flat = np.arange(total)
    else:
        # probe every tensor at least once, then fill the rest at random
        starts = np.cumsum([0] + sizes[:-1])
        forced = np.array([s + rng.integers(n) for s, n in zip(starts, sizes)])[:max_coords]
        rest = rng.choice(total, size=max_coords, replace=False)
        flat = np.unique(np.concatenate([forced, rest]))[:max_coords]
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    with torch.no_grad():
        for idx in flat:
            t = int(np.searchsorted(offsets, idx, side="right") - 1)
            local = int(idx - offsets[t])
            view = params[t].view(-1)
            orig = view[local].item()
            view[local] = orig + epsilon
            up = loss_fn().item()
            view[local] = orig - epsilon
            down = loss_fn().item()
            view[local] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError("non-finite loss during finite differences")
            numeric = (up - down) / (2 * epsilon)
            analytic = grads[t].view(-1)[local].item()
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def minibatches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True):
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
