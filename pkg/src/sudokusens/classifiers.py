"""Downstream classifiers: shallow MLP, DeepSense-style conv+GRU, and a one-layer transformer."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .training import TrainingDiverged, minibatches, torch_seeded

FAMILIES = ("shallow", "deepsense_like", "transformer_like")


@dataclass(frozen=True)
class ClassifierSpec:
    family: str = "shallow"
    hidden: int = 64
    conv_channels: int = 8
    n_heads: int = 1
    dropout: float = 0.2
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 64
    patience: int = 10
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if min(self.hidden, self.conv_channels, self.n_heads, self.epochs, self.batch_size) < 1:
            raise ValueError("classifier sizes must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


def _check_shapes(input_shapes) -> list[tuple[int, int, int]]:
    shapes = []
    for s in input_shapes:
        s = tuple(int(v) for v in s)
        if len(s) != 3 or min(s) < 1:
            raise ValueError(f"input shape {s} is not a positive (f, t, fr) triple")
        shapes.append(s)
    if not shapes:
        raise ValueError("need at least one modality")
    return shapes


class ClassifierModel(nn.Module):
    """Base: shape validation, input standardization, logits -> probabilities."""

    family = "base"

    def __init__(self, input_shapes, n_classes: int, spec: ClassifierSpec):
        super().__init__()
        self.input_shapes = _check_shapes(input_shapes)
        if n_classes < 2:
            raise ValueError("need at least two classes")
        self.n_classes = int(n_classes)
        self.spec = spec
        self.classes: list[str] = []
        n = len(self.input_shapes)
        self.register_buffer("in_mean", torch.zeros(n))
        self.register_buffer("in_std", torch.ones(n))

    def set_standardization(self, tensors: Sequence[np.ndarray]) -> None:
        for m, t in enumerate(tensors):
            self.in_mean[m] = float(np.mean(t))
            self.in_std[m] = float(np.std(t)) or 1.0

    def _prep(self, xs):
        if len(xs) != len(self.input_shapes):
            raise ValueError(f"expected {len(self.input_shapes)} modalities, got {len(xs)}")
        out = []
        for m, (x, s) in enumerate(zip(xs, self.input_shapes)):
            if x.dim() != 4 or tuple(x.shape[1:]) != s:
                raise ValueError(f"modality {m}: got shape {tuple(x.shape)}, expected (N, {s[0]}, {s[1]}, {s[2]})")
            out.append((x - self.in_mean[m]) / self.in_std[m])
        return out

    def logits(self, xs):
        raise NotImplementedError

    def forward(self, xs):
        return self.logits(xs)

    def predict_proba(self, xs) -> torch.Tensor:
        return torch.softmax(self.logits(xs), dim=1)


class ShallowNet(ClassifierModel):
    family = "shallow"

    def __init__(self, input_shapes, n_classes, spec):
        super().__init__(input_shapes, n_classes, spec)
        d = sum(math.prod(s) for s in self.input_shapes)
        self.hidden = nn.Linear(d, spec.hidden)
        self.drop = nn.Dropout(spec.dropout)
        self.out = nn.Linear(spec.hidden, n_classes)

    def logits(self, xs):
        x = torch.cat([x.flatten(1) for x in self._prep(xs)], dim=1)
        return self.out(self.drop(F.relu(self.hidden(x))))


class _ConvStack(nn.Module):
    """Three conv layers, stride 2 along frequency only, then per-frame projection."""

    def __init__(self, shape, channels, width):
        super().__init__()
        f, t, fr = shape
        layers, c_in, size = [], f, fr
        for _ in range(3):
            layers += [nn.Conv2d(c_in, channels, kernel_size=3, stride=(1, 2), padding=1), nn.ReLU()]
            c_in = channels
            size = (size - 1) // 2 + 1
        self.net = nn.Sequential(*layers)
        self.proj = nn.Linear(channels * size, width)

    def forward(self, x):
        y = self.net(x)  # (N, C, t, fr')
        y = y.permute(0, 2, 1, 3).flatten(2)  # (N, t, C * fr')
        return F.relu(self.proj(y))


class DeepSenseLike(ClassifierModel):
    """Per-modality conv stacks, mean fusion across modalities, GRU over time."""

    family = "deepsense_like"

    def __init__(self, input_shapes, n_classes, spec, tie_modalities: bool = False):
        super().__init__(input_shapes, n_classes, spec)
        ts = {s[1] for s in self.input_shapes}
        if len(ts) != 1:
            raise ValueError(f"all modalities need the same number of frames, got {sorted(ts)}")
        if tie_modalities and len(set(self.input_shapes)) != 1:
            raise ValueError("tied modality weights need identical modality shapes")
        self.tied = tie_modalities
        n_stacks = 1 if tie_modalities else len(self.input_shapes)
        self.stacks = nn.ModuleList(
            _ConvStack(self.input_shapes[m], spec.conv_channels, spec.hidden) for m in range(n_stacks)
        )
        self.gru = nn.GRU(spec.hidden, spec.hidden, batch_first=True)
        self.drop = nn.Dropout(spec.dropout)
        self.out = nn.Linear(spec.hidden, n_classes)

    def modality_features(self, xs):
        xs = self._prep(xs)
        return [self.stacks[0 if self.tied else m](x) for m, x in enumerate(xs)]

    def logits(self, xs):
        fused = torch.stack(self.modality_features(xs)).mean(dim=0)  # (N, t, H)
        seq, _ = self.gru(fused)
        return self.out(self.drop(seq.mean(dim=1)))


class _EncoderLayer(nn.Module):
    """Self-attention plus a two-linear feed-forward block, post-norm residuals."""

    def __init__(self, dim, heads, ff, dropout):
        super().__init__()
        if dim % heads:
            raise ValueError(f"embedding dim {dim} is not divisible by {heads} heads")
        self.attn = nn.MultiheadAttention(dim, heads, dropout=0.0, batch_first=True)
        self.ff1 = nn.Linear(dim, ff)
        self.ff2 = nn.Linear(ff, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, need_weights: bool = False):
        a, w = self.attn(x, x, x, need_weights=need_weights, average_attn_weights=False)
        x = self.norm1(x + self.drop(a))
        x = self.norm2(x + self.drop(self.ff2(F.relu(self.ff1(x)))))
        return (x, w) if need_weights else x


class TransformerLike(ClassifierModel):
    """(f, t, fr) -> sequence of t tokens of width fr * f, one encoder layer per modality."""

    family = "transformer_like"

    def __init__(self, input_shapes, n_classes, spec):
        super().__init__(input_shapes, n_classes, spec)
        self.layers = nn.ModuleList(
            _EncoderLayer(f * fr, spec.n_heads, spec.hidden, spec.dropout) for f, t, fr in self.input_shapes
        )
        width = sum(f * fr for f, _, fr in self.input_shapes)
        self.fuse = nn.Linear(width, spec.hidden)
        self.drop = nn.Dropout(spec.dropout)
        self.out = nn.Linear(spec.hidden, n_classes)

    @staticmethod
    def to_sequence(x: torch.Tensor) -> torch.Tensor:
        """(N, f, t, fr) -> (N, t, fr * f)."""
        return x.permute(0, 2, 3, 1).flatten(2)

    def attention_weights(self, xs) -> list[torch.Tensor]:
        return [layer(self.to_sequence(x), need_weights=True)[1] for layer, x in zip(self.layers, self._prep(xs))]

    def logits(self, xs):
        pooled = [layer(self.to_sequence(x)).mean(dim=1) for layer, x in zip(self.layers, self._prep(xs))]
        h = F.relu(self.fuse(torch.cat(pooled, dim=1)))
        return self.out(self.drop(h))


def build_shallow(spec, input_shapes, n_classes) -> ShallowNet:
    return ShallowNet(input_shapes, n_classes, spec)


def build_deepsense_like(spec, input_shapes, n_classes, tie_modalities: bool = False) -> DeepSenseLike:
    return DeepSenseLike(input_shapes, n_classes, spec, tie_modalities)


def build_transformer_like(spec, input_shapes, n_classes) -> TransformerLike:
    return TransformerLike(input_shapes, n_classes, spec)


_BUILDERS = {"shallow": ShallowNet, "deepsense_like": DeepSenseLike, "transformer_like": TransformerLike}


def build_classifier(spec: ClassifierSpec, input_shapes, n_classes: int, seed: int = 0) -> ClassifierModel:
    with torch_seeded(seed):
        return _BUILDERS[spec.family](input_shapes, n_classes, spec)


def _batched_logits(model, tensors, batch_size=512):
    outs = []
    with torch.no_grad():
        for start in range(0, tensors[0].shape[0], batch_size):
            outs.append(model.logits([torch.from_numpy(np.ascontiguousarray(t[start:start + batch_size]))
                                      for t in tensors]))
    return torch.cat(outs)


def predict_proba(model: ClassifierModel, tensors: Sequence[np.ndarray]) -> np.ndarray:
    model.eval()
    return torch.softmax(_batched_logits(model, tensors), dim=1).numpy()


def evaluate_split(model, tensors, labels) -> tuple[float, float]:
    """(accuracy, mean cross-entropy)."""
    model.eval()
    logits = _batched_logits(model, tensors)
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    loss = F.cross_entropy(logits, y).item()
    acc = float((logits.argmax(1) == y).float().mean())
    return acc, loss


def train_classifier(model: ClassifierModel, train: tuple[Sequence[np.ndarray], np.ndarray],
                     val: tuple[Sequence[np.ndarray], np.ndarray] | None, spec: ClassifierSpec,
                     rng: np.random.Generator, seed: int = 0):
    """Cross-entropy training with validation early stopping.

    Returns (model loaded with the best-validation weights, history dict).
    Without a validation set the final epoch is kept.
    """
    tensors, labels = train
    if len(labels) == 0:
        raise ValueError("empty training set")
    model.set_standardization(tensors)
    xs_all = [torch.from_numpy(np.ascontiguousarray(t)) for t in tensors]
    y_all = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    opt = torch.optim.Adam(model.parameters(), lr=spec.learning_rate, weight_decay=spec.weight_decay)
    history = {"train_loss": [], "val_acc": [], "val_loss": [], "best_epoch": None}
    best_key, best_state, stale = None, None, 0
    with torch_seeded(seed):
        for epoch in range(spec.epochs):
            model.train()
            tot, n = 0.0, 0
            for idx in minibatches(len(y_all), spec.batch_size, rng):
                idx_t = torch.from_numpy(idx)
                loss = F.cross_entropy(model.logits([x[idx_t] for x in xs_all]), y_all[idx_t])
                if not torch.isfinite(loss):
                    if best_state is not None:
                        model.load_state_dict(best_state)
                    raise TrainingDiverged(f"classifier loss non-finite at epoch {epoch}", best_state, epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                tot, n = tot + loss.item() * len(idx), n + len(idx)
            history["train_loss"].append(tot / n)
            if val is None or len(val[1]) == 0:
                continue
            acc, vloss = evaluate_split(model, val[0], val[1])
            history["val_acc"].append(acc)
            history["val_loss"].append(vloss)
            key = (acc, -vloss)
            if best_key is None or key > best_key:
                best_key, stale = key, 0
                best_state = copy.deepcopy(model.state_dict())
                history["best_epoch"] = epoch
            else:
                stale += 1
                if stale >= spec.patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def classifier_header(model: ClassifierModel) -> dict:
    return {"classifier": asdict(model.spec), "input_shapes": [list(s) for s in model.input_shapes],
            "n_classes": model.n_classes, "classes": list(model.classes)}


def classifier_from_header(header: dict) -> ClassifierModel:
    spec = ClassifierSpec(**header["classifier"])
    model = _BUILDERS[spec.family]([tuple(s) for s in header["input_shapes"]], header["n_classes"], spec)
    model.classes = list(header.get("classes", []))
    return model
