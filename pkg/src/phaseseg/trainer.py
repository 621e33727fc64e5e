"""Optimization loop for the multi-stage model.

AdamW with decoupled weight decay, a cosine-annealed learning rate over
epochs, per-epoch sequence shuffling (uniform or class-balanced with
replacement), early stopping on rising validation loss and in-memory
checkpointing of the best epoch. Batch size is one sequence; gradient
accumulation over several sequences per step is available but off by
default.

Everything is deterministic for a fixed seed; in 64-bit mode two identical
runs produce bit-identical parameters.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import mstcnpp
from .losses import FocalConfig, inverse_frequency_alpha, total_loss

_SAMPLING_MODES = ("uniform", "class-balanced")
_ALPHA_MODES = ("uniform", "inverse-frequency")


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the report collected so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-5
    batch_size: int = 1               # sequences per optimizer step
    smoothing_weight: float = 0.15
    patience: int = 3
    seed: int = 0
    weight_decay: float = 0.01
    sampling: str = "uniform"
    gamma: float = 2.0
    alpha_mode: str = "uniform"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.sampling not in _SAMPLING_MODES:
            raise ValueError(f"sampling must be one of {_SAMPLING_MODES}")
        if self.alpha_mode not in _ALPHA_MODES:
            raise ValueError(f"alpha_mode must be one of {_ALPHA_MODES}")


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state: AdamWState, lr: float, weight_decay: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamWState:
    """One decoupled-weight-decay Adam update, applied to params in place.

    params is a name -> array mapping (or named_parameters list); grads maps
    the same names to gradients. Missing state entries start at zero.
    """
    if not isinstance(params, dict):
        params = dict(params)
    state.step += 1
    t = state.step
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in parameter block {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p)
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return state


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * 0.5 * (1 + cos(pi * step / total_steps)), floored at 0."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# epoch sampling
# ---------------------------------------------------------------------------

def sequence_weights(dataset, n_classes: int) -> np.ndarray:
    """Per-sequence weight = mean inverse class frequency of its frames."""
    counts = np.zeros(n_classes, dtype=np.int64)
    for _, labels in dataset:
        kept = labels[labels >= 0]
        counts += np.bincount(kept, minlength=n_classes)
    freq = counts / max(counts.sum(), 1)
    inv = np.zeros(n_classes)
    inv[freq > 0] = 1.0 / freq[freq > 0]
    weights = np.empty(len(dataset))
    for i, (_, labels) in enumerate(dataset):
        kept = labels[labels >= 0]
        weights[i] = inv[kept].mean() if kept.size else 0.0
    if weights.sum() == 0:
        weights[:] = 1.0
    return weights / weights.sum()


def sample_epoch(dataset, mode: str, seed: int, n_classes: int | None = None) -> list[int]:
    """Order of sequence indices for one epoch.

    uniform: a seeded permutation. class-balanced: len(dataset) draws with
    replacement, each sequence weighted by its mean inverse class frequency.
    """
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    rng = np.random.default_rng(seed)
    if mode == "uniform":
        return list(rng.permutation(len(dataset)))
    if mode != "class-balanced":
        raise ValueError(f"sampling mode must be one of {_SAMPLING_MODES}, got {mode!r}")
    if n_classes is None:
        n_classes = int(max(labels.max() for _, labels in dataset)) + 1
    probs = sequence_weights(dataset, n_classes)
    return list(rng.choice(len(dataset), size=len(dataset), replace=True, p=probs))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model, dataset, focal_cfg: FocalConfig, smoothing_weight: float,
             max_workers: int = 1):
    """Mean per-sequence total loss and pooled frame accuracy.

    The reduction order is the dataset order regardless of worker count.
    """
    def one(item):
        features, labels = item
        probs = mstcnpp.forward(model, features)
        breakdown, _ = total_loss(probs, labels, focal_cfg, smoothing_weight)
        pred = np.argmax(probs[-1], axis=1)
        counted = labels >= 0
        return breakdown.total, int((pred[counted] == labels[counted]).sum()), int(counted.sum())

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(one, dataset))
    else:
        results = [one(item) for item in dataset]
    losses = [r[0] for r in results]
    correct = sum(r[1] for r in results)
    counted = sum(r[2] for r in results)
    return float(np.mean(losses)), (correct / counted if counted else 0.0)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_focal: float
    train_smooth: float
    train_total: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    best_checkpoint: str = ""
    diverged: bool = False

    def as_dict(self) -> dict:
        return {
            "epochs": [vars(e) for e in self.epochs],
            "stop_epoch": self.stop_epoch,
            "best_epoch": self.best_epoch,
            "best_checkpoint": self.best_checkpoint,
            "diverged": self.diverged,
        }


def fit(model, train_set, val_set, cfg: TrainConfig, max_workers: int = 1):
    """Train up to cfg.epochs with early stopping on rising validation loss.

    Returns (best_model, report) where best_model is the checkpoint with the
    lowest validation loss. Raises DivergenceError (report attached) on a
    non-finite loss.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    n_classes = model.config.n_classes
    for split_name, split in (("train", train_set), ("val", val_set)):
        for i, (features, labels) in enumerate(split):
            if features.shape[1] != model.config.in_dim:
                raise ValueError(f"{split_name} sequence {i} has {features.shape[1]} "
                                 f"channels, model expects {model.config.in_dim}")
            if features.shape[0] != labels.shape[0]:
                raise ValueError(f"{split_name} sequence {i}: {features.shape[0]} frames "
                                 f"but {labels.shape[0]} labels")
            if not np.all(np.isfinite(features)):
                raise ValueError(f"{split_name} sequence {i} has non-finite features")
            if labels.max() >= n_classes:
                raise ValueError(f"{split_name} sequence {i} has labels outside "
                                 f"[0, {n_classes})")
    alpha = None
    if cfg.alpha_mode == "inverse-frequency":
        alpha = inverse_frequency_alpha([labels for _, labels in train_set], n_classes)
    focal_cfg = FocalConfig(gamma=cfg.gamma, alpha=alpha)

    params = dict(mstcnpp.named_parameters(model))
    state = AdamWState()
    report = TrainReport()
    best_model = mstcnpp.clone(model)
    best_val = math.inf
    rise_streak = 0
    prev_val = math.inf

    for epoch in range(1, cfg.epochs + 1):
        lr = cosine_lr(epoch - 1, cfg.epochs, cfg.learning_rate)
        order = sample_epoch(train_set, cfg.sampling, seed=cfg.seed + epoch,
                             n_classes=n_classes)

        focal_sum = smooth_sum = total_sum = 0.0
        pending: dict | None = None
        pending_n = 0
        for pos, idx in enumerate(order):
            features, labels = train_set[idx]
            try:
                probs, cache = mstcnpp.forward(model, features, return_cache=True)
                breakdown, stage_grads = total_loss(probs, labels, focal_cfg,
                                                    cfg.smoothing_weight)
            except ValueError as exc:  # inputs were validated: this is numeric blowup
                report.diverged = True
                raise DivergenceError(
                    f"numeric failure at epoch {epoch}: {exc}", report) from exc
            if not math.isfinite(breakdown.total):
                report.diverged = True
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}", report)
            focal_sum += sum(breakdown.per_stage_focal)
            smooth_sum += sum(breakdown.per_stage_smooth)
            total_sum += breakdown.total

            grads = mstcnpp.backward(model, cache, stage_grads)
            if pending is None:
                pending = grads
            else:
                for name in pending:
                    pending[name] += grads[name]
            pending_n += 1
            if pending_n == cfg.batch_size or pos == len(order) - 1:
                if pending_n > 1:
                    for name in pending:
                        pending[name] /= pending_n
                try:
                    adamw_step(params, pending, state, lr, cfg.weight_decay)
                except DivergenceError as exc:
                    report.diverged = True
                    exc.report = report
                    raise
                pending, pending_n = None, 0

        try:
            val_loss, val_acc = evaluate(model, val_set, focal_cfg,
                                         cfg.smoothing_weight, max_workers=max_workers)
        except ValueError as exc:
            report.diverged = True
            raise DivergenceError(
                f"numeric failure in validation at epoch {epoch}: {exc}", report) from exc
        report.epochs.append(EpochStats(
            epoch=epoch, lr=lr,
            train_focal=focal_sum / len(order),
            train_smooth=smooth_sum / len(order),
            train_total=total_sum / len(order),
            val_loss=val_loss, val_accuracy=val_acc,
        ))
        report.stop_epoch = epoch
        if not math.isfinite(val_loss):
            report.diverged = True
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", report)

        if val_loss < best_val:
            best_val = val_loss
            best_model = mstcnpp.clone(model)
            report.best_epoch = epoch
            report.best_checkpoint = f"epoch{epoch:03d}"

        rise_streak = rise_streak + 1 if val_loss > prev_val else 0
        prev_val = val_loss
        if rise_streak >= cfg.patience:
            break
    return best_model, report


# ---------------------------------------------------------------------------
# checkpoints: model file format plus optimizer state appended
# ---------------------------------------------------------------------------

_OPT_MAGIC = b"OPTS"


def save_checkpoint(model, state: AdamWState, path) -> None:
    """Model in its regular format, followed by the optimizer moments."""
    parts = [mstcnpp.model_to_bytes(model), _OPT_MAGIC, struct.pack("<I", state.step)]
    for name, param in mstcnpp.named_parameters(model):
        m = state.m.get(name, np.zeros_like(param))
        v = state.v.get(name, np.zeros_like(param))
        parts.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path, dtype=np.float64):
    """Inverse of save_checkpoint; returns (model, AdamWState)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    model, offset = mstcnpp.model_from_bytes(buf, dtype=dtype)
    if buf[offset:offset + 4] != _OPT_MAGIC:
        raise mstcnpp.ModelFormatError("checkpoint missing optimizer section")
    offset += 4
    (step,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    state = AdamWState(step=step)
    for name, param in mstcnpp.named_parameters(model):
        for slot in (state.m, state.v):
            nbytes = param.size * 8
            if offset + nbytes > len(buf):
                raise mstcnpp.ModelFormatError(f"checkpoint truncated in moments of {name!r}")
            arr = np.frombuffer(buf, dtype="<f8", count=param.size, offset=offset)
            slot[name] = arr.reshape(param.shape).astype(dtype)
            offset += nbytes
    if offset != len(buf):
        raise mstcnpp.ModelFormatError("unexpected trailing bytes in checkpoint")
    return model, state
