"""Optimization: Glorot init, Adam, global-norm clipping and the plateau schedule.

The loop in :func:`run_training` works with any model exposing

* ``params`` / ``grads`` / ``buffers``: dicts of live arrays,
* ``zero_grad()``,
* ``train_batch(X, Y, rng) -> LossBundle`` (forward in train mode + backward),
* ``evaluate(X, Y) -> LossBundle`` (eval mode, no gradients).
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .ndcore import NonFiniteError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def glorot_init(shape, rng):
    """Glorot/Xavier normalized-uniform draw.

    For a conv kernel ``(c_out, c_in, k)`` the fans are ``c_in*k`` and
    ``c_out*k``; for a matrix ``(n_out, n_in)`` they are the two extents.
    """
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ValueError(f"extents must be positive, got {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out = shape[0] * receptive
    fan_in = (shape[1] if len(shape) > 1 else 1) * receptive
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def glorot_limit(shape):
    shape = tuple(shape)
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = (shape[1] if len(shape) > 1 else 1) * receptive
    return math.sqrt(6.0 / (fan_in + shape[0] * receptive))


def global_norm(grads):
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads, threshold):
    """Rescale ``grads`` in place so their joint L2 norm is at most ``threshold``.

    Returns the same dict. Gradients already inside the ball are untouched.
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads)
    if norm > threshold:
        scale = threshold / norm
        for g in grads.values():
            g *= scale
    return grads


class Adam:
    """Bias-corrected Adam over a dict of parameter arrays (updated in place)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads, lr):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    batch_size: int = 128
    initial_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_threshold: float = 1.0
    patience: int = 10
    max_lr_reductions: int = 2
    reduction_factor: float = 10.0
    max_epochs: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.initial_lr <= 0 or self.patience < 1:
            raise ValueError("batch_size >= 1, initial_lr > 0 and patience >= 1 are required")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be positive")


class PlateauSchedule:
    """Patience-based LR reduction with a final stop.

    After ``patience`` consecutive epochs without a strictly lower validation
    loss the LR is divided by ``factor`` and the caller restores the best
    weights. Once ``max_reductions`` have been used, the next exhausted
    patience window stops training.
    """

    def __init__(self, lr, patience=10, factor=10.0, max_reductions=2):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.max_reductions = max_reductions
        self.best = math.inf
        self.best_epoch = -1
        self.reductions = 0
        self.stale = 0
        self.epoch = 0

    def update(self, val_loss):
        """Record one epoch; returns 'improved', 'wait', 'reduce' or 'stop'."""
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.stale = 0
            return "improved"
        self.stale += 1
        if self.stale < self.patience:
            return "wait"
        if self.reductions >= self.max_reductions:
            return "stop"
        self.reductions += 1
        self.lr /= self.factor
        self.stale = 0
        return "reduce"


@dataclass
class RunReport:
    model_kind: str
    model_config: dict
    train_config: dict
    seed: int
    epochs: list = field(default_factory=list)
    best_val_loss: float = math.inf
    best_epoch: int = -1
    lr_reductions: int = 0
    stop_reason: str = ""
    test_mse: float | None = None
    checkpoint_path: str | None = None
    wall_clock_s: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self, include_timing=True):
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock_s")
        return d


def snapshot(model):
    state = {f"param:{k}": v.copy() for k, v in model.params.items()}
    state.update({f"buffer:{k}": v.copy() for k, v in model.buffers.items()})
    return state


def restore(model, state):
    for k, v in model.params.items():
        v[...] = state[f"param:{k}"]
    for k, v in model.buffers.items():
        v[...] = state[f"buffer:{k}"]


def _default_val(model, X, Y):
    b = model.evaluate(X, Y)
    return b.l2, b.total


def run_training(model, windows, config: TrainConfig, loss_fn=None, on_epoch=None):
    """Fit ``model`` on the train split of ``windows``; early-stop on validation.

    ``loss_fn(model, X, Y) -> float`` overrides the validation criterion
    (default: L2 in eval mode). Best weights are restored before returning.
    """
    X_tr, Y_tr = windows.split("train")
    X_va, Y_va = windows.split("val")
    if len(X_tr) == 0 or len(X_va) == 0:
        raise TrainingError("train and validation splits must be non-empty")

    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.beta1, config.beta2, config.adam_eps)
    sched = PlateauSchedule(config.initial_lr, config.patience,
                            config.reduction_factor, config.max_lr_reductions)
    best_state = snapshot(model)
    report = RunReport(
        model_kind=getattr(model, "kind", type(model).__name__),
        model_config=asdict(model.config) if hasattr(model, "config") else {},
        train_config=asdict(config),
        seed=config.seed,
    )
    nan_retry_used = False
    n = len(X_tr)
    bs = config.batch_size

    for epoch in range(1, config.max_epochs + 1):
        lr = sched.lr
        perm = rng.permutation(n)
        l2_sum = total_sum = 0.0
        max_clipped_norm = 0.0
        diverged = False
        try:
            for lo in range(0, n, bs):
                idx = perm[lo:lo + bs]
                model.zero_grad()
                bundle = model.train_batch(X_tr[idx], Y_tr[idx], rng)
                if not math.isfinite(bundle.total):
                    raise NonFiniteError("non-finite training loss")
                clip_gradients(model.grads, config.clip_threshold)
                max_clipped_norm = max(max_clipped_norm, global_norm(model.grads))
                opt.step(model.params, model.grads, lr)
                l2_sum += bundle.l2 * len(idx)
                total_sum += bundle.total * len(idx)
        except NonFiniteError as exc:
            diverged = True
            if nan_retry_used:
                restore(model, best_state)
                raise TrainingError(f"training diverged twice (epoch {epoch}): {exc}") from exc
            nan_retry_used = True
            log.warning("epoch %d diverged (%s); restoring best weights and halving lr", epoch, exc)
            restore(model, best_state)
            sched.lr /= 2.0

        if diverged:
            report.epochs.append({"epoch": epoch, "lr": lr, "diverged": True})
            continue

        if loss_fn is None:
            val, val_total = _default_val(model, X_va, Y_va)
        else:
            val, val_total = float(loss_fn(model, X_va, Y_va)), None
        entry = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": l2_sum / n,
            "train_total": total_sum / n,
            "val_loss": val,
            "val_total": val_total,
            "max_grad_norm": max_clipped_norm,
            "order_crc": zlib.crc32(perm.astype("<i8").tobytes()),
        }
        report.epochs.append(entry)
        action = sched.update(val)
        entry["action"] = action
        log.info("epoch %d lr=%.2e train=%.5f val=%.5f %s", epoch, lr, entry["train_loss"], val, action)
        if on_epoch is not None:
            on_epoch(entry, model)
        if action == "improved":
            best_state = snapshot(model)
        elif action == "reduce":
            restore(model, best_state)
        elif action == "stop":
            report.stop_reason = "early_stopping"
            break
    else:
        report.stop_reason = "max_epochs"

    restore(model, best_state)
    report.best_val_loss = sched.best
    report.best_epoch = sched.best_epoch
    report.lr_reductions = sched.reductions
    X_te, Y_te = windows.split("test")
    if len(X_te):
        report.test_mse = model.evaluate(X_te, Y_te).l2
    report.wall_clock_s = time.perf_counter() - start
    return report
