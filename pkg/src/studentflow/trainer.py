"""Maximum-likelihood training: NLL loss, Adam, clipping, LR schedules, metrics."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .flow import FlowModel, LayerTape
from .layers import FlowError
from .special import make_rng

log = logging.getLogger(__name__)

__all__ = [
    "Constant",
    "Cosine",
    "Noam",
    "Clip",
    "TrainConfig",
    "TrainMetrics",
    "AdamState",
    "NonFiniteLoss",
    "lr_at",
    "clip_gradients",
    "global_norm",
    "adam_step",
    "nll_loss",
    "evaluate",
    "train",
    "to_bits_per_dim",
]

CONVERGED = "converged"
DIVERGED = "diverged"
METRICS_HEADER = ("step", "train_nll", "val_nll", "grad_norm", "lr", "seconds")

# A run counts as diverged when the loss is non-finite, or stays above
# DIVERGENCE_FACTOR * |initial loss| for DIVERGENCE_PATIENCE consecutive steps.
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


# -- learning-rate schedules -------------------------------------------------

@dataclass(frozen=True)
class Constant:
    lr: float


@dataclass(frozen=True)
class Cosine:
    """Half-cosine decay from ``lr_start`` at step 0 to ``lr_end`` at ``total_steps``."""

    lr_start: float
    lr_end: float
    total_steps: int


@dataclass(frozen=True)
class Noam:
    """Linear warm-up then inverse-square-root decay, floored at ``floor``.

    ``lr(s) = peak * min(s**-0.5, s * warmup**-1.5) / warmup**-0.5`` with
    ``s = max(step, 1)``, so the peak is reached exactly at ``s = warmup``.
    """

    peak: float
    floor: float
    warmup: int


def lr_at(schedule, step: int) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if isinstance(schedule, Constant):
        return schedule.lr
    if isinstance(schedule, Cosine):
        if step >= schedule.total_steps:
            return schedule.lr_end
        frac = step / schedule.total_steps
        return schedule.lr_end + 0.5 * (schedule.lr_start - schedule.lr_end) * (1.0 + math.cos(math.pi * frac))
    if isinstance(schedule, Noam):
        s = max(step, 1)
        w = schedule.warmup
        lr = schedule.peak * min(s**-0.5, s * w**-1.5) / w**-0.5
        return max(lr, schedule.floor)
    raise TypeError(f"unknown schedule {schedule!r}")


# -- gradient clipping -------------------------------------------------------

@dataclass(frozen=True)
class Clip:
    """``norm``: rescale when the global L2 norm exceeds it. ``element``: clamp each entry.

    With both set, the norm rescaling happens first.
    """

    norm: float | None = None
    element: float | None = None

    def __post_init__(self):
        for v in (self.norm, self.element):
            if v is not None and not v > 0:
                raise ValueError("clip thresholds must be > 0")


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_gradients(grads: dict, clip: Clip | None) -> dict:
    if clip is None:
        return grads
    out = grads
    if clip.norm is not None:
        g = global_norm(out)
        if g > clip.norm:
            scale = clip.norm / g
            out = {k: v * scale for k, v in out.items()}
    if clip.element is not None:
        t = clip.element
        out = {k: np.clip(v, -t, t) for k, v in out.items()}
    return out


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, betas=(0.9, 0.999), eps=1e-8) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, tuple(betas), eps)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place.

    Raises ``FloatingPointError`` before touching anything if the update is
    not finite.
    """
    b1, b2 = state.betas
    t = state.t + 1
    m_new, v_new, steps = {}, {}, {}
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        with np.errstate(invalid="ignore", over="ignore"):
            step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.all(np.isfinite(step)):
            raise FloatingPointError(f"non-finite Adam update for {k}")
        m_new[k], v_new[k], steps[k] = m, v, step
    for k, p in params.items():
        p -= steps[k]
    state.m, state.v, state.t = m_new, v_new, t


# -- loss and evaluation -------------------------------------------------------

class NonFiniteLoss(FlowError):
    def __init__(self, message, layer_index=None, row=None):
        super().__init__(message + ("" if row is None else f" (row {row})"), layer_index)
        self.row = row


def nll_loss(model: FlowModel, batch) -> tuple[float, LayerTape]:
    """Mean negative log-likelihood per dimension (nats/dim) plus the tape for backward."""
    batch = np.asarray(batch, dtype=float)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    tape = model.new_tape()
    try:
        ll = model.log_likelihood(batch, tape)
    except FlowError as err:
        row = _first_bad_row(model, batch)
        raise NonFiniteLoss(str(err), err.layer_index, row) from None
    loss = -float(ll.mean()) / model.dim
    if not math.isfinite(loss):
        row = int(np.flatnonzero(~np.isfinite(ll))[0]) if not np.all(np.isfinite(ll)) else None
        raise NonFiniteLoss("non-finite loss", None, row)
    return loss, tape


def _first_bad_row(model, batch):
    for i in range(batch.shape[0]):
        try:
            model.log_likelihood(batch[i:i + 1])
        except FlowError:
            return i
    return None


def loss_gradients(model: FlowModel, tape: LayerTape) -> dict:
    n = tape.latent.shape[0]
    return model.backward(tape, np.full(n, -1.0 / (n * model.dim)))


def evaluate(model: FlowModel, X, batch_size: int = 4096) -> float:
    """Mean NLL in nats/dim over ``X``; ``inf`` if the model cannot evaluate it.

    Touches neither parameters nor any RNG.
    """
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        return math.nan
    total = 0.0
    try:
        for i in range(0, X.shape[0], batch_size):
            total += float(model.log_likelihood(X[i:i + batch_size]).sum())
    except FlowError:
        return math.inf
    nll = -total / (X.shape[0] * model.dim)
    return nll if math.isfinite(nll) else math.inf


def to_bits_per_dim(nats_per_dim: float, bits: int | None) -> float:
    """Convert a dequantised-data NLL (density on ``[0,1)^D``) to bits/dim on the integer scale."""
    if bits is None:
        return nats_per_dim
    return nats_per_dim / math.log(2.0) + bits


# -- training loop ---------------------------------------------------------------

@dataclass
class TrainConfig:
    lr_schedule: object = field(default_factory=lambda: Constant(1e-3))
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip: Clip | None = None
    batch_size: int = 256
    max_steps: int = 1000
    eval_every: int = 100
    seed: int = 0
    init_rows: int = 512
    record_wallclock: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class TrainMetrics:
    """Evaluation records; NLLs in ``units`` (nats/dim, or bits/dim for dequantised images)."""

    records: list = field(default_factory=list)
    status: str = CONVERGED
    units: str = "nats/dim"
    diverged_at: int | None = None
    message: str = ""
    max_grad_norm: float = 0.0  # pre-clip, over every step, not just eval steps
    clipped_steps: int = 0  # steps whose pre-clip norm exceeded the norm threshold

    @property
    def final(self) -> dict:
        return self.records[-1]

    @property
    def final_val_nll(self) -> float:
        return self.final["val_nll"]

    @property
    def best(self) -> dict:
        finite = [r for r in self.records if math.isfinite(r["val_nll"])]
        return min(finite, key=lambda r: r["val_nll"]) if finite else self.final

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            for r in self.records:
                w.writerow([r["step"]] + [repr(float(r[k])) for k in METRICS_HEADER[1:]])
        return path


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    # epoch-wise shuffling; a batch never straddles two epochs
    while True:
        perm = rng.permutation(n)
        if n <= batch_size:
            yield perm
            continue
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


def train(model: FlowModel, dataset: Dataset, config: TrainConfig, on_eval=None) -> TrainMetrics:
    """Fit ``model`` to the train split by Adam on the mean NLL.

    Divergence (non-finite loss or update, or a loss stuck above ten times
    its initial magnitude for 100 steps) ends the run with status
    ``"diverged"`` instead of raising.
    """
    X_train = dataset.rows("train").astype(float)
    X_val = dataset.rows("val").astype(float)
    if X_train.shape[0] == 0:
        raise ValueError("dataset has an empty train split")
    bits = dataset.meta.get("bits") if dataset.meta.get("dequantized") else None
    metrics = TrainMetrics(units="bits/dim" if bits is not None else "nats/dim")
    rng = make_rng(config.seed, 1)
    batches = _batches(X_train.shape[0], config.batch_size, rng)

    if not model.initialized:
        init_rows = X_train[rng.permutation(X_train.shape[0])[: config.init_rows]]
        model.initialize(init_rows)

    params = model.parameters()
    state = AdamState.zeros_like(params, config.betas, config.eps)
    t0 = time.perf_counter()

    def record(step, grad_norm, lr):
        rec = {
            "step": step,
            "train_nll": to_bits_per_dim(evaluate(model, X_train), bits),
            "val_nll": to_bits_per_dim(evaluate(model, X_val), bits),
            "grad_norm": grad_norm,
            "lr": lr,
            "seconds": time.perf_counter() - t0 if config.record_wallclock else 0.0,
        }
        metrics.records.append(rec)
        if on_eval is not None:
            on_eval(rec)
        return rec

    record(0, math.nan, lr_at(config.lr_schedule, 0))
    initial = None
    above = 0
    grad_norm = math.nan
    lr = lr_at(config.lr_schedule, 0)
    for step in range(1, config.max_steps + 1):
        lr = lr_at(config.lr_schedule, step - 1)
        batch = X_train[next(batches)]
        try:
            loss, tape = nll_loss(model, batch)
            grads = loss_gradients(model, tape)
            grad_norm = global_norm(grads)
            if not math.isfinite(grad_norm):
                raise FloatingPointError("non-finite gradient")
            metrics.max_grad_norm = max(metrics.max_grad_norm, grad_norm)
            if config.clip is not None and config.clip.norm is not None and grad_norm > config.clip.norm:
                metrics.clipped_steps += 1
            adam_step(params, clip_gradients(grads, config.clip), state, lr)
            model.mark_updated()
        except (FlowError, FloatingPointError) as err:
            metrics.status, metrics.diverged_at, metrics.message = DIVERGED, step, str(err)
            log.info("diverged at step %d: %s", step, err)
            break
        if initial is None:
            initial = loss
        above = above + 1 if loss > DIVERGENCE_FACTOR * abs(initial) else 0
        if above >= DIVERGENCE_PATIENCE:
            metrics.status, metrics.diverged_at = DIVERGED, step
            metrics.message = f"loss above {DIVERGENCE_FACTOR}x initial for {DIVERGENCE_PATIENCE} steps"
            log.info("diverged at step %d: %s", step, metrics.message)
            break
        if step % config.eval_every == 0 or step == config.max_steps:
            rec = record(step, grad_norm, lr)
            log.debug("step %d train %.4f val %.4f", step, rec["train_nll"], rec["val_nll"])
    if metrics.status == DIVERGED and metrics.records[-1]["step"] != metrics.diverged_at:
        record(metrics.diverged_at, grad_norm, lr)
    return metrics
