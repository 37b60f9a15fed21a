"""MSE training with Adam, validation and checkpoints."""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .data import PatchSample, stack_batch
from .errors import FormatError, NonFiniteError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 200_000
    val_interval: int = 1000
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.val_interval < 1:
            raise ValueError(f"validation interval must be >= 1, got {self.val_interval}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, w: M.ModelWeights) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in w.params.items()},
            {k: np.zeros_like(p) for k, p in w.params.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.t)


def mse_loss(pred, target_cb, target_cr=None) -> float:
    """Mean squared error over both chroma channels.

    ``target_cr`` may be omitted when ``target_cb`` already stacks both
    channels in the prediction's layout.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target_cb, dtype=np.float64) if target_cr is None else np.stack([target_cb, target_cr]).astype(np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return float(np.mean((pred - target) ** 2))


def mse_grad(pred, target) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    return 2.0 * (pred - np.asarray(target, dtype=np.float64)) / pred.size


def adam_step(w: M.ModelWeights, grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, in place, in parameter declaration order.

    Moments are kept in float32 like the weights so a checkpoint captures the
    complete optimizer state.
    """
    for name in w.params:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, p in w.params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)
        step = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        w.params[name] = (p - step).astype(np.float32)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample indices for ``step`` (0-based) from a stream of seeded epochs.

    Each epoch is a permutation drawn from ``(seed, epoch)``, so any step can
    be reproduced without replaying the ones before it.
    """
    start = step * batch_size
    out = []
    pos = start
    while len(out) < batch_size:
        epoch, off = divmod(pos, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(out), n - off)
        out.extend(perm[off:off + take])
        pos += take
    return np.array(out)


def split_train_val(samples: Sequence[PatchSample], fraction: float, seed: int):
    """Disjoint train/validation split by sample index."""
    n = len(samples)
    order = np.random.default_rng([seed, 0x5A11]).permutation(n)
    n_val = int(round(n * fraction)) if n > 1 else 0
    n_val = min(max(n_val, 1 if n > 1 and fraction > 0 else 0), n - 1)
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    return [samples[i] for i in train_idx], [samples[i] for i in val_idx]


def train_step(w: M.ModelWeights, state: AdamState, batch, cfg: TrainConfig) -> float:
    """One Adam step on a batch given as samples or as stacked arrays."""
    luma, boundary, target = batch if isinstance(batch, tuple) else stack_batch(batch)
    net = M.ChromaNet(w)
    pred = net.forward(luma, boundary)
    loss = mse_loss(pred, target)
    grads = net.backward(mse_grad(pred, target))
    adam_step(w, grads, state, cfg)
    return loss


def evaluate_mse(w: M.ModelWeights, samples: Sequence[PatchSample], chunk: int = 512) -> float:
    total, count = 0.0, 0
    for i in range(0, len(samples), chunk):
        luma, boundary, target = stack_batch(samples[i:i + chunk])
        pred = M.ChromaNet(w).forward(luma, boundary)
        total += float(np.sum((pred - target) ** 2))
        count += target.size
    return total / count


@dataclass
class TrainResult:
    weights: M.ModelWeights
    state: AdamState
    best_weights: M.ModelWeights
    best_state: AdamState
    best_val: float
    curve: list[tuple[int, float, float]] = field(default_factory=list)
    final_train_mse: float = float("nan")


def train(
    w: M.ModelWeights,
    train_samples: Sequence[PatchSample],
    cfg: TrainConfig,
    val_samples: Sequence[PatchSample] | None = None,
    state: AdamState | None = None,
    checkpoint: str | Path | None = None,
    curve_csv: str | Path | None = None,
) -> TrainResult:
    """Train ``w`` (a private copy is made) until ``cfg.max_steps`` total steps.

    Without ``val_samples`` a disjoint split is carved out of
    ``train_samples``. A ``state`` from a checkpoint resumes at ``state.t``.
    The best-by-validation weights are written to ``checkpoint`` and the last
    ones next to it with a ``.last`` suffix.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    n = w.config.n
    if val_samples is None:
        train_samples, val_samples = split_train_val(list(train_samples), cfg.val_fraction, cfg.seed)
    for s in list(train_samples) + list(val_samples):
        if s.n != n:
            raise ShapeError(f"sample block size {s.n} does not match model block size {n}")

    w = w.copy()
    state = AdamState.zeros_like(w) if state is None else state.copy()
    best_w, best_state, best_val = w.copy(), state.copy(), float("inf")
    curve: list[tuple[int, float, float]] = []
    window: list[float] = []

    arrays = stack_batch(train_samples)
    while state.t < cfg.max_steps:
        idx = batch_indices(len(train_samples), cfg.batch_size, cfg.seed, state.t)
        window.append(train_step(w, state, tuple(a[idx] for a in arrays), cfg))
        if state.t % cfg.val_interval == 0 or state.t == cfg.max_steps:
            val = evaluate_mse(w, val_samples) if val_samples else float("nan")
            curve.append((state.t, float(np.mean(window)), val))
            window = []
            log.info("step %d train_mse %.6g val_mse %.6g", state.t, curve[-1][1], val)
            if val_samples and val < best_val:
                best_w, best_state, best_val = w.copy(), state.copy(), val

    if not val_samples:
        best_w, best_state = w.copy(), state.copy()
    result = TrainResult(w, state, best_w, best_state, best_val, curve, evaluate_mse(w, train_samples))
    if checkpoint is not None:
        save_checkpoint(checkpoint, best_w, best_state)
        save_checkpoint(str(checkpoint) + ".last", w, state)
    if curve_csv is not None:
        write_curve(curve_csv, curve)
    return result


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["step", "train_mse", "val_mse"])
        for step, tr, va in curve:
            out.writerow([step, f"{tr:.9g}", "" if np.isnan(va) else f"{va:.9g}"])


# --------------------------------------------------------------------------
# checkpoints: weight container followed by an "ACPO" optimizer appendix

OPT_MAGIC = b"ACPO"
OPT_VERSION = 1


def save_checkpoint(path, w: M.ModelWeights, state: AdamState) -> None:
    buf = io.BytesIO()
    M.write_weights(w, buf)
    buf.write(OPT_MAGIC)
    buf.write(struct.pack("<IQ", OPT_VERSION, state.t))
    for moments in (state.m, state.v):
        for name in w.params:
            buf.write(np.ascontiguousarray(moments[name], dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[M.ModelWeights, AdamState | None]:
    """Weights plus optimizer state; the state is ``None`` for a bare weight file."""
    with open(path, "rb") as f:
        w = M.read_weights(f)
        magic = f.read(4)
        if not magic:
            return w, None
        if magic != OPT_MAGIC:
            raise FormatError(f"bad optimizer appendix magic: expected {OPT_MAGIC!r}, found {magic!r}")
        head = f.read(12)
        if len(head) != 12:
            raise FormatError("truncated optimizer appendix header")
        version, t = struct.unpack("<IQ", head)
        if version != OPT_VERSION:
            raise FormatError(f"unsupported optimizer appendix version {version}")
        moments = []
        for which in ("m", "v"):
            d = {}
            for name, p in w.params.items():
                raw = f.read(4 * p.size)
                if len(raw) != 4 * p.size:
                    raise FormatError(f"truncated optimizer appendix at {which}[{name}]")
                d[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(p.shape)
            moments.append(d)
    return w, AdamState(moments[0], moments[1], t)
