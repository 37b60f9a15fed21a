"""Minimal differentiable kernel for the chroma network.

Tensors are plain numpy arrays in C order (outermost extent varies slowest).
Every op computes in float64 whatever the storage dtype of its operands, and
accepts an arbitrary number of leading batch axes in front of the documented
per-sample shape.

Each op is a small class: ``forward`` records what ``backward`` needs and
``backward`` returns a :class:`LayerGrad` keyed by the names in ``arg_names``.
Functional wrappers (``conv1x1_forward`` and friends) cover the forward-only
use.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import MissingContextError, NonFiniteError, ShapeError

F64 = np.float64


def as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=F64)


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


@dataclass
class LayerGrad:
    """Gradients of one op, keyed by argument name.

    ``input`` is the gradient for the first (data) argument; ``params`` holds
    the remaining ones.
    """

    grads: dict[str, np.ndarray]
    input_name: str = "input"

    @property
    def input(self) -> np.ndarray:
        return self.grads[self.input_name]

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.grads.items() if k != self.input_name}


class Op:
    arg_names: tuple[str, ...] = ("input",)

    def __init__(self) -> None:
        self._ctx: tuple | None = None

    def _context(self) -> tuple:
        if self._ctx is None:
            raise MissingContextError(f"{type(self).__name__}.backward called without a forward pass")
        return self._ctx

    def _grad(self, *values: np.ndarray) -> LayerGrad:
        return LayerGrad({k: v for k, v in zip(self.arg_names, values) if v is not None}, self.arg_names[0])

    def _check_upstream(self, dy, out_shape) -> np.ndarray:
        dy = as_f64(dy)
        if dy.shape != tuple(out_shape):
            raise ShapeError(f"upstream gradient shape {dy.shape} != forward output shape {tuple(out_shape)}")
        return dy


def _batch_sum(g: np.ndarray, ndim: int) -> np.ndarray:
    """Sum away leading batch axes so ``g`` has ``ndim`` dims."""
    extra = g.ndim - ndim
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


class Conv1x1(Op):
    """Pointwise convolution over a ``C_in x L`` map."""

    arg_names = ("input", "weight", "bias")

    def forward(self, x, weight, bias=None) -> np.ndarray:
        x, w = as_f64(x), as_f64(weight)
        if w.ndim != 2 or x.ndim < 2 or w.shape[1] != x.shape[-2]:
            raise ShapeError(f"conv1x1: weight shape {w.shape} does not match input shape {x.shape}")
        out = np.matmul(w, x)
        if bias is not None:
            b = as_f64(bias)
            if b.shape != (w.shape[0],):
                raise ShapeError(f"conv1x1: bias shape {b.shape} does not match weight shape {w.shape}")
            out = out + b[:, None]
        self._ctx = (x, w, bias is not None, out.shape)
        return out

    def backward(self, dy) -> LayerGrad:
        x, w, has_bias, out_shape = self._context()
        dy = self._check_upstream(dy, out_shape)
        dx = np.matmul(w.T, dy)
        dw = _batch_sum(np.matmul(dy, np.swapaxes(x, -1, -2)), 2)
        db = _batch_sum(dy.sum(axis=-1), 1) if has_bias else None
        return self._grad(dx, dw, db)


def _windows3(x: np.ndarray) -> np.ndarray:
    """Zero-pad the last two axes by one and view as 3x3 windows.

    ``(..., C, H, W)`` -> ``(..., C, H, W, 3, 3)`` where window ``[y, x, ky, kx]``
    reads input sample ``(y + ky - 1, x + kx - 1)``.
    """
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    return np.lib.stride_tricks.sliding_window_view(np.pad(x, pad), (3, 3), axis=(-2, -1))


class Conv3x3Same(Op):
    """3x3 stride-1 cross-correlation with zero padding of one sample."""

    arg_names = ("input", "weight", "bias")

    def forward(self, x, weight, bias) -> np.ndarray:
        x, w, b = as_f64(x), as_f64(weight), as_f64(bias)
        if x.ndim < 3 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[-3]:
            raise ShapeError(f"conv3x3: weight shape {w.shape} does not match input shape {x.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv3x3: bias shape {b.shape} does not match weight shape {w.shape}")
        win = _windows3(x)
        # (lead..., H, W, C_out)
        out = np.tensordot(win, w, axes=([-5, -2, -1], [1, 2, 3])) + b
        out = np.moveaxis(out, -1, -3)
        self._ctx = (win, w, out.shape)
        return out

    def backward(self, dy) -> LayerGrad:
        win, w, out_shape = self._context()
        dy = self._check_upstream(dy, out_shape)
        lead = tuple(range(dy.ndim - 3))
        # dW[o, c, ky, kx] = sum dy[..., o, y, x] * win[..., c, y, x, ky, kx]
        dw = np.tensordot(dy, win, axes=(lead + (dy.ndim - 2, dy.ndim - 1), lead + (win.ndim - 4, win.ndim - 3)))
        db = dy.sum(axis=lead + (dy.ndim - 2, dy.ndim - 1))
        # input gradient: correlation of dy with the spatially flipped kernel
        dwin = _windows3(dy)
        dx = np.tensordot(dwin, w[:, :, ::-1, ::-1], axes=([-5, -2, -1], [0, 2, 3]))
        dx = np.moveaxis(dx, -1, -3)
        return self._grad(dx, dw, db)


class ReLU(Op):
    def forward(self, x) -> np.ndarray:
        x = as_f64(x)
        mask = x > 0
        self._ctx = (mask,)
        return np.where(mask, x, 0.0)

    def backward(self, dy) -> LayerGrad:
        (mask,) = self._context()
        dy = self._check_upstream(dy, mask.shape)
        # subgradient at exactly 0 is 0
        return self._grad(np.where(mask, dy, 0.0))


class SoftmaxRows(Op):
    """Softmax over the last axis of ``logits / T``."""

    arg_names = ("logits",)

    def forward(self, logits, temperature: float) -> np.ndarray:
        if not temperature > 0:
            raise ValueError(f"softmax temperature must be > 0, got {temperature}")
        z = as_f64(logits) / temperature
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
        self._ctx = (y, float(temperature))
        return y

    def backward(self, dy) -> LayerGrad:
        y, t = self._context()
        dy = self._check_upstream(dy, y.shape)
        dz = y * (dy - (dy * y).sum(axis=-1, keepdims=True))
        return self._grad(dz / t)


class MatMul(Op):
    arg_names = ("a", "b")

    def forward(self, a, b) -> np.ndarray:
        a, b = as_f64(a), as_f64(b)
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner extents disagree for shapes {a.shape} and {b.shape}")
        out = np.matmul(a, b)
        self._ctx = (a, b, out.shape)
        return out

    def backward(self, dy) -> LayerGrad:
        a, b, out_shape = self._context()
        dy = self._check_upstream(dy, out_shape)
        da = np.matmul(dy, np.swapaxes(b, -1, -2))
        db = np.matmul(np.swapaxes(a, -1, -2), dy)
        da = _batch_sum(da, a.ndim) if da.ndim > a.ndim else da
        db = _batch_sum(db, b.ndim) if db.ndim > b.ndim else db
        return self._grad(da, db)


class Mul(Op):
    arg_names = ("a", "b")

    def forward(self, a, b) -> np.ndarray:
        a, b = as_f64(a), as_f64(b)
        if a.shape != b.shape:
            raise ShapeError(f"elementwise_mul: shapes differ: {a.shape} vs {b.shape}")
        self._ctx = (a, b)
        return a * b

    def backward(self, dy) -> LayerGrad:
        a, b = self._context()
        dy = self._check_upstream(dy, a.shape)
        return self._grad(dy * b, dy * a)


def conv1x1_forward(x, weight, bias=None) -> np.ndarray:
    return check_finite(Conv1x1().forward(x, weight, bias), "conv1x1 output")


def conv3x3_same_forward(x, weight, bias) -> np.ndarray:
    return check_finite(Conv3x3Same().forward(x, weight, bias), "conv3x3 output")


def relu(x) -> np.ndarray:
    return ReLU().forward(x)


def softmax_rows_with_temperature(logits, temperature: float) -> np.ndarray:
    return SoftmaxRows().forward(logits, temperature)


def matmul(a, b) -> np.ndarray:
    return check_finite(MatMul().forward(a, b), "matmul output")


def elementwise_mul(a, b) -> np.ndarray:
    return check_finite(Mul().forward(a, b), "elementwise product")


def backward(op: Op, upstream) -> LayerGrad:
    return op.backward(upstream)


def row_entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row of a row-stochastic matrix."""
    p = as_f64(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


# --------------------------------------------------------------------------
# finite-difference gradient verification


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst: tuple[str, tuple[int, ...]] | None
    n_checked: int
    per_array: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        return f"max rel err {self.max_rel_error:.3e} over {self.n_checked} coords (worst {self.worst})"


def relative_error(ga: float, gn: float) -> float:
    return abs(ga - gn) / max(abs(ga), abs(gn), 1e-8)


def _pick_coords(size: int, budget: int, rng: np.random.Generator) -> np.ndarray:
    if size <= budget:
        return np.arange(size)
    return np.sort(rng.choice(size, size=budget, replace=False))


def finite_difference_check(
    loss: Callable[[dict[str, np.ndarray]], float],
    arrays: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    seed: int = 0,
    eps: float = 1e-6,
    max_coords: int = 10_000,
) -> GradcheckReport:
    """Compare ``analytic`` gradients of ``loss`` with central differences.

    ``loss`` may return a scalar or the array of per-element terms whose sum
    is the loss. With terms, the two perturbed evaluations are differenced
    element by element before summing, so terms the coordinate does not
    touch cancel exactly instead of leaving rounding noise of the size of
    the whole loss. If the arrays hold more than ``max_coords`` coordinates in total, a seeded
    subsample is drawn with the budget split evenly over the arrays so every
    array is exercised.
    """
    rng = np.random.default_rng(seed)
    work = {k: as_f64(v).copy() for k, v in arrays.items()}
    total = sum(v.size for v in work.values())
    per_budget = max(1, max_coords // max(1, len(work))) if total > max_coords else None

    worst, worst_at, n = 0.0, None, 0
    per_array: dict[str, float] = {}
    for name, arr in work.items():
        g = as_f64(analytic[name])
        if g.shape != arr.shape:
            raise ShapeError(f"analytic gradient for {name!r} has shape {g.shape}, expected {arr.shape}")
        flat = arr.reshape(-1)
        coords = _pick_coords(flat.size, per_budget or flat.size, rng)
        arr_worst = 0.0
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            up = loss(work)
            flat[i] = old - eps
            down = loss(work)
            flat[i] = old
            gn = float(np.sum(np.subtract(up, down))) / (2 * eps)
            err = relative_error(float(g.reshape(-1)[i]), gn)
            arr_worst = max(arr_worst, err)
            if err > worst:
                worst, worst_at = err, (name, np.unravel_index(i, arr.shape))
        per_array[name] = arr_worst
        n += len(coords)
    return GradcheckReport(worst, worst_at, n, per_array)


def gradcheck(
    op: Op,
    args: Mapping[str, np.ndarray],
    seed: int = 0,
    eps: float = 1e-6,
    max_coords: int = 10_000,
    **kwargs,
) -> GradcheckReport:
    """Check ``op``'s backward against central differences.

    The op output is reduced to a scalar with a seeded random projection so
    every output coordinate contributes. ``kwargs`` are forwarded to
    ``forward`` as non-differentiable settings (e.g. ``temperature``).
    """
    rng = np.random.default_rng(seed)
    names = [n for n in op.arg_names if n in args]

    def run(arrays):
        return op.forward(*(arrays[n] for n in names), **kwargs)

    base = {n: as_f64(args[n]) for n in names}
    out = run(base)
    proj = rng.standard_normal(out.shape)
    grads = op.backward(proj).grads
    analytic = {n: grads[n] for n in names}

    def loss(arrays):
        return run(arrays) * proj

    return finite_difference_check(loss, base, analytic, seed=seed + 1, eps=eps, max_coords=max_coords)
