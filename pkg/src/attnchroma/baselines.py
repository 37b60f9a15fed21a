"""Classical chroma prediction modes.

All functions take reference arrays in the ``2N + 1`` layout used throughout
the package (left column bottom-to-top, corner, top row left-to-right) and
return ``(2, N, N)`` Cb/Cr predictions clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class LinearModelParams:
    alpha: float
    beta: float


def split_reference(ref) -> tuple[np.ndarray, float, np.ndarray]:
    """``(left top-to-bottom, corner, top left-to-right)`` of one reference array."""
    ref = np.asarray(ref, dtype=np.float64)
    if ref.ndim != 1 or ref.size % 2 != 1 or ref.size < 3:
        raise ShapeError(f"reference array must be 1-D with odd length 2N+1, got shape {ref.shape}")
    n = ref.size // 2
    return ref[:n][::-1], float(ref[n]), ref[n + 1:]


def _fit_one(by: np.ndarray, bc: np.ndarray) -> LinearModelParams:
    my, mc = by.mean(), bc.mean()
    var = np.mean((by - my) ** 2)
    if var < 1e-12:
        return LinearModelParams(0.0, float(mc))
    alpha = np.mean((by - my) * (bc - mc)) / var
    return LinearModelParams(float(alpha), float(mc - alpha * my))


def cclm_fit(boundary) -> tuple[LinearModelParams, LinearModelParams]:
    """Least-squares chroma-from-luma fit over all boundary pairs."""
    s = np.asarray(boundary, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != 3 or s.shape[1] < 2:
        raise ShapeError(f"boundary volume must be (3, b) with b >= 2, got {s.shape}")
    return _fit_one(s[0], s[1]), _fit_one(s[0], s[2])


def cclm_predict(luma, params: tuple[LinearModelParams, LinearModelParams]) -> np.ndarray:
    x = np.asarray(luma, dtype=np.float64)
    x = x.reshape(x.shape[-2:])
    pred = np.stack([p.alpha * x + p.beta for p in params])
    return np.clip(pred, 0.0, 1.0)


def _chroma_refs(boundary) -> list[np.ndarray]:
    s = np.asarray(boundary, dtype=np.float64)
    if s.ndim == 2 and s.shape[0] == 3:
        return [s[1], s[2]]
    if s.ndim == 2 and s.shape[0] == 2:
        return [s[0], s[1]]
    raise ShapeError(f"expected a (3, b) boundary volume or (2, b) chroma references, got {s.shape}")


def _per_channel(boundary, fn) -> np.ndarray:
    return np.clip(np.stack([fn(*split_reference(r)) for r in _chroma_refs(boundary)]), 0.0, 1.0)


def _dc(left, corner, top):
    n = left.size
    return np.full((n, n), np.concatenate([left, top]).mean())


def _horizontal(left, corner, top):
    return np.repeat(left[:, None], left.size, axis=1)


def _vertical(left, corner, top):
    return np.repeat(top[None, :], top.size, axis=0)


def _planar(left, corner, top):
    # Opposite edges are extrapolated along the corner-to-last-sample slope of
    # the adjacent reference line; interpolation weights use the true distance
    # N + 1 between the reference line and that edge. Planes are reproduced
    # exactly.
    n = left.size
    gx = (top[-1] - corner) / n
    gy = (left[-1] - corner) / n
    right = left + (n + 1) * gx  # column x = N, rows 0..N-1
    bottom = top + (n + 1) * gy  # row y = N, columns 0..N-1
    wx = (np.arange(n) + 1.0) / (n + 1)
    horiz = left[:, None] * (1.0 - wx[None, :]) + right[:, None] * wx[None, :]
    vert = top[None, :] * (1.0 - wx[:, None]) + bottom[None, :] * wx[:, None]
    return 0.5 * (horiz + vert)


def dc_predict(boundary) -> np.ndarray:
    return _per_channel(boundary, _dc)


def horizontal_predict(boundary) -> np.ndarray:
    return _per_channel(boundary, _horizontal)


def vertical_predict(boundary) -> np.ndarray:
    return _per_channel(boundary, _vertical)


def planar_predict(boundary) -> np.ndarray:
    return _per_channel(boundary, _planar)


def cclm_mode(sample) -> np.ndarray:
    return cclm_predict(sample.luma, cclm_fit(sample.boundary))


CLASSICAL_MODES = {
    "cclm": cclm_mode,
    "dc": lambda s: dc_predict(s.boundary),
    "horizontal": lambda s: horizontal_predict(s.boundary),
    "vertical": lambda s: vertical_predict(s.boundary),
    "planar": lambda s: planar_predict(s.boundary),
}
