"""Attention-based cross-component chroma prediction network.

Three branches feed the prediction:

* boundary branch: stacked 1x1 convs + ReLU over the ``3 x b`` reference volume
  (luma, Cb, Cr rows; ``b = 2N + 1``);
* luma branch: stacked same-padded 3x3 convs + ReLU over the ``N x N``
  downsampled luma block;
* attention fusion: both feature sets are projected to width ``h``, their
  product ``G^T F`` is turned into an ``N^2 x b`` row-stochastic map with a
  temperature softmax, the boundary features are pooled through that map and
  gated by a 1x1 transform of the luma features.

A head (3x3 conv + ReLU, then 1x1 to two channels) maps the fused features to
Cb and Cr. ``head_conv=False`` drops the 3x3 stage.

Spatial positions are flattened row-major: block position ``j = r * N + c``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import nn
from .errors import FormatError, MissingContextError, ShapeError

BLOCK_SIZES = (4, 8, 16)

_PRESET_DIMS = {
    # N: (boundary dims, luma dims, attention out dim D, head dim E)
    4: ((16, 32), (32, 32), 32, 32),
    8: ((32, 64), (64, 64), 64, 64),
    16: ((64, 96), (96, 96), 96, 96),
}


@dataclass(frozen=True)
class BlockSizeConfig:
    n: int
    boundary_dims: tuple[int, ...]
    luma_dims: tuple[int, ...]
    h: int = 16
    attn_out_dim: int = 32
    head_dim: int = 32
    temperature: float = 0.5
    head_conv: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"block size must be positive, got {self.n}")
        if not self.boundary_dims or not self.luma_dims:
            raise ValueError("boundary and luma branches need at least one layer each")
        if self.attn_out_dim != self.boundary_dims[-1]:
            raise ValueError(
                f"attention output width {self.attn_out_dim} must equal last boundary width {self.boundary_dims[-1]}"
            )
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")

    @property
    def b(self) -> int:
        return 2 * self.n + 1

    @classmethod
    def preset(cls, n: int, head_conv: bool = True) -> "BlockSizeConfig":
        if n not in _PRESET_DIMS:
            raise ValueError(f"no preset for block size {n}; allowed sizes are {BLOCK_SIZES}")
        bdims, ldims, d, e = _PRESET_DIMS[n]
        return cls(n, bdims, ldims, h=16, attn_out_dim=d, head_dim=e, temperature=0.5, head_conv=head_conv)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes in declaration (serialization) order."""
        shapes: dict[str, tuple[int, ...]] = {}
        prev = 3
        for i, d in enumerate(self.boundary_dims):
            shapes[f"boundary.{i}.weight"] = (d, prev)
            shapes[f"boundary.{i}.bias"] = (d,)
            prev = d
        prev = 1
        for j, c in enumerate(self.luma_dims):
            shapes[f"luma.{j}.weight"] = (c, prev, 3, 3)
            shapes[f"luma.{j}.bias"] = (c,)
            prev = c
        d_last, c_last = self.boundary_dims[-1], self.luma_dims[-1]
        shapes["attn.w_f"] = (self.h, d_last)
        shapes["attn.w_g"] = (self.h, c_last)
        shapes["attn.w_x"] = (self.attn_out_dim, c_last)
        head_in = self.attn_out_dim
        if self.head_conv:
            shapes["head.conv.weight"] = (self.head_dim, head_in, 3, 3)
            shapes["head.conv.bias"] = (self.head_dim,)
            head_in = self.head_dim
        shapes["head.out.weight"] = (2, head_in)
        shapes["head.out.bias"] = (2,)
        return shapes


@dataclass
class ModelWeights:
    config: BlockSizeConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.config.param_shapes()
        if list(self.params) != list(expected):
            raise ShapeError(f"parameter names {list(self.params)} do not match config {list(expected)}")
        for name, shape in expected.items():
            arr = np.asarray(self.params[name], dtype=np.float32)
            if arr.shape != shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape}, config requires {shape}")
            nn.check_finite(arr, f"parameter {name}")
            self.params[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def count(self) -> int:
        return sum(v.size for v in self.params.values())


def count_parameters(config: BlockSizeConfig) -> int:
    return sum(int(np.prod(s)) for s in config.param_shapes().values())


def init_weights(config: BlockSizeConfig, seed: int = 0) -> ModelWeights:
    """He-uniform (fan-in) weights and zero biases, drawn in declaration order."""
    if config.n not in BLOCK_SIZES:
        raise ValueError(f"block size {config.n} not supported; allowed sizes are {BLOCK_SIZES}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return ModelWeights(config, params)


@dataclass
class AttentionMap:
    logits: np.ndarray  # M, (..., N^2, b)
    probs: np.ndarray  # A, (..., N^2, b)
    temperature: float


# --------------------------------------------------------------------------
# network


class ChromaNet:
    """Forward/backward over a batch of samples with fixed weights.

    Inputs are ``luma`` of shape ``(B, 1, N, N)`` (or ``(B, N, N)``) and
    ``boundary`` of shape ``(B, 3, b)``. ``forward`` returns the raw
    (unclamped) ``(B, 2, N, N)`` prediction; ``backward`` returns gradients
    for every parameter, plus ``"luma"`` and ``"boundary"``.
    """

    def __init__(self, weights: ModelWeights):
        self.w = weights
        self.cfg = weights.config
        self._ops: dict | None = None
        self.attention: AttentionMap | None = None

    def _check_inputs(self, luma, boundary):
        n, b = self.cfg.n, self.cfg.b
        luma = nn.as_f64(luma)
        if luma.ndim == 3:
            luma = luma[:, None]
        boundary = nn.as_f64(boundary)
        if luma.ndim != 4 or luma.shape[1:] != (1, n, n):
            raise ShapeError(f"luma batch shape {luma.shape} does not match block size {n} (want (B, 1, {n}, {n}))")
        if boundary.shape != (luma.shape[0], 3, b):
            raise ShapeError(f"boundary batch shape {boundary.shape} does not match (B, 3, {b})")
        return luma, boundary

    # the four stages are separate so tests and the ablation can reach them

    def boundary_branch(self, s):
        ops = []
        for i in range(len(self.cfg.boundary_dims)):
            conv, act = nn.Conv1x1(), nn.ReLU()
            s = act.forward(conv.forward(s, self.w[f"boundary.{i}.weight"], self.w[f"boundary.{i}.bias"]))
            ops.append((conv, act))
        return s, ops

    def luma_branch(self, x):
        ops = []
        for j in range(len(self.cfg.luma_dims)):
            conv, act = nn.Conv3x3Same(), nn.ReLU()
            x = act.forward(conv.forward(x, self.w[f"luma.{j}.weight"], self.w[f"luma.{j}.bias"]))
            ops.append((conv, act))
        *lead, c, n, _ = x.shape
        return x.reshape(*lead, c, n * n), ops

    def attention_block(self, s_feat, x_feat, temperature=None):
        t = self.cfg.temperature if temperature is None else temperature
        pf, pg, mm, sm = nn.Conv1x1(), nn.Conv1x1(), nn.MatMul(), nn.SoftmaxRows()
        f = pf.forward(s_feat, self.w["attn.w_f"])  # (B, h, b)
        g = pg.forward(x_feat, self.w["attn.w_g"])  # (B, h, N^2)
        m = mm.forward(np.swapaxes(g, -1, -2), f)  # (B, N^2, b)
        a = sm.forward(m, t)
        return AttentionMap(m, a, t), (pf, pg, mm, sm)

    def fuse_block(self, s_feat, a, x_feat):
        pool, px, gate = nn.MatMul(), nn.Conv1x1(), nn.Mul()
        weighted = pool.forward(s_feat, np.swapaxes(a, -1, -2))  # (B, D, N^2)
        x_bar = px.forward(x_feat, self.w["attn.w_x"])  # (B, D, N^2)
        return gate.forward(x_bar, weighted), (pool, px, gate)

    def head(self, o):
        n = self.cfg.n
        ops = {}
        z = o
        if self.cfg.head_conv:
            conv, act = nn.Conv3x3Same(), nn.ReLU()
            z = z.reshape(*z.shape[:-1], n, n)
            z = act.forward(conv.forward(z, self.w["head.conv.weight"], self.w["head.conv.bias"]))
            z = z.reshape(*z.shape[:-2], n * n)
            ops["conv"] = (conv, act)
        out = nn.Conv1x1()
        y = out.forward(z, self.w["head.out.weight"], self.w["head.out.bias"])
        ops["out"] = out
        return y.reshape(*y.shape[:-1], n, n), ops

    def forward(self, luma, boundary, temperature=None) -> np.ndarray:
        luma, boundary = self._check_inputs(luma, boundary)
        s_feat, b_ops = self.boundary_branch(boundary)
        x_feat, l_ops = self.luma_branch(luma)
        attn, a_ops = self.attention_block(s_feat, x_feat, temperature)
        o, f_ops = self.fuse_block(s_feat, attn.probs, x_feat)
        y, h_ops = self.head(o)
        nn.check_finite(y, "model prediction")
        self.attention = attn
        self._ops = {"boundary": b_ops, "luma": l_ops, "attn": a_ops, "fuse": f_ops, "head": h_ops, "shape": y.shape}
        return y

    def backward(self, dy) -> dict[str, np.ndarray]:
        if self._ops is None:
            raise MissingContextError("ChromaNet.backward called before forward")
        ops = self._ops
        n = self.cfg.n
        dy = nn.as_f64(dy)
        if dy.shape != ops["shape"]:
            raise ShapeError(f"upstream gradient shape {dy.shape} != prediction shape {ops['shape']}")
        grads: dict[str, np.ndarray] = {}

        # head
        h_ops = ops["head"]
        g = h_ops["out"].backward(dy.reshape(*dy.shape[:-2], n * n))
        grads["head.out.weight"], grads["head.out.bias"] = g.grads["weight"], g.grads["bias"]
        d = g.input
        if "conv" in h_ops:
            conv, act = h_ops["conv"]
            d = act.backward(d.reshape(*d.shape[:-1], n, n)).input
            g = conv.backward(d)
            grads["head.conv.weight"], grads["head.conv.bias"] = g.grads["weight"], g.grads["bias"]
            d = g.input.reshape(*g.input.shape[:-2], n * n)
        d_o = d

        # fusion
        pool, px, gate = ops["fuse"]
        g = gate.backward(d_o)
        d_xbar, d_weighted = g.grads["a"], g.grads["b"]
        g = px.backward(d_xbar)
        grads["attn.w_x"] = g.grads["weight"]
        d_xfeat = g.input
        g = pool.backward(d_weighted)
        d_sfeat = g.grads["a"]
        d_a = np.swapaxes(g.grads["b"], -1, -2)

        # attention
        pf, pg, mm, sm = ops["attn"]
        d_m = sm.backward(d_a).input
        g = mm.backward(d_m)
        d_g = np.swapaxes(g.grads["a"], -1, -2)
        d_f = g.grads["b"]
        g = pf.backward(d_f)
        grads["attn.w_f"] = g.grads["weight"]
        d_sfeat = d_sfeat + g.input
        g = pg.backward(d_g)
        grads["attn.w_g"] = g.grads["weight"]
        d_xfeat = d_xfeat + g.input

        # luma branch
        d = d_xfeat.reshape(*d_xfeat.shape[:-1], n, n)
        for j in reversed(range(len(ops["luma"]))):
            conv, act = ops["luma"][j]
            g = conv.backward(act.backward(d).input)
            grads[f"luma.{j}.weight"], grads[f"luma.{j}.bias"] = g.grads["weight"], g.grads["bias"]
            d = g.input
        grads["luma"] = d

        # boundary branch
        d = d_sfeat
        for i in reversed(range(len(ops["boundary"]))):
            conv, act = ops["boundary"][i]
            g = conv.backward(act.backward(d).input)
            grads[f"boundary.{i}.weight"], grads[f"boundary.{i}.bias"] = g.grads["weight"], g.grads["bias"]
            d = g.input
        grads["boundary"] = d

        order = list(self.cfg.param_shapes()) + ["luma", "boundary"]
        return {k: grads[k] for k in order}


# --------------------------------------------------------------------------
# per-sample functional surface


def boundary_branch_forward(s, w: ModelWeights) -> np.ndarray:
    s = nn.as_f64(s)
    if s.shape[-2:] != (3, w.config.b):
        raise ShapeError(f"boundary volume shape {s.shape} does not match (3, {w.config.b})")
    return ChromaNet(w).boundary_branch(s)[0]


def luma_branch_forward(x, w: ModelWeights) -> np.ndarray:
    x = nn.as_f64(x)
    n = w.config.n
    if x.ndim == 2:
        x = x[None]
    if x.shape[-3:] != (1, n, n):
        raise ShapeError(f"luma block shape {x.shape} does not match (1, {n}, {n})")
    return ChromaNet(w).luma_branch(x)[0]


def attention_forward(s_feat, x_feat, w: ModelWeights, temperature: float | None = None) -> AttentionMap:
    t = w.config.temperature if temperature is None else temperature
    if not t > 0:
        raise ValueError(f"temperature must be > 0, got {t}")
    return ChromaNet(w).attention_block(nn.as_f64(s_feat), nn.as_f64(x_feat), t)[0]


def fuse(s_feat, attn: AttentionMap | np.ndarray, x_feat, w: ModelWeights) -> np.ndarray:
    a = attn.probs if isinstance(attn, AttentionMap) else nn.as_f64(attn)
    return ChromaNet(w).fuse_block(nn.as_f64(s_feat), a, nn.as_f64(x_feat))[0]


def head_forward(o, w: ModelWeights) -> np.ndarray:
    """Head on fused features ``(D, N^2)``; output clamped to [0, 1]."""
    y = ChromaNet(w).head(nn.as_f64(o))[0]
    return np.clip(y, 0.0, 1.0)


def _sample_arrays(sample, cfg: BlockSizeConfig):
    n = sample.luma.shape[-1]
    if n != cfg.n:
        raise ShapeError(f"sample block size {n} does not match model block size {cfg.n}")
    return nn.as_f64(sample.luma).reshape(1, 1, n, n), nn.as_f64(sample.boundary)[None]


def model_forward(sample, w: ModelWeights, temperature: float | None = None) -> tuple[np.ndarray, AttentionMap]:
    """Predict one sample: clamped ``(2, N, N)`` chroma and its attention map."""
    net = ChromaNet(w)
    luma, boundary = _sample_arrays(sample, w.config)
    y = net.forward(luma, boundary, temperature)
    a = net.attention
    return np.clip(y[0], 0.0, 1.0), AttentionMap(a.logits[0], a.probs[0], a.temperature)


def model_backward(sample, w: ModelWeights, upstream) -> dict[str, np.ndarray]:
    """Parameter gradients of ``sum(upstream * raw_prediction)`` for one sample."""
    net = ChromaNet(w)
    luma, boundary = _sample_arrays(sample, w.config)
    net.forward(luma, boundary)
    grads = net.backward(nn.as_f64(upstream)[None])
    return {k: v for k, v in grads.items() if k not in ("luma", "boundary")}


def predict_batch(w: ModelWeights, luma, boundary) -> np.ndarray:
    return np.clip(ChromaNet(w).forward(luma, boundary), 0.0, 1.0)


def model_gradcheck(w: ModelWeights, luma, boundary, seed: int = 0, eps: float = 1e-6, max_coords: int = 10_000):
    """Finite-difference check of the full model on one sample.

    Parameters are taken at their stored float32 values; the network is
    evaluated in float64 so the differences resolve gradients well below the
    float32 step.
    """
    rng = np.random.default_rng(seed)
    n = w.config.n
    luma = nn.as_f64(luma).reshape(1, 1, n, n)
    boundary = nn.as_f64(boundary).reshape(1, 3, w.config.b)
    proj = rng.standard_normal((luma.shape[0], 2, w.config.n, w.config.n))
    net = ChromaNet(w)
    net.forward(luma, boundary)
    analytic = net.backward(proj)

    names = list(w.config.param_shapes())
    arrays = {k: nn.as_f64(w[k]) for k in names}
    arrays["luma"], arrays["boundary"] = luma, boundary

    def loss(a):
        probe = _Float64Weights(w.config, {k: a[k] for k in names})
        return ChromaNet(probe).forward(a["luma"], a["boundary"]) * proj

    return nn.finite_difference_check(loss, arrays, analytic, seed=seed + 1, eps=eps, max_coords=max_coords)


class _Float64Weights(ModelWeights):
    """Weights kept in float64 for finite differencing (no float32 rounding)."""

    def __post_init__(self):
        pass


# --------------------------------------------------------------------------
# weight container: "ACPM"

MAGIC = b"ACPM"
VERSION = 1


def write_weights(w: ModelWeights, f: BinaryIO) -> None:
    c = w.config
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, c.n))
    f.write(struct.pack(f"<I{len(c.boundary_dims)}I", len(c.boundary_dims), *c.boundary_dims))
    f.write(struct.pack(f"<I{len(c.luma_dims)}I", len(c.luma_dims), *c.luma_dims))
    f.write(struct.pack("<IIIdB", c.h, c.attn_out_dim, c.head_dim, c.temperature, int(c.head_conv)))
    for arr in w.params.values():
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f: BinaryIO, size: int, what: str) -> bytes:
    pos = f.tell() if f.seekable() else -1
    data = f.read(size)
    if len(data) != size:
        raise FormatError(f"truncated file: expected {size} bytes for {what} at offset {pos}, got {len(data)}")
    return data


def read_weights(f: BinaryIO) -> ModelWeights:
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic: expected {MAGIC!r}, found {magic!r}")
    version, n = struct.unpack("<II", _read_exact(f, 8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported weight file version {version} (expected {VERSION})")
    (nb,) = struct.unpack("<I", _read_exact(f, 4, "boundary layer count"))
    bdims = struct.unpack(f"<{nb}I", _read_exact(f, 4 * nb, "boundary dims"))
    (nl,) = struct.unpack("<I", _read_exact(f, 4, "luma layer count"))
    ldims = struct.unpack(f"<{nl}I", _read_exact(f, 4 * nl, "luma dims"))
    h, d, e, t, head = struct.unpack("<IIIdB", _read_exact(f, struct.calcsize("<IIIdB"), "attention/head dims"))
    try:
        cfg = BlockSizeConfig(n, tuple(bdims), tuple(ldims), h, d, e, t, bool(head))
    except ValueError as exc:
        raise FormatError(f"invalid model header: {exc}") from exc
    params = {}
    for name, shape in cfg.param_shapes().items():
        count = int(np.prod(shape))
        raw = _read_exact(f, 4 * count, f"parameter {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    return ModelWeights(cfg, params)


def save_weights(w: ModelWeights, path) -> None:
    with open(path, "wb") as f:
        write_weights(w, f)


def load_weights(path) -> ModelWeights:
    """Read the weight container; a trailing optimizer appendix is ignored."""
    with open(Path(path), "rb") as f:
        return read_weights(f)


def with_head_conv(cfg: BlockSizeConfig, enabled: bool) -> BlockSizeConfig:
    return replace(cfg, head_conv=enabled)
