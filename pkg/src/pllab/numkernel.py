"""Minimal differentiable numeric core.

Dense float64 tensors, a small encoder (MLP for flat features, 2-conv +
global-average-pool CNN for grid features) with an L2-normalized projection
head and a linear classifier head, hand-derived analytic gradients, and a
central finite-difference verification harness.

Everything is deterministic: weights come from a seeded generator and all
math is plain numpy in a fixed evaluation order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "UsageError",
    "NumericError",
    "CheckpointError",
    "Tensor",
    "EncoderConfig",
    "BackboneParams",
    "ParamGrads",
    "ForwardResult",
    "GradientReport",
    "init_params",
    "forward",
    "backward",
    "check_gradients",
    "save_params",
    "load_params",
]

ZERO_NORM_EPS = 1e-30


class DimensionError(ValueError):
    """Input or parameter shapes do not match the configured dimensions."""


class UsageError(RuntimeError):
    """An operation was called out of order (e.g. backward without forward)."""


class NumericError(ArithmeticError):
    """A public operation produced or received a non-finite value."""


class CheckpointError(ValueError):
    """A parameter checkpoint file is malformed."""


# ---------------------------------------------------------------------------
# Tensor


@dataclass(frozen=True)
class Tensor:
    """Dense tensor: a shape plus flat row-major float64 values.

    Invariants enforced on construction: the value count matches the shape
    product and every entry is finite.
    """

    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "values", vals)
        expected = int(np.prod(self.shape)) if self.shape else 1
        if vals.size != expected:
            raise DimensionError(
                f"tensor has {vals.size} values but shape {self.shape} needs {expected}"
            )
        if not np.all(np.isfinite(vals)):
            raise NumericError("tensor contains non-finite values")

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(shape=tuple(arr.shape), values=arr.reshape(-1).copy())

    @property
    def array(self) -> np.ndarray:
        """Row-major view with the tensor's shape."""
        return self.values.reshape(self.shape)


def as_array(x, dtype=np.float64) -> np.ndarray:
    """Accept a Tensor or anything array-like and return a float64 ndarray."""
    if isinstance(x, Tensor):
        return x.array
    return np.asarray(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Parameters


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the shared backbone plus its two heads.

    ``input_dims`` with one entry selects the MLP (``hidden_dims`` are layer
    widths); three entries (h, w, ch) select the 2-conv + global-average-pool
    CNN (``hidden_dims`` are the two conv channel counts). The projection
    head maps the penultimate features to an L2-normalized embedding; the
    classifier head maps them to ``num_classes`` logits.
    """

    input_dims: tuple[int, ...]
    num_classes: int
    hidden_dims: tuple[int, ...] = (32,)
    embed_dim: int = 32
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if len(self.input_dims) not in (1, 3):
            raise DimensionError(
                f"input_dims must be (d,) or (h, w, ch), got {self.input_dims}"
            )
        if self.is_grid and len(self.hidden_dims) != 2:
            raise DimensionError("grid encoder needs exactly two conv channel counts")
        if self.num_classes < 2:
            raise DimensionError("need at least two classes")
        if self.embed_dim < 1:
            raise DimensionError("embed_dim must be positive")
        if self.is_grid and self.kernel_size % 2 != 1:
            raise DimensionError("kernel_size must be odd (same padding)")

    @property
    def is_grid(self) -> bool:
        return len(self.input_dims) == 3

    @property
    def feature_dim(self) -> int:
        """Width of the penultimate representation both heads consume."""
        if self.is_grid:
            return self.hidden_dims[-1]
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dims[0]


def _named_shapes(config: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if config.is_grid:
        k = config.kernel_size
        c_in = config.input_dims[2]
        for i, c_out in enumerate(config.hidden_dims):
            shapes.append((f"enc{i}.w", (k, k, c_in, c_out)))
            shapes.append((f"enc{i}.b", (c_out,)))
            c_in = c_out
    else:
        d_in = config.input_dims[0]
        for i, d_out in enumerate(config.hidden_dims):
            shapes.append((f"enc{i}.w", (d_in, d_out)))
            shapes.append((f"enc{i}.b", (d_out,)))
            d_in = d_out
    f = config.feature_dim
    shapes.append(("proj.w", (f, config.embed_dim)))
    shapes.append(("proj.b", (config.embed_dim,)))
    shapes.append(("cls.w", (f, config.num_classes)))
    shapes.append(("cls.b", (config.num_classes,)))
    return shapes


@dataclass
class BackboneParams:
    """Parameter snapshot: encoder layers plus projection and classifier heads.

    ``encoder`` holds per-layer (weight, bias) pairs; dense weights are
    (in, out), conv weights are (k, k, c_in, c_out).
    """

    config: EncoderConfig
    encoder: list[tuple[np.ndarray, np.ndarray]]
    proj_w: np.ndarray
    proj_b: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(self.encoder):
            out.append((f"enc{i}.w", w))
            out.append((f"enc{i}.b", b))
        out.append(("proj.w", self.proj_w))
        out.append(("proj.b", self.proj_b))
        out.append(("cls.w", self.cls_w))
        out.append(("cls.b", self.cls_b))
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for _, a in self.tensors()])

    def with_flat(self, flat: np.ndarray) -> "BackboneParams":
        """Rebuild a parameter snapshot from a flat vector (same structure)."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.flatten().size:
            raise DimensionError("flat vector length does not match parameter count")
        arrays = []
        off = 0
        for _, a in self.tensors():
            n = a.size
            arrays.append(flat[off : off + n].reshape(a.shape).copy())
            off += n
        n_enc = len(self.encoder)
        encoder = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(n_enc)]
        pw, pb, cw, cb = arrays[2 * n_enc :]
        return BackboneParams(self.config, encoder, pw, pb, cw, cb)

    def copy(self) -> "BackboneParams":
        return BackboneParams(
            self.config,
            [(w.copy(), b.copy()) for w, b in self.encoder],
            self.proj_w.copy(),
            self.proj_b.copy(),
            self.cls_w.copy(),
            self.cls_b.copy(),
        )


@dataclass
class ParamGrads:
    """Gradient container mirroring BackboneParams' structure."""

    config: EncoderConfig
    encoder: list[tuple[np.ndarray, np.ndarray]]
    proj_w: np.ndarray
    proj_b: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray

    tensors = BackboneParams.tensors
    flatten = BackboneParams.flatten

    @classmethod
    def zeros_like(cls, params: BackboneParams) -> "ParamGrads":
        return cls(
            params.config,
            [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.encoder],
            np.zeros_like(params.proj_w),
            np.zeros_like(params.proj_b),
            np.zeros_like(params.cls_w),
            np.zeros_like(params.cls_b),
        )

    def add_(self, other: "ParamGrads", scale: float = 1.0) -> "ParamGrads":
        """In-place accumulate ``scale * other`` (deterministic fixed order)."""
        for (_, a), (_, o) in zip(self.tensors(), other.tensors()):
            a += scale * o
        return self

    def scale_(self, scale: float) -> "ParamGrads":
        for _, a in self.tensors():
            a *= scale
        return self


def init_params(config: EncoderConfig, seed: int = 0) -> BackboneParams:
    """Seeded uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per tensor.

    Fan-in is the input width for dense layers and k*k*c_in for conv layers;
    biases use the same bound as their layer's weights.
    """
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    fan_in = 1
    for name, shape in _named_shapes(config):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[:-1]))
        # biases reuse the bound of the weight drawn just before them
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    n_enc = sum(1 for n, _ in _named_shapes(config) if n.startswith("enc")) // 2
    encoder = [(arrays[f"enc{i}.w"], arrays[f"enc{i}.b"]) for i in range(n_enc)]
    return BackboneParams(
        config,
        encoder,
        arrays["proj.w"],
        arrays["proj.b"],
        arrays["cls.w"],
        arrays["cls.b"],
    )


# ---------------------------------------------------------------------------
# Forward / backward


@dataclass
class _Cache:
    params: BackboneParams
    x: np.ndarray  # batched input, original dims
    activations: list  # per conv/dense layer: (pre-relu, input) pairs
    features: np.ndarray
    pre_embed: np.ndarray
    norms: np.ndarray
    fallback: np.ndarray  # bool rows where the zero-vector fallback fired
    batched: bool
    fmaps: np.ndarray | None = None  # post-relu conv maps (grid encoder only)


@dataclass
class ForwardResult:
    """Output of a forward pass.

    ``embedding`` is unit-norm (zero-vector rows fall back to the first basis
    vector, flagged in ``zero_fallback``), ``logits`` has one entry per class,
    ``features`` is the shared penultimate representation both heads read.
    """

    embedding: np.ndarray
    logits: np.ndarray
    features: np.ndarray
    zero_fallback: np.ndarray
    cache: _Cache | None = None


def _check_input(config: EncoderConfig, x) -> tuple[np.ndarray, bool]:
    arr = as_array(x)
    dims = config.input_dims
    if arr.shape == dims:
        return arr[None, ...], False
    if arr.ndim == len(dims) + 1 and arr.shape[1:] == dims:
        return arr, True
    raise DimensionError(f"input shape {arr.shape} does not match {dims} (or batch thereof)")


def _conv_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1 same-padding conv, NHWC layout."""
    k = w.shape[0]
    p = k // 2
    bsz, h, wid, c_in = x.shape
    c_out = w.shape[3]
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    y = np.zeros((bsz, h, wid, c_out))
    for di in range(k):
        for dj in range(k):
            patch = xp[:, di : di + h, dj : dj + wid, :].reshape(-1, c_in)
            y += (patch @ w[di, dj]).reshape(bsz, h, wid, c_out)
    return y + b


def _conv_same_backward(x, w, dy):
    k = w.shape[0]
    p = k // 2
    bsz, h, wid, c_in = x.shape
    c_out = w.shape[3]
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    dy_flat = dy.reshape(-1, c_out)
    for di in range(k):
        for dj in range(k):
            patch = xp[:, di : di + h, dj : dj + wid, :].reshape(-1, c_in)
            dw[di, dj] = patch.T @ dy_flat
            dxp[:, di : di + h, dj : dj + wid, :] += (dy_flat @ w[di, dj].T).reshape(
                bsz, h, wid, c_in
            )
    db = dy.sum(axis=(0, 1, 2))
    dx = dxp[:, p : p + h, p : p + wid, :]
    return dw, db, dx


def forward(params: BackboneParams, x, want_cache: bool = True) -> ForwardResult:
    """Run the shared backbone and both heads.

    Accepts a single input or a batch (leading axis). Deterministic for fixed
    params and input; raises DimensionError on shape mismatch and
    NumericError if non-finite values appear.
    """
    config = params.config
    xb, batched = _check_input(config, x)
    if not np.all(np.isfinite(xb)):
        raise NumericError("non-finite values in forward input")

    activations = []
    if config.is_grid:
        h = xb
        for w, b in params.encoder:
            pre = _conv_same(h, w, b)
            activations.append((pre, h))
            h = np.maximum(pre, 0.0)
        fmaps = h  # (B, H, W, C) post-relu feature maps
        features = fmaps.mean(axis=(1, 2))
    else:
        h = xb
        for w, b in params.encoder:
            pre = h @ w + b
            activations.append((pre, h))
            h = np.maximum(pre, 0.0)
        fmaps = None
        features = h

    pre_embed = features @ params.proj_w + params.proj_b
    norms = np.linalg.norm(pre_embed, axis=1)
    fallback = norms < ZERO_NORM_EPS
    safe = np.where(fallback, 1.0, norms)
    embedding = pre_embed / safe[:, None]
    if np.any(fallback):
        embedding[fallback] = 0.0
        embedding[fallback, 0] = 1.0

    logits = features @ params.cls_w + params.cls_b
    if not (np.all(np.isfinite(embedding)) and np.all(np.isfinite(logits))):
        raise NumericError("non-finite values in forward output")

    cache = None
    if want_cache:
        cache = _Cache(
            params, xb, activations, features, pre_embed, norms, fallback, batched, fmaps
        )
    if not batched:
        return ForwardResult(embedding[0], logits[0], features[0], fallback[0], cache)
    return ForwardResult(embedding, logits, features, fallback, cache)


def backward(
    params: BackboneParams,
    result: ForwardResult,
    d_embedding=None,
    d_logits=None,
) -> tuple[ParamGrads, np.ndarray]:
    """Backpropagate upstream gradients from the heads to all parameters.

    Requires the cache from a prior forward with the same params; returns
    (parameter gradients, gradient w.r.t. the input). Zero-fallback embedding
    rows are locally constant, so their embedding gradient is dropped.
    """
    cache = result.cache
    if cache is None:
        raise UsageError("backward needs the cache from a prior forward pass")
    if cache.params is not params:
        raise UsageError("backward called with different params than the forward pass")
    config = params.config
    bsz = cache.x.shape[0]

    def _up(g, width):
        if g is None:
            return np.zeros((bsz, width))
        g = np.asarray(g, dtype=np.float64)
        if not cache.batched:
            g = g[None, ...]
        if g.shape != (bsz, width):
            raise DimensionError(f"upstream gradient shape {g.shape} != {(bsz, width)}")
        return g

    dq = _up(d_embedding, config.embed_dim)
    dz = _up(d_logits, config.num_classes)

    # L2-normalize backward: q = v/||v||, dv = (dq - q (q.dq)) / ||v||
    v = cache.pre_embed
    norms = np.where(cache.fallback, 1.0, cache.norms)
    q = v / norms[:, None]
    dv = (dq - q * np.sum(q * dq, axis=1, keepdims=True)) / norms[:, None]
    dv[cache.fallback] = 0.0

    dfeat = dv @ params.proj_w.T + dz @ params.cls_w.T
    g_proj_w = cache.features.T @ dv
    g_proj_b = dv.sum(axis=0)
    g_cls_w = cache.features.T @ dz
    g_cls_b = dz.sum(axis=0)

    enc_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.encoder)
    if config.is_grid:
        h, wd, _ = cache.fmaps.shape[1:]
        d_h = np.broadcast_to(dfeat[:, None, None, :] / (h * wd), cache.fmaps.shape).copy()
    else:
        d_h = dfeat
    for i in range(len(params.encoder) - 1, -1, -1):
        w, _ = params.encoder[i]
        pre, inp = cache.activations[i]
        d_pre = d_h * (pre > 0.0)
        if config.is_grid:
            dw, db, d_h = _conv_same_backward(inp, w, d_pre)
        else:
            dw = inp.T @ d_pre
            db = d_pre.sum(axis=0)
            d_h = d_pre @ w.T
        enc_grads[i] = (dw, db)
    d_input = d_h  # empty-encoder MLP: d_h is still dfeat, the input gradient
    if not cache.batched:
        d_input = d_input[0]

    grads = ParamGrads(config, enc_grads, g_proj_w, g_proj_b, g_cls_w, g_cls_b)
    return grads, d_input


# ---------------------------------------------------------------------------
# Finite-difference verification


@dataclass
class GradientReport:
    """Analytic vs. central finite-difference gradients for one loss closure.

    Relative error per entry is |a - n| / max(|a|, |n|, 1e-12); ``degenerate``
    flags closures whose analytic and numeric gradients are both ~0.
    """

    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    max_rel_error: float
    worst_param: str
    degenerate: bool


def check_gradients(
    loss_fn: Callable[[BackboneParams], tuple[float, "ParamGrads | np.ndarray"]],
    params: BackboneParams,
    h: float = 1e-5,
) -> GradientReport:
    """Compare a closure's analytic gradient against central differences.

    ``loss_fn(params)`` must return (scalar loss, gradient); the gradient may
    be a ParamGrads or an already-flat vector. The numeric estimate perturbs
    each parameter by ±h. Raises NumericError on a non-finite loss.
    """
    loss0, grad0 = loss_fn(params)
    if not np.isfinite(loss0):
        raise NumericError("loss closure returned a non-finite value")
    flat_analytic = grad0.flatten() if isinstance(grad0, ParamGrads) else np.asarray(grad0, dtype=np.float64)
    theta = params.flatten()
    if flat_analytic.shape != theta.shape:
        raise DimensionError("analytic gradient length does not match parameter count")

    numeric = np.zeros_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        lp, _ = loss_fn(params.with_flat(theta + step))
        lm, _ = loss_fn(params.with_flat(theta - step))
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NumericError("loss closure returned a non-finite value during probing")
        numeric[i] = (lp - lm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(flat_analytic), np.abs(numeric)), 1e-12)
    rel = np.abs(flat_analytic - numeric) / denom
    worst = int(np.argmax(rel)) if rel.size else 0

    analytic_by_name: dict[str, np.ndarray] = {}
    numeric_by_name: dict[str, np.ndarray] = {}
    names = []
    off = 0
    for name, a in params.tensors():
        analytic_by_name[name] = flat_analytic[off : off + a.size].reshape(a.shape)
        numeric_by_name[name] = numeric[off : off + a.size].reshape(a.shape)
        names.extend([name] * a.size)
        off += a.size

    degenerate = bool(np.max(np.abs(flat_analytic), initial=0.0) < 1e-12
                      and np.max(np.abs(numeric), initial=0.0) < 1e-12)
    return GradientReport(
        analytic=analytic_by_name,
        numeric=numeric_by_name,
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        worst_param=names[worst] if names else "",
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# Checkpoint I/O
#
# Little-endian binary layout:
#   magic   4 bytes  b"PLCK"
#   version u32      1
#   grid    u8       0 = flat/MLP, 1 = grid/CNN
#   kernel  u32      conv kernel size (unused for MLP but always present)
#   embed   u32      projection embedding dim
#   classes u32      classifier output dim
#   n_in    u32      len(input_dims), then n_in * u32 dims
#   n_hid   u32      len(hidden_dims), then n_hid * u32 dims
#   n_tens  u32      shape table: per tensor u32 ndim + ndim * u32 dims
#   payload          float64 LE values, tensors concatenated in order

_MAGIC = b"PLCK"
_VERSION = 1


def save_params(params: BackboneParams, path) -> None:
    """Write a parameter checkpoint (documented little-endian binary)."""
    cfg = params.config
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<IBIII", _VERSION, 1 if cfg.is_grid else 0,
                       cfg.kernel_size, cfg.embed_dim, cfg.num_classes)
    out += struct.pack("<I", len(cfg.input_dims))
    out += struct.pack(f"<{len(cfg.input_dims)}I", *cfg.input_dims)
    out += struct.pack("<I", len(cfg.hidden_dims))
    if cfg.hidden_dims:
        out += struct.pack(f"<{len(cfg.hidden_dims)}I", *cfg.hidden_dims)
    tensors = params.tensors()
    out += struct.pack("<I", len(tensors))
    for _, a in tensors:
        out += struct.pack("<I", a.ndim)
        out += struct.pack(f"<{a.ndim}I", *a.shape)
    for _, a in tensors:
        out += np.ascontiguousarray(a, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_params(path) -> BackboneParams:
    """Read a checkpoint written by save_params."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise CheckpointError("bad magic bytes (not a parameter checkpoint)")
    off = 4
    version, grid, kernel, embed, classes = struct.unpack_from("<IBIII", buf, off)
    off += struct.calcsize("<IBIII")
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_in,) = struct.unpack_from("<I", buf, off)
    off += 4
    input_dims = struct.unpack_from(f"<{n_in}I", buf, off)
    off += 4 * n_in
    (n_hid,) = struct.unpack_from("<I", buf, off)
    off += 4
    hidden = struct.unpack_from(f"<{n_hid}I", buf, off) if n_hid else ()
    off += 4 * n_hid
    config = EncoderConfig(
        input_dims=tuple(input_dims),
        num_classes=classes,
        hidden_dims=tuple(hidden),
        embed_dim=embed,
        kernel_size=kernel,
    )
    if config.is_grid != bool(grid):
        raise CheckpointError("arch flag does not match input dims")
    (n_tens,) = struct.unpack_from("<I", buf, off)
    off += 4
    shapes = []
    for _ in range(n_tens):
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        shapes.append(tuple(shape))
    expected = _named_shapes(config)
    if len(shapes) != len(expected) or any(s != e[1] for s, e in zip(shapes, expected)):
        raise CheckpointError("shape table does not match the declared architecture")
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
        arrays.append(a)
    if off != len(buf):
        raise CheckpointError("trailing bytes after float payload")
    n_enc = (len(arrays) - 4) // 2
    encoder = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(n_enc)]
    pw, pb, cw, cb = arrays[-4:]
    return BackboneParams(config, encoder, pw, pb, cw, cb)
