"""Differentiable ops for the tensor engine.

Every op either is a primitive (records one graph node whose VJP is written
in terms of other engine ops) or is derived (a composition of primitives).
Because VJPs are engine ops themselves, every op here supports double
backward for free; the certified second-order set below is the subset the
gradient-penalty path is allowed to contain.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    NumericDomainError,
    ShapeError,
    Tensor,
    make_result,
)

# name -> {"fn": callable, "differentiable": bool}
OP_REGISTRY: dict = {}

# Node tags allowed in a critic graph that feeds the gradient penalty.
# Smooth saturating nonlinearities (exp/log/tanh/sigmoid/softmax) are
# deliberately excluded: critics must stay within this set.
CERTIFIED_SECOND_ORDER = {
    "add",
    "mul",
    "neg",
    "pow",
    "matmul",
    "reshape",
    "permute",
    "broadcast_to",
    "sum",
    "slice",
    "pad",
    "concat",
    "unfold3d",
    "fold3d",
    "upsample3d_nearest",
    "relu",
    "leaky_relu",
    "abs",
}


def _register(name: str, fn, differentiable: bool = True):
    OP_REGISTRY[name] = {"fn": fn, "differentiable": differentiable}
    return fn


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce_pair(a, b):
    """Promote python scalars to the partner tensor's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _sum_to(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to `shape` (the pre-broadcast one)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = list(range(extra))
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i + extra] != 1:
            axes.append(i + extra)
    out = tensor_sum(g, axis=tuple(axes), keepdims=False) if axes else g
    return reshape(out, shape)


# -- arithmetic primitives ----------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise a + b with numpy broadcasting."""
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "add")

    def vjp(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return make_result(a.data + b.data, "add", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        return (neg(g),)

    return make_result(-a.data, "neg", (a,), vjp)


def sub(a, b) -> Tensor:
    """Elementwise a - b (derived: add + neg)."""
    a, b = _coerce_pair(a, b)
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    """Elementwise a * b with numpy broadcasting."""
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "mul")

    def vjp(g):
        ga = _sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = _sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, "mul", (a, b), vjp)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    """a ** p for a constant exponent p."""
    p = float(p)
    if p != int(p) and np.any(a.data < 0):
        raise NumericDomainError(f"pow: fractional exponent {p} on negative base")
    if p < 0 and np.any(a.data == 0):
        raise NumericDomainError(f"pow: exponent {p} at zero base")

    def vjp(g):
        if p == 0.0:
            return (None,)
        if p == 1.0:
            return (g,)
        return (mul(mul(g, p), pow_scalar(a, p - 1.0)),)

    return make_result(a.data**p, "pow", (a,), vjp)


def div(a, b) -> Tensor:
    """Elementwise a / b (derived; b must be nonzero)."""
    a, b = _coerce_pair(a, b)
    return mul(a, pow_scalar(b, -1.0))


# -- structural primitives ----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    orig = a.shape

    def vjp(g):
        return (reshape(g, orig),)

    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {orig} as {shape}") from None
    return make_result(data, "reshape", (a,), vjp)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    inv = tuple(int(i) for i in np.argsort(axes))

    def vjp(g):
        return (permute(g, inv),)

    return make_result(np.ascontiguousarray(a.data.transpose(axes)), "permute", (a,), vjp)


def transpose(a: Tensor) -> Tensor:
    """2-D transpose."""
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return permute(a, (1, 0))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    orig = a.shape

    def vjp(g):
        return (_sum_to(g, orig),)

    data = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return make_result(data, "broadcast_to", (a,), vjp)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over the given axes (all axes when axis is None)."""
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    kept = tuple(1 if i in axes else d for i, d in enumerate(a.shape))
    orig = a.shape

    def vjp(g):
        gk = g if keepdims else reshape(g, kept)
        return (broadcast_to(gk, orig),)

    return make_result(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Mean over the given axes (derived from sum)."""
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.shape[axis % a.ndim]
    else:
        count = 1
        for ax in axis:
            count *= a.shape[ax % a.ndim]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def vjp(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, "matmul", (a, b), vjp)


def slice_nd(a: Tensor, starts, stops) -> Tensor:
    """Rectangular crop a[starts[0]:stops[0], ...]."""
    starts = tuple(int(s) for s in starts)
    stops = tuple(int(s) for s in stops)
    if len(starts) != a.ndim or len(stops) != a.ndim:
        raise ShapeError("slice: starts/stops rank mismatch")
    pads = tuple((s, d - e) for s, e, d in zip(starts, stops, a.shape))

    def vjp(g):
        return (pad_nd(g, pads),)

    idx = tuple(slice(s, e) for s, e in zip(starts, stops))
    return make_result(np.ascontiguousarray(a.data[idx]), "slice", (a,), vjp)


def pad_nd(a: Tensor, pads) -> Tensor:
    """Zero-pad with (before, after) per axis."""
    pads = tuple((int(b), int(e)) for b, e in pads)
    if len(pads) != a.ndim:
        raise ShapeError("pad: pads rank mismatch")
    starts = tuple(b for b, _ in pads)
    stops = tuple(b + d for (b, _), d in zip(pads, a.shape))

    def vjp(g):
        return (slice_nd(g, starts, stops),)

    return make_result(np.pad(a.data, pads), "pad", (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along an axis."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis and o != b for i, (o, b) in enumerate(zip(other, base))
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        outs = []
        for i, t in enumerate(tensors):
            starts = [0] * g.ndim
            stops = list(g.shape)
            starts[axis] = int(offsets[i])
            stops[axis] = int(offsets[i + 1])
            outs.append(slice_nd(g, starts, stops) if t.requires_grad else None)
        return tuple(outs)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(data, "concat", tuple(tensors), vjp)


# -- pointwise nonlinearities --------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def vjp(g):
        return (mul(g, out),)

    out = make_result(out_data, "exp", (a,), vjp)
    return out


def log(a: Tensor) -> Tensor:
    """Natural log; raises NumericDomainError off the positive domain."""
    if np.any(a.data <= 0):
        raise NumericDomainError("log of non-positive value")

    def vjp(g):
        return (mul(g, pow_scalar(a, -1.0)),)

    return make_result(np.log(a.data), "log", (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def vjp(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = make_result(out_data, "tanh", (a,), vjp)
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = make_result(out_data, "sigmoid", (a,), vjp)
    return out


def relu(a: Tensor) -> Tensor:
    factor = Tensor((a.data > 0).astype(a.dtype))

    def vjp(g):
        return (mul(g, factor),)

    return make_result(np.maximum(a.data, 0), "relu", (a,), vjp)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    """max(x, slope*x); second derivative taken as zero at the kink."""
    factor = Tensor(np.where(a.data > 0, 1.0, slope).astype(a.dtype))

    def vjp(g):
        return (mul(g, factor),)

    return make_result(np.where(a.data > 0, a.data, slope * a.data), "leaky_relu", (a,), vjp)


def absolute(a: Tensor) -> Tensor:
    sign = Tensor(np.sign(a.data).astype(a.dtype))

    def vjp(g):
        return (mul(g, sign),)

    return make_result(np.abs(a.data), "abs", (a,), vjp)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through the interior only."""
    inside = Tensor(((a.data > lo) & (a.data < hi)).astype(a.dtype))

    def vjp(g):
        return (mul(g, inside),)

    return make_result(np.clip(a.data, lo, hi), "clamp", (a,), vjp)


# -- convolution machinery ------------------------------------------------------


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError(f"expected 3 spatial values, got {v!r}")
    return t


def _conv_out_extent(d: int, k: int, s: int, p: int) -> int:
    return (d + 2 * p - k) // s + 1


def unfold3d(x: Tensor, kshape, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """im2col for volumes: [N,C,D,H,W] -> [N, C*kd*kh*kw, L].

    Column order matches kernel.reshape(F, -1): channel-major, then the three
    kernel offsets row-major; L runs over output positions in raster order.
    """
    kd, kh, kw = _triple(kshape)
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(padding)
    if x.ndim != 5:
        raise ShapeError(f"unfold3d expects [N,C,D,H,W], got {x.shape}")
    n, c, d, h, w = x.shape
    if min(sd, sh, sw) < 1:
        raise ShapeError(f"stride must be >= 1, got {(sd, sh, sw)}")
    od, oh, ow = (
        _conv_out_extent(d, kd, sd, pd),
        _conv_out_extent(h, kh, sh, ph),
        _conv_out_extent(w, kw, sw, pw),
    )
    if min(od, oh, ow) < 1:
        raise ShapeError(
            f"kernel {(kd, kh, kw)} with stride {(sd, sh, sw)}, padding {(pd, ph, pw)} "
            f"does not fit input volume {(d, h, w)}"
        )

    def forward(arr):
        padded = np.pad(arr, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
        win = np.lib.stride_tricks.sliding_window_view(padded, (kd, kh, kw), axis=(2, 3, 4))
        win = win[:, :, ::sd, ::sh, ::sw]  # [N,C,od,oh,ow,kd,kh,kw]
        win = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)  # [N,C,kd,kh,kw,od,oh,ow]
        return np.ascontiguousarray(win).reshape(n, c * kd * kh * kw, od * oh * ow)

    def vjp(g):
        return (fold3d(g, (n, c, d, h, w), kshape, stride, padding),)

    return make_result(forward(x.data), "unfold3d", (x,), vjp)


def fold3d(cols: Tensor, out_shape, kshape, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """col2im scatter-add, the exact adjoint of unfold3d."""
    kd, kh, kw = _triple(kshape)
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(padding)
    n, c, d, h, w = (int(v) for v in out_shape)
    od, oh, ow = (
        _conv_out_extent(d, kd, sd, pd),
        _conv_out_extent(h, kh, sh, ph),
        _conv_out_extent(w, kw, sw, pw),
    )
    if cols.shape != (n, c * kd * kh * kw, od * oh * ow):
        raise ShapeError(f"fold3d: columns shape {cols.shape} does not match target {out_shape}")

    def forward(arr):
        blocks = arr.reshape(n, c, kd, kh, kw, od, oh, ow)
        padded = np.zeros((n, c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=arr.dtype)
        for i in range(kd):
            for j in range(kh):
                for k in range(kw):
                    padded[
                        :,
                        :,
                        i : i + sd * od : sd,
                        j : j + sh * oh : sh,
                        k : k + sw * ow : sw,
                    ] += blocks[:, :, i, j, k]
        return np.ascontiguousarray(padded[:, :, pd : pd + d, ph : ph + h, pw : pw + w])

    def vjp(g):
        return (unfold3d(g, kshape, stride, padding),)

    return make_result(forward(cols.data), "fold3d", (cols,), vjp)


def conv3d(x: Tensor, kernel: Tensor, stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """3-D cross-correlation of [N,C,D,H,W] with kernel [F,C,kd,kh,kw].

    Output extents follow floor((D + 2p - kd) / s) + 1 per axis.  Derived from
    unfold3d + matmul, so gradients (and double backward) come from the
    primitives.
    """
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be [N,C,D,H,W], got {x.shape}")
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d kernel must be [F,C,kd,kh,kw], got {kernel.shape}")
    n, c, d, h, w = x.shape
    f, ck, kd, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv3d: input has {c} channels, kernel expects {ck}")
    sd, sh, sw = _triple(stride)
    pd, ph, pw = _triple(padding)
    od, oh, ow = (
        _conv_out_extent(d, kd, sd, pd),
        _conv_out_extent(h, kh, sh, ph),
        _conv_out_extent(w, kw, sw, pw),
    )
    cols = unfold3d(x, (kd, kh, kw), stride, padding)  # [N, C*K, L]
    km = reshape(kernel, (f, c * kd * kh * kw))
    stacked = reshape(permute(cols, (1, 0, 2)), (c * kd * kh * kw, n * od * oh * ow))
    out = matmul(km, stacked)  # [F, N*L]
    out = permute(reshape(out, (f, n, od * oh * ow)), (1, 0, 2))
    return reshape(out, (n, f, od, oh, ow))


def upsample3d_nearest(x: Tensor, factors=(1, 2, 2)) -> Tensor:
    """Nearest-neighbour upsampling by integer factors along D,H,W."""
    fd, fh, fw = _triple(factors)
    if x.ndim != 5:
        raise ShapeError(f"upsample3d_nearest expects [N,C,D,H,W], got {x.shape}")
    n, c, d, h, w = x.shape

    def forward(arr):
        out = np.repeat(arr, fd, axis=2)
        out = np.repeat(out, fh, axis=3)
        out = np.repeat(out, fw, axis=4)
        return out

    def vjp(g):
        blocks = reshape(g, (n, c, d, fd, h, fh, w, fw))
        return (tensor_sum(blocks, axis=(3, 5, 7)),)

    return make_result(forward(x.data), "upsample3d_nearest", (x,), vjp)


# -- derived network ops ---------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map x @ weight (+ bias) for x of shape [N, K]."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes.

    A constant channel maps to zeros (the eps guard keeps the division
    defined at zero variance).
    """
    if x.ndim < 3:
        raise ShapeError(f"instance_norm expects [N,C,spatial...], got {x.shape}")
    axes = tuple(range(2, x.ndim))
    mu = mean(x, axis=axes, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=axes, keepdims=True)
    return mul(centered, pow_scalar(add(var, eps), -0.5))


def adaptive_instance_norm(content: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Instance-normalize content, then apply per-channel scale and shift.

    scale/shift have shape [N, C] and broadcast over the spatial axes.
    """
    if scale.shape != shift.shape:
        raise ShapeError(f"adaptive_instance_norm: scale {scale.shape} vs shift {shift.shape}")
    if scale.ndim != 2 or scale.shape[:2] != content.shape[:2]:
        raise ShapeError(
            f"adaptive_instance_norm: affine shape {scale.shape} does not match "
            f"content {content.shape}"
        )
    target = scale.shape + (1,) * (content.ndim - 2)
    return add(
        mul(instance_norm(content), reshape(scale, target)),
        reshape(shift, target),
    )


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements; shapes must match."""
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shapes {a.shape} vs {b.shape}")
    return mean(absolute(sub(a, b)))


def softmax_over_channels(x: Tensor) -> Tensor:
    """Softmax along axis 1, shift-stabilized."""
    if x.ndim < 2:
        raise ShapeError(f"softmax_over_channels expects a channel axis, got {x.shape}")
    shift = Tensor(x.data.max(axis=1, keepdims=True))  # constant; softmax is shift-invariant
    e = exp(sub(x, shift))
    return div(e, tensor_sum(e, axis=1, keepdims=True))


def lerp(a: Tensor, b: Tensor, t) -> Tensor:
    """a + (b - a) * t; t may be a scalar or a broadcastable tensor."""
    return add(a, mul(sub(b, a), t))


def random_uniform(shape, seed, dtype=np.float64) -> Tensor:
    """Seeded U(0,1) leaf tensor (not differentiable)."""
    rng = np.random.default_rng(seed)
    return Tensor(rng.random(tuple(shape)).astype(dtype))


def detach(a: Tensor) -> Tensor:
    return a.detach()


# -- registry -------------------------------------------------------------------

for _name, _fn in [
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("neg", neg),
    ("div", div),
    ("pow", pow_scalar),
    ("matmul", matmul),
    ("reshape", reshape),
    ("permute", permute),
    ("broadcast_to", broadcast_to),
    ("sum", tensor_sum),
    ("mean", mean),
    ("slice", slice_nd),
    ("pad", pad_nd),
    ("concat", concat),
    ("exp", exp),
    ("log", log),
    ("tanh", tanh),
    ("sigmoid", sigmoid),
    ("relu", relu),
    ("leaky_relu", leaky_relu),
    ("abs", absolute),
    ("clamp", clamp),
    ("unfold3d", unfold3d),
    ("fold3d", fold3d),
    ("conv3d", conv3d),
    ("upsample3d_nearest", upsample3d_nearest),
    ("linear", linear),
    ("instance_norm", instance_norm),
    ("adaptive_instance_norm", adaptive_instance_norm),
    ("l1_distance", l1_distance),
    ("softmax_over_channels", softmax_over_channels),
    ("lerp", lerp),
]:
    _register(_name, _fn)
_register("random_uniform", random_uniform, differentiable=False)


def differentiable_ops() -> list:
    return sorted(name for name, rec in OP_REGISTRY.items() if rec["differentiable"])


# -- operator sugar ---------------------------------------------------------------

Tensor.__add__ = lambda self, other: add(self, other)
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = lambda self, other: sub(self, other)
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = lambda self, other: mul(self, other)
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__truediv__ = lambda self, other: div(self, other)
Tensor.__pow__ = lambda self, p: pow_scalar(self, p)
Tensor.__matmul__ = lambda self, other: matmul(self, other)
