"""Finite-difference verification of gradients and second-order paths.

``finite_diff_check`` compares the analytic gradient of a scalar function
against central differences, coordinate by coordinate, and returns the max
relative error |analytic - numeric| / max(1, |analytic|).  The suite
builders below cover every differentiable op in the registry plus the
second-order set used inside critics.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, backward, enable_grad, no_grad


def _stable_tag(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def finite_diff_check(f, point: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    x = Tensor(point.data.copy(), requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise ShapeError(f"finite_diff_check needs a scalar function, got {out.shape}")
    grads = backward(out)
    analytic = grads[x].data.copy() if x in grads else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * eps)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0


def grad_norm_sq(f):
    """Lift f to x -> ||grad f(x)||^2 via a recorded backward pass."""

    def h(x: Tensor) -> Tensor:
        with enable_grad():
            y = f(x)
            grads = backward(y, retain_secondary=True)
            g = grads.get(x)
            if g is None:
                return ops.tensor_sum(ops.mul(x, 0.0))
            return ops.tensor_sum(ops.mul(g, g))

    return h


def second_order_check(f, point: Tensor, eps: float = 1e-5) -> float:
    """Finite-difference check of d/dx ||grad f(x)||^2 (the double-backward path)."""
    return finite_diff_check(grad_norm_sq(f), point, eps=eps)


def input_grad_norm_sq(f2, x_const: np.ndarray):
    """Lift f2(params, x) to params -> ||grad_x f2(params, x_const)||^2.

    This is the shape of the penalty path: the inner gradient is taken with
    respect to the input while the outer derivative flows into parameters.
    """

    def h(p: Tensor) -> Tensor:
        with enable_grad():
            x = Tensor(x_const.copy(), requires_grad=True)
            y = f2(p, x)
            grads = backward(y, retain_secondary=True)
            g = grads[x]
            return ops.tensor_sum(ops.mul(g, g))

    return h


def _away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    out = x.copy()
    for p in points:
        near = np.abs(out - p) < margin
        out[near] = out[near] + 2 * margin
    return out


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _u(rng, shape, dtype):
    return rng.random(shape).astype(dtype)


def op_gradcheck_cases(dtype=np.float64):
    """(name, point_builder, f) triples covering every differentiable op.

    Each point_builder takes an rng and returns the flat input tensor; f maps
    that tensor to a scalar.  Multi-input ops pack their operands into one
    tensor and split it inside f so both operand gradients are exercised.
    """

    def seg(x, start, stop, shape):
        return ops.reshape(ops.slice_nd(x, (start,), (stop,)), shape)

    def signed(rng, shape, lo=0.1, hi=2.1):
        mag = lo + (hi - lo) * rng.random(shape)
        sign = np.where(rng.random(shape) > 0.5, 1.0, -1.0)
        return (mag * sign).astype(dtype)

    cases = []

    def case(name, builder, f):
        cases.append((name, builder, f))

    case(
        "add",
        lambda rng: Tensor(signed(rng, (25,))),
        lambda x: ops.tensor_sum(
            ops.mul(ops.add(seg(x, 0, 20, (4, 5)), seg(x, 20, 25, (5,))), Tensor(signed(_rng(1), (4, 5))))
        ),
    )
    case(
        "sub",
        lambda rng: Tensor(signed(rng, (40,))),
        lambda x: ops.tensor_sum(
            ops.mul(ops.sub(seg(x, 0, 20, (4, 5)), seg(x, 20, 40, (4, 5))), Tensor(signed(_rng(2), (4, 5))))
        ),
    )
    case(
        "mul",
        lambda rng: Tensor(signed(rng, (24,))),
        lambda x: ops.tensor_sum(ops.mul(seg(x, 0, 20, (4, 5)), seg(x, 20, 24, (4, 1)))),
    )
    case(
        "neg",
        lambda rng: Tensor(signed(rng, (3, 7))),
        lambda x: ops.tensor_sum(ops.mul(ops.neg(x), Tensor(signed(_rng(16), (3, 7))))),
    )
    case(
        "div",
        lambda rng: Tensor(np.concatenate([signed(rng, (12,)), (1.5 + rng.random(12)).astype(dtype)])),
        lambda x: ops.tensor_sum(ops.div(seg(x, 0, 12, (3, 4)), seg(x, 12, 24, (3, 4)))),
    )
    case(
        "pow",
        lambda rng: Tensor((0.5 + rng.random((4, 5))).astype(dtype)),
        lambda x: ops.tensor_sum(ops.pow_scalar(x, 1.7)),
    )
    case(
        "matmul",
        lambda rng: Tensor(signed(rng, (3 * 4 + 4 * 2,))),
        lambda x: ops.tensor_sum(
            ops.mul(ops.matmul(seg(x, 0, 12, (3, 4)), seg(x, 12, 20, (4, 2))), 0.7)
        ),
    )
    case(
        "reshape",
        lambda rng: Tensor(signed(rng, (3, 8))),
        lambda x: ops.tensor_sum(ops.mul(ops.reshape(x, (4, 6)), Tensor(signed(_rng(17), (4, 6))))),
    )
    case(
        "permute",
        lambda rng: Tensor(signed(rng, (2, 3, 4))),
        lambda x: ops.tensor_sum(ops.mul(ops.permute(x, (2, 0, 1)), 1.1)),
    )
    case(
        "broadcast_to",
        lambda rng: Tensor(signed(rng, (3, 1, 4))),
        lambda x: ops.tensor_sum(ops.mul(ops.broadcast_to(x, (3, 5, 4)), Tensor(signed(_rng(7), (3, 5, 4))))),
    )
    case(
        "sum",
        lambda rng: Tensor(signed(rng, (3, 4, 5))),
        lambda x: ops.tensor_sum(ops.mul(ops.tensor_sum(x, axis=(0, 2)), Tensor(signed(_rng(3), (4,))))),
    )
    case(
        "mean",
        lambda rng: Tensor(signed(rng, (3, 4, 5))),
        lambda x: ops.tensor_sum(ops.mul(ops.mean(x, axis=1, keepdims=True), Tensor(signed(_rng(4), (3, 1, 5))))),
    )
    case(
        "slice",
        lambda rng: Tensor(signed(rng, (5, 6))),
        lambda x: ops.tensor_sum(ops.mul(ops.slice_nd(x, (1, 2), (4, 6)), 0.9)),
    )
    case(
        "pad",
        lambda rng: Tensor(signed(rng, (3, 4))),
        lambda x: ops.tensor_sum(ops.mul(ops.pad_nd(x, ((1, 2), (0, 1))), Tensor(signed(_rng(5), (6, 5))))),
    )
    case(
        "concat",
        lambda rng: Tensor(signed(rng, (24,))),
        lambda x: ops.tensor_sum(
            ops.mul(
                ops.concat([seg(x, 0, 12, (3, 4)), seg(x, 12, 24, (3, 4))], axis=1),
                Tensor(signed(_rng(6), (3, 8))),
            )
        ),
    )
    case(
        "exp",
        lambda rng: Tensor(signed(rng, (3, 4), lo=0.1, hi=1.5)),
        lambda x: ops.tensor_sum(ops.exp(x)),
    )
    case(
        "log",
        lambda rng: Tensor((0.5 + rng.random((3, 4))).astype(dtype)),
        lambda x: ops.tensor_sum(ops.log(x)),
    )
    case(
        "tanh",
        lambda rng: Tensor(signed(rng, (3, 4))),
        lambda x: ops.tensor_sum(ops.tanh(x)),
    )
    case(
        "sigmoid",
        lambda rng: Tensor(signed(rng, (3, 4))),
        lambda x: ops.tensor_sum(ops.sigmoid(x)),
    )
    case(
        "relu",
        lambda rng: Tensor(signed(rng, (4, 5))),
        lambda x: ops.tensor_sum(ops.mul(ops.relu(x), 1.2)),
    )
    case(
        "leaky_relu",
        lambda rng: Tensor(signed(rng, (4, 5))),
        lambda x: ops.tensor_sum(ops.mul(ops.leaky_relu(x, 0.2), 1.2)),
    )
    case(
        "abs",
        lambda rng: Tensor(signed(rng, (4, 5))),
        lambda x: ops.tensor_sum(ops.mul(ops.absolute(x), 0.8)),
    )
    case(
        "clamp",
        lambda rng: Tensor(_away_from((2.0 * rng.random((4, 5)) - 0.5).astype(dtype), (0.25, 0.75), 0.02)),
        lambda x: ops.tensor_sum(ops.mul(ops.clamp(x, 0.25, 0.75), Tensor(signed(_rng(8), (4, 5))))),
    )
    case(
        "unfold3d",
        lambda rng: Tensor(signed(rng, (1, 2, 3, 5, 5))),
        lambda x: ops.tensor_sum(
            ops.mul(ops.unfold3d(x, (2, 3, 3), (1, 2, 2), (0, 1, 1)), Tensor(signed(_rng(9), (1, 36, 18))))
        ),
    )
    case(
        "fold3d",
        lambda rng: Tensor(signed(rng, (1, 36, 18))),
        lambda x: ops.tensor_sum(
            ops.mul(
                ops.fold3d(x, (1, 2, 3, 5, 5), (2, 3, 3), (1, 2, 2), (0, 1, 1)),
                Tensor(signed(_rng(10), (1, 2, 3, 5, 5))),
            )
        ),
    )
    case(
        "conv3d",
        lambda rng: Tensor(signed(rng, (1 * 2 * 3 * 6 * 6 + 2 * 2 * 2 * 3 * 3,))),
        lambda x: ops.tensor_sum(
            ops.mul(
                ops.conv3d(
                    seg(x, 0, 216, (1, 2, 3, 6, 6)),
                    seg(x, 216, 288, (2, 2, 2, 3, 3)),
                    stride=(1, 2, 2),
                    padding=(1, 1, 1),
                ),
                0.6,
            )
        ),
    )
    case(
        "upsample3d_nearest",
        lambda rng: Tensor(signed(rng, (1, 2, 2, 3, 3))),
        lambda x: ops.tensor_sum(
            ops.mul(ops.upsample3d_nearest(x, (1, 2, 2)), Tensor(signed(_rng(11), (1, 2, 2, 6, 6))))
        ),
    )
    case(
        "linear",
        lambda rng: Tensor(signed(rng, (3 * 4 + 4 * 2 + 2,))),
        lambda x: ops.tensor_sum(
            ops.mul(
                ops.linear(seg(x, 0, 12, (3, 4)), seg(x, 12, 20, (4, 2)), seg(x, 20, 22, (2,))),
                Tensor(signed(_rng(12), (3, 2))),
            )
        ),
    )
    case(
        "instance_norm",
        lambda rng: Tensor(signed(rng, (2, 3, 2, 4, 4))),
        lambda x: ops.tensor_sum(ops.mul(ops.instance_norm(x), Tensor(signed(_rng(13), (2, 3, 2, 4, 4))))),
    )
    case(
        "adaptive_instance_norm",
        lambda rng: Tensor(signed(rng, (2 * 3 * 2 * 4 * 4 + 6 + 6,))),
        lambda x: ops.tensor_sum(
            ops.mul(
                ops.adaptive_instance_norm(
                    seg(x, 0, 192, (2, 3, 2, 4, 4)),
                    seg(x, 192, 198, (2, 3)),
                    seg(x, 198, 204, (2, 3)),
                ),
                Tensor(signed(_rng(14), (2, 3, 2, 4, 4))),
            )
        ),
    )
    case(
        "l1_distance",
        lambda rng: Tensor(signed(rng, (40,))),
        lambda x: ops.l1_distance(seg(x, 0, 20, (4, 5)), seg(x, 20, 40, (4, 5))),
    )
    case(
        "softmax_over_channels",
        lambda rng: Tensor(signed(rng, (3, 4, 5))),
        lambda x: ops.tensor_sum(ops.mul(ops.softmax_over_channels(x), Tensor(signed(_rng(15), (3, 4, 5))))),
    )
    case(
        "lerp",
        lambda rng: Tensor(signed(rng, (41,))),
        lambda x: ops.tensor_sum(
            ops.lerp(seg(x, 0, 20, (4, 5)), seg(x, 20, 40, (4, 5)), seg(x, 40, 41, (1,)))
        ),
    )
    return cases


def default_eps(dtype) -> float:
    """FD step with headroom over the dtype's rounding noise."""
    return 1e-2 if np.dtype(dtype) == np.float32 else 1e-5


def run_op_suite(dtype=np.float64, points: int = 10, eps: float | None = None, seed: int = 0) -> dict:
    """Gradcheck every differentiable op at `points` random points.

    Returns {op name: max relative error over all points}.
    """
    if eps is None:
        eps = default_eps(dtype)
    results = {}
    for name, builder, f in op_gradcheck_cases(dtype):
        worst = 0.0
        for k in range(points):
            point = builder(_rng([seed, _stable_tag(name), k]))
            worst = max(worst, finite_diff_check(f, point, eps=eps))
        results[name] = worst
    covered = set(results)
    expected = set(ops.differentiable_ops())
    missing = expected - covered
    if missing:
        raise RuntimeError(f"gradcheck suite is missing ops: {sorted(missing)}")
    return results


def second_order_cases(dtype=np.float64):
    """Penalty-shaped checks for each op family allowed inside critics.

    Each case is (name, param_builder, h) where h(params) is the squared norm
    of the input gradient of a small network using that op, so finite
    differences of h exercise the recorded backward pass itself.
    """

    def signed(rng, shape, lo=0.1, hi=2.1):
        mag = lo + (hi - lo) * rng.random(shape)
        sign = np.where(rng.random(shape) > 0.5, 1.0, -1.0)
        return (mag * sign).astype(dtype)

    probe_conv = Tensor(signed(_rng(24), (1, 2, 2, 2, 2)))
    probe_lin = Tensor(signed(_rng(25), (4, 3)))
    probe_leaky = Tensor(signed(_rng(26), (4, 5)))
    probe_in = Tensor(signed(_rng(27), (1, 2, 2, 3, 3)))
    probe_lerp = Tensor(signed(_rng(28), (3, 4)))

    x_conv = signed(_rng(31), (1, 1, 3, 4, 4))
    x_lin = signed(_rng(32), (4, 6))
    x_leaky = signed(_rng(33), (4, 5))
    x_in = signed(_rng(34), (1, 2, 2, 3, 3))
    x_mean = signed(_rng(35), (3, 4))
    x_lerp = signed(_rng(36), (3, 4))

    return [
        (
            "conv3d",
            lambda rng: Tensor(signed(rng, (2, 1, 2, 3, 3))),
            input_grad_norm_sq(
                lambda p, x: ops.tensor_sum(ops.mul(ops.conv3d(x, p, (1, 2, 2), (0, 0, 0)), probe_conv)),
                x_conv,
            ),
        ),
        (
            "linear",
            lambda rng: Tensor(signed(rng, (6 * 3 + 3,))),
            input_grad_norm_sq(
                lambda p, x: ops.tensor_sum(
                    ops.mul(
                        ops.linear(
                            x,
                            ops.reshape(ops.slice_nd(p, (0,), (18,)), (6, 3)),
                            ops.slice_nd(p, (18,), (21,)),
                        ),
                        probe_lin,
                    )
                ),
                x_lin,
            ),
        ),
        (
            "leaky_relu",
            lambda rng: Tensor(signed(rng, (4, 5))),
            input_grad_norm_sq(
                lambda p, x: ops.tensor_sum(ops.mul(ops.leaky_relu(ops.mul(x, p), 0.2), probe_leaky)),
                x_leaky,
            ),
        ),
        (
            "instance_norm",
            lambda rng: Tensor(signed(rng, (1, 2, 2, 3, 3), lo=0.05, hi=0.4)),
            input_grad_norm_sq(
                lambda p, x: ops.tensor_sum(ops.mul(ops.instance_norm(ops.add(x, p)), probe_in)),
                x_in,
            ),
        ),
        (
            "mean",
            lambda rng: Tensor(signed(rng, (3, 4))),
            input_grad_norm_sq(
                lambda p, x: ops.pow_scalar(ops.mean(ops.mul(x, p)), 2.0),
                x_mean,
            ),
        ),
        (
            "lerp",
            lambda rng: Tensor(signed(rng, (3, 4))),
            input_grad_norm_sq(
                lambda p, x: ops.tensor_sum(ops.mul(ops.pow_scalar(ops.lerp(x, p, 0.3), 2.0), probe_lerp)),
                x_lerp,
            ),
        ),
    ]


def run_second_order_suite(dtype=np.float64, points: int = 3, eps: float | None = None, seed: int = 0) -> dict:
    """FD-check the parameter derivative of input-gradient norms (critic op set)."""
    if eps is None:
        eps = default_eps(dtype)
    results = {}
    for name, builder, h in second_order_cases(dtype):
        worst = 0.0
        for k in range(points):
            point = builder(_rng([seed, 1000, _stable_tag(name), k]))
            worst = max(worst, finite_diff_check(h, point, eps=eps))
        results[name] = worst
    return results
