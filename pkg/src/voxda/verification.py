"""Executable verification harnesses.

Two kinds of evidence beyond the unit tests: finite-difference checks of
every loss term (including the second-order penalty path), and a critic-only
training run against point masses whose Wasserstein distance is known in
closed form.  The CLI exposes both so a fresh install can re-verify the
gradient machinery in seconds.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import data, losses, networks, training
from .engine import Tensor, backward, enable_grad, no_grad, ops
from .engine.gradcheck import finite_diff_check, run_op_suite, run_second_order_suite

FIRST_ORDER_TOL = 1e-6
SECOND_ORDER_TOL = 1e-3


def _tag(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def _signed(rng, shape, lo=0.1, hi=2.1):
    mag = lo + (hi - lo) * rng.random(shape)
    sign = np.where(rng.random(shape) > 0.5, 1.0, -1.0)
    return mag * sign


def _seg(x: Tensor, start: int, stop: int, shape) -> Tensor:
    return ops.reshape(ops.slice_nd(x, (start,), (stop,)), shape)


class _ProbeCritic:
    """Model-protocol critic built from explicit kernel tensors.

    conv(3x3 plane) -> leaky -> conv(3x3 plane) -> per-sample mean; every op
    sits in the certified second-order set, and the kernels can be slices of
    a finite-difference probe.
    """

    def __init__(self, k0: Tensor, k1: Tensor):
        self.k0 = k0
        self.k1 = k1

    def critic(self, domain: str, x: Tensor) -> Tensor:
        h = ops.leaky_relu(ops.conv3d(x, self.k0, (1, 1, 1), (0, 1, 1)), 0.2)
        h = ops.conv3d(h, self.k1, (1, 1, 1), (0, 1, 1))
        return ops.mean(h, axis=(1, 2, 3, 4))


class _ProbeContentDisc:
    """Model-protocol content discriminator: flatten, dot, sigmoid."""

    def __init__(self, w: Tensor):
        self.w = w

    def content_discriminate(self, z: Tensor) -> Tensor:
        n = z.shape[0]
        flat = ops.reshape(z, (n, int(np.prod(z.shape[1:]))))
        logits = ops.reshape(ops.matmul(flat, ops.reshape(self.w, (flat.shape[1], 1))), (n,))
        return ops.sigmoid(logits)


_K0_SHAPE = (3, 1, 1, 3, 3)
_K1_SHAPE = (1, 3, 1, 3, 3)
_K0_SIZE = int(np.prod(_K0_SHAPE))
_K1_SIZE = int(np.prod(_K1_SHAPE))


def _probe_critic_from(p: Tensor) -> _ProbeCritic:
    return _ProbeCritic(
        _seg(p, 0, _K0_SIZE, _K0_SHAPE),
        _seg(p, _K0_SIZE, _K0_SIZE + _K1_SIZE, _K1_SHAPE),
    )


def loss_gradcheck_cases():
    """(name, tolerance, point_builder, f) per loss term.

    Points are built so the mean-absolute-error kinks stay at least 0.2 away
    from zero, far outside the finite-difference step.
    """
    cases = []

    def case(name, tol, builder, f):
        cases.append((name, tol, builder, f))

    def offset_pair(rng, shape):
        n = int(np.prod(shape))
        a = _signed(rng, (n,))
        gap = np.where(rng.random(n) > 0.5, 1.0, -1.0) * (0.3 + rng.random(n))
        return Tensor(np.concatenate([a, a + gap]))

    n_rec = 24
    case(
        "self_reconstruction",
        FIRST_ORDER_TOL,
        lambda rng: offset_pair(rng, (4, 6)),
        lambda x: losses.self_reconstruction_loss(_seg(x, 0, n_rec, (4, 6)), _seg(x, n_rec, 2 * n_rec, (4, 6))),
    )
    n_zc = 2 * 2 * 1 * 2 * 2
    case(
        "latent_content",
        FIRST_ORDER_TOL,
        lambda rng: offset_pair(rng, (2, 2, 1, 2, 2)),
        lambda x: losses.latent_content_loss(
            _seg(x, 0, n_zc, (2, 2, 1, 2, 2)), _seg(x, n_zc, 2 * n_zc, (2, 2, 1, 2, 2))
        ),
    )
    n_zs = 12
    case(
        "latent_style",
        FIRST_ORDER_TOL,
        lambda rng: offset_pair(rng, (2, 6)),
        lambda x: losses.latent_style_loss(_seg(x, 0, n_zs, (2, 6)), _seg(x, n_zs, 2 * n_zs, (2, 6))),
    )

    cyc_cfg = networks.NetConfig(patch=(2, 8, 8), base_width=4, content_channels=4, style_dim=4, seg_width=8)
    cyc_bundle = networks.build_model(cyc_cfg, seed=97)
    cyc_rng = np.random.default_rng(_tag("cyc_points"))
    # decoders end in tanh, so |image| >= 1.2 keeps every l1 kink >= 0.2 away
    cyc_x = Tensor(_signed(cyc_rng, (1, 1, 2, 8, 8), lo=1.3, hi=1.8))
    cyc_y = Tensor(_signed(cyc_rng, (1, 1, 2, 8, 8), lo=1.3, hi=1.8))

    def cyc_f(t):
        x = ops.add(cyc_x, _seg(t, 0, 1, (1,)))
        y = ops.add(cyc_y, _seg(t, 1, 2, (1,)))
        return losses.cross_cycle_loss(cyc_bundle, x, y)

    case(
        "cross_cycle",
        FIRST_ORDER_TOL,
        lambda rng: Tensor(_signed(rng, (2,), lo=0.01, hi=0.05)),
        cyc_f,
    )

    pen_rng = np.random.default_rng(_tag("penalty_points"))
    pen_real = Tensor(_signed(pen_rng, (2, 1, 2, 4, 4)))
    pen_fake = Tensor(_signed(pen_rng, (2, 1, 2, 4, 4)))

    def penalty_f(p):
        with enable_grad():
            return losses.gradient_penalty(_probe_critic_from(p), "X", pen_real, pen_fake, seed=[41, 2])

    case(
        "gradient_penalty",
        SECOND_ORDER_TOL,
        lambda rng: Tensor(_signed(rng, (_K0_SIZE + _K1_SIZE,), lo=0.05, hi=0.5)),
        penalty_f,
    )

    def critic_obj_f(p):
        with enable_grad():
            obj, _ = losses.wgan_critic_loss(_probe_critic_from(p), "X", pen_real, pen_fake, 7.0, seed=[43, 2])
        return obj

    case(
        "critic_objective",
        SECOND_ORDER_TOL,
        lambda rng: Tensor(_signed(rng, (_K0_SIZE + _K1_SIZE,), lo=0.05, hi=0.5)),
        critic_obj_f,
    )

    gen_rng = np.random.default_rng(_tag("generator_points"))
    gen_critic = _ProbeCritic(
        Tensor(_signed(gen_rng, _K0_SHAPE, lo=0.05, hi=0.5)),
        Tensor(_signed(gen_rng, _K1_SHAPE, lo=0.05, hi=0.5)),
    )
    gen_real = Tensor(_signed(gen_rng, (2, 1, 2, 4, 4)))
    n_gen = int(np.prod((2, 1, 2, 4, 4)))

    def gen_f(x):
        fake = _seg(x, 0, n_gen, (2, 1, 2, 4, 4))
        with enable_grad():
            _, gen = losses.wgan_critic_loss(gen_critic, "X", gen_real, fake, 3.0, seed=[47, 2])
        return gen

    case(
        "generator_term",
        FIRST_ORDER_TOL,
        lambda rng: Tensor(_signed(rng, (n_gen,))),
        gen_f,
    )

    code_shape = (2, 2, 1, 2, 2)
    n_code = int(np.prod(code_shape))
    disc_rng = np.random.default_rng(_tag("content_disc_points"))
    disc_zx = Tensor(_signed(disc_rng, code_shape, lo=0.2, hi=1.0))
    disc_zy = Tensor(_signed(disc_rng, code_shape, lo=0.2, hi=1.0))

    case(
        "content_disc_objective",
        FIRST_ORDER_TOL,
        lambda rng: Tensor(_signed(rng, (n_code // 2,), lo=0.1, hi=0.8)),
        lambda w: losses.content_adversarial_loss(_ProbeContentDisc(w), disc_zx, disc_zy)[0],
    )

    enc_disc = _ProbeContentDisc(Tensor(_signed(np.random.default_rng(_tag("enc_disc")), (n_code // 2,), lo=0.1, hi=0.8)))

    def enc_f(z):
        zx = _seg(z, 0, n_code, code_shape)
        zy = _seg(z, n_code, 2 * n_code, code_shape)
        return losses.content_adversarial_loss(enc_disc, zx, zy)[1]

    case(
        "content_encoder_objective",
        FIRST_ORDER_TOL,
        lambda rng: Tensor(_signed(rng, (2 * n_code,), lo=0.2, hi=1.0)),
        enc_f,
    )

    seg_target = (np.random.default_rng(_tag("seg_target")).random((1, 2, 3, 3)) > 0.5).astype(np.int64)
    n_logit = 1 * 2 * 2 * 3 * 3

    case(
        "seg_dice_ce",
        FIRST_ORDER_TOL,
        lambda rng: Tensor(_signed(rng, (n_logit,))),
        lambda x: losses.soft_dice_weighted_ce(_seg(x, 0, n_logit, (1, 2, 2, 3, 3)), seg_target, (1.2, 3.4)),
    )

    weights = losses.LossWeights()

    def total_f(v):
        terms = {
            name: ops.reshape(_seg(v, i, i + 1, (1,)), ())
            for i, name in enumerate(losses.REPORT_TERMS)
        }
        return losses.total_loss(weights, terms)

    case(
        "total_weighted_sum",
        FIRST_ORDER_TOL,
        lambda rng: Tensor(_signed(rng, (len(losses.REPORT_TERMS),))),
        total_f,
    )
    return cases


def run_loss_suite(points: int = 10, seed: int = 0) -> dict:
    """FD-check every loss term at `points` random points.

    Returns {name: (max relative error, tolerance)}.
    """
    results = {}
    for name, tol, builder, f in loss_gradcheck_cases():
        worst = 0.0
        for k in range(points):
            point = builder(np.random.default_rng([seed, _tag(name), k]))
            worst = max(worst, finite_diff_check(f, point, eps=1e-5))
        results[name] = (worst, tol)
    return results


def run_full_gradient_suite(points: int = 10, seed: int = 0) -> dict:
    """Ops, second-order paths, and loss terms in one report.

    Returns {case name: (max relative error, tolerance)} across all three
    suites; every value must sit under its tolerance.
    """
    report = {}
    for name, err in run_op_suite(points=points, seed=seed).items():
        report[f"op/{name}"] = (err, FIRST_ORDER_TOL)
    for name, err in run_second_order_suite(points=max(3, points // 3), seed=seed).items():
        report[f"second_order/{name}"] = (err, SECOND_ORDER_TOL)
    for name, (err, tol) in run_loss_suite(points=points, seed=seed).items():
        report[f"loss/{name}"] = (err, tol)
    return report


def gradient_suite_failures(report: dict) -> list:
    return [name for name, (err, tol) in sorted(report.items()) if not err < tol]


# -- Wasserstein sanity ------------------------------------------------------------


def wasserstein_sanity(steps: int = 500, alpha: float = 25.0, lr: float = 0.02, seed: int = 0, batch: int = 8) -> dict:
    """Train only a linear one-voxel critic to separate point masses at 0 and 3.

    The penalized optimum is w = -(1 + 3/(2*alpha)) with estimated distance
    -3w = 3 + 9/(2*alpha); alpha=25 puts the target at 3.18.  Returns the
    final gap, the critic weight, and the closed-form target.
    """
    cfg = networks.NetConfig(patch=(1, 1, 1), critic_kind="linear")
    bundle = networks.build_model(cfg, seed=seed)
    real = Tensor(np.zeros((batch, 1, 1, 1, 1)))
    fake = Tensor(np.full((batch, 1, 1, 1, 1), 3.0))
    params = bundle.parameters(("critic_X",))
    state = training.init_optimizer(params)
    for i in range(steps):
        objective, _ = losses.wgan_critic_loss(bundle, "X", real, fake, alpha, seed=[seed, _tag("ws_mix"), i])
        grads = backward(objective)
        named = {name: grads[t] for name, t in params.items() if t in grads}
        bundle.set_parameters(training.adam_step(params, named, state, lr))
        params = bundle.parameters(("critic_X",))
    gap = losses.wasserstein_gap(bundle, "X", real, fake)
    return {
        "gap": gap,
        "weight": float(params["critic_X/w.w"].data.reshape(-1)[0]),
        "target": 3.0 + 9.0 / (2.0 * alpha),
    }


# -- content alignment ---------------------------------------------------------------


def matched_geometry_pairs(count: int = 5, dims=(8, 32, 32), seed_base: int = 777000) -> list:
    """Normalized (X, Y) volume pairs sharing organ geometry exactly.

    Phantom geometry depends only on the seed, never the domain, so rendering
    one seed in both domains yields the same anatomy under two appearances.
    """
    pairs = []
    for s in range(count):
        vx, _ = data.generate_phantom(data.default_phantom_spec(seed_base + s, "X", dims=dims))
        vy, _ = data.generate_phantom(data.default_phantom_spec(seed_base + s, "Y", dims=dims))
        pairs.append((data.normalize(vx), data.normalize(vy)))
    return pairs


def content_alignment_l1(bundle, pairs) -> float:
    """Mean L1 distance between the content codes of matched volume pairs."""
    dtype = bundle.config.np_dtype()
    vals = []
    with no_grad():
        for vx, vy in pairs:
            zx = networks.encode_content(bundle, "X", Tensor(vx.voxels[None, None].astype(dtype)))
            zy = networks.encode_content(bundle, "Y", Tensor(vy.voxels[None, None].astype(dtype)))
            vals.append(ops.l1_distance(zx, zy).item())
    return float(np.mean(vals))
