"""Loss-term tests: analytic examples, invariants, and gradient flow."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxda import losses
from voxda.engine import (
    NumericDomainError,
    ShapeError,
    Tensor,
    UnsupportedOpError,
    backward,
    enable_grad,
    finite_diff_check,
    ops,
)
from voxda.losses import LossWeights
from voxda.networks import NetConfig, build_model


class LinearCritic:
    """D(y) = <w, y> per sample; gradient is w everywhere."""

    def __init__(self, w):
        self.w = Tensor(np.asarray(w, dtype=np.float64).reshape(-1, 1), requires_grad=True)

    def critic(self, domain, image):
        n = image.shape[0]
        flat = ops.reshape(image, (n, int(np.prod(image.shape[1:]))))
        return ops.reshape(ops.matmul(flat, self.w), (n,))


class TwoLayerCritic:
    """conv + leaky + conv + mean; stays in the certified op set."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.k0 = Tensor(rng.standard_normal((3, 1, 1, 3, 3)) * 0.4, requires_grad=True)
        self.k1 = Tensor(rng.standard_normal((1, 3, 1, 3, 3)) * 0.4, requires_grad=True)

    def critic(self, domain, image):
        h = ops.leaky_relu(ops.conv3d(image, self.k0, (1, 1, 1), (0, 1, 1)), 0.2)
        h = ops.conv3d(h, self.k1, (1, 1, 1), (0, 1, 1))
        return ops.mean(h, axis=(1, 2, 3, 4))


class TanhCritic:
    def critic(self, domain, image):
        return ops.mean(ops.tanh(image), axis=(1, 2, 3, 4))


class IdentityNets:
    def encode_content(self, domain, x):
        return x

    def encode_style(self, domain, x):
        return x

    def decode(self, domain, content, style):
        return content


class ConstantDecoders(IdentityNets):
    def __init__(self, c):
        self.c = float(c)

    def decode(self, domain, content, style):
        return ops.add(ops.mul(content, 0.0), self.c)


def _pair(shape, seed):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal(shape)), Tensor(rng.standard_normal(shape))


# -- reconstruction and latent losses ---------------------------------------------


def test_self_reconstruction_identity_is_zero():
    x, _ = _pair((2, 1, 3, 4, 4), 0)
    assert losses.self_reconstruction_loss(x, x).item() == 0.0


def test_self_reconstruction_constant_offset():
    x = Tensor(np.zeros((2, 3, 4)))
    r = Tensor(np.ones((2, 3, 4)))
    assert losses.self_reconstruction_loss(x, r).item() == pytest.approx(1.0)


def test_l1_losses_match_loop_oracle():
    a, b = _pair((3, 5, 2), 1)
    want = sum(abs(float(u) - float(v)) for u, v in zip(a.data.flat, b.data.flat)) / a.size
    for fn in (losses.self_reconstruction_loss, losses.latent_content_loss, losses.latent_style_loss):
        assert abs(fn(a, b).item() - want) < 1e-12


def test_latent_loss_scalar_example():
    a = Tensor(np.array([2.0]))
    b = Tensor(np.array([5.0]))
    assert losses.latent_content_loss(a, b).item() == pytest.approx(3.0)


def test_l1_losses_symmetric_nonnegative():
    a, b = _pair((4, 4), 2)
    v1 = losses.latent_style_loss(a, b).item()
    v2 = losses.latent_style_loss(b, a).item()
    assert v1 == pytest.approx(v2) and v1 > 0


def test_l1_loss_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        losses.self_reconstruction_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


# -- cross-cycle -------------------------------------------------------------------


def test_cross_cycle_identity_doubles_zero():
    x, y = _pair((2, 1, 2, 4, 4), 3)
    assert losses.cross_cycle_loss(IdentityNets(), x, y).item() == 0.0


def test_cross_cycle_constant_decoders():
    z = Tensor(np.zeros((2, 1, 2, 4, 4)))
    got = losses.cross_cycle_loss(ConstantDecoders(1.5), z, z).item()
    assert got == pytest.approx(2 * 1.5)


def test_cross_cycle_all_six_networks_participate():
    """Every encoder/decoder group must receive gradient from the cycle term."""
    cfg = NetConfig(patch=(2, 8, 8), base_width=4, content_channels=4, style_dim=4)
    bundle = build_model(cfg, seed=5)
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((1, 1, 2, 8, 8)))
    y = Tensor(rng.standard_normal((1, 1, 2, 8, 8)))
    loss = losses.cross_cycle_loss(bundle, x, y)
    grads = backward(loss)
    by_tensor = {id(t): g for t, g in grads.items()}
    for group in ("enc_content_X", "enc_content_Y", "enc_style_X", "enc_style_Y", "dec_X", "dec_Y"):
        total = 0.0
        for t in bundle.groups[group].values():
            g = by_tensor.get(id(t))
            if g is not None:
                total += float(np.abs(g.data).sum())
        assert total > 0, f"no gradient reached {group}"


# -- gradient penalty ---------------------------------------------------------------


def test_penalty_linear_critic_analytic():
    rng = np.random.default_rng(7)
    real = Tensor(rng.standard_normal((4, 1, 2, 3, 3)))
    fake = Tensor(rng.standard_normal((4, 1, 2, 3, 3)))
    for norm, want in ((3.0, 4.0), (1.0, 0.0), (0.5, 0.25)):
        w = rng.standard_normal(18)
        w *= norm / np.linalg.norm(w)
        for seed in (0, 1, 99):
            got = losses.gradient_penalty(LinearCritic(w), "X", real, fake, seed=seed).item()
            assert abs(got - want) < 1e-9


def test_penalty_independent_of_inputs():
    rng = np.random.default_rng(8)
    w = rng.standard_normal(12)
    w *= 2.0 / np.linalg.norm(w)
    vals = []
    for seed in range(3):
        real = Tensor(rng.standard_normal((3, 1, 1, 4, 3)) * 10)
        fake = Tensor(rng.standard_normal((3, 1, 1, 4, 3)) * 10)
        vals.append(losses.gradient_penalty(LinearCritic(w), "X", real, fake, seed=seed).item())
    assert max(vals) - min(vals) < 1e-9
    assert vals[0] == pytest.approx(1.0, abs=1e-9)  # (2-1)^2


def test_penalty_two_layer_matches_numeric_norm():
    """Penalty value vs finite-difference gradient norms of the critic."""
    critic = TwoLayerCritic(seed=9)
    rng = np.random.default_rng(10)
    real = Tensor(rng.standard_normal((2, 1, 2, 4, 4)))
    fake = Tensor(rng.standard_normal((2, 1, 2, 4, 4)))
    seed = 21
    got = losses.gradient_penalty(critic, "X", real, fake, seed=seed).item()

    mixed = losses.interpolate_samples(real, fake, seed)
    eps = 1e-6
    flat = mixed.data.reshape(mixed.shape[0], -1)
    acc = 0.0
    for i in range(flat.shape[0]):
        g = np.zeros(flat.shape[1])
        for j in range(flat.shape[1]):
            orig = flat[i, j]
            flat[i, j] = orig + eps
            fp = critic.critic("X", Tensor(mixed.data)).data[i]
            flat[i, j] = orig - eps
            fm = critic.critic("X", Tensor(mixed.data)).data[i]
            flat[i, j] = orig
            g[j] = (fp - fm) / (2 * eps)
        acc += (np.linalg.norm(g) - 1.0) ** 2
    want = acc / flat.shape[0]
    assert abs(got - want) / max(1.0, abs(want)) < 1e-3


def test_penalty_parameter_gradient_matches_fd():
    """Double-backward path: d(penalty)/d(critic params) vs finite differences."""
    rng = np.random.default_rng(11)
    real = Tensor(rng.standard_normal((2, 1, 1, 4, 4)))
    fake = Tensor(rng.standard_normal((2, 1, 1, 4, 4)))

    def f(kflat):
        with enable_grad():
            critic = TwoLayerCritic(seed=12)
            critic.k0 = ops.reshape(kflat, (3, 1, 1, 3, 3))
            return losses.gradient_penalty(critic, "X", real, fake, seed=5)

    k0 = TwoLayerCritic(seed=12).k0
    err = finite_diff_check(f, Tensor(k0.data.reshape(-1).copy()), eps=1e-5)
    assert err < 1e-3


def test_penalty_rejects_uncertified_critic():
    rng = np.random.default_rng(13)
    real = Tensor(rng.standard_normal((2, 1, 1, 3, 3)))
    fake = Tensor(rng.standard_normal((2, 1, 1, 3, 3)))
    with pytest.raises(UnsupportedOpError):
        losses.gradient_penalty(TanhCritic(), "X", real, fake, seed=0)


def test_penalty_differentiable_wrt_critic_params():
    critic = TwoLayerCritic(seed=14)
    rng = np.random.default_rng(15)
    real = Tensor(rng.standard_normal((2, 1, 1, 4, 4)))
    fake = Tensor(rng.standard_normal((2, 1, 1, 4, 4)))
    gp = losses.gradient_penalty(critic, "X", real, fake, seed=1)
    grads = backward(gp)
    assert critic.k0 in grads and critic.k1 in grads
    assert np.isfinite(grads[critic.k0].data).all()


# -- wgan objective -------------------------------------------------------------------


def test_constant_critic_objective_is_alpha():
    class ConstCritic:
        def critic(self, domain, image):
            return ops.mul(ops.mean(image, axis=(1, 2, 3, 4)), 0.0)

    real, fake = _pair((4, 1, 1, 3, 3), 16)
    c_obj, gen = losses.wgan_critic_loss(ConstCritic(), "X", real, fake, alpha=10.0, seed=2)
    assert c_obj.item() == pytest.approx(10.0, rel=1e-4)
    assert gen.item() == 0.0


def test_identical_real_fake_mean_difference_zero():
    critic = TwoLayerCritic(seed=17)
    x, _ = _pair((3, 1, 2, 4, 4), 18)
    assert losses.wasserstein_gap(critic, "X", x, x) == pytest.approx(0.0, abs=1e-12)


def test_generator_term_carries_no_penalty_gradient():
    """The generator sees only -mean D(fake): its gradient must not change
    when alpha changes."""
    critic = TwoLayerCritic(seed=19)
    rng = np.random.default_rng(20)
    real = Tensor(rng.standard_normal((2, 1, 1, 4, 4)))
    base = rng.standard_normal((2, 1, 1, 4, 4))

    def gen_grad(alpha):
        fake_leaf = Tensor(base.copy(), requires_grad=True)
        _, gen = losses.wgan_critic_loss(critic, "X", real, fake_leaf, alpha=alpha, seed=3)
        return backward(gen)[fake_leaf].data

    g1 = gen_grad(0.0)
    g2 = gen_grad(50.0)
    assert np.array_equal(g1, g2)


def test_critic_objective_gradient_matches_fd():
    rng = np.random.default_rng(21)
    real = Tensor(rng.standard_normal((2, 1, 1, 4, 4)))
    fake = Tensor(rng.standard_normal((2, 1, 1, 4, 4)))

    def f(kflat):
        with enable_grad():
            critic = TwoLayerCritic(seed=22)
            critic.k1 = ops.reshape(kflat, (1, 3, 1, 3, 3))
            c_obj, _ = losses.wgan_critic_loss(critic, "X", real, fake, alpha=10.0, seed=7)
        return c_obj

    k1 = TwoLayerCritic(seed=22).k1
    err = finite_diff_check(f, Tensor(k1.data.reshape(-1).copy()), eps=1e-5)
    assert err < 1e-3


# -- content adversarial ----------------------------------------------------------------


class FixedDisc:
    """Returns sigmoid(scale * mean(z)) so outputs depend on the codes."""

    def __init__(self, scale=1.0):
        self.scale = Tensor(np.array(float(scale)), requires_grad=True)

    def content_discriminate(self, z):
        return ops.sigmoid(ops.mul(ops.mean(z, axis=tuple(range(1, z.ndim))), self.scale))


def test_uniform_disc_gives_log_two():
    z1, z2 = _pair((3, 4, 1, 4, 4), 23)
    _, enc = losses.content_adversarial_loss(FixedDisc(scale=0.0), z1, z2)
    assert enc.item() == pytest.approx(float(np.log(2.0)))


def test_perfect_disc_objective_near_zero():
    class PerfectDisc:
        def content_discriminate(self, z):
            val = 1.0 if float(z.data.mean()) > 0 else 0.0
            return ops.mul(ops.add(ops.mul(ops.mean(z, axis=(1, 2, 3, 4)), 0.0), val), 1.0)

    z_x = Tensor(np.full((2, 4, 1, 4, 4), 2.0))
    z_y = Tensor(np.full((2, 4, 1, 4, 4), -2.0))
    disc, _ = losses.content_adversarial_loss(PerfectDisc(), z_x, z_y)
    assert disc.item() < 1e-5


def test_encoder_objective_minimized_at_half():
    """Grid scan: -[1/2 log p + 1/2 log(1-p)] has its minimum exactly at 1/2."""
    grid = np.linspace(0.01, 0.99, 197)
    vals = -(0.5 * np.log(grid) + 0.5 * np.log(1 - grid))
    assert grid[int(np.argmin(vals))] == pytest.approx(0.5)
    assert vals.min() == pytest.approx(float(np.log(2.0)))


def test_encoder_objective_symmetric_in_domains():
    z1, z2 = _pair((3, 4, 1, 4, 4), 24)
    d = FixedDisc(scale=0.7)
    _, e12 = losses.content_adversarial_loss(d, z1, z2)
    _, e21 = losses.content_adversarial_loss(d, z2, z1)
    assert e12.item() == pytest.approx(e21.item(), abs=1e-12)


def test_disc_objective_detaches_codes():
    d = FixedDisc(scale=0.7)
    z1 = Tensor(np.random.default_rng(25).standard_normal((2, 4, 1, 4, 4)), requires_grad=True)
    z2, _ = _pair((2, 4, 1, 4, 4), 26)
    disc, _ = losses.content_adversarial_loss(d, z1, z2)
    grads = backward(disc)
    assert z1 not in grads and d.scale in grads


def test_encoder_objective_gradient_matches_fd():
    d = FixedDisc(scale=0.9)
    z2, _ = _pair((2, 3, 1, 3, 3), 27)

    def f(z):
        zc = ops.reshape(z, (2, 3, 1, 3, 3))
        _, enc = losses.content_adversarial_loss(d, zc, z2)
        return enc

    pt = Tensor(np.random.default_rng(28).standard_normal(2 * 3 * 3 * 3))
    assert finite_diff_check(f, pt, eps=1e-5) < 1e-6


# -- total loss ----------------------------------------------------------------------


def test_total_loss_all_ones_default_weights():
    # lambda_wgan*(1+1) + lambda_recon*(1+1) + lambda_cyc*1 + lambda_latent*(1+1) + lambda_content*1
    tot = losses.total_loss(LossWeights(), {k: 1.0 for k in losses.REPORT_TERMS})
    assert tot.item() == pytest.approx(2 * 1.0 + 2 * 10.0 + 0.1 + 2 * 10.0 + 1.0)


def test_total_loss_zero_weights():
    w = LossWeights(lambda_wgan=0, lambda_recon=0, lambda_cyc=0, lambda_latent=0, lambda_content=0, alpha=0)
    tot = losses.total_loss(w, {k: 3.7 for k in losses.REPORT_TERMS})
    assert tot.item() == 0.0


def test_total_loss_homogeneous_in_weights():
    rng = np.random.default_rng(29)
    terms = {k: float(rng.random()) for k in losses.REPORT_TERMS}
    w1 = LossWeights()
    w2 = LossWeights(
        lambda_wgan=2 * w1.lambda_wgan,
        lambda_recon=2 * w1.lambda_recon,
        lambda_cyc=2 * w1.lambda_cyc,
        lambda_latent=2 * w1.lambda_latent,
        lambda_content=2 * w1.lambda_content,
        alpha=w1.alpha,
    )
    assert losses.total_loss(w2, terms).item() == pytest.approx(2 * losses.total_loss(w1, terms).item())


def test_total_loss_nan_poisoning_names_term():
    terms = {k: 1.0 for k in losses.REPORT_TERMS}
    terms["cyc"] = float("nan")
    with pytest.raises(NumericDomainError, match="cyc"):
        losses.total_loss(LossWeights(), terms)


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_recon=-1.0)


def test_report_reconciles():
    rng = np.random.default_rng(30)
    terms = {k: float(rng.random()) for k in losses.REPORT_TERMS}
    report = losses.make_report(LossWeights(), **terms)
    assert report.reconciles(LossWeights(), tol=1e-9)


# -- segmentation loss ------------------------------------------------------------------


def _one_hot_logits(tgt, scale=40.0):
    return np.stack([(1 - tgt) * scale, tgt * scale], axis=1).astype(np.float64)


def test_seg_loss_perfect_prediction_near_zero():
    rng = np.random.default_rng(31)
    tgt = (rng.random((2, 3, 4, 4)) > 0.7).astype(np.int64)
    loss = losses.soft_dice_weighted_ce(Tensor(_one_hot_logits(tgt)), tgt, class_weights=(1.0, 1.0))
    assert loss.item() < 1e-5


def test_seg_loss_empty_target_no_blowup():
    tgt = np.zeros((1, 2, 4, 4), dtype=np.int64)
    loss = losses.soft_dice_weighted_ce(Tensor(_one_hot_logits(tgt)), tgt, class_weights=(1.0, 1.0))
    assert loss.item() < 1e-5  # epsilon guard keeps the Dice term ~0


def test_seg_loss_matches_loop_oracle():
    rng = np.random.default_rng(32)
    logits = rng.standard_normal((2, 2, 2, 3, 3))
    tgt = (rng.random((2, 2, 3, 3)) > 0.5).astype(np.int64)
    w = (0.7, 1.9)

    # direct-summation oracle
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    p_fg, g_fg = p[:, 1], (tgt == 1).astype(float)
    dice = 1 - (2 * (p_fg * g_fg).sum() + 1.0) / (p_fg.sum() + g_fg.sum() + 1.0)
    pc = np.clip(p, 1e-7, 1 - 1e-7)
    ce_map = -(w[0] * (tgt == 0) * np.log(pc[:, 0]) + w[1] * (tgt == 1) * np.log(pc[:, 1]))
    want = dice + ce_map.mean()

    got = losses.soft_dice_weighted_ce(Tensor(logits), tgt, class_weights=w).item()
    assert abs(got - want) < 1e-9


def test_seg_loss_rejects_negative_weight():
    tgt = np.zeros((1, 2, 4, 4), dtype=np.int64)
    with pytest.raises(ValueError):
        losses.soft_dice_weighted_ce(Tensor(_one_hot_logits(tgt)), tgt, class_weights=(-1.0, 1.0))


def test_seg_loss_gradient_matches_fd():
    rng = np.random.default_rng(33)
    tgt = (rng.random((1, 2, 4, 4)) > 0.6).astype(np.int64)

    def f(flat):
        return losses.soft_dice_weighted_ce(ops.reshape(flat, (1, 2, 2, 4, 4)), tgt, class_weights=(1.0, 2.0))

    pt = Tensor(rng.standard_normal(2 * 2 * 4 * 4))
    assert finite_diff_check(f, pt, eps=1e-5) < 1e-6


def test_default_class_weights_inverse_frequency_floored():
    tgt = np.zeros((1, 1, 10, 10), dtype=np.int64)
    tgt[0, 0, 0, :2] = 1  # 2% foreground, below the 5% floor
    w_bg, w_fg = losses.batch_class_weights(tgt)
    assert w_fg == pytest.approx(1 / 0.05)
    assert w_bg == pytest.approx(1 / 0.98)


# -- metrics -----------------------------------------------------------------------------


def test_dice_jaccard_identical_masks():
    m = (np.random.default_rng(34).random((4, 5, 5)) > 0.5).astype(np.int64)
    assert losses.dice_metric(m, m) == 1.0
    assert losses.jaccard_metric(m, m) == 1.0


def test_dice_jaccard_worked_example():
    a = np.zeros(24, dtype=np.int64)
    b = np.zeros(24, dtype=np.int64)
    a[:8] = 1
    b[4:12] = 1
    assert losses.dice_metric(a, b) == pytest.approx(0.5)
    assert losses.jaccard_metric(a, b) == pytest.approx(1 / 3)


def test_dice_jaccard_disjoint_and_empty():
    a = np.zeros(10, dtype=np.int64)
    b = np.zeros(10, dtype=np.int64)
    assert losses.dice_metric(a, b) == 1.0 and losses.jaccard_metric(a, b) == 1.0
    a[:3] = 1
    b[5:] = 1
    assert losses.dice_metric(a, b) == 0.0 and losses.jaccard_metric(a, b) == 0.0


def test_metrics_reject_non_binary():
    with pytest.raises(ValueError):
        losses.dice_metric(np.array([0, 1, 2]), np.array([0, 1, 1]))


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2**30 - 1))
def test_jaccard_dice_identity(seed):
    rng = np.random.default_rng(seed)
    a = (rng.random(60) > rng.random()).astype(np.int64)
    b = (rng.random(60) > rng.random()).astype(np.int64)
    d = losses.dice_metric(a, b)
    j = losses.jaccard_metric(a, b)
    assert abs(j - d / (2 - d)) < 1e-12
