"""Objective terms: reconstruction, latent recovery, cross-cycle consistency,
Wasserstein critic with gradient penalty, content adversarial confusion, the
segmentation loss, and the overlap metrics."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .engine import (
    CERTIFIED_SECOND_ORDER,
    NumericDomainError,
    ShapeError,
    Tensor,
    UnsupportedOpError,
    backward,
    collect_graph_ops,
    ops,
)
from .networks import as_model

_PROB_EPS = 1e-7
_NORM_EPS = 1e-12
DICE_EPS = 1.0


@dataclass(frozen=True)
class LossWeights:
    """Term weights of the total objective plus the penalty coefficient."""

    lambda_wgan: float = 1.0
    lambda_recon: float = 10.0
    lambda_cyc: float = 0.1
    lambda_latent: float = 10.0
    lambda_content: float = 1.0
    alpha: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")


REPORT_TERMS = (
    "recon_x",
    "recon_y",
    "latent_c",
    "latent_s",
    "cyc",
    "wgan_x",
    "wgan_y",
    "content_adv",
)

CSV_HEADER = "step," + ",".join(REPORT_TERMS) + ",total"


@dataclass
class LossReport:
    """Per-term scalar values for one training step."""

    recon_x: float
    recon_y: float
    latent_c: float
    latent_s: float
    cyc: float
    wgan_x: float
    wgan_y: float
    content_adv: float
    total: float

    def terms(self) -> dict:
        return {name: getattr(self, name) for name in REPORT_TERMS}

    def csv_row(self, step: int) -> str:
        vals = [getattr(self, name) for name in REPORT_TERMS] + [self.total]
        return f"{step}," + ",".join(f"{v:.17g}" for v in vals)

    def reconciles(self, weights: LossWeights, tol: float = 1e-9) -> bool:
        recomputed = total_loss(weights, self.terms()).item()
        return abs(recomputed - self.total) <= tol


def _scalar(value) -> float:
    return value.item() if isinstance(value, Tensor) else float(value)


# -- reconstruction family ----------------------------------------------------


def self_reconstruction_loss(x: Tensor, x_recon: Tensor) -> Tensor:
    """Mean absolute error between an input and its self-reconstruction."""
    return ops.l1_distance(x_recon, x)


def latent_content_loss(zc_original: Tensor, zc_recovered: Tensor) -> Tensor:
    """Mean absolute error between a content code and its recovered version."""
    return ops.l1_distance(zc_recovered, zc_original)


def latent_style_loss(zs_original: Tensor, zs_recovered: Tensor) -> Tensor:
    """Mean absolute error between a style code and its recovered version."""
    return ops.l1_distance(zs_recovered, zs_original)


def cross_cycle_loss(model, x: Tensor, y: Tensor) -> Tensor:
    """Two-hop consistency: swap styles, translate, swap back, and require the
    endpoints to reconstruct the originals.

    First hop produces the translations y_hat = G_X(Ec_Y(y), Es_X(x)) and
    x_hat = G_Y(Ec_X(x), Es_Y(y)); the second hop re-encodes the translations
    and must land back on x (through G_X) and y (through G_Y).
    """
    if x.shape != y.shape:
        raise ShapeError(f"cross_cycle_loss: shapes {x.shape} vs {y.shape}")
    m = as_model(model)
    y_hat = m.decode("X", m.encode_content("Y", y), m.encode_style("X", x))
    x_hat = m.decode("Y", m.encode_content("X", x), m.encode_style("Y", y))
    x_back = m.decode("X", m.encode_content("Y", x_hat), m.encode_style("X", y_hat))
    y_back = m.decode("Y", m.encode_content("X", y_hat), m.encode_style("Y", x_hat))
    return ops.add(ops.l1_distance(x_back, x), ops.l1_distance(y_back, y))


# -- Wasserstein critic family ---------------------------------------------------


def interpolate_samples(real: Tensor, fake: Tensor, seed) -> Tensor:
    """Per-sample convex mix t*real + (1-t)*fake, t ~ U(0,1); returns a leaf."""
    if real.shape != fake.shape:
        raise ShapeError(f"interpolate: shapes {real.shape} vs {fake.shape}")
    n = real.shape[0]
    t = np.random.default_rng(seed).random(n).astype(real.dtype)
    t = t.reshape((n,) + (1,) * (real.ndim - 1))
    mixed = t * real.data + (1.0 - t) * fake.data
    return Tensor(mixed, requires_grad=True)


def gradient_penalty(model, domain: str, real: Tensor, fake: Tensor, seed) -> Tensor:
    """Soft unit-Lipschitz penalty mean((||grad D(mix)||_2 - 1)^2).

    The critic graph must stay inside the certified double-backward op set;
    anything else raises UnsupportedOpError before gradients are attempted.
    The result is differentiable with respect to critic parameters.
    """
    m = as_model(model)
    mixed = interpolate_samples(real, fake, seed)
    score = m.critic(domain, mixed)
    uncertified = collect_graph_ops(score) - CERTIFIED_SECOND_ORDER
    if uncertified:
        raise UnsupportedOpError(
            f"critic graph contains ops outside the certified second-order set: {sorted(uncertified)}"
        )
    # batch samples are independent, so the gradient of the summed score
    # carries each sample's own gradient rows
    grads = backward(ops.tensor_sum(score), retain_secondary=True)
    g = grads[mixed]
    sq = ops.tensor_sum(ops.mul(g, g), axis=tuple(range(1, g.ndim)))
    norm = ops.pow_scalar(ops.add(sq, _NORM_EPS), 0.5)
    return ops.mean(ops.pow_scalar(ops.sub(norm, 1.0), 2.0))


def wgan_critic_loss(model, domain: str, real: Tensor, fake: Tensor, alpha: float, seed):
    """Critic and generator objectives for one domain.

    critic_objective is the quantity the critic minimizes:
    mean D(fake) - mean D(real) + alpha * penalty (driving D(real) up and
    D(fake) down tightens the Wasserstein estimate mean D(real) - mean D(fake)).
    generator_term is -mean D(fake) with the generator graph attached; the
    penalty contributes nothing to it.
    """
    m = as_model(model)
    if real.shape != fake.shape:
        raise ShapeError(f"wgan_critic_loss: shapes {real.shape} vs {fake.shape}")
    fake_detached = fake.detach()
    penalty = gradient_penalty(m, domain, real.detach(), fake_detached, seed)
    critic_objective = ops.add(
        ops.sub(ops.mean(m.critic(domain, fake_detached)), ops.mean(m.critic(domain, real.detach()))),
        ops.mul(penalty, float(alpha)),
    )
    generator_term = ops.neg(ops.mean(m.critic(domain, fake)))
    return critic_objective, generator_term


def wasserstein_gap(model, domain: str, real: Tensor, fake: Tensor) -> float:
    """mean D(real) - mean D(fake); the critic's running W1 estimate."""
    m = as_model(model)
    return ops.sub(ops.mean(m.critic(domain, real)), ops.mean(m.critic(domain, fake))).item()


# -- content adversarial family ----------------------------------------------------


def _clamped_log(p: Tensor) -> Tensor:
    return ops.log(ops.clamp(p, _PROB_EPS, 1.0 - _PROB_EPS))


def content_adversarial_loss(model, zc_x: Tensor, zc_y: Tensor):
    """Domain-confusion objectives over content codes.

    disc_objective trains the content discriminator toward the true domain
    labels (codes detached); encoder_objective pushes both codes toward the
    uniform 1/2 output, -[1/2 log p + 1/2 log(1-p)] averaged over domains,
    minimized exactly at p = 1/2.
    """
    if zc_x.shape != zc_y.shape:
        raise ShapeError(f"content_adversarial_loss: shapes {zc_x.shape} vs {zc_y.shape}")
    m = as_model(model)

    p_x_det = m.content_discriminate(zc_x.detach())
    p_y_det = m.content_discriminate(zc_y.detach())
    disc_objective = ops.mul(
        ops.add(
            ops.neg(ops.mean(_clamped_log(p_x_det))),
            ops.neg(ops.mean(_clamped_log(ops.sub(1.0, p_y_det)))),
        ),
        0.5,
    )

    def confusion(p):
        return ops.neg(
            ops.add(
                ops.mul(ops.mean(_clamped_log(p)), 0.5),
                ops.mul(ops.mean(_clamped_log(ops.sub(1.0, p))), 0.5),
            )
        )

    p_x = m.content_discriminate(zc_x)
    p_y = m.content_discriminate(zc_y)
    encoder_objective = ops.mul(ops.add(confusion(p_x), confusion(p_y)), 0.5)
    return disc_objective, encoder_objective


# -- total objective -------------------------------------------------------------


def total_loss(weights: LossWeights, report_terms) -> Tensor:
    """Weighted sum of all adaptation terms (wgan/recon/latent per-domain sums).

    Raises a poisoning error naming the first non-finite term.
    """
    terms = dict(report_terms)
    missing = [name for name in REPORT_TERMS if name not in terms]
    if missing:
        raise KeyError(f"total_loss: missing terms {missing}")
    for name in REPORT_TERMS:
        v = terms[name]
        raw = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        if not np.isfinite(raw).all():
            raise NumericDomainError(f"total_loss: term '{name}' is not finite (NaN poisoning)")

    def t(name):
        v = terms[name]
        return v if isinstance(v, Tensor) else Tensor(np.asarray(float(v)))

    wgan = ops.mul(ops.add(t("wgan_x"), t("wgan_y")), weights.lambda_wgan)
    recon = ops.mul(ops.add(t("recon_x"), t("recon_y")), weights.lambda_recon)
    cyc = ops.mul(t("cyc"), weights.lambda_cyc)
    latent = ops.mul(ops.add(t("latent_c"), t("latent_s")), weights.lambda_latent)
    content = ops.mul(t("content_adv"), weights.lambda_content)
    return ops.add(ops.add(ops.add(ops.add(wgan, recon), cyc), latent), content)


def make_report(weights: LossWeights, **terms) -> LossReport:
    """Build a LossReport whose total reconciles with total_loss."""
    scalars = {name: _scalar(terms[name]) for name in REPORT_TERMS}
    total = total_loss(weights, scalars).item()
    return LossReport(total=total, **scalars)


# -- segmentation loss and metrics ----------------------------------------------------


def _one_hot_target(target, depth_channels: int = 2) -> np.ndarray:
    arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    uniq = np.unique(arr)
    if not np.isin(uniq, (0, 1)).all():
        raise ValueError(f"target mask must be binary, found labels {uniq}")
    onehot = np.stack([(arr == 0), (arr == 1)], axis=1).astype(np.float64)
    return onehot


def batch_class_weights(target, floor: float = 0.05) -> tuple:
    """Inverse class frequency of the current batch, frequencies floored."""
    arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    fg = float((arr == 1).mean())
    freq_bg = max(1.0 - fg, floor)
    freq_fg = max(fg, floor)
    return (1.0 / freq_bg, 1.0 / freq_fg)


def soft_dice_weighted_ce(logits: Tensor, target_mask, class_weights=None) -> Tensor:
    """Soft Dice on the foreground channel plus weighted cross-entropy,
    combined with equal weight.  target_mask holds labels [N,D,H,W] in {0,1}."""
    if logits.ndim != 5 or logits.shape[1] != 2:
        raise ShapeError(f"logits must be [N,2,D,H,W], got {logits.shape}")
    onehot = _one_hot_target(target_mask)
    if onehot.shape != (logits.shape[0], 2) + logits.shape[2:]:
        raise ShapeError(
            f"target shape {onehot.shape[0:1] + onehot.shape[2:]} does not match logits {logits.shape}"
        )
    if class_weights is None:
        class_weights = batch_class_weights(target_mask)
    w_bg, w_fg = (float(w) for w in class_weights)
    if w_bg < 0 or w_fg < 0:
        raise ValueError(f"class weights must be >= 0, got {(w_bg, w_fg)}")

    g = Tensor(onehot.astype(logits.dtype))
    p = ops.softmax_over_channels(logits)
    n = logits.shape[0]

    g_fg = ops.slice_nd(g, (0, 1, 0, 0, 0), (n, 2) + logits.shape[2:])
    p_fg = ops.slice_nd(p, (0, 1, 0, 0, 0), (n, 2) + logits.shape[2:])
    inter = ops.tensor_sum(ops.mul(p_fg, g_fg))
    denom = ops.add(ops.tensor_sum(p_fg), ops.tensor_sum(g_fg))
    dice_term = ops.sub(1.0, ops.div(ops.add(ops.mul(inter, 2.0), DICE_EPS), ops.add(denom, DICE_EPS)))

    w = Tensor(np.array([w_bg, w_fg], dtype=logits.dtype).reshape(1, 2, 1, 1, 1))
    ce_map = ops.neg(ops.tensor_sum(ops.mul(ops.mul(g, _clamped_log(p)), w), axis=1))
    ce_term = ops.mean(ce_map)
    return ops.add(dice_term, ce_term)


def _binary_mask(m) -> np.ndarray:
    arr = m.data if isinstance(m, Tensor) else np.asarray(m)
    uniq = np.unique(arr)
    if not np.isin(uniq, (0, 1)).all():
        raise ValueError(f"mask must be binary, found labels {uniq}")
    return arr.astype(bool)


def dice_metric(pred_mask, true_mask) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    a, b = _binary_mask(pred_mask), _binary_mask(true_mask)
    if a.shape != b.shape:
        raise ShapeError(f"dice_metric: shapes {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def jaccard_metric(pred_mask, true_mask) -> float:
    """|A n B| / |A u B|; 1.0 when both masks are empty."""
    a, b = _binary_mask(pred_mask), _binary_mask(true_mask)
    if a.shape != b.shape:
        raise ShapeError(f"jaccard_metric: shapes {a.shape} vs {b.shape}")
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union
