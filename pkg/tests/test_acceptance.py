"""Acceptance gate: one pass/fail line per headline property.

Order: gradient checks, the closed-form penalty oracle, critic training
against a known distance, metric identities, the alternating-schedule audit,
determinism and resume, and finally the two heavyweight end-to-end checks
(adapted-vs-baseline Dice gap, content-code alignment).  Run with -s to see
the lines as they print.
"""

import time

import numpy as np
import pytest

from voxda import data, losses, networks, training, verification
from voxda.engine import Tensor
from voxda.networks import NetConfig, build_model
from voxda.training import PatchStream, TrainConfig


def _gate(name: str, ok: bool, detail: str) -> None:
    line = f"[acceptance] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line, flush=True)
    assert ok, line


def small_net():
    return NetConfig(patch=(4, 16, 16), base_width=4, content_channels=4, style_dim=4, seg_width=8)


def small_cases(domain, n=3, offset=0):
    out = []
    for s in range(n):
        vol, mask = data.generate_phantom(data.default_phantom_spec(s + offset, domain, dims=(6, 16, 16)))
        out.append((data.normalize(vol), mask))
    return out


def small_streams(cfg, tag="acc"):
    cx, cy = small_cases("X"), small_cases("Y", offset=50)
    return (
        PatchStream("X", cx, cfg.patch, cfg.batch_size, cfg.seed, tag + "x", augment=True),
        PatchStream("Y", cy, cfg.patch, cfg.batch_size, cfg.seed, tag + "y", augment=True),
    )


def snapshot(bundle):
    return {k: v.data.copy() for k, v in bundle.parameters().items()}


def test_gradient_checks():
    """Every op and every loss passes finite differences at 10 points."""
    t0 = time.monotonic()
    report = verification.run_full_gradient_suite(points=10, seed=0)
    elapsed = time.monotonic() - t0
    failures = verification.gradient_suite_failures(report)
    worst_first = max(e for e, tol in report.values() if tol == verification.FIRST_ORDER_TOL)
    worst_second = max(e for e, tol in report.values() if tol == verification.SECOND_ORDER_TOL)
    _gate(
        "gradient checks",
        not failures and elapsed < 120.0,
        f"{len(report)} checks, worst first-order {worst_first:.2e} < 1e-6, "
        f"worst second-order {worst_second:.2e} < 1e-3, {elapsed:.1f}s < 120s"
        + (f", failures {failures}" if failures else ""),
    )


def test_linear_critic_penalty_closed_form():
    """For a pure dot-product critic the penalty is exactly (norm(w)-1)^2,
    for any input and any interpolation seed."""
    cfg = NetConfig(patch=(2, 4, 4), critic_kind="linear")
    flat = int(np.prod((1,) + cfg.patch))
    rng = np.random.default_rng(7)
    worst = 0.0
    for norm, expected in ((0.5, 0.25), (1.0, 0.0), (3.0, 4.0)):
        bundle = build_model(cfg, seed=0)
        w = np.zeros((flat, 1))
        w[0, 0] = norm
        bundle.set_parameters({"critic_X/w.w": Tensor(w, requires_grad=True)})
        values = set()
        for seed in (0, 1, 99):
            real = Tensor(rng.standard_normal((3, 1) + cfg.patch))
            fake = Tensor(rng.standard_normal((3, 1) + cfg.patch))
            values.add(losses.gradient_penalty(bundle, "X", real, fake, seed=seed).item())
        worst = max(worst, max(abs(v - expected) for v in values))
        assert len(values) == 1  # bitwise input/seed independence
    _gate("linear-critic penalty oracle", worst <= 1e-9, f"max |penalty - closed form| {worst:.2e} <= 1e-9")


def test_wasserstein_critic_recovers_known_distance():
    """Critic-only training on point masses at 0 and 3 estimates their
    distance inside the soft-Lipschitz window."""
    t0 = time.monotonic()
    result = verification.wasserstein_sanity(steps=500, alpha=25.0, lr=0.02, seed=0)
    elapsed = time.monotonic() - t0
    ok = 2.1 <= result["gap"] <= 3.3 and elapsed < 60.0
    _gate(
        "wasserstein sanity",
        ok,
        f"gap {result['gap']:.4f} in [2.1, 3.3] (penalized optimum {result['target']:.2f}), {elapsed:.1f}s < 60s",
    )


def test_overlap_metric_identity():
    """J = D/(2-D) on 1000 random mask pairs; the 8/8/4 worked example is exact."""
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        p, q = rng.uniform(0.05, 0.95, size=2)
        a = (rng.random((6, 8, 8)) < p).astype(np.uint8)
        b = (rng.random((6, 8, 8)) < q).astype(np.uint8)
        d = losses.dice_metric(a, b)
        j = losses.jaccard_metric(a, b)
        worst = max(worst, abs(j - d / (2.0 - d)))
    a = np.zeros(16, dtype=np.uint8)
    b = np.zeros(16, dtype=np.uint8)
    a[:8] = 1
    b[4:12] = 1
    exact = losses.dice_metric(a, b) == 0.5 and losses.jaccard_metric(a, b) == 1.0 / 3.0
    _gate(
        "overlap metric identity",
        worst <= 1e-12 and exact,
        f"max |J - D/(2-D)| {worst:.2e} <= 1e-12 over 1000 pairs; worked example exact: {exact}",
    )


def test_alternating_schedule_audit():
    """9 iterations at period 3: content-disc updates land exactly on
    {0, 3, 6} and touch nothing else."""
    cfg = TrainConfig(adapt_iterations=9, batch_size=2, patch=(4, 16, 16), seed=5, net=small_net())
    bundle = build_model(cfg.net, seed=1)
    snaps = [snapshot(bundle)]
    sx, sy = small_streams(cfg)
    _, rows, _ = training.train_adaptation(cfg, sx, sy, bundle, hook=lambda i, b, u: snaps.append(snapshot(b)))

    disc_iters = [i for i, r in enumerate(rows) if r.endswith(",content_disc")]
    clean = True
    for i in (0, 3, 6):
        changed = {k.split("/")[0] for k in snaps[i] if not np.array_equal(snaps[i][k], snaps[i + 1][k])}
        clean = clean and changed == {"content_disc"}
    _gate(
        "alternating schedule audit",
        disc_iters == [0, 3, 6] and clean,
        f"content-disc iterations {disc_iters} == [0, 3, 6]; bit-compare isolates the group: {clean}",
    )


def test_determinism_and_resume(tmp_path):
    """Same seed -> bit-identical CSV; checkpoint resume matches the
    uninterrupted run for 11 further iterations."""
    cfg = TrainConfig(adapt_iterations=16, batch_size=2, patch=(4, 16, 16), seed=6, net=small_net())

    def fresh_run():
        bundle = build_model(cfg.net, seed=6)
        sx, sy = small_streams(cfg)
        _, rows, _ = training.train_adaptation(cfg, sx, sy, bundle)
        return bundle, rows

    bundle_a, rows_a = fresh_run()
    _, rows_b = fresh_run()
    identical_csv = rows_a == rows_b

    part = build_model(cfg.net, seed=6)
    sx, sy = small_streams(cfg)
    short = TrainConfig(adapt_iterations=5, batch_size=2, patch=(4, 16, 16), seed=6, net=small_net())
    _, rows_head, opts = training.train_adaptation(short, sx, sy, part)
    path = tmp_path / "resume.wdgc"
    training.save_checkpoint(path, part, opts, 5)

    resumed = build_model(cfg.net, seed=777)
    opts_r = training.make_adapt_optimizers(resumed)
    start = training.load_checkpoint(path, resumed, opts_r)
    sx, sy = small_streams(cfg)
    _, rows_tail, _ = training.train_adaptation(cfg, sx, sy, resumed, start_iteration=start, optimizers=opts_r)

    resumed_matches = (rows_head + rows_tail) == rows_a
    ref, got = snapshot(bundle_a), snapshot(resumed)
    params_match = all(np.array_equal(ref[k], got[k]) for k in ref)
    _gate(
        "determinism and resume",
        identical_csv and resumed_matches and params_match and len(rows_tail) == 11,
        f"fresh runs bit-identical: {identical_csv}; resume (+{len(rows_tail)} iterations) "
        f"log match: {resumed_matches}, parameter match: {params_match}",
    )


# -- end-to-end analog ------------------------------------------------------------------

ADAPTED_CFG = TrainConfig(
    mode="adapt_then_seg_source_only",
    adapt_iterations=200,
    seg_iterations=250,
    batch_size=2,
    num_cases=10,
    seed=0,
)
BASELINE_CFG = TrainConfig(
    mode="baseline_unadapted",
    adapt_iterations=0,
    seg_iterations=250,
    batch_size=2,
    num_cases=10,
    seed=0,
    net=NetConfig(seg_input="image", seg_kernel_depth=1),
)


def test_adaptation_beats_unadapted_baseline():
    """5-fold mean target Dice: adaptation + source-content segmentation must
    beat a plane-wise image-space baseline by at least 0.10 absolute."""
    t0 = time.monotonic()
    adapted = training.run_experiment(ADAPTED_CFG)
    baseline = training.run_experiment(BASELINE_CFG)
    elapsed = time.monotonic() - t0
    gap = adapted.mean_dice("target") - baseline.mean_dice("target")
    _gate(
        "adapted vs baseline target dice",
        gap >= 0.10 and elapsed < 1800.0,
        f"adapted {adapted.mean_dice('target'):.4f} vs baseline {baseline.mean_dice('target'):.4f}, "
        f"gap {gap:.4f} >= 0.10, {elapsed:.0f}s < 1800s",
    )


def test_content_code_alignment_improves():
    """Adaptation pulls the content codes of matched-geometry cross-domain
    pairs together by at least 25% mean L1."""
    cfg = ADAPTED_CFG
    pairs = verification.matched_geometry_pairs(count=5)
    cases = training.generate_cases(cfg)
    folds = data.kfold_split(list(range(cfg.num_cases)), k=cfg.folds, seed=cfg.seed)
    train_ids = folds[0][0]
    train_x = [cases["X"][i] for i in train_ids]
    train_y = [cases["Y"][i] for i in train_ids]

    bundle = build_model(cfg.net, seed=cfg.seed * 31 + 0)
    before = verification.content_alignment_l1(bundle, pairs)
    dtype = cfg.net.np_dtype()
    sx = PatchStream("X", train_x, cfg.patch, cfg.batch_size, cfg.seed, "adapt_x_0", dtype, augment=cfg.augment)
    sy = PatchStream("Y", train_y, cfg.patch, cfg.batch_size, cfg.seed, "adapt_y_0", dtype, augment=cfg.augment)
    training.train_adaptation(cfg, sx, sy, bundle)
    after = verification.content_alignment_l1(bundle, pairs)

    reduction = (before - after) / before
    _gate(
        "content code alignment",
        reduction >= 0.25,
        f"mean pair L1 {before:.4f} -> {after:.4f}, reduction {100 * reduction:.1f}% >= 25%",
    )
