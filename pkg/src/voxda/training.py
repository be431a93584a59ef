"""Optimization loops: Adam updates, the alternating adversarial schedule,
the two-phase protocol (adaptation then segmentation), checkpointing, and
the cross-validation experiments.

Everything is stateless with respect to wall clock and process: batches,
penalty interpolation, and augmentation draw from rngs keyed on
(seed, purpose, iteration), so a run can be stopped, reloaded, and resumed
with bit-identical logs.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as vdata
from . import losses, networks
from .engine import NumericDomainError, Tensor, backward, no_grad, ops
from .engine.serialize import read_checkpoint, write_checkpoint
from .losses import LossWeights
from .networks import GROUPS, ModelBundle, NetConfig, build_model

MODES = (
    "baseline_unadapted",
    "adapt_then_seg_source_only",
    "adapt_then_seg_joint",
    "multimodal_target",
)

CONTENT_DISC_GROUPS = ("content_disc",)
CRITIC_GROUPS = ("critic_X", "critic_Y")
GENERATOR_GROUPS = (
    "enc_content_X",
    "enc_content_Y",
    "enc_style_X",
    "enc_style_Y",
    "dec_X",
    "dec_Y",
)
SEG_GROUPS = ("seg_head",)

LOG_HEADER = losses.CSV_HEADER + ",updated_groups"
SEG_LOG_HEADER = "step,loss,dice,jaccard"


def _tag(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for both phases and the experiment protocol."""

    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    content_disc_period: int = 3
    adapt_iterations: int = 2000
    seg_iterations: int = 1000
    batch_size: int = 2
    patch: tuple = (5, 32, 32)
    seed: int = 0
    mode: str = "adapt_then_seg_source_only"
    latent_mirror: bool = True
    seg_joint_finetune: bool = False
    augment: bool = True
    num_cases: int = 20
    folds: int = 5
    eval_every: int = 200
    net: NetConfig = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.content_disc_period < 1:
            raise ValueError("content_disc_period must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.net is None:
            object.__setattr__(self, "net", NetConfig(patch=tuple(self.patch)))
        object.__setattr__(self, "patch", tuple(self.patch))


# -- Adam ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the shared step counter."""

    m: dict
    v: dict
    step: int = 0


def init_optimizer(params: dict) -> OptimizerState:
    return OptimizerState(
        m={n: np.zeros_like(t.data) for n, t in params.items()},
        v={n: np.zeros_like(t.data) for n, t in params.items()},
    )


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> dict:
    """One Adam update over a named parameter set; returns the new tensors.

    Parameters absent from grads are treated as zero-gradient.  Moments are
    updated in place and the step counter advances once per call.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        if name not in state.m:
            raise KeyError(f"optimizer state missing parameter '{name}'")
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else (g.data if isinstance(g, Tensor) else np.asarray(g))
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}")
        if not np.isfinite(g).all():
            raise NumericDomainError(f"non-finite gradient for parameter '{name}'")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1**t)
        v_hat = state.v[name] / (1 - b2**t)
        out[name] = Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + eps), requires_grad=True)
    return out


def _grads_by_name(params: dict, grads: dict) -> dict:
    by_id = {id(t): g for t, g in grads.items()}
    return {n: by_id[id(t)] for n, t in params.items() if id(t) in by_id}


def _apply_update(bundle: ModelBundle, groups, grads, state, cfg: TrainConfig) -> None:
    params = bundle.parameters(groups)
    new = adam_step(params, _grads_by_name(params, grads), state, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    bundle.set_parameters(new)


# -- patch streams ----------------------------------------------------------------


class PatchStream:
    """Random patch batches over a case pool, stateless in the iteration index.

    batch(i) -> (domain, images [N,1,D,H,W], labels [N,D,H,W]) or None once
    the optional limit is reached.  The same (seed, tag, i) always yields the
    same batch, which is what makes checkpoint resume bit-exact.
    """

    def __init__(self, domain: str, cases, patch, batch_size: int, seed: int, tag: str, np_dtype=np.float64, augment: bool = False, fixed: bool = False, limit=None):
        if not cases:
            raise ValueError("PatchStream needs at least one case")
        for vol, mask in cases:
            if mask.dims != vol.dims:
                raise ValueError("case volume/mask dims differ")
            if any(p > d for p, d in zip(patch, vol.dims)):
                raise ValueError(f"patch {patch} larger than case volume {vol.dims}")
        self.domain = domain
        self.cases = list(cases)
        self.patch = tuple(patch)
        self.batch_size = batch_size
        self.seed = seed
        self.tag = _tag(tag)
        self.np_dtype = np_dtype
        self.augment = augment
        self.fixed = fixed
        self.limit = limit

    def batch(self, iteration: int):
        if self.limit is not None and iteration >= self.limit:
            return None
        rng = np.random.default_rng([self.seed, self.tag, 0 if self.fixed else iteration])
        imgs = np.empty((self.batch_size, 1) + self.patch, dtype=self.np_dtype)
        labs = np.empty((self.batch_size,) + self.patch, dtype=np.int64)
        for n in range(self.batch_size):
            vol, mask = self.cases[int(rng.integers(0, len(self.cases)))]
            origin = tuple(int(rng.integers(0, d - p + 1)) for d, p in zip(vol.dims, self.patch))
            sl = tuple(slice(o, o + p) for o, p in zip(origin, self.patch))
            vox, lab = vol.voxels[sl], mask.labels[sl]
            if self.augment:
                t = (bool(rng.random() < 0.5), bool(rng.random() < 0.5), int(rng.integers(0, 4)))
                if t[2] % 2 == 1 and self.patch[1] != self.patch[2]:
                    t = (t[0], t[1], t[2] - 1)  # keep non-square planes legal
                vox = vdata.apply_transform(vox, t)
                lab = vdata.apply_transform(lab, t)
            imgs[n, 0] = vox
            labs[n] = lab
        return self.domain, imgs, labs


class AlternatingStream:
    """Round-robin over member streams; used for joint segmentation training."""

    def __init__(self, streams):
        if not streams:
            raise ValueError("need at least one stream")
        self.streams = list(streams)

    def batch(self, iteration: int):
        return self.streams[iteration % len(self.streams)].batch(iteration)


# -- adaptation phase ----------------------------------------------------------------


def _translations(bundle, x, y):
    """First-hop cross-domain translations: y_hat looks like X, x_hat like Y."""
    y_hat = networks.decode(bundle, "X", networks.encode_content(bundle, "Y", y), networks.encode_style(bundle, "X", x))
    x_hat = networks.decode(bundle, "Y", networks.encode_content(bundle, "X", x), networks.encode_style(bundle, "Y", y))
    return y_hat, x_hat


def _generator_terms(bundle: ModelBundle, cfg: TrainConfig, x: Tensor, y: Tensor) -> dict:
    """All eight report terms as tensors on one shared forward graph."""
    zx_c = networks.encode_content(bundle, "X", x)
    zx_s = networks.encode_style(bundle, "X", x)
    zy_c = networks.encode_content(bundle, "Y", y)
    zy_s = networks.encode_style(bundle, "Y", y)

    recon_x = losses.self_reconstruction_loss(networks.decode(bundle, "X", zx_c, zx_s), x)
    recon_y = losses.self_reconstruction_loss(networks.decode(bundle, "Y", zy_c, zy_s), y)

    y_hat = networks.decode(bundle, "X", zy_c, zx_s)
    x_hat = networks.decode(bundle, "Y", zx_c, zy_s)

    latent_c = losses.latent_content_loss(networks.encode_content(bundle, "X", y_hat), zy_c)
    latent_s = losses.latent_style_loss(networks.encode_style(bundle, "X", y_hat), zx_s)
    if cfg.latent_mirror:
        latent_c = ops.add(latent_c, losses.latent_content_loss(networks.encode_content(bundle, "Y", x_hat), zx_c))
        latent_s = ops.add(latent_s, losses.latent_style_loss(networks.encode_style(bundle, "Y", x_hat), zy_s))

    x_back = networks.decode(bundle, "X", networks.encode_content(bundle, "Y", x_hat), networks.encode_style(bundle, "X", y_hat))
    y_back = networks.decode(bundle, "Y", networks.encode_content(bundle, "X", y_hat), networks.encode_style(bundle, "Y", x_hat))
    cyc = ops.add(ops.l1_distance(x_back, x), ops.l1_distance(y_back, y))

    wgan_x = ops.neg(ops.mean(networks.critic(bundle, "X", y_hat)))
    wgan_y = ops.neg(ops.mean(networks.critic(bundle, "Y", x_hat)))

    _, content_adv = losses.content_adversarial_loss(bundle, zx_c, zy_c)

    return {
        "recon_x": recon_x,
        "recon_y": recon_y,
        "latent_c": latent_c,
        "latent_s": latent_s,
        "cyc": cyc,
        "wgan_x": wgan_x,
        "wgan_y": wgan_y,
        "content_adv": content_adv,
    }


def make_adapt_optimizers(bundle: ModelBundle) -> dict:
    return {
        "content_disc": init_optimizer(bundle.parameters(CONTENT_DISC_GROUPS)),
        "critic": init_optimizer(bundle.parameters(CRITIC_GROUPS)),
        "generator": init_optimizer(bundle.parameters(GENERATOR_GROUPS)),
    }


def train_adaptation(config: TrainConfig, stream_x, stream_y, bundle: ModelBundle, *, start_iteration: int = 0, optimizers: dict = None, hook=None):
    """Alternating schedule: on iterations i % period == 0 only the content
    discriminator steps; otherwise the critics step and then the
    encoders/decoders step on the weighted total.

    Returns (bundle, log_rows, optimizers); one CSV row per completed
    iteration, ending with the updated-groups label.
    """
    opts = optimizers if optimizers is not None else make_adapt_optimizers(bundle)
    rows = []
    for i in range(start_iteration, config.adapt_iterations):
        bx, by = stream_x.batch(i), stream_y.batch(i)
        if bx is None or by is None:
            break
        x = Tensor(bx[1])
        y = Tensor(by[1])

        if i % config.content_disc_period == 0:
            with no_grad():
                zx_c = networks.encode_content(bundle, "X", x)
                zy_c = networks.encode_content(bundle, "Y", y)
            disc_obj, _ = losses.content_adversarial_loss(bundle, zx_c, zy_c)
            _apply_update(bundle, CONTENT_DISC_GROUPS, backward(disc_obj), opts["content_disc"], config)
            updated = "content_disc"
            with no_grad():
                terms = _generator_terms(bundle, config, x, y)
        else:
            with no_grad():
                y_hat, x_hat = _translations(bundle, x, y)
            critic_x, _ = losses.wgan_critic_loss(bundle, "X", x, y_hat, config.weights.alpha, seed=[config.seed, _tag("gp_x"), i])
            critic_y, _ = losses.wgan_critic_loss(bundle, "Y", y, x_hat, config.weights.alpha, seed=[config.seed, _tag("gp_y"), i])
            _apply_update(bundle, CRITIC_GROUPS, backward(ops.add(critic_x, critic_y)), opts["critic"], config)

            terms = _generator_terms(bundle, config, x, y)
            total = losses.total_loss(config.weights, terms)
            _apply_update(bundle, GENERATOR_GROUPS, backward(total), opts["generator"], config)
            updated = "critics+generators"

        report = losses.make_report(config.weights, **{k: float(v.data) for k, v in terms.items()})
        rows.append(report.csv_row(i) + "," + updated)
        if hook is not None:
            hook(i, bundle, updated)
    return bundle, rows, opts


# -- segmentation phase -----------------------------------------------------------------


def seg_parameter_groups(config: TrainConfig):
    if config.seg_joint_finetune and config.net.seg_input == "content":
        return SEG_GROUPS + ("enc_content_X", "enc_content_Y")
    return SEG_GROUPS


def _seg_logits(bundle: ModelBundle, config: TrainConfig, domain: str, x: Tensor, frozen_encoder: bool):
    if config.net.seg_input != "content":
        return networks.segment(bundle, x)
    if frozen_encoder:
        with no_grad():
            z = networks.encode_content(bundle, domain, x)
        z = z.detach()
    else:
        z = networks.encode_content(bundle, domain, x)
    return networks.segment(bundle, z)


def train_segmentation(config: TrainConfig, stream, bundle: ModelBundle, *, val_cases=None, val_domain: str = "Y", start_iteration: int = 0, optimizer: OptimizerState = None, hook=None):
    """Minimize soft Dice + weighted CE over the stream.

    Content encoders stay frozen unless seg_joint_finetune is set.  Logs one
    row per iteration; validation Dice/Jaccard columns are filled every
    eval_every iterations (and on the last) when val_cases is given.
    """
    groups = seg_parameter_groups(config)
    frozen = not (config.seg_joint_finetune and config.net.seg_input == "content")
    opt = optimizer if optimizer is not None else init_optimizer(bundle.parameters(groups))
    rows = []
    for i in range(start_iteration, config.seg_iterations):
        b = stream.batch(i)
        if b is None:
            break
        domain, imgs, labels = b
        logits = _seg_logits(bundle, config, domain, Tensor(imgs), frozen)
        loss = losses.soft_dice_weighted_ce(logits, labels, losses.batch_class_weights(labels))
        _apply_update(bundle, groups, backward(loss), opt, config)

        row = f"{i},{float(loss.data):.17g}"
        if val_cases is not None and (i % config.eval_every == config.eval_every - 1 or i == config.seg_iterations - 1):
            dice, jac = evaluate_cases(bundle, config, val_cases, val_domain)
            row += f",{dice:.17g},{jac:.17g}"
        else:
            row += ",,"
        rows.append(row)
        if hook is not None:
            hook(i, bundle, "seg")
    return bundle, rows, opt


def _cover_origins(size: int, p: int, s: int):
    out = list(range(0, size - p + 1, s))
    if out[-1] != size - p:
        out.append(size - p)
    return out


def evaluate_cases(bundle: ModelBundle, config: TrainConfig, cases, domain: str):
    """Mean Dice/Jaccard over full volumes, tiled and overlap-averaged."""
    patch = config.net.patch
    dice_vals, jac_vals = [], []
    for vol, mask in cases:
        grids = [_cover_origins(d, p, p) for d, p in zip(vol.dims, patch)]
        pieces = []
        with no_grad():
            for oz in grids[0]:
                for oy in grids[1]:
                    for ox in grids[2]:
                        sl = tuple(slice(o, o + p) for o, p in zip((oz, oy, ox), patch))
                        x = Tensor(vol.voxels[sl][None, None].astype(bundle.config.np_dtype()))
                        logits = _seg_logits(bundle, config, domain, x, frozen_encoder=True)
                        prob_fg = ops.softmax_over_channels(logits).data[0, 1]
                        pieces.append((prob_fg, (oz, oy, ox)))
        prob = vdata.reassemble_patches(pieces, vol.dims)
        pred = (prob > 0.5).astype(np.uint8)
        dice_vals.append(losses.dice_metric(pred, mask.labels))
        jac_vals.append(losses.jaccard_metric(pred, mask.labels))
    return float(np.mean(dice_vals)), float(np.mean(jac_vals))


# -- checkpointing ------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, bundle: ModelBundle, optimizers: dict, iteration: int) -> None:
    """One WDGC1 file holding parameters, Adam moments, and the iteration."""
    entries = {}
    for name, t in bundle.parameters().items():
        entries[f"param/{name}"] = t
    for oname, state in optimizers.items():
        for pname, arr in state.m.items():
            entries[f"opt/{oname}/m/{pname}"] = Tensor(arr)
        for pname, arr in state.v.items():
            entries[f"opt/{oname}/v/{pname}"] = Tensor(arr)
        entries[f"opt/{oname}/step"] = Tensor(np.array(float(state.step)))
    entries["meta/iteration"] = Tensor(np.array(float(iteration)))
    write_checkpoint(path, entries)


def load_checkpoint(path, bundle: ModelBundle, optimizers: dict = None) -> int:
    """Restore bundle and optimizer state in place; returns the iteration.

    Every parameter and optimizer slot expected by the given bundle and
    optimizers must be present; missing or surplus names are reported
    together in one error.  With optimizers=None only the parameters are
    restored and any stored optimizer state is ignored (inference loads).
    """
    loaded = read_checkpoint(path)
    expected = {f"param/{n}" for n in bundle.parameters()}
    if optimizers is None:
        optimizers = {}
        surplus_pool = {n for n in loaded if not n.startswith("opt/")}
    else:
        surplus_pool = set(loaded)
        for oname, state in optimizers.items():
            expected |= {f"opt/{oname}/m/{p}" for p in state.m}
            expected |= {f"opt/{oname}/v/{p}" for p in state.v}
            expected.add(f"opt/{oname}/step")
    expected.add("meta/iteration")
    missing = sorted(expected - set(loaded))
    surplus = sorted(surplus_pool - expected)
    if missing or surplus:
        raise CheckpointError(f"checkpoint does not match model: missing {missing}, unexpected {surplus}")

    new_params = {}
    for name, t in bundle.parameters().items():
        got = loaded[f"param/{name}"]
        if got.shape != t.shape:
            raise CheckpointError(f"parameter '{name}' has shape {got.shape}, expected {t.shape}")
        new_params[name] = Tensor(got.data, requires_grad=True)
    bundle.set_parameters(new_params)
    for oname, state in optimizers.items():
        for pname in state.m:
            state.m[pname] = loaded[f"opt/{oname}/m/{pname}"].data.copy()
            state.v[pname] = loaded[f"opt/{oname}/v/{pname}"].data.copy()
        state.step = int(loaded[f"opt/{oname}/step"].data)
    return int(loaded["meta/iteration"].data)


# -- experiments ---------------------------------------------------------------------


@dataclass
class ExperimentReport:
    mode: str
    rows: list  # (fold, split, dice, jaccard)
    summary: dict  # split -> (dice_mean, dice_std, jaccard_mean, jaccard_std)

    def mean_dice(self, split: str = "target") -> float:
        return self.summary[split][0]

    def to_csv(self) -> str:
        lines = ["fold,split,dice,jaccard"]
        for fold, split, d, j in self.rows:
            lines.append(f"{fold},{split},{d:.17g},{j:.17g}")
        for split in sorted(self.summary):
            dm, ds, jm, js = self.summary[split]
            lines.append(f"mean,{split},{dm:.17g},{jm:.17g}")
            lines.append(f"std,{split},{ds:.17g},{js:.17g}")
        return "\n".join(lines) + "\n"


_Y_STYLE_VARIANTS = (
    dict(invert=True, bias_strength=0.3, noise_sigma=0.05, gamma=1.4),
    dict(invert=True, bias_strength=0.15, noise_sigma=0.08, gamma=1.2),
    dict(invert=True, bias_strength=0.45, noise_sigma=0.03, gamma=1.7),
)


def _case_seed(config: TrainConfig, index: int) -> int:
    return config.seed * 1_000_003 + index


def generate_cases(config: TrainConfig, dims=(8, 32, 32)) -> dict:
    """Phantom pools per domain, geometry-unmatched between X and Y.

    Returns {"X": [(Volume, Mask)], "Y": [...]}, volumes normalized.
    multimodal_target cycles Y through several appearance parameterizations.
    """
    cases = {"X": [], "Y": []}
    for i in range(config.num_cases):
        spec_x = vdata.default_phantom_spec(_case_seed(config, i), "X", dims=dims, patch=config.patch)
        vol, mask = vdata.generate_phantom(spec_x)
        cases["X"].append((vdata.normalize(vol), mask))

        spec_y = vdata.default_phantom_spec(_case_seed(config, i + config.num_cases), "Y", dims=dims, patch=config.patch)
        if config.mode == "multimodal_target":
            spec_y = replace(spec_y, **_Y_STYLE_VARIANTS[i % len(_Y_STYLE_VARIANTS)])
        vol, mask = vdata.generate_phantom(spec_y)
        cases["Y"].append((vdata.normalize(vol), mask))
    return cases


def _pick(cases, ids):
    return [cases[i] for i in ids]


def run_experiment(config: TrainConfig, case_dims=(8, 32, 32)) -> ExperimentReport:
    """Cross-validated protocol mirroring the three experiment setups.

    Per fold: adaptation on the training cases of both domains (skipped for
    the unadapted baseline), segmentation on source content (plus target
    content for the joint mode), evaluation on the held-out cases of each
    domain.  All randomness descends from config.seed.
    """
    cases = generate_cases(config, dims=case_dims)
    folds = vdata.kfold_split(list(range(config.num_cases)), k=config.folds, seed=config.seed)
    dtype = config.net.np_dtype()
    rows = []
    for fold, (train_ids, test_ids) in enumerate(folds):
        bundle = build_model(config.net, seed=config.seed * 31 + fold)
        train_x, train_y = _pick(cases["X"], train_ids), _pick(cases["Y"], train_ids)
        test_x, test_y = _pick(cases["X"], test_ids), _pick(cases["Y"], test_ids)

        if config.mode != "baseline_unadapted":
            sx = PatchStream("X", train_x, config.patch, config.batch_size, config.seed, f"adapt_x_{fold}", dtype, augment=config.augment)
            sy = PatchStream("Y", train_y, config.patch, config.batch_size, config.seed, f"adapt_y_{fold}", dtype, augment=config.augment)
            train_adaptation(config, sx, sy, bundle)

        seg_x = PatchStream("X", train_x, config.patch, config.batch_size, config.seed, f"seg_x_{fold}", dtype, augment=config.augment)
        if config.mode == "adapt_then_seg_joint":
            seg_y = PatchStream("Y", train_y, config.patch, config.batch_size, config.seed, f"seg_y_{fold}", dtype, augment=config.augment)
            seg_stream = AlternatingStream([seg_x, seg_y])
        else:
            seg_stream = seg_x
        train_segmentation(config, seg_stream, bundle)

        dice_s, jac_s = evaluate_cases(bundle, config, test_x, "X")
        dice_t, jac_t = evaluate_cases(bundle, config, test_y, "Y")
        rows.append((fold, "source", dice_s, jac_s))
        rows.append((fold, "target", dice_t, jac_t))

    summary = {}
    for split in ("source", "target"):
        ds = [d for _, s, d, _ in rows if s == split]
        js = [j for _, s, _, j in rows if s == split]
        summary[split] = (float(np.mean(ds)), float(np.std(ds)), float(np.mean(js)), float(np.std(js)))
    return ExperimentReport(config.mode, rows, summary)
