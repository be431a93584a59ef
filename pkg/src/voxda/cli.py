"""Command-line surface for the whole pipeline.

Subcommands cover phantom synthesis, the two training phases, content-only
export, evaluation, cross-validated experiments, and the gradient
verification harnesses.  Every run that produces files also writes a
manifest (config snapshot, input hashes, seeds, outputs, timestamps) so it
can be reproduced from the manifest alone.

Exit codes: 0 success, 2 usage or configuration, 3 I/O, 4 numeric failure,
5 internal invariant violation.  stdout carries progress, stderr errors;
machine-readable results are always files.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import data, losses, networks, training, verification
from .config import ConfigError, load_train_config, parse_pairs, train_config_to_text
from .engine import NumericDomainError, Tensor, no_grad
from .engine.serialize import SerializationError
from .training import CheckpointError, PatchStream, TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_INTERNAL = 5

_DOMAIN_FLAG = {"x": "X", "y": "Y"}


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths) -> dict:
    """{file path: sha256} over files and (recursively) directories."""
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.rglob("*")):
                if f.is_file():
                    out[str(f)] = _sha256(f)
        elif p.is_file():
            out[str(p)] = _sha256(p)
    return out


def _write_manifest(path: Path, command: str, config: dict, inputs, seeds: dict, outputs, started: str) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "inputs": _hash_inputs(inputs),
        "seeds": seeds,
        "outputs": [str(o) for o in outputs],
        "started": started,
        "finished": _utcnow(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _parse_dims(raw: str) -> tuple:
    parts = raw.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--dims expects D,H,W, got {raw!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--dims expects integers, got {raw!r}") from None
    if any(d < 1 for d in dims):
        raise ConfigError(f"--dims must be positive, got {raw!r}")
    return dims


def _load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return load_train_config(path)


def _sibling_config(checkpoint, explicit) -> TrainConfig:
    if explicit is not None:
        return load_train_config(explicit)
    sibling = Path(checkpoint).parent / "config.txt"
    if not sibling.is_file():
        raise FileNotFoundError(f"no config next to checkpoint ({sibling}); pass --config")
    return load_train_config(sibling)


def _load_cases(dir_path, patch=None) -> list:
    """Sorted (normalized Volume, Mask) pairs from one directory.

    Pairs are matched by stem: case.vol with case.msk.  A missing directory,
    an empty one, or an unmatched file is an I/O error; a patch larger than
    any volume is a geometry (configuration) error.
    """
    d = Path(dir_path)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    vols = sorted(d.glob("*.vol"))
    if not vols:
        raise FileNotFoundError(f"no .vol files in {d}")
    cases = []
    for vp in vols:
        mp = vp.with_suffix(".msk")
        if not mp.is_file():
            raise FileNotFoundError(f"volume {vp} has no mask {mp}")
        vol = data.read_volume(vp)
        mask = data.read_mask(mp)
        if patch is not None and any(p > s for p, s in zip(patch, vol.dims)):
            raise ConfigError(f"patch {patch} exceeds volume dims {vol.dims} ({vp}); shrink patch= or resynthesize")
        cases.append((data.normalize(vol), mask))
    return cases


def _progress_hook(total: int, label: str):
    every = max(1, total // 10)

    def hook(i, bundle, updated):
        if i % every == every - 1 or i == total - 1:
            print(f"{label}: iteration {i + 1}/{total}")

    return hook


# -- commands ---------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    started = _utcnow()
    dims = _parse_dims(args.dims)
    domain = _DOMAIN_FLAG[args.domain]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i in range(args.count):
        spec = data.default_phantom_spec(args.seed * 1_000_003 + i, domain, dims=dims)
        vol, mask = data.generate_phantom(spec)
        stem = f"{args.domain}_{i:03d}"
        data.write_volume(out / f"{stem}.vol", vol)
        data.write_mask(out / f"{stem}.msk", mask)
        outputs += [f"{stem}.vol", f"{stem}.msk"]
        print(f"wrote {stem}.vol / {stem}.msk")
    _write_manifest(
        out / "manifest.json",
        "synth-data",
        {"domain": args.domain, "count": str(args.count), "seed": str(args.seed), "dims": args.dims},
        [],
        {"seed": args.seed},
        outputs,
        started,
    )
    print(f"{args.count} cases in {out}")
    return EXIT_OK


def cmd_train_da(args) -> int:
    started = _utcnow()
    cfg = _load_config(args.config)
    cases_x = _load_cases(args.data_x, cfg.patch)
    cases_y = _load_cases(args.data_y, cfg.patch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    bundle = networks.build_model(cfg.net, seed=cfg.seed)
    dtype = cfg.net.np_dtype()
    # lr=0 is pure evaluation mode: freeze the batch too, so the log columns
    # are constant instead of tracking sampling noise
    fixed = cfg.learning_rate == 0.0
    sx = PatchStream("X", cases_x, cfg.patch, cfg.batch_size, cfg.seed, "cli_adapt_x", dtype, augment=cfg.augment, fixed=fixed)
    sy = PatchStream("Y", cases_y, cfg.patch, cfg.batch_size, cfg.seed, "cli_adapt_y", dtype, augment=cfg.augment, fixed=fixed)
    _, rows, opts = training.train_adaptation(
        cfg, sx, sy, bundle, hook=_progress_hook(cfg.adapt_iterations, "adapt")
    )

    log_path = out / "adaptation_log.csv"
    log_path.write_text(training.LOG_HEADER + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    ck_path = out / "checkpoint.wdgc"
    training.save_checkpoint(ck_path, bundle, opts, len(rows))
    (out / "config.txt").write_text(train_config_to_text(cfg), encoding="utf-8")
    _write_manifest(
        out / "manifest.json",
        "train-da",
        parse_pairs(train_config_to_text(cfg)),
        [args.config, args.data_x, args.data_y],
        {"seed": cfg.seed},
        ["adaptation_log.csv", "checkpoint.wdgc", "config.txt"],
        started,
    )
    print(f"adaptation finished: {len(rows)} iterations, checkpoint {ck_path}")
    return EXIT_OK


def _tiled_apply(cfg: TrainConfig, vol: data.Volume, dtype, fn) -> np.ndarray:
    """Run fn on every tiling patch and average overlaps back to full size."""
    patch = cfg.net.patch
    if any(p > s for p, s in zip(patch, vol.dims)):
        raise ConfigError(f"patch {patch} exceeds volume dims {vol.dims}")
    grids = [training._cover_origins(d, p, p) for d, p in zip(vol.dims, patch)]
    pieces = []
    with no_grad():
        for oz in grids[0]:
            for oy in grids[1]:
                for ox in grids[2]:
                    sl = tuple(slice(o, o + p) for o, p in zip((oz, oy, ox), patch))
                    x = Tensor(vol.voxels[sl][None, None].astype(dtype))
                    pieces.append((fn(x), (oz, oy, ox)))
    return data.reassemble_patches(pieces, vol.dims)


def cmd_export_content(args) -> int:
    started = _utcnow()
    cfg = _sibling_config(args.checkpoint, args.config)
    bundle = networks.build_model(cfg.net, seed=cfg.seed)
    training.load_checkpoint(args.checkpoint, bundle)
    domain = _DOMAIN_FLAG[args.domain]
    vol = data.normalize(data.read_volume(args.infile))

    def content_render(x):
        zc = networks.encode_content(bundle, domain, x)
        return networks.content_only_image(bundle, domain, zc).data[0, 0]

    voxels = _tiled_apply(cfg, vol, cfg.net.np_dtype(), content_render)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data.write_volume(out, data.Volume(vol.dims, vol.spacing, voxels))
    _write_manifest(
        Path(str(out) + ".manifest.json"),
        "export-content",
        parse_pairs(train_config_to_text(cfg)),
        [args.checkpoint, args.config, args.infile],
        {"seed": cfg.seed},
        [out.name],
        started,
    )
    print(f"content-only volume written to {out}")
    return EXIT_OK


def cmd_train_seg(args) -> int:
    started = _utcnow()
    if args.checkpoint is not None:
        cfg = _sibling_config(args.checkpoint, args.config)
    else:
        cfg = _load_config(args.config)
    cases = _load_cases(args.data, cfg.patch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    bundle = networks.build_model(cfg.net, seed=cfg.seed)
    if args.checkpoint is not None:
        training.load_checkpoint(args.checkpoint, bundle)
    domain = _DOMAIN_FLAG[args.domain]
    stream = PatchStream(
        domain, cases, cfg.patch, cfg.batch_size, cfg.seed, "cli_seg", cfg.net.np_dtype(), augment=cfg.augment
    )
    _, rows, opt = training.train_segmentation(
        cfg, stream, bundle, hook=_progress_hook(cfg.seg_iterations, "seg")
    )

    (out / "seg_log.csv").write_text(training.SEG_LOG_HEADER + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    ck_path = out / "checkpoint.wdgc"
    training.save_checkpoint(ck_path, bundle, {"seg": opt}, len(rows))
    (out / "config.txt").write_text(train_config_to_text(cfg), encoding="utf-8")
    _write_manifest(
        out / "manifest.json",
        "train-seg",
        parse_pairs(train_config_to_text(cfg)),
        [args.checkpoint, args.config, args.data],
        {"seed": cfg.seed},
        ["seg_log.csv", "checkpoint.wdgc", "config.txt"],
        started,
    )
    print(f"segmentation finished: {len(rows)} iterations, checkpoint {ck_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = _utcnow()
    d = Path(args.data)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    rows = []
    if args.pred is not None:
        p = Path(args.pred)
        if not p.is_dir():
            raise FileNotFoundError(f"prediction directory not found: {p}")
        masks = sorted(d.glob("*.msk"))
        if not masks:
            raise FileNotFoundError(f"no .msk files in {d}")
        for mp in masks:
            pp = p / mp.name
            if not pp.is_file():
                raise FileNotFoundError(f"no prediction mask for {mp.name} in {p}")
            truth = data.read_mask(mp)
            pred = data.read_mask(pp)
            rows.append((mp.stem, losses.dice_metric(pred.labels, truth.labels), losses.jaccard_metric(pred.labels, truth.labels)))
        inputs = [args.data, args.pred]
        seeds = {}
    else:
        if args.checkpoint is None:
            raise ConfigError("evaluate needs --checkpoint (model predictions) or --pred (precomputed masks)")
        cfg = _sibling_config(args.checkpoint, args.config)
        bundle = networks.build_model(cfg.net, seed=cfg.seed)
        training.load_checkpoint(args.checkpoint, bundle)
        cases = _load_cases(args.data, cfg.net.patch)
        domain = _DOMAIN_FLAG[args.domain]
        for i, case in enumerate(cases):
            dice, jac = training.evaluate_cases(bundle, cfg, [case], domain)
            rows.append((f"case_{i:03d}", dice, jac))
        inputs = [args.checkpoint, args.config, args.data]
        seeds = {"seed": cfg.seed}

    lines = ["case,dice,jaccard"]
    lines += [f"{name},{dv:.17g},{jv:.17g}" for name, dv, jv in rows]
    dm = float(np.mean([dv for _, dv, _ in rows]))
    jm = float(np.mean([jv for _, _, jv in rows]))
    lines.append(f"mean,{dm:.17g},{jm:.17g}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _write_manifest(
        Path(str(out) + ".manifest.json"),
        "evaluate",
        {"domain": args.domain},
        inputs,
        seeds,
        [out.name],
        started,
    )
    print(f"evaluated {len(rows)} cases: mean dice {dm:.4f}, mean jaccard {jm:.4f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    started = _utcnow()
    cfg = _load_config(args.config)
    if args.mode is not None:
        cfg = dataclasses.replace(cfg, mode=args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"running {cfg.folds}-fold experiment, mode {cfg.mode}")
    report = training.run_experiment(cfg)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "config.txt").write_text(train_config_to_text(cfg), encoding="utf-8")
    _write_manifest(
        out / "manifest.json",
        "experiment",
        parse_pairs(train_config_to_text(cfg)),
        [args.config],
        {"seed": cfg.seed},
        ["report.csv", "config.txt"],
        started,
    )
    for split in sorted(report.summary):
        dm, ds, _, _ = report.summary[split]
        print(f"{split}: mean dice {dm:.4f} (std {ds:.4f})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.suite == "ops":
        results = {name: (err, verification.FIRST_ORDER_TOL) for name, err in verification.run_op_suite().items()}
    elif args.suite == "penalty":
        results = {
            name: (err, verification.SECOND_ORDER_TOL)
            for name, err in verification.run_second_order_suite().items()
        }
    else:
        results = verification.run_loss_suite()
    failures = []
    worst_name, worst_ratio, worst_err = "", -1.0, 0.0
    for name in sorted(results):
        err, tol = results[name]
        ok = err < tol
        print(f"{'ok  ' if ok else 'FAIL'} {name:32s} {err:.3e} (tol {tol:g})")
        if not ok:
            failures.append(name)
        if err / tol > worst_ratio:
            worst_name, worst_ratio, worst_err = name, err / tol, err
    print(f"worst: {worst_name} at {worst_err:.3e}")
    if failures:
        print(f"gradcheck failed: {failures}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


# -- argument surface ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxda",
        description="Cross-modality domain adaptation and segmentation for volumetric images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate phantom volume/mask pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--domain", choices=("x", "y"), required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="8,32,32", help="volume size D,H,W")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-da", help="adversarial adaptation phase")
    p.add_argument("--config", help="key=value config file (defaults used when omitted)")
    p.add_argument("--data-x", required=True, dest="data_x")
    p.add_argument("--data-y", required=True, dest="data_y")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_da)

    p = sub.add_parser("export-content", help="decode a volume with zero style")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="defaults to config.txt beside the checkpoint")
    p.add_argument("--in", required=True, dest="infile")
    p.add_argument("--out", required=True)
    p.add_argument("--domain", choices=("x", "y"), required=True)
    p.set_defaults(func=cmd_export_content)

    p = sub.add_parser("train-seg", help="segmentation phase on frozen content")
    p.add_argument("--checkpoint", help="adaptation checkpoint (fresh model when omitted)")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--domain", choices=("x", "y"), default="x")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("evaluate", help="Dice/Jaccard per case")
    p.add_argument("--checkpoint")
    p.add_argument("--config", help="defaults to config.txt beside the checkpoint")
    p.add_argument("--data", required=True, help="directory with .vol/.msk truth")
    p.add_argument("--pred", help="directory with predicted .msk files (bypasses the model)")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--domain", choices=("x", "y"), default="y")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="cross-validated protocol")
    p.add_argument("--mode", choices=training.MODES)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference verification")
    p.add_argument("--suite", choices=("ops", "losses", "penalty"), default="ops")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except NumericDomainError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SerializationError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - the CLI boundary maps everything to exit codes
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
