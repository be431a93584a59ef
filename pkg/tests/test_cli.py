"""Command surface tests: config parsing, exit codes, artifacts, manifests."""

import json

import numpy as np
import pytest

from voxda import cli, config, data, training
from voxda.config import ConfigError
from voxda.engine import NumericDomainError
from voxda.training import TrainConfig


TINY_CFG = """
patch=4,16,16
adapt_iterations=4
seg_iterations=3
batch_size=2
seed=3
net.base_width=4
net.content_channels=4
net.style_dim=4
net.seg_width=8
"""


def run(argv):
    return cli.main([str(a) for a in argv])


def synth(out, domain, count=3, seed=0, dims="6,16,16"):
    rc = run(["synth-data", "--out", out, "--domain", domain, "--count", count, "--seed", seed, "--dims", dims])
    assert rc == 0
    return out


@pytest.fixture()
def pools(tmp_path):
    return (
        synth(tmp_path / "dx", "x", seed=0),
        synth(tmp_path / "dy", "y", seed=50),
    )


@pytest.fixture()
def cfg_file(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text(TINY_CFG, encoding="utf-8")
    return p


# -- config parsing ---------------------------------------------------------------


def test_config_typed_values():
    cfg = config.train_config_from_text(
        "learning_rate=2e-4\nbatch_size=4\npatch=4,8,8\naugment=no\nmode=multimodal_target\n"
        "weights.alpha=25\nnet.base_width=4\nnet.seg_input=image\n"
    )
    assert cfg.learning_rate == 2e-4
    assert cfg.batch_size == 4
    assert cfg.patch == (4, 8, 8)
    assert cfg.augment is False
    assert cfg.mode == "multimodal_target"
    assert cfg.weights.alpha == 25.0
    assert cfg.net.base_width == 4 and cfg.net.seg_input == "image"
    assert cfg.net.patch == (4, 8, 8)  # follows the top-level patch


def test_config_comments_and_blanks():
    cfg = config.train_config_from_text("# comment\n\nseed=7  # trailing\n")
    assert cfg.seed == 7


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError, match="learningrate"):
        config.train_config_from_text("learningrate=1e-4\n")
    with pytest.raises(ConfigError, match="unknown config keys"):
        config.train_config_from_text("weights.lambda_typo=1\n")


def test_config_duplicate_and_malformed():
    with pytest.raises(ConfigError, match="duplicate"):
        config.train_config_from_text("seed=1\nseed=2\n")
    with pytest.raises(ConfigError, match="key=value"):
        config.train_config_from_text("just a line\n")
    with pytest.raises(ConfigError, match="batch_size"):
        config.train_config_from_text("batch_size=two\n")


def test_config_validation_errors_are_config_errors():
    with pytest.raises(ConfigError, match="mode"):
        config.train_config_from_text("mode=nonsense\n")
    with pytest.raises(ConfigError):
        config.train_config_from_text("learning_rate=-1\n")


def test_config_round_trip():
    cfg = config.train_config_from_text(TINY_CFG)
    text = config.train_config_to_text(cfg)
    assert config.train_config_from_text(text) == cfg
    assert config.train_config_to_text(config.train_config_from_text(text)) == text


# -- synth-data ----------------------------------------------------------------------


def test_synth_counts_and_manifest(tmp_path):
    out = synth(tmp_path / "d", "x", count=3)
    assert len(list(out.glob("*.vol"))) == 3
    assert len(list(out.glob("*.msk"))) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "synth-data"
    assert sorted(manifest["outputs"]) == sorted(
        [f"x_{i:03d}{ext}" for i in range(3) for ext in (".vol", ".msk")]
    )
    assert manifest["seeds"] == {"seed": 0}
    assert manifest["started"] <= manifest["finished"]


def test_synth_deterministic_bytes(tmp_path):
    a = synth(tmp_path / "a", "y", count=2, seed=9)
    b = synth(tmp_path / "b", "y", count=2, seed=9)
    for name in ("y_000.vol", "y_000.msk", "y_001.vol", "y_001.msk"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_synth_bad_dims_exits_2(tmp_path, capsys):
    assert run(["synth-data", "--out", tmp_path / "d", "--domain", "x", "--dims", "8,8"]) == 2
    assert "dims" in capsys.readouterr().err.lower()


def test_bad_usage_exits_2(tmp_path):
    assert run(["synth-data", "--domain", "x"]) == 2  # missing --out
    assert run(["no-such-command"]) == 2


# -- train-da --------------------------------------------------------------------------


def test_train_da_artifacts(tmp_path, pools, cfg_file):
    dx, dy = pools
    out = tmp_path / "da"
    rc = run(["train-da", "--config", cfg_file, "--data-x", dx, "--data-y", dy, "--out", out])
    assert rc == 0
    log = (out / "adaptation_log.csv").read_text().splitlines()
    assert log[0] == training.LOG_HEADER
    assert len(log) == 1 + 4
    assert (out / "checkpoint.wdgc").is_file()
    snapshot = config.load_train_config(out / "config.txt")
    assert snapshot.adapt_iterations == 4
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"adaptation_log.csv", "checkpoint.wdgc", "config.txt"}
    assert any(k.endswith("x_000.vol") for k in manifest["inputs"])


def test_train_da_missing_dir_exits_3(tmp_path, pools, cfg_file, capsys):
    _, dy = pools
    rc = run(["train-da", "--config", cfg_file, "--data-x", tmp_path / "nope", "--data-y", dy, "--out", tmp_path / "o"])
    assert rc == 3
    assert "nope" in capsys.readouterr().err


def test_train_da_geometry_error_exits_2(tmp_path, capsys):
    small = synth(tmp_path / "small", "x", count=2, dims="8,8,8")
    other = synth(tmp_path / "small_y", "y", count=2, dims="8,8,8")
    rc = run(["train-da", "--data-x", small, "--data-y", other, "--out", tmp_path / "o"])
    assert rc == 2  # default 5x32x32 patch cannot fit an 8x8x8 volume
    err = capsys.readouterr().err
    assert "patch" in err and "8, 8, 8" in err


def test_train_da_numeric_abort_exits_4(tmp_path, pools, cfg_file, capsys, monkeypatch):
    dx, dy = pools

    def explode(*a, **k):
        raise NumericDomainError("total_loss: term 'cyc' is not finite (NaN poisoning)")

    monkeypatch.setattr(training, "train_adaptation", explode)
    rc = run(["train-da", "--config", cfg_file, "--data-x", dx, "--data-y", dy, "--out", tmp_path / "o"])
    assert rc == 4
    err = capsys.readouterr().err
    assert "numeric failure" in err and "cyc" in err


def test_train_da_lr_zero_constant_columns(tmp_path, pools, cfg_file):
    dx, dy = pools
    frozen = cfg_file.parent / "frozen.txt"
    frozen.write_text(cfg_file.read_text() + "learning_rate=0\naugment=false\n", encoding="utf-8")
    out = tmp_path / "da0"
    assert run(["train-da", "--config", frozen, "--data-x", dx, "--data-y", dy, "--out", out]) == 0
    rows = (out / "adaptation_log.csv").read_text().splitlines()[1:]
    term_cols = {}
    for r in rows:
        step, rest = r.split(",", 1)
        body, label = rest.rsplit(",", 1)
        term_cols.setdefault(label, set()).add(body)
    # evaluation mode: nothing moves, so each schedule branch logs one
    # constant set of loss columns
    assert set(term_cols) == {"content_disc", "critics+generators"}
    assert all(len(bodies) == 1 for bodies in term_cols.values())


# -- export-content -------------------------------------------------------------------


@pytest.fixture()
def da_checkpoint(tmp_path, pools, cfg_file):
    dx, dy = pools
    out = tmp_path / "da"
    assert run(["train-da", "--config", cfg_file, "--data-x", dx, "--data-y", dy, "--out", out]) == 0
    return out / "checkpoint.wdgc"


def test_export_dims_and_determinism(tmp_path, pools, da_checkpoint):
    dx, _ = pools
    src = dx / "x_000.vol"
    out1, out2 = tmp_path / "e1.vol", tmp_path / "e2.vol"
    for out in (out1, out2):
        rc = run(["export-content", "--checkpoint", da_checkpoint, "--in", src, "--out", out, "--domain", "x"])
        assert rc == 0
    assert out1.read_bytes() == out2.read_bytes()
    vol = data.read_volume(out1)
    assert vol.dims == data.read_volume(src).dims


def test_export_aligns_matched_pair(tmp_path, da_checkpoint):
    vx, _ = data.generate_phantom(data.default_phantom_spec(900, "X", dims=(6, 16, 16)))
    vy, _ = data.generate_phantom(data.default_phantom_spec(900, "Y", dims=(6, 16, 16)))
    nx, ny = data.normalize(vx), data.normalize(vy)
    data.write_volume(tmp_path / "px.vol", nx)
    data.write_volume(tmp_path / "py.vol", ny)
    for dom in ("x", "y"):
        rc = run(["export-content", "--checkpoint", da_checkpoint, "--in", tmp_path / f"p{dom}.vol",
                  "--out", tmp_path / f"e{dom}.vol", "--domain", dom])
        assert rc == 0
    raw_l1 = float(np.abs(nx.voxels - ny.voxels).mean())
    ex = data.read_volume(tmp_path / "ex.vol")
    ey = data.read_volume(tmp_path / "ey.vol")
    exported_l1 = float(np.abs(ex.voxels - ey.voxels).mean())
    assert exported_l1 < raw_l1


def test_export_bad_checkpoint_exits_3(tmp_path, capsys):
    ck = tmp_path / "bogus.wdgc"
    ck.write_bytes(b"not a checkpoint")
    (tmp_path / "config.txt").write_text(TINY_CFG, encoding="utf-8")
    rc = run(["export-content", "--checkpoint", ck, "--in", tmp_path / "x.vol", "--out", tmp_path / "o.vol", "--domain", "x"])
    assert rc == 3


# -- train-seg / evaluate ---------------------------------------------------------------


def test_train_seg_and_evaluate(tmp_path, pools, da_checkpoint):
    dx, dy = pools
    seg_out = tmp_path / "seg"
    rc = run(["train-seg", "--checkpoint", da_checkpoint, "--data", dx, "--out", seg_out, "--domain", "x"])
    assert rc == 0
    log = (seg_out / "seg_log.csv").read_text().splitlines()
    assert log[0] == training.SEG_LOG_HEADER and len(log) == 1 + 3

    csv = tmp_path / "eval.csv"
    rc = run(["evaluate", "--checkpoint", seg_out / "checkpoint.wdgc", "--data", dy, "--out", csv, "--domain", "y"])
    assert rc == 0
    lines = csv.read_text().splitlines()
    assert lines[0] == "case,dice,jaccard"
    assert len(lines) == 1 + 3 + 1 and lines[-1].startswith("mean,")


def test_evaluate_identical_masks_dice_one(tmp_path, pools):
    dx, _ = pools
    csv = tmp_path / "self.csv"
    assert run(["evaluate", "--data", dx, "--pred", dx, "--out", csv]) == 0
    lines = csv.read_text().splitlines()
    for line in lines[1:]:
        _, dice, jac = line.split(",")
        assert float(dice) == 1.0 and float(jac) == 1.0


def test_evaluate_requires_model_or_pred(tmp_path, pools, capsys):
    dx, _ = pools
    assert run(["evaluate", "--data", dx, "--out", tmp_path / "o.csv"]) == 2
    assert "--checkpoint" in capsys.readouterr().err


# -- experiment / gradcheck ---------------------------------------------------------------


def test_experiment_command(tmp_path):
    cfg = tmp_path / "exp.txt"
    cfg.write_text(
        "patch=4,16,16\nadapt_iterations=2\nseg_iterations=2\nbatch_size=1\nseed=3\n"
        "num_cases=4\nfolds=2\n"
        "net.base_width=4\nnet.content_channels=4\nnet.style_dim=4\nnet.seg_width=8\n",
        encoding="utf-8",
    )
    out = tmp_path / "exp"
    rc = run(["experiment", "--mode", "baseline_unadapted", "--config", cfg, "--out", out])
    assert rc == 0
    report = (out / "report.csv").read_text().splitlines()
    assert report[0] == "fold,split,dice,jaccard"
    assert len(report) == 1 + 2 * 2 + 4  # folds x splits + mean/std per split
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["mode"] == "baseline_unadapted"


def test_gradcheck_penalty_suite_passes(capsys):
    assert run(["gradcheck", "--suite", "penalty"]) == 0
    out = capsys.readouterr().out
    assert "worst:" in out and "FAIL" not in out


def test_gradcheck_reports_failures(monkeypatch, capsys):
    monkeypatch.setattr(cli.verification, "run_op_suite", lambda **kw: {"conv3d": 0.5})
    assert run(["gradcheck", "--suite", "ops"]) == 5
    captured = capsys.readouterr()
    assert "conv3d" in captured.out and "conv3d" in captured.err
