import json

import numpy as np
import pytest

from epalm import autodiff as ad
from epalm.cli import (EXIT_MISMATCH, EXIT_NUMERIC, EXIT_USAGE, EXIT_VERIFY, ExperimentConfig, load_config,
                       main, parse_flat)

SMALL_CFG = """\
# tiny end-to-end run
variant.name = {variant}
encoder.n_layers = 2
encoder.d_model = 16
encoder.n_heads = 2
encoder.d_ffn = 32
decoder.n_layers = 4
decoder.d_model = 16
decoder.n_heads = 2
decoder.d_ffn = 32
data.n_train = 64
data.n_val = 16
data.dir = {data}
train.epochs = 2
train.batch_size = 32
train.lr_start = 1e-3
train.lr_peak = 3e-3
train.lr_end = 1e-4
seed = 0
out_dir = {out}
"""


def _write_cfg(tmp_path, variant="EPALM", name="run.cfg", **extra):
    text = SMALL_CFG.format(variant=variant, data=tmp_path / "data", out=tmp_path / "run")
    text += "".join(f"{k} = {v}\n" for k, v in extra.items())
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.fixture
def data_dir(tmp_path):
    spec = tmp_path / "spec.cfg"
    spec.write_text("n_train = 64\nn_val = 16\nseed = 0\n")
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def test_gen_data_manifest_and_hashes(tmp_path, capsys):
    spec = tmp_path / "spec.cfg"
    spec.write_text("data.n_train = 100\ndata.n_val = 10\n")
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "a" / "nested")]) == 0
    m1 = json.loads(capsys.readouterr().out)
    assert m1["counts"]["train"] == 100
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "b")]) == 0
    m2 = json.loads(capsys.readouterr().out)
    assert m1["sha256"] == m2["sha256"]


def test_gen_data_invalid_spec_exits_2(tmp_path, capsys):
    spec = tmp_path / "bad.cfg"
    spec.write_text("max_objects = 20\n")
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert "invalid dataset spec" in capsys.readouterr().err


def test_count_params_anchors(capsys):
    assert main(["count-params", "--variant", "EPALM_PT", "--encoder", "vit_b", "--decoder", "opt2b7",
                 "--prompt-mlp"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert abs(100 * out["fraction"] - 0.54) <= 0.05
    assert main(["count-params", "--variant", "EPALM_PT", "--encoder", "vit_l", "--decoder", "opt6b7"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["trainable"] == 4_239_360 and set(out["groups"]) >= {"connection", "prompt"}


def test_count_params_unknown_preset_exits_2(capsys):
    assert main(["count-params", "--variant", "EPALM", "--encoder", "vit_h", "--decoder", "opt2b7"]) == EXIT_USAGE
    assert "vit_b" in capsys.readouterr().err
    assert main(["count-params", "--variant", "NOPE", "--encoder", "vit_b", "--decoder", "opt2b7"]) == EXIT_USAGE


def test_bad_arguments_exit_2(capsys):
    assert main(["train"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_grad_check_pass(capsys):
    assert main(["grad-check", "--variant", "EPALM_LIN", "--dims", "tiny", "--coords", "3"]) == 0
    line = json.loads(capsys.readouterr().out)
    assert line["pass"] and line["max_rel_error"] < 1e-4


def test_grad_check_corrupted_backward_exits_5(monkeypatch, capsys):
    real = ad.gelu

    def broken_gelu(x):
        out = real(x)
        back = out._backward
        out._backward = lambda g: tuple(0.5 * t for t in back(g))
        return out

    monkeypatch.setattr(ad, "gelu", broken_gelu)
    assert main(["grad-check", "--variant", "EPALM_LIN", "--coords", "3"]) == EXIT_VERIFY
    captured = capsys.readouterr()
    assert json.loads(captured.out)["pass"] is False
    assert "gradient check failed at" in captured.err


def test_config_round_trip_and_unknown_keys(tmp_path):
    cfg = load_config(_write_cfg(tmp_path, "EPALM_ADA", **{"variant.adapter_factor": 4,
                                                           "train.group_lr.prompt": 5e-4}), env={})
    assert cfg.variant.adapters.downsample_factor == 4
    assert cfg.train.group_lrs == {"prompt": 5e-4}
    again = ExperimentConfig.from_flat(parse_flat(cfg.to_text()), env={})
    assert again.to_flat() == cfg.to_flat()
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.epoch = 3\n")
    with pytest.raises(ValueError, match="train.epoch"):
        load_config(bad, env={})


def test_env_seed_override(tmp_path):
    path = _write_cfg(tmp_path)
    assert load_config(path, env={}).seed == 0
    cfg = load_config(path, env={"EPALM_SEED": "17"})
    assert cfg.seed == 17 and cfg.train.seed == 17


def test_train_eval_round_trip(tmp_path, data_dir, capsys):
    cfg = _write_cfg(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    assert {p.name for p in run.iterdir()} >= {"config.cfg", "metrics.jsonl", "best.ckpt", "final.ckpt"}
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert main(["eval", "--config", str(run / "config.cfg"), "--checkpoint", str(run / "best.ckpt")]) == 0
    report = json.loads((run / "eval" / "report_greedy.json").read_text())
    assert report["exact_match"] == summary["best_metric"]
    assert report["n_examples"] == 16
    lines = (run / "eval" / "predictions_greedy.jsonl").read_text().splitlines()
    assert len(lines) == 16 and set(json.loads(lines[0])) == {"id", "pred", "gold", "match"}
    assert main(["eval", "--config", str(run / "config.cfg"), "--checkpoint", str(run / "best.ckpt"),
                 "--decode", "beam=3"]) == 0
    assert json.loads((run / "eval" / "report_beam3.json").read_text())["decode"]["width"] == 3


def test_rerun_gives_identical_metrics(tmp_path, data_dir):
    cfg = _write_cfg(tmp_path)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r1")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r1" / "metrics.jsonl").read_bytes() == (tmp_path / "r2" / "metrics.jsonl").read_bytes()


def test_eval_variant_mismatch_exits_4(tmp_path, data_dir):
    cfg = _write_cfg(tmp_path, "EPALM_LIN", **{"train.epochs": 1})
    assert main(["train", "--config", str(cfg)]) == 0
    other = _write_cfg(tmp_path, "EPALM", name="other.cfg")
    assert main(["eval", "--config", str(other), "--checkpoint", str(tmp_path / "run" / "best.ckpt")]) \
        == EXIT_MISMATCH
    (tmp_path / "junk.ckpt").write_bytes(b"nope")
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "junk.ckpt")]) == EXIT_MISMATCH


def test_nan_abort_exits_3(tmp_path, data_dir):
    cfg = _write_cfg(tmp_path, "EPALM_LIN", **{"train.lr_start": 1e30, "train.lr_peak": 1e30,
                                               "train.lr_end": 1e30, "train.epochs": 1})
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(cfg)]) == EXIT_NUMERIC


def test_missing_data_or_backbone_exits_2(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    assert main(["train", "--config", str(cfg)]) == EXIT_USAGE
    assert "gen-data" in capsys.readouterr().err
    cfg = _write_cfg(tmp_path, name="bb.cfg", **{"backbone.path": tmp_path / "none.ckpt"})
    assert main(["pretrain", "--config", str(tmp_path / "missing.cfg")]) == EXIT_USAGE
