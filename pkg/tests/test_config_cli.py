import json

import pytest

from adpo.checkpoint import file_digest, save_model
from adpo.config import RunConfig
from adpo.errors import ConfigError
from adpo.runner import RunDir, StageFailed, cli_main, run_report, run_train, verify_manifest

from helpers import perturb_

# Shrunk data and training so a full stage runs in a few seconds.
TINY = [
    "data.n_train=8",
    "data.n_eval=6",
    "eval.n_eval=6",
    "train.batch_size=4",
    "train.epochs=1",
    "train.pgd_steps=2",
    "train.epsilon=64/255",
    "train.learning_rate=0.01",
    "attack.steps=2",
]


@pytest.fixture
def base_ckpt(tmp_path, tiny_model):
    path = tmp_path / "base.ckpt"
    perturb_(tiny_model, scale=0.5, seed=3)
    save_model(path, tiny_model)
    return path


def tiny_cfg(base_ckpt, *extra):
    cfg = RunConfig()
    cfg.apply_overrides([*TINY, f"io.base_checkpoint={base_ckpt}", *extra])
    return cfg


def test_text_round_trip_and_hash():
    cfg = RunConfig()
    cfg.apply_overrides(["train.lambda=0.5", "attack.eps=4/255", "eval.asr=yes", "loss.variant=ipo"])
    again = RunConfig.from_text(cfg.to_text())
    assert again == cfg and again.hash() == cfg.hash()
    assert cfg.get("attack.eps") == 4 / 255
    assert cfg.train().lam == 0.5 and cfg.loss().variant == "ipo"
    assert RunConfig().hash() != cfg.hash()


def test_unknown_and_malformed_values():
    cfg = RunConfig()
    with pytest.raises(ConfigError, match="lamda"):
        cfg.set("train.lamda", 1.0)
    with pytest.raises(ConfigError, match="optim"):
        cfg.set("optim.lr", 1.0)
    with pytest.raises(ConfigError, match="train.epochs"):
        cfg.set("train.epochs", "two")
    with pytest.raises(ConfigError):
        cfg.apply_overrides(["train.epochs"])
    with pytest.raises(ConfigError):
        RunConfig.from_text("[train]\nbogus = 1\n")


def test_seed_sets_every_seed():
    cfg = RunConfig()
    cfg.set_seed(11)
    for key in ("model.init_seed", "data.seed", "pretrain.seed", "attack.seed", "train.seed"):
        assert cfg.get(key) == 11


def test_cli_unknown_key_exits_1(tmp_path, capsys):
    assert cli_main(["train", "--out", str(tmp_path / "r"), "--set", "train.lamda=1"]) == 1
    assert "lamda" in capsys.readouterr().err
    assert cli_main(["frobnicate"]) == 1
    assert cli_main([]) == 1


def test_cli_missing_input_is_a_config_error(tmp_path):
    assert cli_main(["eval", "--out", str(tmp_path / "r")]) == 1


def test_pretrain_with_no_steps_fails_the_gate(tmp_path, capsys):
    argv = ["pretrain", "--out", str(tmp_path / "p"), "--set", "pretrain.max_steps=0", "--set", "pretrain.n_gate_eval=4",
            "--set", "model.enc_depth=1", "--set", "model.dec_depth=1"]
    assert cli_main(argv) == 2
    assert "gate unmet" in capsys.readouterr().err
    report = json.loads((tmp_path / "p" / "reports" / "pretrain.json").read_text())
    assert report["steps"] == 0 and not report["passed"]


def test_override_reaches_the_manifest(tmp_path, base_ckpt):
    cfg_file = tmp_path / "c.cfg"
    cfg_file.write_text("[train]\nlambda = 2\n")
    out = tmp_path / "run"
    argv = ["train", "--config", str(cfg_file), "--out", str(out), "--set", "train.lambda=0.5"]
    for item in TINY:
        argv += ["--set", item]
    argv += ["--set", f"io.base_checkpoint={base_ckpt}"]
    assert cli_main(argv) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["train"]["lambda"] == 0.5
    assert "lambda = 0.5" in (out / "config.snapshot").read_text()
    assert manifest["inputs"]["base_checkpoint"]["sha256"] == file_digest(base_ckpt)
    assert manifest["deviations"]["learning_rate"] == {"used": 0.01, "full_scale": 1e-5}
    assert manifest["config_hash"] == RunConfig.from_file(out / "config.snapshot").hash()
    assert {"checkpoints/final.ckpt", "metrics.jsonl", "reports/train.json"} <= set(manifest["artifacts"])
    assert all(verify_manifest(out).values())
    metrics = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [m["step"] for m in metrics] == [1, 2]
    assert any(m["n_pairs"] > 0 for m in metrics)


def test_resume_matches_uninterrupted_run(tmp_path, base_ckpt):
    cfg = tiny_cfg(base_ckpt, "io.deterministic=true")
    run_train(cfg, tmp_path / "full")
    partial = run_train(cfg, tmp_path / "resumed", stop_after=1)
    assert partial["steps"] == 1 and not partial["complete"]
    assert not (tmp_path / "resumed" / "checkpoints" / "final.ckpt").exists()
    run_train(cfg, tmp_path / "resumed", resume=True)
    for rel in ("checkpoints/final.ckpt", "metrics.jsonl", "reports/train.json"):
        assert (tmp_path / "full" / rel).read_bytes() == (tmp_path / "resumed" / rel).read_bytes()


def test_eval_then_report_is_read_only(tmp_path, base_ckpt, capsys):
    out = tmp_path / "ev"
    argv = ["eval", "--out", str(out), "--set", f"io.checkpoint={base_ckpt}"]
    for item in TINY:
        argv += ["--set", item]
    assert cli_main(argv) == 0
    table = capsys.readouterr().out
    before = {p: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert cli_main(["report", "--run", str(out), "--verify"]) == 0
    printed = capsys.readouterr().out
    assert table.strip() in printed
    assert {p: p.read_bytes() for p in out.rglob("*") if p.is_file()} == before


def test_verify_detects_tampering(tmp_path, base_ckpt):
    out = tmp_path / "run"
    run_train(tiny_cfg(base_ckpt), out)
    (out / "reports" / "train.json").write_text("{}")
    assert not verify_manifest(out)["reports/train.json"]
    with pytest.raises(StageFailed):
        run_report(out, verify=True, stream=open("/dev/null", "w"))
    assert cli_main(["report", "--run", str(out), "--verify"]) == 2


def test_locked_run_directory_is_refused(tmp_path, base_ckpt, capsys):
    out = tmp_path / "run"
    with RunDir(out).lock():
        argv = ["train", "--out", str(out), "--set", f"io.base_checkpoint={base_ckpt}"]
        assert cli_main(argv) == 2
    assert "locked" in capsys.readouterr().err


def test_make_figures_writes_sweep_csv(tmp_path):
    run = RunDir(tmp_path / "abl")
    run.prepare()
    rows = [[0.0, 0.9, 0.2], [1.0, 0.8, 0.5]]
    run.write_report("ablation_lambda-sweep.json", {"kind": "lambda-sweep", "rows": rows})
    assert cli_main(["report", "--run", str(run.path), "--make-figures"]) == 0
    lines = (run.reports / "figures" / "lambda-sweep.csv").read_text().splitlines()
    assert lines[0] == "grid_value,clean,robust" and len(lines) == 3
