import json

import pytest
import yaml

from quadwm.cli import EXIT_CONFIG, EXIT_DATA, main, write_oracle_checkpoint
from quadwm.config import OUTPUT_ENV, DEFAULT_CONFIG_YAML, config_from_text

TINY = """\
seed: 5
excitation:
  load_duration: 12.0
model:
  physics: {hidden: [8]}
  rnn: {hidden: 4, init_hidden: [8]}
training:
  total_updates: 4
  val_period: 2
  val_horizon: 16
  val_rollouts: 2
  batch_size: 4
  checkpoint_period: 2
evaluation:
  id_horizon: 32
  n_rollouts: 3
  ood_horizons: [32, 16]
  ood_duration: 3.2
"""


@pytest.fixture(autouse=True)
def _no_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


@pytest.fixture
def collected(tmp_path, tiny):
    out = tmp_path / "run"
    assert main(["collect", "--config", str(tiny), "--output", str(out)]) == 0
    return out


def test_print_default(capsys):
    assert main(["config", "print-default"]) == 0
    assert config_from_text(capsys.readouterr().out) == config_from_text(DEFAULT_CONFIG_YAML)


def test_bad_key_exits_config(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("plant:\n  masss: 2.0\n")
    assert main(["collect", "--config", str(p), "--output", str(tmp_path)]) == EXIT_CONFIG
    assert "plant.masss" in capsys.readouterr().err


def test_collect_is_deterministic(tmp_path, tiny):
    outs = []
    for name in ("a", "b"):
        assert main(["collect", "--config", str(tiny), "--output", str(tmp_path / name)]) == 0
        outs.append(tmp_path / name / "data")
    for rel in ("buffer/episodes.jsonl", "buffer/manifest.json", "ood.jsonl"):
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes()


def test_env_var_sets_output(tmp_path, tiny, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "envroot"))
    assert main(["collect", "--config", str(tiny)]) == 0
    assert (tmp_path / "envroot" / "data" / "ood.jsonl").exists()


def test_train_rejects_unknown_kind(collected, tiny):
    assert main(["train", "--config", str(tiny), "--output", str(collected), "--kind", "gru"]) == EXIT_CONFIG


def test_train_without_data(tmp_path, tiny):
    assert main(["train", "--config", str(tiny), "--output", str(tmp_path / "empty"), "--kind", "rnn"]) == EXIT_DATA


def test_train_zero_updates_writes_init(collected, tmp_path):
    p = tmp_path / "zero.yaml"
    cfg = yaml.safe_load(TINY)
    cfg["training"]["total_updates"] = 0
    p.write_text(yaml.safe_dump(cfg))
    assert main(["train", "--config", str(p), "--output", str(collected), "--kind", "physics"]) == 0
    ckpt = collected / "checkpoints" / "physics"
    assert (ckpt / "init.json").exists() and (ckpt / "best.json").exists()


def test_train_then_eval_reports(collected, tiny, capsys):
    args = ["--config", str(tiny), "--output", str(collected)]
    assert main(["train", *args, "--kind", "rnn"]) == 0
    ckpt = collected / "checkpoints" / "rnn" / "best.json"
    assert ckpt.exists() and (collected / "checkpoints" / "rnn" / "train_log.csv").exists()
    capsys.readouterr()
    assert main(["eval", *args, "--kind", "rnn", "--checkpoint", str(ckpt)]) == 0
    first = json.loads(capsys.readouterr().out)
    rep = collected / "reports" / "default"
    for name in ("rmse_id-buffer_rnn.csv", "rmse_id-heldout_rnn.csv", "series_ood_rnn.csv", "series_ood16_rnn.csv"):
        assert (rep / name).exists(), name
    snapshot = {p.name: p.read_bytes() for p in rep.iterdir()}
    assert main(["eval", *args, "--kind", "rnn", "--checkpoint", str(ckpt)]) == 0
    assert json.loads(capsys.readouterr().out) == first
    assert {p.name: p.read_bytes() for p in rep.iterdir()} == snapshot


def test_eval_kind_mismatch(collected, tiny):
    ckpt = write_oracle_checkpoint(collected / "oracle.json")
    args = ["--config", str(tiny), "--output", str(collected), "--checkpoint", str(ckpt)]
    assert main(["eval", *args, "--kind", "physics"]) == EXIT_CONFIG


def test_eval_oracle_is_exact(collected, tiny, capsys):
    ckpt = write_oracle_checkpoint(collected / "oracle.json")
    capsys.readouterr()
    args = ["--config", str(tiny), "--output", str(collected), "--checkpoint", str(ckpt)]
    assert main(["eval", *args, "--kind", "oracle"]) == 0
    res = json.loads(capsys.readouterr().out)
    for entry in res.values():
        assert max(entry["rmse"].values()) < 1e-6


def test_eval_missing_checkpoint(collected, tiny):
    args = ["--config", str(tiny), "--output", str(collected), "--checkpoint", str(collected / "nope.json")]
    assert main(["eval", *args, "--kind", "physics"]) == EXIT_DATA


def test_reproduce_skip_collect_without_data(tmp_path, tiny):
    assert main(["reproduce", "--config", str(tiny), "--output", str(tmp_path / "none"), "--skip-collect"]) == EXIT_DATA


def test_reproduce_tiny(tmp_path, tiny, capsys):
    out = tmp_path / "repro"
    code = main(["reproduce", "--config", str(tiny), "--output", str(out)])
    text = capsys.readouterr().out
    summary = json.loads((out / "reports" / "default" / "summary.json").read_text())
    assert code == (0 if summary["acceptance"]["passed"] else 6)
    assert set(summary["results"]) == {"physics", "rnn"}
    assert {"id-buffer", "id-heldout", "ood32", "ood16"} <= set(summary["results"]["physics"])
    assert "acceptance:" in text
