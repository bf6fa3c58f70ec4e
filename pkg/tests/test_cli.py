import csv
import json
import shutil
from pathlib import Path

import pytest
import yaml

from dycelab import cli, oracle
from dycelab.config import ConfigError, ExperimentConfig, from_dict, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def minimal(tmp_path):
    dst = tmp_path / "minimal.yaml"
    shutil.copy(CONFIGS / "minimal.yaml", dst)
    return dst


def test_shipped_configs_parse():
    cfg = load_config(CONFIGS / "longtail.yaml")
    assert cfg.train.threshold == 0.95 and cfg.train.alpha == 0.999
    assert cfg.data.n_labeled == 100 and cfg.data.n_unlabeled == 1000
    load_config(CONFIGS / "minimal.yaml")


@pytest.mark.parametrize(
    "doc, field",
    [
        ({"train": {"lr": "fast"}}, "train.lr"),
        ({"train": {"mode": "Dice"}}, "train.mode"),
        ({"model": {"bogus": 1}}, "model.bogus"),
        ({"train": {"alpha": 1.5}}, "train.alpha"),
        ({"nonsense": 1}, "nonsense"),
    ],
)
def test_config_errors_name_field(doc, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        from_dict(doc)


def test_train_writes_artifacts(minimal, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(minimal), "--seed", "1", "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists() and (out / "checkpoint" / "manifest.json").exists()
    lines = (out / "run.jsonl").read_text().splitlines()
    assert len(lines) == 50
    rec = json.loads(lines[0])
    assert {"step", "lr", "supervised", "consistency", "total", "f_H", "f_c", "wall_time"} <= set(rec)
    manifest = json.loads((out / "checkpoint" / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["step"] == 50


def test_train_deterministic_csv(minimal, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["train", "--config", str(minimal), "--out", str(a)])
    cli.main(["train", "--config", str(minimal), "--out", str(b)])
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_train_config_error_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  lr: -1\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "train.lr" in capsys.readouterr().err


def test_train_numeric_error_exit_3(minimal, tmp_path, monkeypatch):
    from dycelab import trainer

    def boom(*a, **k):
        raise trainer.NumericError("non-finite gradient in dec_W")

    monkeypatch.setattr(trainer, "train_step", boom)
    assert cli.main(["train", "--config", str(minimal), "--out", str(tmp_path / "x")]) == 3


def test_gradcheck_ok_and_fault(capsys):
    assert cli.main(["gradcheck", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    for name in oracle.GRADCHECKS:
        assert sum(line.split()[1] == name for line in out.splitlines()) == 1
    assert cli.main(["gradcheck", "--instances", "2", "--inject", "dyce"]) != 0
    assert "dyce" in capsys.readouterr().err


def test_expand_sweep():
    assert cli.expand_sweep({}) == []
    rows = cli.expand_sweep({"grid": {"train.omega": [0.25, 0.5, 0.75]}})
    assert [ov for _, ov in rows] == [{"train.omega": v} for v in (0.25, 0.5, 0.75)]
    (name, ov), = cli.expand_sweep({"runs": [{"name": "x", "ct": False, "dlg": False, "vlp": False, "dyce": True}]})
    assert name == "x"
    assert ov == {"train.lambda_ct": 0.0, "model.fusion": "generic", "model.use_language": False, "train.mode": "DyCE"}
    with pytest.raises(ConfigError):
        cli.expand_sweep({"gird": {}})


def test_ablate_empty_and_grid(minimal, tmp_path):
    empty = tmp_path / "empty.yaml"
    empty.write_text("{}\n")
    out = tmp_path / "e.csv"
    assert cli.main(["ablate", "--config", str(minimal), "--sweep", str(empty), "--out", str(out)]) == 0
    assert out.read_text().splitlines() == [",".join(cli.ABLATION_COLUMNS)]
    grid = tmp_path / "g.yaml"
    grid.write_text(yaml.safe_dump({"grid": {"train.omega": [0.25, 0.5, 0.75]}}))
    out = tmp_path / "g.csv"
    assert cli.main(["ablate", "--config", str(minimal), "--sweep", str(grid), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 3 and all(0 <= float(r["miou"]) <= 1 for r in rows)


def test_ablate_parallel_matches_serial(minimal, tmp_path, monkeypatch):
    base = load_config(minimal)
    sweep = {"grid": {"train.omega": [0.25, 0.75]}}
    serial = cli.run_ablation(base, sweep)
    monkeypatch.setenv("DYCE_THREADS", "2")
    assert cli.run_ablation(base, sweep) == serial


def test_report(minimal, tmp_path):
    runs = tmp_path / "runs"
    for seed in (0, 1):
        cli.main(["train", "--config", str(minimal), "--seed", str(seed), "--out", str(runs / f"s{seed}")])
    out = tmp_path / "report.csv"
    assert cli.main(["report", "--runs", str(runs), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["run"] for r in rows] == ["s0", "s1"] and rows[1]["seed"] == "1"


def test_with_overrides_rejects_unknown():
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides({"train.nope": 1})
