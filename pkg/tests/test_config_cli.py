import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from bict.cli import main
from bict.config import (
    ExperimentConfig,
    apply_scenario_preset,
    load_config,
    parse_config,
    snapshot,
)
from bict.store import read_embedding_store

FAST_CONFIG = """
data.num_classes = 6
data.samples_per_class = 10
data.input_dim = 8
data.noise_sigma = 0.2
eval.num_queries = 12
eval.gallery_per_class = 3
eval.k = 5
model.embedding_dim = 8
model.old_hidden_width = 12
model.new_hidden_width = 12
psi.hidden_dim = 8
train.epochs = 2
train.batch_size = 16
run.seeds = 1
sweep.lambdas = 0.0,2.0
sweep.dims = 4,8
sweep.psi_dims = 4
sequential.fractions = 0.5,1.0
refresh.fractions = 0.0,0.5,1.0
refresh.order_seeds = 1
"""


def checksums(directory: Path) -> dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.iterdir()) if p.is_file()}


# ---------------------------------------------------------------- config

def test_defaults_validate():
    cfg = ExperimentConfig()
    cfg.validate()
    assert cfg.run.scenario == "extended-data"
    assert 0.0 in cfg.sweep.lambdas


def test_parse_and_override():
    cfg, seen = parse_config("data.num_classes = 10\nloss.lambda = 4.5\n")
    assert cfg.data.num_classes == 10
    assert cfg.loss.lambda_ == 4.5
    assert seen == {"data.num_classes", "loss.lambda"}


@pytest.mark.parametrize("line,msg", [
    ("nosuch.key = 1", "unknown section"),
    ("data.nosuch = 1", "unknown key"),
    ("data.num_classes = ten", "invalid literal"),
    ("data.num_classes", "expected"),
    ("data.num_classes = 5\ndata.num_classes = 6", "duplicate"),
])
def test_parse_rejections(line, msg):
    with pytest.raises(ValueError, match=msg):
        parse_config(line)


def test_snapshot_roundtrip():
    cfg, _ = parse_config(FAST_CONFIG)
    text = snapshot(cfg)
    back, seen = parse_config(text)
    assert back == cfg
    assert snapshot(back) == text


def test_scenario_presets():
    cfg, seen = parse_config("run.scenario = improved-arch\n")
    apply_scenario_preset(cfg, seen)
    assert cfg.model.old_hidden_width == 64
    assert cfg.model.new_hidden_width == 256
    assert cfg.run.old_fraction == 1.0

    cfg, seen = parse_config("run.scenario = improved-loss\n")
    apply_scenario_preset(cfg, seen)
    assert cfg.loss.old_m == 0.0
    assert cfg.loss.m == 0.3

    cfg, seen = parse_config("run.scenario = extended-class\n")
    apply_scenario_preset(cfg, seen)
    assert cfg.run.split_mode == "class"

    # explicit keys beat the preset
    cfg, seen = parse_config("run.scenario = improved-arch\nmodel.new_hidden_width = 96\n")
    apply_scenario_preset(cfg, seen)
    assert cfg.model.new_hidden_width == 96


def test_config_validation_errors():
    cfg = ExperimentConfig()
    cfg.run.scenario = "bogus"
    with pytest.raises(ValueError, match="scenario"):
        cfg.validate()
    cfg = ExperimentConfig()
    cfg.sweep.lambdas = [-1.0]
    with pytest.raises(ValueError, match="nonnegative"):
        cfg.validate()


# ------------------------------------------------------------------- CLI

def write_fast_config(tmp_path, extra="") -> Path:
    path = tmp_path / "fast.cfg"
    path.write_text(FAST_CONFIG + extra)
    return path


def test_cli_gen_data_roundtrip_and_force(tmp_path, capsys):
    cfg_path = write_fast_config(tmp_path)
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
    first = checksums(out)
    assert {"train.bict", "queries.bict", "gallery.bict", "manifest.json",
            "config_snapshot.cfg"} <= set(first)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["num_classes"] == 6 and manifest["seed"] == 17
    assert manifest["input_dim"] == 8 and manifest["noise_sigma"] == 0.2

    # refusal without --force
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "FileExistsError"

    assert main(["gen-data", "--config", str(cfg_path), "--out", str(out), "--force"]) == 0
    assert checksums(out) == first


def test_cli_run_outputs_and_snapshot_reproducibility(tmp_path):
    cfg_path = write_fast_config(tmp_path)
    out1 = tmp_path / "run1"
    assert main(["run", "--config", str(cfg_path), "--out", str(out1)]) == 0
    report = json.loads((out1 / "report_seed1.json").read_text())
    assert report["m_n2n_oracle"] is True
    assert report["scenario"] == "extended-data"
    summary = (out1 / "summary.csv").read_text().splitlines()
    assert summary[0] == "scenario,seed,m_o2o,m_bct,m_fct,m_n2n"
    # re-run from the written snapshot into a fresh directory
    out2 = tmp_path / "run2"
    assert main(["run", "--config", str(out1 / "config_snapshot.cfg"),
                 "--out", str(out2)]) == 0
    assert checksums(out1) == checksums(out2)


def test_cli_sweep_lambda_csv(tmp_path):
    cfg_path = write_fast_config(tmp_path)
    out = tmp_path / "sweep"
    assert main(["sweep-lambda", "--config", str(cfg_path), "--out", str(out)]) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "lambda,seed,psi_dim,m_o2o,m_bct,m_fct,m_n2n"
    assert len(lines) == 1 + 2  # two lambdas x one seed x one psi dim
    summary = json.loads((out / "summary.json").read_text())
    assert "lambda_b" in summary


def test_cli_sweep_lambda_requires_zero(tmp_path):
    cfg_path = write_fast_config(tmp_path, extra="")
    text = cfg_path.read_text().replace("sweep.lambdas = 0.0,2.0", "sweep.lambdas = 1.0,2.0")
    cfg_path.write_text(text)
    out = tmp_path / "sweep"
    assert main(["sweep-lambda", "--config", str(cfg_path), "--out", str(out)]) == 1


def test_cli_sweep_dim_gain_column(tmp_path):
    cfg_path = write_fast_config(tmp_path)
    out = tmp_path / "dims"
    assert main(["sweep-dim", "--config", str(cfg_path), "--out", str(out)]) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "dim,seed,m_o2o,m_bct,m_fct,fct_gain,m_n2n"
    assert len(lines) == 1 + 2
    for line in lines[1:]:
        parts = line.split(",")
        assert abs(float(parts[5]) - (float(parts[4]) - float(parts[3]))) < 1e-12


def test_cli_sequential_table_and_gallery_stores(tmp_path):
    cfg_path = write_fast_config(tmp_path)
    out = tmp_path / "seq"
    assert main(["sequential", "--config", str(cfg_path), "--out", str(out)]) == 0
    lines = (out / "results.csv").read_text().splitlines()
    assert lines[0] == "variant,seed,m_o2o,gen1_m_bct,gen1_m_fct,gen1_m_n2n"
    bct_rows = [l for l in lines[1:] if l.startswith("bct,1")]
    assert bct_rows and ",n/a," in bct_rows[0]  # BCT-only has no FCT column value
    # momentum variant persists one store per generation
    g0 = read_embedding_store(out / "gallery_seed1_gen0.bict")
    g1 = read_embedding_store(out / "gallery_seed1_gen1.bict")
    assert g0.generation == 0 and g1.generation == 1
    assert g0.embeddings.shape == g1.embeddings.shape
    assert not np.array_equal(g0.embeddings, g1.embeddings)


def test_cli_hot_refresh_timeline(tmp_path):
    cfg_path = write_fast_config(tmp_path)
    out = tmp_path / "hr"
    assert main(["hot-refresh", "--config", str(cfg_path), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    lines = (out / "timeline_seed1.csv").read_text().splitlines()
    assert lines[0] == "fraction,map"
    rows = [line.split(",") for line in lines[1:]]
    assert rows[0][0] == "-1.0" and float(rows[0][1]) == report["m_o2o"]
    assert float(rows[1][0]) == 0.0 and float(rows[1][1]) == report["m_bct"]
    assert float(rows[-1][0]) == 1.0 and float(rows[-1][1]) == report["m_fct"]


def test_cli_error_reports_machine_readable_json(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("data.nosuch = 3\n")
    rc = main(["run", "--config", str(bad), "--out", str(tmp_path / "x")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ValueError"
    assert "nosuch" in err["message"]


def test_cli_seed_override(tmp_path):
    cfg_path = write_fast_config(tmp_path)
    out = tmp_path / "seeded"
    assert main(["run", "--config", str(cfg_path), "--seed", "7",
                 "--out", str(out)]) == 0
    assert (out / "report_seed7.json").exists()
    snap = (out / "config_snapshot.cfg").read_text()
    assert "run.seeds = 7" in snap
