import json

import pytest

from shearad import cli
from shearad.config import RunConfig, load_config
from shearad.errors import ValidationError
from shearad.eval.report import read_report

from tiny_config import TINY_CONFIG


def write_config(tmp_path, **overrides):
    cfg = json.loads(json.dumps(TINY_CONFIG))
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg_path = write_config(tmp)
    assert cli.main(["pipeline", "--config", str(cfg_path), "--output", str(tmp / "runs")]) == 0
    config = load_config(cfg_path, output=str(tmp / "runs"))
    return cfg_path, config, tmp


# ---------------------------------------------------------------- config


def test_seed_is_mandatory(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{}")
    with pytest.raises(ValidationError, match="seed"):
        load_config(path)


def test_unknown_section_rejected():
    with pytest.raises(ValidationError, match="unknown"):
        RunConfig.from_json({"seed": 1, "modle": {}})


def test_config_round_trip_and_overrides(tmp_path):
    path = write_config(tmp_path)
    cfg = load_config(path, seed=9, output="elsewhere")
    assert cfg.seed == 9 and cfg.output_dir == "elsewhere"
    again = RunConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert again == cfg and again.digest() == cfg.digest()


def test_digest_ignores_output_location(tmp_path):
    path = write_config(tmp_path)
    assert load_config(path, output="a").digest() == load_config(path, output="b").digest()
    assert load_config(path, seed=1).digest() != load_config(path, seed=2).digest()


def test_invalid_sections():
    with pytest.raises(ValidationError):
        RunConfig.from_json({"seed": 1, "subset": {"name": "A", "ratios": [0.5, 0.5, 0.5]}})
    with pytest.raises(ValidationError):
        RunConfig.from_json({"seed": 1, "scoring": {"sigma": 0}})
    with pytest.raises(ValidationError):
        RunConfig.from_json({"seed": -1})


def test_show_defaults(capsys):
    assert cli.main(["show-defaults"]) == 0
    shown = json.loads(capsys.readouterr().out)
    assert RunConfig.from_json(shown) == RunConfig(seed=0)
    assert shown["generator"]["counts"] == [100, 59, 85]
    assert shown["scoring"]["sigma"] == 4.0


# ---------------------------------------------------------------- verbs


def test_generate_counts(tmp_path, capsys):
    path = write_config(tmp_path)
    assert cli.main(["generate", "--config", str(path), "--output", str(tmp_path / "r")]) == 0
    out = capsys.readouterr().out
    assert "generated 28 samples" in out


def test_zero_counts_exit_nonzero(tmp_path, capsys):
    cfg = json.loads(json.dumps(TINY_CONFIG))
    cfg["generator"]["counts"] = [0, 0, 0]
    path = tmp_path / "zero.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["generate", "--config", str(path), "--output", str(tmp_path / "r")]) != 0
    assert "error" in capsys.readouterr().err


def test_missing_prerequisite(tmp_path, capsys):
    path = write_config(tmp_path)
    assert cli.main(["train", "--config", str(path), "--output", str(tmp_path / "r")]) != 0
    assert "missing" in capsys.readouterr().err


def test_perplexity_too_large(pipeline_run, capsys):
    cfg_path, config, tmp = pipeline_run
    cfg = json.loads(cfg_path.read_text())
    cfg["eval"]["perplexity"] = 50.0
    path = tmp / "big_perp.json"
    path.write_text(json.dumps(cfg))
    out_root = str(tmp / "perp")
    assert cli.main(["generate", "--config", str(path), "--output", out_root]) == 0
    assert cli.main(["subset", "--config", str(path), "--output", out_root]) == 0
    assert cli.main(["embed", "--config", str(path), "--output", out_root]) != 0
    assert "too few" in capsys.readouterr().err


def test_bad_thread_setting(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SHEARO_THREADS", "zero")
    assert cli.main(["generate", "--config", str(write_config(tmp_path)), "--output", str(tmp_path / "r")]) != 0
    assert "SHEARO_THREADS" in capsys.readouterr().err


# ---------------------------------------------------------------- pipeline


def test_pipeline_ledger(pipeline_run):
    _, config, _ = pipeline_run
    root = config.run_dir
    ledger = json.loads((root / cli.LEDGER_NAME).read_text())
    arts = ledger["artifacts"]
    assert ledger["config_hash"] == config.digest()
    assert sum(p.startswith("models/") and p.endswith(".pt") for p in arts) >= 3
    assert sum(p.endswith("report.json") for p in arts) >= 4
    assert all((root / p).exists() for p in arts)
    assert set(ledger["stages"]) == {"generate", "subset", "train", "evaluate", "embed"}


def test_reports_schema(pipeline_run):
    _, config, _ = pipeline_run
    ae = read_report(config.run_dir / "reports" / "AE_recon" / "report.json")
    assert {"auc", "ap", "chance_ap"} <= set(ae.to_json())
    assert ae.localization is None
    peaks = read_report(config.run_dir / "reports" / "STFPM_peaks" / "report.json")
    assert set(peaks.localization) == {"mean_iou", "map", "map50", "map75", "mar1", "mar10"}
    assert (config.run_dir / "reports" / "STFPM_overlays.png").exists()
    assert (config.run_dir / "embedding" / "STFPM_embedding.csv").read_text().startswith("id,x,y,label")


def test_rerun_is_idempotent(pipeline_run, capsys):
    cfg_path, config, tmp = pipeline_run
    mtimes = {p: p.stat().st_mtime_ns for p in (config.run_dir / "models").iterdir()}
    assert cli.main(["pipeline", "--config", str(cfg_path), "--output", str(tmp / "runs")]) == 0
    out = capsys.readouterr().out
    assert "[train] up to date" in out
    assert mtimes == {p: p.stat().st_mtime_ns for p in (config.run_dir / "models").iterdir()}


def test_corrupted_checkpoint_names_train_stage(tmp_path, capsys):
    path = write_config(tmp_path)
    root = str(tmp_path / "runs")
    assert cli.main(["pipeline", "--config", str(path), "--output", root]) == 0
    ckpt = load_config(path, output=root).run_dir / "models" / "AE.pt"
    raw = bytearray(ckpt.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    ckpt.write_bytes(bytes(raw))
    capsys.readouterr()
    assert cli.main(["pipeline", "--config", str(path), "--output", root]) != 0
    assert "stage train" in capsys.readouterr().err


def test_external_predictions_path(pipeline_run, capsys):
    cfg_path, config, tmp = pipeline_run
    from shearad.datamodel import load_manifest

    subset = load_manifest(config.run_dir / "subset_A" / "manifest.json")
    doc = [{"id": r.id, "boxes": [b.as_list() + [1.0] for b in r.boxes]} for r in subset.samples if r.defective]
    pred_path = tmp / "yolo.json"
    pred_path.write_text(json.dumps(doc))
    args = ["--config", str(cfg_path), "--output", str(tmp / "runs")]
    assert cli.main(["ingest-predictions", str(pred_path), *args]) == 0
    assert cli.main(["evaluate", "--kind", "AE", "--predictions", str(pred_path), *args]) == 0
    report = read_report(config.run_dir / "reports" / "AE_recon_external" / "report.json")
    assert report.localization["map"] == 1.0 and report.localization["mean_iou"] == 1.0


def test_incompatible_strategy(pipeline_run, capsys):
    cfg_path, _, tmp = pipeline_run
    args = ["--config", str(cfg_path), "--output", str(tmp / "runs")]
    assert cli.main(["evaluate", "--kind", "AE", "--strategy", "peaks", *args]) != 0
    assert "not available" in capsys.readouterr().err
