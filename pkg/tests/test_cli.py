import csv
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from beamcast.cli import main
from beamcast.config import load_config, save_config
from beamcast.dataset import build_dataset, read_container, write_container
from beamcast.experiment import checkpoint_name, horizon_pairs
from beamcast.metrics import REPORT_COLUMNS, wmape
from beamcast.model.checkpoint import load_checkpoint, save_checkpoint
from beamcast.scene import SnapshotGenerator

GOLDEN = Path(__file__).parent / "golden"


def _args(run, *extra):
    return ["--config", str(run["config"]), "--out", str(run["out"]), *extra]


def test_generate_summary_and_artifacts(cli_run):
    out = cli_run["out"]
    for name in ("dataset.bin", "raw.q15", "model_h0ms.bin", "model_h40ms.bin", "training_h0ms.csv",
                 "report.csv", "report.json", "plots/subset_ratio_h0ms.csv", "plots/subset_ratio_h40ms.csv"):
        assert (out / name).exists(), name


def test_dataset_counts(cli_run, small_cfg):
    ds = read_container(cli_run["out"] / "dataset.bin")
    assert len(ds) == 200
    counts = ds.verdict_counts()
    assert sum(counts.values()) == 200
    # about a fifth of snapshots lose too many PRSGs at the configured block loss rate
    assert 10 <= counts["insufficient_csi"] <= 80
    assert ds.config_hash == small_cfg.data_hash()


def test_container_round_trip_bytes(cli_run, tmp_path):
    src = cli_run["out"] / "dataset.bin"
    write_container(read_container(src), tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == src.read_bytes()


def test_container_corruption(cli_run, tmp_path):
    data = (cli_run["out"] / "dataset.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(data[:-100])
    with pytest.raises(ValueError):
        read_container(tmp_path / "short.bin")
    (tmp_path / "magic.bin").write_bytes(b"NOTBEAMS" + data[8:])
    with pytest.raises(ValueError, match="magic"):
        read_container(tmp_path / "magic.bin")


def test_report_columns_golden(cli_run):
    header = (cli_run["out"] / "report.csv").read_text().splitlines()[0]
    assert header == (GOLDEN / "report_columns.csv").read_text().strip()
    assert header.split(",") == REPORT_COLUMNS
    with open(cli_run["out"] / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["horizon_ms"], r["n"]) for r in rows] == [
        (h, n) for h in ("0.0", "40.0") for n in ("4", "8", "16", "32")]


def test_report_command(cli_run, capsys):
    assert main(["report", "--out", str(cli_run["out"])]) == 0
    text = capsys.readouterr().out
    assert "horizon_ms" in text and len(text.splitlines()) == 9


def test_report_missing(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_smoke_wmape(cli_run, small_cfg):
    # pinned from the first baseline run of this smoke config (27.9%)
    ds = read_container(cli_run["out"] / "dataset.bin")
    model, _ = load_checkpoint(cli_run["out"] / checkpoint_name(0))
    _, test_set = horizon_pairs(ds, 0, small_cfg.test_laps)
    assert wmape(test_set.targets, model.predict(test_set.features)) < 30.0


def test_checkpoint_meta(cli_run, small_cfg):
    _, meta = load_checkpoint(cli_run["out"] / "model_h40ms.bin")
    assert meta["horizon_ms"] == 40
    assert meta["config_hash"] == small_cfg.data_hash().hex()
    assert meta["steps"] > 0


def test_training_log_csv(cli_run, small_cfg):
    with open(cli_run["out"] / "training_h0ms.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "train_loss", "holdout_loss", "wall_ms"]
    assert len(rows) == small_cfg.model.epochs


def test_train_hash_mismatch(cli_run, tmp_path, capsys):
    other = load_config(cli_run["config"])
    other.apply_seed(99)
    save_config(other, tmp_path / "other.json")
    code = main(["train", "--config", str(tmp_path / "other.json"), "--out", str(tmp_path),
                 "--dataset", str(cli_run["out"] / "dataset.bin")])
    assert code == 2
    assert "config hash" in capsys.readouterr().err


def test_evaluate_refuses_foreign_checkpoint(cli_run, tmp_path, capsys):
    model, meta = load_checkpoint(cli_run["out"] / checkpoint_name(0))
    save_checkpoint(model, tmp_path / checkpoint_name(0), {**meta, "config_hash": "00" * 32})
    code = main(["evaluate", *_args(cli_run, "--checkpoints", str(tmp_path), "--horizon", "0")])
    assert code == 2
    assert "cross-scene" in capsys.readouterr().err


def test_evaluate_refuses_missing_checkpoint(cli_run, tmp_path, capsys):
    shutil.copy(cli_run["out"] / checkpoint_name(0), tmp_path)
    code = main(["evaluate", "--config", str(cli_run["config"]), "--out", str(tmp_path / "rep"),
                 "--dataset", str(cli_run["out"] / "dataset.bin"), "--checkpoints", str(tmp_path)])
    assert code == 2
    assert "missing checkpoints" in capsys.readouterr().err
    assert not (tmp_path / "rep" / "report.csv").exists()


def test_train_empty_horizon_list_is_noop(cli_run, tmp_path, caplog):
    from beamcast.experiment import cmd_train
    cfg = load_config(cli_run["config"])
    assert cmd_train(cfg, cli_run["out"] / "dataset.bin", [], tmp_path) == []
    assert "no horizons" in caplog.text
    assert not any(tmp_path.iterdir())


def test_train_horizon_beyond_span(cli_run, tmp_path, capsys):
    code = main(["train", "--config", str(cli_run["config"]), "--out", str(tmp_path),
                 "--dataset", str(cli_run["out"] / "dataset.bin"), "--horizon", "5000"])
    assert code == 2
    assert "exceeds" in capsys.readouterr().err


def test_replay_matches_generation(cli_run, capsys):
    assert main(["replay", *_args(cli_run), str(cli_run["out"] / "raw.q15")]) == 0
    direct = read_container(cli_run["out"] / "dataset.bin")
    replayed = read_container(cli_run["out"] / "dataset_replay.bin")
    np.testing.assert_array_equal(replayed.verdicts, direct.verdicts)
    np.testing.assert_array_equal(replayed.laps, direct.laps)
    assert replayed.meta["source"] == "q15-replay"


def test_replay_truncated(cli_run, tmp_path, capsys):
    data = (cli_run["out"] / "raw.q15").read_bytes()
    (tmp_path / "cut.q15").write_bytes(data[:-1000])
    assert main(["replay", *_args(cli_run), str(tmp_path / "cut.q15")]) == 2
    err = capsys.readouterr().err
    assert "header declares 200" in err and "199.9" in err


def test_replay_zero_length(cli_run, tmp_path, capsys):
    (tmp_path / "empty.q15").write_bytes(b"")
    assert main(["replay", *_args(cli_run), str(tmp_path / "empty.q15")]) == 2
    assert "empty" in capsys.readouterr().err


def test_replay_prb_mismatch(cli_run, tmp_path, capsys):
    from beamcast.srs import write_q15_file
    write_q15_file(tmp_path / "small.q15", [(0.0, np.ones((4, 64, 10), complex), np.ones((4, 64, 10), bool))],
                   (4, 64, 10), 1, 0.5)
    assert main(["replay", *_args(cli_run), str(tmp_path / "small.q15")]) == 2
    assert "10 PRBs" in capsys.readouterr().err


def test_show_config_round_trip(tmp_path):
    assert main(["show-config", "--config", "nlos", "--seed", "7", "--out", str(tmp_path)]) == 0
    cfg = load_config(tmp_path / "config.json")
    assert cfg.seed == 7 and cfg.scene.los_blocked


def test_bad_config_path(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "beamcast.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("generate", "train", "evaluate", "replay", "report"):
        assert cmd in res.stdout


def _sampled_energies(preset: str, step: int = 45) -> np.ndarray:
    """Beam energies of every ``step``-th snapshot of a preset run."""
    cfg = load_config(preset)
    gen = SnapshotGenerator(cfg.scene, cfg.trajectory, cfg.pipeline.missing_block_fraction)
    picks = range(0, len(gen), step)
    records = []
    for k in picks:
        s = gen.snapshot(k)
        records.append((s.timestamp, s.lap, s.ue_position, s.ctf, s.validity_mask))
    ds = build_dataset(records, len(records), num_prb=cfg.scene.num_prb, noise_variance=cfg.scene.noise_variance,
                       mmse_sigma2=cfg.pipeline.mmse_sigma2)
    return ds.targets[ds.valid]


def _effective_beams(eta: np.ndarray) -> np.ndarray:
    p = eta / eta.sum(axis=1, keepdims=True)
    ent = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)
    return np.exp(ent)


def test_nlos_energy_spreads_over_more_beams():
    los = np.median(_effective_beams(_sampled_energies("los")))
    nlos = np.median(_effective_beams(_sampled_energies("nlos")))
    assert nlos > los
