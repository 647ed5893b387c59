"""Experiment lifecycle: dataset generation, Q15 export/replay, per-horizon
training, evaluation and report emission."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, canonical_json
from .dataset import Dataset, build_dataset, read_container, write_container
from .metrics import REPORT_COLUMNS, HorizonReport, evaluate_horizon
from .model.checkpoint import load_checkpoint, save_checkpoint
from .model.encoder import EncoderModel
from .model.training import (PairSet, TrainingLog, build_pairs, chronological_split, train,
                             validation_split)
from .scene import SnapshotGenerator, generate_trajectory_dataset, trajectory_positions
from .srs import iter_q15_file, write_q15_file

log = logging.getLogger(__name__)


def _build(cfg: ExperimentConfig, records, num_records: int, source: str) -> Dataset:
    pl = cfg.pipeline
    meta = {
        "source": source,
        "snapshot_interval": cfg.trajectory.snapshot_interval,
        "snapshots_per_lap": cfg.trajectory.snapshots_per_lap(),
        "speed": cfg.trajectory.speed,
        "carrier_frequency": cfg.scene.carrier_frequency,
        "seed": cfg.seed,
    }
    return build_dataset(records, num_records, num_prb=cfg.scene.num_prb,
                         noise_variance=cfg.scene.noise_variance,
                         validity_threshold=pl.validity_threshold, stall_tolerance=pl.stall_tolerance,
                         mmse_sigma2=pl.mmse_sigma2, config_hash=cfg.data_hash(), meta=meta)


def _snapshots(cfg: ExperimentConfig, threads: int = 1):
    return generate_trajectory_dataset(cfg.scene, cfg.trajectory, cfg.pipeline.missing_block_fraction,
                                       cfg.pipeline.stall_probability, threads)


def generate(cfg: ExperimentConfig, threads: int = 1) -> Dataset:
    """Simulate the whole run and push it through the processing pipeline."""
    gen = SnapshotGenerator(cfg.scene, cfg.trajectory, cfg.pipeline.missing_block_fraction,
                            cfg.pipeline.stall_probability)
    records = ((s.timestamp, s.lap, s.ue_position, s.ctf, s.validity_mask) for s in _snapshots(cfg, threads))
    return _build(cfg, records, len(gen), "simulation")


def export_q15(cfg: ExperimentConfig, path, threads: int = 1) -> float:
    """Write the simulated raw per-PRB samples as an SRSQ15 file.

    A first pass finds the peak magnitude so the full run maps into the Q15
    range; returns the scale applied.
    """
    peak, count, shape = 0.0, 0, None
    for s in _snapshots(cfg, threads):
        peak = max(peak, float(np.max(np.abs(s.ctf.real))), float(np.max(np.abs(s.ctf.imag))))
        count += 1
        shape = s.ctf.shape
    if peak == 0:
        raise ValueError("simulated run is identically zero; nothing to export")
    scale = (1.0 - 2.0 ** -15) / peak
    records = ((s.timestamp, s.ctf, s.validity_mask) for s in _snapshots(cfg, threads))
    write_q15_file(path, records, shape, count, scale)
    return scale


def replay(path, cfg: ExperimentConfig) -> Dataset:
    """Ingest an SRSQ15 file through the same pipeline as simulated data.

    Lap indices follow from the trajectory's snapshots per lap; UE positions
    are taken from the trajectory when the record count matches it and are
    NaN otherwise.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"raw Q15 file {path} not found")
    if path.stat().st_size == 0:
        raise ValueError(f"raw Q15 file {path} is empty")
    it = iter_q15_file(path)
    first = next(it, None)
    if first is None:
        raise ValueError(f"raw Q15 file {path} holds no records")
    hdr = first[0]
    if hdr.prbs != cfg.scene.num_prb:
        raise ValueError(f"{path}: header declares {hdr.prbs} PRBs, config expects {cfg.scene.num_prb}")
    positions, laps = trajectory_positions(cfg.trajectory, cfg.scene.rng_seed)
    per_lap = cfg.trajectory.snapshots_per_lap()
    matched = len(positions) == hdr.records

    def records():
        for k, (_, ts, values, mask) in enumerate(itertools.chain([first], it)):
            if matched:
                yield ts, int(laps[k]), positions[k], values, mask
            else:
                yield ts, k // per_lap, np.full(3, np.nan), values, mask

    return _build(cfg, records(), hdr.records, "q15-replay")


def horizon_pairs(ds: Dataset, horizon_ms: float, test_laps: int = 1) -> tuple[PairSet, PairSet]:
    pairs = build_pairs(ds.features, ds.targets, ds.valid, ds.laps, horizon_ms / 1000.0, ds.snapshot_interval)
    lap_ids = np.unique(ds.laps)
    if len(lap_ids) <= test_laps:
        raise ValueError(f"dataset spans {len(lap_ids)} laps; need more than the {test_laps} test lap(s)")
    first_test = int(np.argmax(ds.laps >= lap_ids[-test_laps]))
    return chronological_split(pairs, first_test)


def train_horizon(ds: Dataset, cfg: ExperimentConfig, horizon_ms: float,
                  progress: bool = False) -> tuple[EncoderModel, TrainingLog]:
    """Train one model for a horizon.

    The chronologically last slice of the training laps is held out for
    model selection; the test laps are never seen during training.
    """
    train_set, _ = horizon_pairs(ds, horizon_ms, cfg.test_laps)
    fit_set, val_set = validation_split(train_set, cfg.validation_fraction)
    if len(fit_set) == 0:
        raise ValueError(f"no training pairs at horizon {horizon_ms} ms")
    return train(fit_set, cfg.model, holdout=val_set if len(val_set) else None, progress=progress)


def checkpoint_name(horizon_ms: float) -> str:
    return f"model_h{int(round(horizon_ms))}ms.bin"


def _hex(h: bytes) -> str:
    return h.hex()


def cmd_generate(cfg: ExperimentConfig, out_dir, threads: int = 1, export_q15_path=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate(cfg, threads)
    path = out / "dataset.bin"
    write_container(ds, path)
    counts = ds.verdict_counts()
    print(f"wrote {path}: {len(ds)} snapshots, kept {counts['valid']}, "
          f"dropped {counts['insufficient_csi']} insufficient_csi, {counts['stalled']} stalled")
    if export_q15_path is not None:
        scale = export_q15(cfg, export_q15_path, threads)
        print(f"wrote {export_q15_path}: raw Q15 samples, scale {scale:.6g}")
    return path


def _check_hash(ds: Dataset, cfg: ExperimentConfig, what: str) -> None:
    if ds.config_hash != cfg.data_hash():
        raise ValueError(f"{what}: dataset config hash {_hex(ds.config_hash)[:12]} does not match "
                         f"the config ({_hex(cfg.data_hash())[:12]}); regenerate the dataset or pass its config")


def cmd_train(cfg: ExperimentConfig, dataset_path, horizons_ms, out_dir, progress: bool = False) -> list[Path]:
    if not horizons_ms:
        log.warning("no horizons requested; nothing to train")
        return []
    ds = read_container(dataset_path)
    _check_hash(ds, cfg, str(dataset_path))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for h in horizons_ms:
        model, trace = train_horizon(ds, cfg, h, progress)
        path = out / checkpoint_name(h)
        save_checkpoint(model, path, {"horizon_ms": h, "config_hash": _hex(ds.config_hash),
                                      "best_epoch": trace.best_epoch, "steps": trace.steps})
        trace.write_csv(out / f"training_h{int(round(h))}ms.csv")
        print(f"horizon {h} ms: best epoch {trace.best_epoch}, holdout loss "
              f"{trace.holdout_loss[trace.best_epoch] if trace.best_epoch >= 0 else float('nan'):.5g} -> {path}")
        written.append(path)
    return written


def evaluate(models: dict[float, EncoderModel], ds: Dataset, cfg: ExperimentConfig) -> list[HorizonReport]:
    """Evaluate models keyed by horizon in milliseconds on the test laps."""
    reports = []
    for h in sorted(models):
        _, test_set = horizon_pairs(ds, h, cfg.test_laps)
        reports.append(evaluate_horizon(models[h].predict, test_set, cfg.subset_sizes,
                                        speed=cfg.trajectory.speed,
                                        carrier_frequency=cfg.scene.carrier_frequency, seed=cfg.seed))
    return reports


def write_reports(reports: list[HorizonReport], out_dir, config_hash: bytes) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [row for rep in reports for row in rep.rows()]
    csv_path = out / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    json_path = out / "report.json"
    json_path.write_text(json.dumps({"config_hash": _hex(config_hash), "rows": rows}, indent=1, sort_keys=True) + "\n")
    plot_dir = out / "plots"
    plot_dir.mkdir(exist_ok=True)
    for rep in reports:
        with open(plot_dir / f"subset_ratio_h{int(round(rep.horizon * 1000))}ms.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "pred_ratio", "oracle_ratio", "persistence_ratio", "random_ratio"])
            for row in rep.rows():
                w.writerow([row["n"], *(_fmt(row[c]) for c in
                                        ("pred_ratio", "oracle_ratio", "persistence_ratio", "random_ratio"))])
    return csv_path, json_path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def cmd_evaluate(cfg: ExperimentConfig, dataset_path, checkpoint_dir, horizons_ms, out_dir) -> tuple[Path, Path]:
    ds = read_container(dataset_path)
    _check_hash(ds, cfg, str(dataset_path))
    if not horizons_ms:
        raise ValueError("no horizons to evaluate")
    ckpt_dir = Path(checkpoint_dir)
    missing = [h for h in horizons_ms if not (ckpt_dir / checkpoint_name(h)).exists()]
    if missing:
        raise FileNotFoundError(f"missing checkpoints for horizons {missing} ms in {ckpt_dir}; "
                                "refusing to write a partial report")
    models = {}
    for h in horizons_ms:
        model, meta = load_checkpoint(ckpt_dir / checkpoint_name(h))
        if meta.get("config_hash") != _hex(ds.config_hash):
            raise ValueError(f"checkpoint for {h} ms was trained on dataset {meta.get('config_hash', '?')[:12]}, "
                             f"not {_hex(ds.config_hash)[:12]}; refusing cross-scene evaluation")
        models[h] = model
    reports = evaluate(models, ds, cfg)
    paths = write_reports(reports, out_dir, ds.config_hash)
    print(render_summary(json.loads(paths[1].read_text())))
    return paths


def cmd_replay(cfg: ExperimentConfig, raw_path, out_dir) -> Path:
    ds = replay(raw_path, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset_replay.bin"
    write_container(ds, path)
    counts = ds.verdict_counts()
    print(f"wrote {path}: {len(ds)} snapshots, kept {counts['valid']}, "
          f"dropped {counts['insufficient_csi']} insufficient_csi, {counts['stalled']} stalled")
    return path


def render_summary(report: dict) -> str:
    lines = [f"{'horizon_ms':>10} {'n':>3} {'pred':>7} {'oracle':>7} {'persist':>7} {'random':>7} "
             f"{'mape%':>8} {'wmape%':>8} {'lambda':>8}"]
    for r in report["rows"]:
        lines.append(f"{r['horizon_ms']:>10g} {r['n']:>3} {r['pred_ratio']:7.4f} {r['oracle_ratio']:7.4f} "
                     f"{r['persistence_ratio']:7.4f} {r['random_ratio']:7.4f} {r['mape_pct']:8.2f} "
                     f"{r['wmape_pct']:8.2f} {r['wavelengths']:8.2f}")
    return "\n".join(lines)


def cmd_report(report_json) -> str:
    report = json.loads(Path(report_json).read_text())
    text = render_summary(report)
    print(text)
    return text


def config_snapshot(cfg: ExperimentConfig) -> str:
    return canonical_json(cfg.to_dict())
