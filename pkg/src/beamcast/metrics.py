"""Beam-subset selection, captured-energy ratios, MAPE/WMAPE and horizon reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .scene import SPEED_OF_LIGHT

REPORT_COLUMNS = ["horizon_ms", "n", "pred_ratio", "oracle_ratio", "persistence_ratio", "random_ratio",
                  "mape_pct", "wmape_pct", "excluded_count", "snapshots", "wavelengths"]


@dataclass(frozen=True)
class SubsetSelection:
    beam_indices: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.beam_indices)


def _ranking(eta: np.ndarray) -> np.ndarray:
    # stable sort of the negated energies keeps lower indices first among ties
    return np.argsort(-eta, axis=-1, kind="stable")


def top_n_beams(eta, n: int) -> SubsetSelection:
    """The ``n`` largest entries, strongest first, ties to the lower index."""
    eta = np.asarray(eta, dtype=float)
    if eta.ndim != 1:
        raise ValueError("eta must be a vector")
    if not 1 <= n <= len(eta):
        raise ValueError(f"subset size {n} outside [1, {len(eta)}]")
    if not np.all(np.isfinite(eta)):
        raise ValueError("eta contains non-finite values")
    return SubsetSelection(tuple(int(i) for i in _ranking(eta)[:n]))


def top_n_batch(eta: np.ndarray, n: int) -> np.ndarray:
    """Row-wise top-n indices for ``[N, beams]``."""
    eta = np.asarray(eta, dtype=float)
    if not 1 <= n <= eta.shape[-1]:
        raise ValueError(f"subset size {n} outside [1, {eta.shape[-1]}]")
    return _ranking(eta)[..., :n]


def cumulative_power(eta_sorted_desc, n: int) -> float:
    p = np.asarray(eta_sorted_desc, dtype=float)
    if not 0 <= n <= len(p):
        raise ValueError(f"n={n} outside [0, {len(p)}]")
    if np.any(np.diff(p) > 0):
        raise ValueError("cumulative_power expects powers sorted in descending order")
    # sequential accumulation keeps P(n) nondecreasing in n bit for bit
    return float(np.cumsum(p[:n])[-1]) if n else 0.0


def captured_energy_ratio(pred_eta, true_eta, n: int) -> float:
    true_eta = np.asarray(true_eta, dtype=float)
    total = float(np.sum(true_eta))
    if total <= 0:
        raise ValueError("true beam energy sums to zero; ratio undefined")
    idx = list(top_n_beams(pred_eta, n).beam_indices)
    return float(np.sum(true_eta[idx])) / total


def oracle_energy_ratio(true_eta, n: int) -> float:
    return captured_energy_ratio(true_eta, true_eta, n)


def _batch_ratio(rank_source: np.ndarray, truth: np.ndarray, n: int) -> np.ndarray:
    idx = top_n_batch(rank_source, n)
    # prefix sums over the ranking, so larger subsets never capture less
    return np.cumsum(np.take_along_axis(truth, idx, axis=1), axis=1)[:, -1] / truth.sum(axis=1)


@dataclass
class MapeResult:
    percent: float
    excluded: int


def mape(y, yhat, floor: float = 0.0) -> MapeResult:
    """Mean absolute percentage error over entries with ``|y| >= floor``."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    keep = np.abs(y) >= floor
    keep &= np.abs(y) > 0
    if not keep.any():
        raise ValueError("every entry fell below the MAPE floor")
    err = np.abs(y[keep] - yhat[keep]) / np.abs(y[keep])
    return MapeResult(100.0 * float(np.mean(err)), int(y.size - keep.sum()))


def wmape(y, yhat) -> float:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    denom = float(np.sum(np.abs(y)))
    if denom == 0:
        raise ValueError("WMAPE undefined: all true values are zero")
    return 100.0 * float(np.sum(np.abs(y - yhat))) / denom


def wavelength_distance(speed: float, horizon: float, carrier_frequency: float) -> float:
    return speed * horizon * carrier_frequency / SPEED_OF_LIGHT


@dataclass
class SubsetMetrics:
    n: int
    pred_ratio: float
    oracle_ratio: float
    persistence_ratio: float
    random_ratio: float
    mape_pct: float
    wmape_pct: float
    excluded_count: int


@dataclass
class HorizonReport:
    horizon: float  # seconds
    num_snapshots: int
    distance_in_wavelengths: float
    per_n: list[SubsetMetrics] = field(default_factory=list)
    # per-snapshot ratios, kept for property checks
    pred_ratios: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    oracle_ratios: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def rows(self) -> list[dict]:
        return [{
            "horizon_ms": round(self.horizon * 1000.0, 6),
            "n": m.n,
            "pred_ratio": m.pred_ratio,
            "oracle_ratio": m.oracle_ratio,
            "persistence_ratio": m.persistence_ratio,
            "random_ratio": m.random_ratio,
            "mape_pct": m.mape_pct,
            "wmape_pct": m.wmape_pct,
            "excluded_count": m.excluded_count,
            "snapshots": self.num_snapshots,
            "wavelengths": self.distance_in_wavelengths,
        } for m in self.per_n]

    def metrics(self, n: int) -> SubsetMetrics:
        for m in self.per_n:
            if m.n == n:
                return m
        raise KeyError(n)


def evaluate_predictions(pred: np.ndarray, truth: np.ndarray, current: np.ndarray, horizon: float,
                         subset_sizes: Sequence[int] = (4, 8, 16, 32), *, speed: float = 4.2,
                         carrier_frequency: float = 3.85e9, seed: int = 0,
                         mape_floor: float = 1e-9) -> HorizonReport:
    """Aggregate subset metrics for predicted vs true per-beam energies ``[N, beams]``.

    ``current`` holds the true energies at the input time (persistence).
    MAPE and WMAPE compare true and predicted energies of the beams each
    model-selected subset contains; the MAPE floor is relative to the mean
    true beam energy.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    current = np.asarray(current, dtype=float)
    if len(truth) == 0:
        raise ValueError("empty test set")
    if pred.shape != truth.shape or current.shape != truth.shape:
        raise ValueError("prediction, truth and current energies must share a shape")
    if np.any(truth.sum(axis=1) <= 0):
        raise ValueError("a test snapshot has zero true beam energy")
    beams = truth.shape[1]
    floor = mape_floor * float(np.mean(truth))
    report = HorizonReport(horizon, len(truth), wavelength_distance(speed, horizon, carrier_frequency))
    for n in subset_sizes:
        rng = np.random.default_rng([seed, n])
        rand_idx = np.stack([rng.choice(beams, n, replace=False) for _ in range(len(truth))])
        rand = np.take_along_axis(truth, rand_idx, axis=1).sum(axis=1) / truth.sum(axis=1)
        pr = _batch_ratio(pred, truth, n)
        orc = _batch_ratio(truth, truth, n)
        idx = top_n_batch(pred, n)
        y = np.take_along_axis(truth, idx, axis=1)
        yhat = np.take_along_axis(pred, idx, axis=1)
        m = mape(y, yhat, floor)
        report.per_n.append(SubsetMetrics(
            n=n, pred_ratio=float(np.mean(pr)), oracle_ratio=float(np.mean(orc)),
            persistence_ratio=float(np.mean(_batch_ratio(current, truth, n))),
            random_ratio=float(np.mean(rand)), mape_pct=m.percent, wmape_pct=wmape(y, yhat),
            excluded_count=m.excluded))
        report.pred_ratios[n] = pr
        report.oracle_ratios[n] = orc
    return report


def evaluate_horizon(predict: Callable[[np.ndarray], np.ndarray], test_pairs, subset_sizes=(4, 8, 16, 32),
                     **kwargs) -> HorizonReport:
    """Run ``predict`` over every test pair and aggregate the subset metrics."""
    if len(test_pairs) == 0:
        raise ValueError("empty test set")
    pred = predict(test_pairs.features)
    return evaluate_predictions(pred, test_pairs.targets, test_pairs.current, test_pairs.horizon,
                                subset_sizes, **kwargs)
