"""Adam optimiser, horizon-shifted training pairs and the mini-batch training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderModel, ModelConfig, encoder_backward, encoder_forward
from .nn import mse_loss

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class PairSet:
    """Training pairs for one horizon, stored as stacked arrays.

    ``current`` is the true target at the input time (for the persistence
    baseline); ``lap`` is the lap of the input snapshot.
    """

    features: np.ndarray  # [N, 64, 46]
    targets: np.ndarray  # [N, 64]
    current: np.ndarray  # [N, 64]
    lap: np.ndarray  # [N]
    index: np.ndarray  # [N] input snapshot index
    horizon: float
    shift: int = 0  # target index minus input index

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, sel) -> "PairSet":
        return PairSet(self.features[sel], self.targets[sel], self.current[sel],
                       self.lap[sel], self.index[sel], self.horizon, self.shift)


def build_pairs(features, targets, valid, laps, horizon: float, snapshot_interval: float) -> PairSet:
    """Pair input features at t with targets at t + horizon; both ends must be valid."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    shift = int(round(horizon / snapshot_interval))
    if abs(shift * snapshot_interval - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError(f"horizon {horizon}s is not a multiple of the {snapshot_interval}s interval")
    n = len(valid)
    if shift >= n:
        raise ValueError(f"horizon {horizon}s exceeds the dataset span of {n * snapshot_interval}s")
    valid = np.asarray(valid, dtype=bool)
    idx = np.nonzero(valid[: n - shift] & valid[shift:])[0]
    return PairSet(np.asarray(features)[idx], np.asarray(targets)[idx + shift],
                   np.asarray(targets)[idx], np.asarray(laps)[idx], idx, horizon, shift)


def chronological_split(pairs: PairSet, first_test_index: int) -> tuple[PairSet, PairSet]:
    """Split on target time: pairs whose target falls at or after ``first_test_index`` test,
    pairs whose input and target both precede it train."""
    late = pairs.index + pairs.shift >= first_test_index
    return pairs.subset(~late), pairs.subset(late)


def validation_split(pairs: PairSet, fraction: float) -> tuple[PairSet, PairSet]:
    """Carve the chronologically last ``fraction`` of pairs off as a validation set."""
    if fraction <= 0 or len(pairs) < 2:
        return pairs, pairs.subset(np.zeros(len(pairs), dtype=bool))
    cut = int(pairs.index[min(len(pairs) - 1, int(round(len(pairs) * (1.0 - fraction))))]) + pairs.shift
    return chronological_split(pairs, cut)


@dataclass
class TrainingLog:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    holdout_loss: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    steps: int = 0
    best_epoch: int = -1

    def append(self, epoch, train, holdout, wall):
        self.epochs.append(epoch)
        self.train_loss.append(train)
        self.holdout_loss.append(holdout)
        self.wall_ms.append(wall)

    def rows(self) -> list[tuple]:
        return list(zip(self.epochs, self.train_loss, self.holdout_loss, self.wall_ms))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "holdout_loss", "wall_ms"])
            for e, tr, ho, ms in self.rows():
                w.writerow([e, repr(tr), "" if ho is None else repr(ho), f"{ms:.1f}"])


def _batch_loss(model, x, y):
    pred, cache = encoder_forward(model, x)
    loss, dpred = mse_loss(pred, y)
    return loss, encoder_backward(model, cache, dpred)


def evaluate_loss(model: EncoderModel, features, targets, batch: int = 256) -> float:
    """Mean squared error in the model's scaled target units."""
    total, n = 0.0, len(targets)
    for i in range(0, n, batch):
        pred, _ = encoder_forward(model, features[i:i + batch] * model.input_scale, keep_cache=False)
        diff = targets[i:i + batch] / model.target_scale - pred
        total += float(np.sum(diff * diff))
    return total / n


def fit_scales(features: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    """Global input scale (unit RMS features) and target scale (unit mean-square targets)."""
    f_rms = float(np.sqrt(np.mean(np.square(features))))
    t_rms = float(np.sqrt(np.mean(np.square(targets))))
    return (1.0 / f_rms if f_rms > 0 else 1.0), (t_rms if t_rms > 0 else 1.0)


def train(train_set: PairSet, cfg: ModelConfig, holdout: PairSet | None = None,
          model: EncoderModel | None = None, progress: bool = False) -> tuple[EncoderModel, TrainingLog]:
    """Mini-batch Adam on the squared-error loss; returns the best-holdout parameters.

    Without a holdout set the final parameters are returned.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if model is None:
        in_scale, out_scale = fit_scales(train_set.features, train_set.targets)
        model = EncoderModel(cfg, input_scale=in_scale, target_scale=out_scale)
    x_all = train_set.features * model.input_scale
    y_all = train_set.targets / model.target_scale
    state = AdamState.zeros_like(model.params)
    rng = np.random.default_rng(cfg.seed)
    trace = TrainingLog()
    best, best_loss, since_best = None, np.inf, 0
    n = len(train_set)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = np.sort(order[start:start + cfg.batch_size])
            loss, grads = _batch_loss(model, x_all[sel], y_all[sel])
            adam_step(model.params, grads, state, cfg.learning_rate)
            trace.steps += 1
            total += loss * len(sel)
        train_loss = total / n
        hold = None
        if holdout is not None and len(holdout) and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            hold = evaluate_loss(model, holdout.features, holdout.targets)
            if hold < best_loss:
                best_loss, best, since_best = hold, model.copy(), 0
                trace.best_epoch = epoch
            else:
                since_best += 1
        trace.append(epoch, train_loss, hold, 1000 * (time.perf_counter() - t0))
        if progress:
            log.info("epoch %d train %.5g holdout %s", epoch, train_loss, hold)
        if cfg.patience is not None and since_best >= cfg.patience:
            break
    return (best if best is not None else model), trace
