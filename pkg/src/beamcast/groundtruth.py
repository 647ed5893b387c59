"""Downlink beam ground truth from uplink estimates (TDD reciprocity + MMSE)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .srs import PrsgCtf, Verdict


@dataclass
class DlBeamTf:
    values: np.ndarray  # [64, 46] complex
    timestamp: float = 0.0


@dataclass
class DlBeamTarget:
    eta: np.ndarray  # [64] per-beam energy
    timestamp: float = 0.0


def mmse_dl(h_ul: np.ndarray, sigma2: float) -> np.ndarray:
    """Regularised pseudo-inverse ``(H^H H + sigma2 I)^-1 H^H``, shape ``cols x rows``.

    Solved through a Cholesky factorisation of the Gram matrix, never an
    explicit inverse.
    """
    h = np.asarray(h_ul)
    if h.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {h.shape}")
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    hh = h.conj().T
    gram = hh @ h + sigma2 * np.eye(h.shape[1])
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=True)
        out = scipy.linalg.cho_solve(factor, hh)
    except np.linalg.LinAlgError:
        rank = np.linalg.matrix_rank(h)
        raise np.linalg.LinAlgError(
            f"H^H H + sigma2 I is singular: H is {h.shape[0]}x{h.shape[1]} with rank {rank} "
            f"and sigma2={sigma2}") from None
    if sigma2 == 0:
        # Cholesky can succeed on a numerically singular Gram matrix
        rank = np.linalg.matrix_rank(h)
        if rank < h.shape[1]:
            raise np.linalg.LinAlgError(
                f"H is {h.shape[0]}x{h.shape[1]} with rank {rank}; full column rank needed at sigma2=0")
    return out


def reciprocity_conjugate(h_ul: np.ndarray) -> np.ndarray:
    return np.conj(h_ul)


def compute_dl_beam_tf(snapshot: PrsgCtf, sigma2: float, verdict: Verdict = Verdict.VALID) -> DlBeamTf:
    """Per-PRSG MMSE over the (beam x layer) matrix; each beam's weight column is
    reduced across layers by root-sum-square."""
    if verdict != Verdict.VALID:
        raise ValueError(f"snapshot at t={snapshot.timestamp} failed validation ({verdict.name})")
    h = np.moveaxis(snapshot.values, 2, 0)  # [F, layers, beams]
    hf = np.swapaxes(h, 1, 2)  # [F, beams, layers]
    layers = hf.shape[2]
    gram = np.conj(np.swapaxes(hf, 1, 2)) @ hf + sigma2 * np.eye(layers)
    if sigma2 > 0:
        w = np.linalg.solve(gram, np.conj(np.swapaxes(hf, 1, 2)))  # [F, layers, beams]
    else:
        w = np.stack([mmse_dl(m, 0.0) for m in hf])
    tf = np.sqrt(np.sum(np.abs(w) ** 2, axis=1)).T  # [beams, F]
    return DlBeamTf(tf.astype(complex), snapshot.timestamp)


def beam_energy_target(tf: DlBeamTf) -> DlBeamTarget:
    return DlBeamTarget(np.sum(np.abs(tf.values) ** 2, axis=1), tf.timestamp)
