import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamcast.groundtruth import (
    DlBeamTf, beam_energy_target, compute_dl_beam_tf, mmse_dl, reciprocity_conjugate,
)
from beamcast.srs import PrsgCtf, Verdict


def _crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_identity_with_regulariser():
    np.testing.assert_allclose(mmse_dl(np.eye(4), 0.5), np.eye(4) / 1.5, atol=1e-15)


def test_scalar_pseudoinverse():
    np.testing.assert_allclose(mmse_dl(np.array([[1.0]]), 0.0), [[1.0]])


def test_tall_pseudoinverse(rng):
    h = _crandn(rng, 6, 3)
    np.testing.assert_allclose(mmse_dl(h, 0.0) @ h, np.eye(3), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 10.0))
def test_normal_equation_residual(seed, sigma2):
    rng = np.random.default_rng(seed)
    h = _crandn(rng, 8, 4)
    w = mmse_dl(h, sigma2)
    lhs = (h.conj().T @ h + sigma2 * np.eye(4)) @ w
    rhs = h.conj().T
    assert np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs) < 1e-10


def test_rank_deficient_without_regulariser(rng):
    h = np.outer(_crandn(rng, 6), _crandn(rng, 3))
    with pytest.raises(np.linalg.LinAlgError, match="rank 1"):
        mmse_dl(h, 0.0)
    # regularisation makes it solvable
    assert np.all(np.isfinite(mmse_dl(h, 1e-3)))


def test_unitary_invariance(rng):
    h = _crandn(rng, 6, 3)
    q, _ = np.linalg.qr(_crandn(rng, 6, 6))
    np.testing.assert_allclose(mmse_dl(q @ h, 0.0) @ (q @ h), np.eye(3), atol=1e-9)


def test_scaling(rng):
    h = _crandn(rng, 6, 3)
    np.testing.assert_allclose(mmse_dl(2.5 * h, 0.0), mmse_dl(h, 0.0) / 2.5, rtol=1e-10)


def test_reciprocity():
    assert reciprocity_conjugate(np.array(1 + 2j)) == 1 - 2j
    real = np.array([1.0, -2.0])
    np.testing.assert_array_equal(reciprocity_conjugate(real), real)


def test_reciprocity_involution(rng):
    x = _crandn(rng, 3, 4)
    assert np.array_equal(reciprocity_conjugate(reciprocity_conjugate(x)), x)


def _snapshot(values):
    return PrsgCtf(values, np.ones(values.shape, dtype=bool))


def test_unit_vector_concentrates_on_its_beam():
    v = np.zeros((1, 64, 46), dtype=complex)
    v[0, 17, :] = 1.0
    tf = compute_dl_beam_tf(_snapshot(v), 0.0)
    eta = beam_energy_target(tf).eta
    assert eta[17] == pytest.approx(46.0)
    assert np.sum(np.delete(eta, 17)) == 0


def test_matched_filter_limit(rng):
    v = _crandn(rng, 4, 64, 46)
    sigma2 = 1e6
    tf = compute_dl_beam_tf(_snapshot(v), sigma2)
    # weights approach H^H / sigma2, so each beam's RSS over layers does too
    expected = np.sqrt(np.sum(np.abs(v) ** 2, axis=0)) / sigma2
    # relative deviation is of order ||H^H H|| / sigma2
    np.testing.assert_allclose(np.abs(tf.values), expected, rtol=5e-4)


def test_per_prsg_matches_direct_solve(rng):
    v = _crandn(rng, 4, 64, 46)
    tf = compute_dl_beam_tf(_snapshot(v), 0.3)
    for f in (0, 13, 45):
        h = v[:, :, f].T  # beams x layers
        w = mmse_dl(h, 0.3)  # layers x beams
        np.testing.assert_allclose(np.abs(tf.values[:, f]), np.sqrt(np.sum(np.abs(w) ** 2, axis=0)),
                                   rtol=1e-10)


def test_invalid_snapshot_refused(rng):
    with pytest.raises(ValueError, match="failed validation"):
        compute_dl_beam_tf(_snapshot(_crandn(rng, 4, 64, 46)), 1.0, Verdict.STALLED)


def test_energy_examples():
    t = np.zeros((64, 46), dtype=complex)
    t[5, 7] = 3.0
    eta = beam_energy_target(DlBeamTf(t)).eta
    assert eta[5] == 9.0
    assert eta[0] == 0.0


def test_energy_total_is_frobenius(rng):
    t = _crandn(rng, 64, 46)
    eta = beam_energy_target(DlBeamTf(t)).eta
    assert np.sum(eta) == pytest.approx(np.linalg.norm(t) ** 2, rel=1e-12)


def test_energy_phase_invariant(rng):
    t = _crandn(rng, 64, 46)
    rot = np.exp(1j * rng.uniform(0, 2 * np.pi, t.shape))
    np.testing.assert_allclose(beam_energy_target(DlBeamTf(t * rot)).eta, beam_energy_target(DlBeamTf(t)).eta,
                               rtol=1e-12)
