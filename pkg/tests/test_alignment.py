import numpy as np
import pytest

from alignment import (
    AlignmentReport,
    asymmetry,
    build_K,
    commutator_rates,
    commutators,
    eigendirection_residuals,
    fit_log_rate,
    min_symmetric_eig,
    parabola_fit,
    track_alignment,
)
from eigen import EigenState, integrate_eigen
from errors import AssumptionError, ContractError, ModeError
from flows import Hyper, MatrixParams, init_params, integrate_flow


def _symmetric_params(rng, m=3, d=3, scale=0.5):
    return init_params("random_symmetric", m, d, rng, scale=scale)


# =============================================================================
# Commutators
# =============================================================================


def test_aligned_params_commute(rng):
    snap = commutators(init_params("aligned", 3, 3, rng))
    assert snap.total == 0.0


def test_commutator_vector_is_column_stacked(rng):
    snap = commutators(_symmetric_params(rng))
    xi = snap.as_vector()
    assert xi.size == 27
    np.testing.assert_array_equal(xi[:9], snap.c1.T.ravel())


def test_simsiam_params_have_no_commutators(rng):
    with pytest.raises(ModeError):
        commutators(init_params("random", 2, 2, rng, simsiam=True))


def test_eigendirection_residuals_diagonal():
    params = MatrixParams(wf=np.diag([0.5, 0.2]), wh=np.diag([0.6, 0.1]), wg=np.eye(2))
    # ascending psi: 0.1 then 0.6
    np.testing.assert_allclose(eigendirection_residuals(params), [0.01 - 0.04, 0.36 - 0.25], atol=1e-14)


# =============================================================================
# K operator
# =============================================================================


def test_K_vanishes_at_zero_without_decay():
    zero = init_params("zero", 2, 2, None)
    np.testing.assert_array_equal(build_K(zero, Hyper(1.5, 0.0)), np.zeros((12, 12)))


def test_K_at_zero_with_decay_only_touches_the_third_block():
    zero = init_params("zero", 2, 2, None)
    k = build_K(zero, Hyper(1.5, 0.1))
    expected = np.zeros((12, 12))
    expected[8:, 8:] = -0.1 * np.eye(4)
    np.testing.assert_allclose(k, expected, atol=1e-15)


def test_K_identity_blocks():
    m = 2
    params = MatrixParams(wf=np.eye(m), wh=np.eye(m), wg=np.zeros((m, m)))
    k = build_K(params, Hyper(0.0, 0.0))
    size = m * m
    np.testing.assert_allclose(k[:size, size:2 * size], np.eye(size), atol=1e-14)
    np.testing.assert_allclose(k[:size, :size], np.zeros((size, size)), atol=1e-14)


def test_K_requires_symmetric_weights(rng):
    with pytest.raises(AssumptionError):
        build_K(init_params("random", 3, 3, rng), Hyper(1.5, 0.05))


@pytest.mark.parametrize("symmetrize", [False, True])
def test_K_matches_product_rule(rng, symmetrize):
    hyper = Hyper(1.5, 0.05)
    for _ in range(3):
        params = _symmetric_params(rng)
        xi = commutators(params).as_vector()
        predicted = -(3 * hyper.rho * np.eye(xi.size) + build_K(params, hyper, symmetrized=symmetrize)) @ xi
        actual = commutator_rates(params, hyper, symmetrize=symmetrize).as_vector()
        assert np.linalg.norm(predicted - actual) <= 1e-9 * max(np.linalg.norm(actual), 1.0)


@pytest.mark.parametrize("symmetrize", [False, True])
def test_K_matches_finite_difference(rng, symmetrize):
    hyper = Hyper(0.8, 0.02)
    params = _symmetric_params(rng, m=2, d=3)
    dt = 1e-5
    traj = integrate_flow(params, hyper, dt=dt, steps=1, symmetrize=symmetrize)
    numeric = (commutators(traj.final).as_vector() - commutators(params).as_vector()) / dt
    xi = commutators(params).as_vector()
    predicted = -(3 * hyper.rho * np.eye(xi.size) + build_K(params, hyper, symmetrized=symmetrize)) @ xi
    assert np.linalg.norm(predicted - numeric) <= 1e-4 * np.linalg.norm(predicted)


def test_min_symmetric_eig_of_scaled_identity():
    assert min_symmetric_eig(np.eye(4), 0.1) == pytest.approx(1.3)


# =============================================================================
# Tracking
# =============================================================================


def test_aligned_run_stays_aligned(rng):
    report = track_alignment(init_params("aligned", 3, 3, rng), Hyper(1.5, 0.05), dt=0.01, steps=300)
    assert np.max(report.trajectory_norms) <= 1e-10
    assert report.fitted_decay_rate is None


def test_norm_obeys_the_symmetric_part_bound(rng):
    hyper = Hyper(1.5, 0.05)
    report = track_alignment(_symmetric_params(rng, scale=0.4), hyper, dt=0.01, steps=400)
    total = report.total_norms
    for i in range(len(total) - 1):
        span = report.times[i + 1] - report.times[i]
        lam = min(report.min_symmetric_eig[i], report.min_symmetric_eig[i + 1])
        assert total[i + 1] <= total[i] * np.exp(-lam * span) * (1 + 1e-3)


def test_stronger_decay_aligns_faster(rng):
    init = _symmetric_params(rng, scale=1e-3)
    fast = track_alignment(init, Hyper(1.5, 0.1), dt=0.1, steps=500)
    slow = track_alignment(init, Hyper(1.5, 0.01), dt=0.1, steps=500)
    assert fast.fitted_decay_rate < slow.fitted_decay_rate < 0
    assert fast.fitted_decay_rate == pytest.approx(-0.2, rel=0.1)


def test_track_alignment_rejects_asymmetric_init(rng):
    params = init_params("random", 3, 3, rng)
    assert asymmetry(params) > 0
    with pytest.raises(AssumptionError):
        track_alignment(params, Hyper(1.5, 0.05), dt=0.01, steps=10)


def test_nonpositive_intervals():
    report = AlignmentReport(
        times=np.arange(6, dtype=float),
        trajectory_norms=np.ones((6, 3)),
        fitted_decay_rate=None,
        min_symmetric_eig=np.array([1.0, -0.5, -0.1, 0.2, 0.3, -1.0]),
        parabola_residuals=np.zeros((6, 2)),
    )
    assert report.nonpositive_intervals() == [(1.0, 3.0), (5.0, 5.0)]
    assert report.to_dict()["nonpositive_intervals"] == [[1.0, 3.0], [5.0, 5.0]]


def test_fit_log_rate_recovers_an_exponential():
    t = np.linspace(0.0, 10.0, 101)
    assert fit_log_rate(t, 3.0 * np.exp(-0.7 * t)) == pytest.approx(-0.7, rel=1e-10)
    assert fit_log_rate(t, np.zeros_like(t)) is None


# =============================================================================
# Parabola
# =============================================================================


def test_parabola_fit_on_the_parabola():
    traj = integrate_eigen(EigenState(0.25, 0.5, 0.2), Hyper(1.5, 0.05), dt=0.01, steps=2000, system="full")
    fit = parabola_fit(traj)
    assert fit.on_parabola
    assert fit.C == 0.0


def test_parabola_fit_off_the_parabola():
    traj = integrate_eigen(EigenState(0.2, 0.5, 0.1), Hyper(1.5, 0.05), dt=0.01, steps=2000, system="full")
    fit = parabola_fit(traj)
    assert fit.rate == pytest.approx(-0.1, rel=0.05)
    assert fit.C == pytest.approx(0.05, rel=0.05)


def test_parabola_rate_scales_with_decay():
    init = EigenState(0.2, 0.5, 0.1)
    slow = parabola_fit(integrate_eigen(init, Hyper(1.5, 0.05), dt=0.01, steps=2000, system="full"))
    fast = parabola_fit(integrate_eigen(init, Hyper(1.5, 0.1), dt=0.01, steps=2000, system="full"))
    assert fast.rate / slow.rate == pytest.approx(2.0, rel=0.05)


def test_parabola_fit_needs_full_states():
    traj = integrate_eigen((0.3, 0.1), Hyper(1.5, 0.05), dt=0.01, steps=10, system="reduced")
    with pytest.raises(ContractError):
        parabola_fit(traj)
