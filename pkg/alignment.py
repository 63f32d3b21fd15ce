"""
Eigenspace alignment along the matrix flow.

With C1 = [Phi, W_g], C2 = [Phi, W_h], C3 = [W_g, W_h] stacked as
Xi = (vec C1, vec C2, vec C3), the published flow with symmetric W_g, W_h gives
a linear ODE Xi_dot = -(3 rho I + K) Xi. ``build_K`` assembles K from a list of
terms c * A @ C_j @ B, each contributing c * kron(B^T, A) (column stacking).
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import DEFAULT_METHOD, FIT_TAIL_FRACTION, SYMMETRY_TOL
from errors import AssumptionError, ContractError, ModeError
from flows import Hyper, MatrixParams, Trajectory, commutator, flow_rhs, integrate_flow, phi_of

# (coefficient, left factor, commutator index, right factor)
Term = Tuple[float, np.ndarray, int, np.ndarray]


@dataclass
class CommutatorSnapshot:
    c1: np.ndarray
    c2: np.ndarray
    c3: np.ndarray

    @property
    def norms(self) -> Tuple[float, float, float]:
        return tuple(float(np.linalg.norm(c)) for c in (self.c1, self.c2, self.c3))

    @property
    def total(self) -> float:
        return float(np.sqrt(sum(n * n for n in self.norms)))

    def as_vector(self) -> np.ndarray:
        """Xi: column-stacked vec of c1, c2, c3."""
        return np.concatenate([c.ravel(order="F") for c in (self.c1, self.c2, self.c3)])


@dataclass
class AlignmentReport:
    times: np.ndarray
    trajectory_norms: np.ndarray  # (records, 3): |C1|, |C2|, |C3|
    fitted_decay_rate: Optional[float]
    min_symmetric_eig: np.ndarray
    parabola_residuals: np.ndarray  # (records, m): psi_i^2 - phi_i, by ascending psi
    symmetrized: bool = True

    @property
    def total_norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.trajectory_norms ** 2, axis=1))

    def nonpositive_intervals(self) -> List[Tuple[float, float]]:
        """Time spans where the symmetric part of 3 rho I + K is not positive definite."""
        spans = []
        start = None
        for t, value in zip(self.times, self.min_symmetric_eig):
            if value <= 0 and start is None:
                start = t
            elif value > 0 and start is not None:
                spans.append((float(start), float(t)))
                start = None
        if start is not None:
            spans.append((float(start), float(self.times[-1])))
        return spans

    def to_dict(self) -> Dict:
        return {
            "symmetrized": self.symmetrized,
            "fitted_decay_rate": self.fitted_decay_rate,
            "nonpositive_intervals": [list(span) for span in self.nonpositive_intervals()],
            "times": self.times.tolist(),
            "norm_c1": self.trajectory_norms[:, 0].tolist(),
            "norm_c2": self.trajectory_norms[:, 1].tolist(),
            "norm_c3": self.trajectory_norms[:, 2].tolist(),
            "min_symmetric_eig": self.min_symmetric_eig.tolist(),
            "parabola_residuals": self.parabola_residuals.tolist(),
        }


@dataclass
class ParabolaFit:
    C: float
    rate: Optional[float]
    max_residual: float

    @property
    def on_parabola(self) -> bool:
        """True when psi^2 - phi vanished along the whole run and no rate was fitted."""
        return self.rate is None


def _require_phinet(params: MatrixParams) -> None:
    if params.wg is None:
        raise ModeError("alignment needs wg; SimSiam params have no [Phi, W_g] or [W_g, W_h]")


def commutators(params: MatrixParams) -> CommutatorSnapshot:
    _require_phinet(params)
    phi = phi_of(params)
    return CommutatorSnapshot(
        c1=commutator(phi, params.wg),
        c2=commutator(phi, params.wh),
        c3=commutator(params.wg, params.wh),
    )


def asymmetry(params: MatrixParams) -> float:
    """Largest entry of |W_g - W_g^T| and |W_h - W_h^T|."""
    _require_phinet(params)
    return float(max(np.max(np.abs(params.wg - params.wg.T)), np.max(np.abs(params.wh - params.wh.T))))


# =============================================================================
# K assembly
# =============================================================================


def _bracket(x: np.ndarray, terms: List[Term]) -> List[Term]:
    """Terms of [X, sum c A C_j B] = sum c (XA) C_j B - c A C_j (BX)."""
    out: List[Term] = []
    for c, a, j, b in terms:
        out.append((c, x @ a, j, b))
        out.append((-c, a, j, b @ x))
    return out


def _negate(terms: List[Term]) -> List[Term]:
    return [(-c, a, j, b) for c, a, j, b in terms]


def commutator_terms(phi: np.ndarray, wg: np.ndarray, wh: np.ndarray, hyper: Hyper, symmetrized: bool = False):
    """
    Right-hand sides of C1_dot, C2_dot, C3_dot as term lists, weight decay included.

    Valid for symmetric W_g, W_h under the published flow (symmetrized or not).
    """
    s, rho = hyper.scale, hyper.rho
    p, g, h = phi, wg, wh
    eye = np.eye(p.shape[0])
    n = eye + g @ g
    mm = h @ n @ h

    row1: List[Term] = [
        (-3.0 * rho, eye, 0, eye),
        (-s, mm, 0, eye), (-s, eye, 0, mm),
        (1.0, h, 0, eye), (1.0, eye, 0, h), (1.0, h @ g, 0, eye), (1.0, eye, 0, g @ h),
        (-s, eye, 1, p @ h), (-s, h @ p, 1, eye), (1.0, p, 1, eye),
        (s, h @ n, 2, p), (s, eye, 2, n @ h @ p), (s, p @ h @ n, 2, eye), (s, p, 2, n @ h),
        (-1.0, eye, 2, p), (-1.0, p, 2, eye), (-1.0, eye, 2, g @ p), (-1.0, p @ g, 2, eye),
    ]
    row2: List[Term] = [
        (-3.0 * rho, eye, 1, eye),
        (-s, mm, 1, eye), (-s, eye, 1, mm),
        (1.0, h, 1, eye), (1.0, eye, 1, h), (1.0, h @ g, 1, eye), (1.0, eye, 1, g @ h),
        (-s, n, 1, p),
        (-s, g, 0, h @ p), (-s, eye, 0, g @ h @ p), (1.0, eye, 0, p),
        (-s, h @ g, 2, h @ p), (-s, h, 2, g @ h @ p), (-s, p @ h @ g, 2, h), (-s, p @ h, 2, g @ h),
        (1.0, h, 2, p), (1.0, p, 2, h),
    ]
    row3: List[Term] = [
        (-2.0 * rho, eye, 2, eye),
        (-s, h, 1, h), (1.0, eye, 1, h),
        (-s, n, 2, p),
        (s, n @ h, 0, eye), (-1.0, eye, 0, eye), (-1.0, g, 0, eye),
    ]

    if symmetrized:
        # antisymmetric parts removed from W_g_dot and W_h_dot
        delta_g: List[Term] = [(-0.5, eye, 1, eye)]
        delta_h: List[Term] = [
            (-0.5 * s, n, 1, eye),
            (-0.5 * s, g, 0, h), (-0.5 * s, eye, 0, g @ h),
            (0.5 * s, p @ g, 2, eye), (0.5 * s, p, 2, g),
            (0.5, eye, 0, eye),
        ]
        row1 += _bracket(p, delta_g)
        row2 += _bracket(p, delta_h)
        row3 += _negate(_bracket(h, delta_g)) + _bracket(g, delta_h)

    return row1, row2, row3


def _assemble(rows, m: int) -> np.ndarray:
    size = m * m
    out = np.zeros((3 * size, 3 * size))
    for i, row in enumerate(rows):
        for c, a, j, b in row:
            out[i * size:(i + 1) * size, j * size:(j + 1) * size] += c * np.kron(b.T, a)
    return out


def _k_from_parts(phi, wg, wh, hyper: Hyper, symmetrized: bool) -> np.ndarray:
    m = phi.shape[0]
    generator = _assemble(commutator_terms(phi, wg, wh, hyper, symmetrized), m)
    return -generator - 3.0 * hyper.rho * np.eye(3 * m * m)


def build_K(params: MatrixParams, hyper: Hyper, symmetrized: bool = False) -> np.ndarray:
    """
    The 3m^2 x 3m^2 operator K with Xi_dot = -(3 rho I + K) Xi.

    The C3 equation decays at 2 rho rather than 3 rho; the difference appears as
    -rho I in the (3, 3) block. Requires symmetric W_g and W_h.
    """
    _require_phinet(params)
    if asymmetry(params) > SYMMETRY_TOL:
        raise AssumptionError(
            f"build_K needs symmetric wg and wh (asymmetry {asymmetry(params):.3g} > {SYMMETRY_TOL:g})"
        )
    return _k_from_parts(phi_of(params), params.wg, params.wh, hyper, symmetrized)


def commutator_rates(
    params: MatrixParams,
    hyper: Hyper,
    form: str = "published",
    symmetrize: bool = False,
) -> CommutatorSnapshot:
    """Exact (C1_dot, C2_dot, C3_dot) by the product rule along the matrix flow."""
    _require_phinet(params)
    rates = flow_rhs(params, hyper, form=form, symmetrize=symmetrize)
    wf = params.wf
    phi = phi_of(params)
    phi_dot = rates.wf @ wf.T + wf @ rates.wf.T
    return CommutatorSnapshot(
        c1=commutator(phi_dot, params.wg) + commutator(phi, rates.wg),
        c2=commutator(phi_dot, params.wh) + commutator(phi, rates.wh),
        c3=commutator(rates.wg, params.wh) + commutator(params.wg, rates.wh),
    )


def min_symmetric_eig(k: np.ndarray, rho: float) -> float:
    """Smallest eigenvalue of the symmetric part of 3 rho I + K."""
    a = k + 3.0 * rho * np.eye(k.shape[0])
    return float(np.linalg.eigvalsh(0.5 * (a + a.T))[0])


# =============================================================================
# Tracking
# =============================================================================


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def eigendirection_residuals(params: MatrixParams) -> np.ndarray:
    """psi_i^2 - phi_i along the eigenvectors of W_h, ordered by ascending psi_i."""
    psi, vecs = np.linalg.eigh(_sym(params.wh))
    phi = np.einsum("ji,jk,ki->i", vecs, phi_of(params), vecs)
    return psi ** 2 - phi


def fit_log_rate(times: np.ndarray, values: np.ndarray, tail_fraction: float = FIT_TAIL_FRACTION) -> Optional[float]:
    """Least-squares slope of log(values) vs t over the tail of the series."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    start = int(len(times) * (1.0 - tail_fraction))
    t, v = times[start:], values[start:]
    keep = v > 0
    if np.count_nonzero(keep) < 2:
        return None
    slope, _ = np.polyfit(t[keep], np.log(v[keep]), 1)
    return float(slope)


def track_alignment(
    init: MatrixParams,
    hyper: Hyper,
    dt: float,
    steps: int,
    method: str = DEFAULT_METHOD,
    symmetrize: bool = True,
    stride: Optional[int] = None,
    verbose: bool = False,
) -> AlignmentReport:
    """
    Integrate the published matrix flow from a symmetric init and record alignment.

    With ``symmetrize`` (default) W_g and W_h stay symmetric, so Xi_dot = -(3 rho I + K) Xi
    holds at every recorded state. The decay rate is fitted on the log of the total
    commutator norm over the tail of the run; it is None when the norms vanish.
    """
    _require_phinet(init)
    if asymmetry(init) > SYMMETRY_TOL:
        raise AssumptionError("track_alignment needs symmetric-initialised wg and wh")

    if verbose:
        print(f"Tracking alignment: m={init.m}, sigma2={hyper.sigma2:g}, rho={hyper.rho:g}, {steps} steps")
    trajectory: Trajectory = integrate_flow(
        init, hyper, dt, steps, method=method, form="published", symmetrize=symmetrize, stride=stride
    )

    norms, min_eigs, residuals = [], [], []
    for state in trajectory.states:
        norms.append(commutators(state).norms)
        k = _k_from_parts(phi_of(state), _sym(state.wg), _sym(state.wh), hyper, symmetrize)
        min_eigs.append(min_symmetric_eig(k, hyper.rho))
        residuals.append(eigendirection_residuals(state))

    norms = np.array(norms)
    total = np.sqrt(np.sum(norms ** 2, axis=1))
    report = AlignmentReport(
        times=trajectory.times,
        trajectory_norms=norms,
        fitted_decay_rate=fit_log_rate(trajectory.times, total),
        min_symmetric_eig=np.array(min_eigs),
        parabola_residuals=np.array(residuals),
        symmetrized=symmetrize,
    )
    if verbose:
        rate = report.fitted_decay_rate
        print(f"  ✓ final |Xi| = {total[-1]:.3e}, fitted rate = {rate if rate is None else f'{rate:.4g}'}")
        for start, end in report.nonpositive_intervals():
            print(f"  ! 3 rho I + K not positive definite on [{start:.4g}, {end:.4g}]")
    return report


def parabola_fit(trajectory: Trajectory, zero_tol: float = 1e-12) -> ParabolaFit:
    """
    Fit psi(t)^2 - phi(t) = C exp(rate t) on a full-system eigen trajectory.

    When the residual stays within ``zero_tol`` the run is on the parabola:
    C = 0 and rate is None.
    """
    states = trajectory.states
    if not states or not hasattr(states[0], "phi"):
        raise ContractError("parabola_fit needs a trajectory of the full (phi, psi, gamma) system")
    times = trajectory.times
    r = np.array([st.psi ** 2 - st.phi for st in states])

    if np.max(np.abs(r)) <= zero_tol:
        return ParabolaFit(C=0.0, rate=None, max_residual=float(np.max(np.abs(r))))

    keep = np.abs(r) > 0
    slope, intercept = np.polyfit(times[keep], np.log(np.abs(r[keep])), 1)
    c = float(np.sign(r[keep][0]) * np.exp(intercept))
    max_residual = float(np.max(np.abs(r - c * np.exp(slope * times))))
    return ParabolaFit(C=c, rate=float(slope), max_residual=max_residual)
