"""
Decoupled eigenvalue dynamics, equilibria, and the weight-decay bifurcation structure.

Three systems share one naming scheme:

* full     (phi, psi, gamma)  eigenvalues of Phi, W_h, W_g in the aligned basis
* reduced  (psi, gamma)       the full system restricted to the parabola phi = psi^2
* simsiam  psi                the SimSiam counterpart (no W_g)

``form`` selects the gamma equation: "published" decouples the published W_g flow,
"exact" decouples the true gradient flow (see flows.grad_flow_rhs).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from config import (
    DEDUP_TOL,
    DEFAULT_METHOD,
    DEFAULT_RESOLUTION,
    DEGENERACY_TOL,
    MIN_RESOLUTION,
    NEWTON_POLISH_ITERS,
    SWEEP_GRID,
    SWEEP_RTOL,
    THREADS,
    WINDOW_FACTOR,
)
from errors import ConfigError, ContractError, NumericError, UnsupportedParameterError
from flows import FORMS, Hyper, Trajectory
from integrate import integrate

SYSTEMS = ("full", "reduced", "simsiam")
REGIME_NAMES = {1: "strong", 2: "medium", 3: "light", 4: "weak"}


@dataclass(frozen=True)
class EigenState:
    phi: float
    psi: float
    gamma: float

    def as_array(self) -> np.ndarray:
        return np.array([self.phi, self.psi, self.gamma], dtype=float)

    @classmethod
    def from_array(cls, values) -> "EigenState":
        phi, psi, gamma = (float(v) for v in values)
        return cls(phi=phi, psi=psi, gamma=gamma)


@dataclass
class Equilibrium:
    """Fixed point, its Jacobian eigenvalues and stability class."""

    state: Tuple[float, ...]
    jacobian_eigs: Tuple[complex, ...]
    klass: str

    @property
    def psi(self) -> float:
        return self.state[0]

    @property
    def gamma(self) -> float:
        return self.state[1] if len(self.state) > 1 else 0.0

    def to_dict(self) -> dict:
        return {
            "state": [float(v) for v in self.state],
            "jacobian_eigs": [[float(np.real(e)), float(np.imag(e))] for e in self.jacobian_eigs],
            "class": self.klass,
        }


@dataclass
class RegimeReport:
    hyper: Hyper
    equilibria: List[Equilibrium]
    regime: str
    sink_count: int
    system: str = "phinet"

    @property
    def sinks(self) -> List[Equilibrium]:
        return [eq for eq in self.equilibria if eq.klass == "sink"]

    def to_dict(self) -> dict:
        return {
            "sigma2": self.hyper.sigma2,
            "rho": self.hyper.rho,
            "system": self.system,
            "regime": self.regime,
            "sink_count": self.sink_count,
            "equilibria": [eq.to_dict() for eq in self.equilibria],
        }


@dataclass
class SweepResult:
    sigma2: float
    system: str
    reports: List[Tuple[float, RegimeReport]] = field(default_factory=list)
    boundaries: List[float] = field(default_factory=list)


def _check_form(form: str) -> None:
    if form not in FORMS:
        raise ContractError(f"form must be one of {FORMS}, got '{form}'")


def _require_finite(*values) -> None:
    for value in values:
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite state value {value}")


# =============================================================================
# Right-hand sides
# =============================================================================


def rhs_full(s: EigenState, hyper: Hyper, form: str = "published") -> EigenState:
    """(phi, psi, gamma) dynamics in the aligned eigenbasis."""
    _check_form(form)
    _require_finite(s.phi, s.psi, s.gamma)
    d_phi, d_psi, d_gamma = _full_arrays(s.phi, s.psi, s.gamma, hyper.scale, hyper.rho, form)
    return EigenState(phi=float(d_phi), psi=float(d_psi), gamma=float(d_gamma))


def _full_arrays(phi, psi, gamma, scale, rho, form):
    brace = scale * (1.0 + gamma * gamma) * psi - (1.0 + gamma)
    d_phi = -2.0 * psi * phi * brace - 2.0 * rho * phi
    d_psi = -phi * brace - rho * psi
    if form == "published":
        d_gamma = -psi * phi * (scale * psi - 1.0) - rho * gamma
    else:
        d_gamma = -psi * phi * (scale * gamma * psi - 1.0) - rho * gamma
    return d_phi, d_psi, d_gamma


def rhs_reduced(psi, gamma, hyper: Hyper, form: str = "published"):
    """
    (psi, gamma) dynamics on the invariant parabola phi = psi^2.

    Accepts scalars or equally shaped arrays.
    """
    _check_form(form)
    s, rho = hyper.scale, hyper.rho
    psi = np.asarray(psi, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    d_psi = ((1.0 + gamma) - s * (1.0 + gamma * gamma) * psi) * psi * psi - rho * psi
    if form == "published":
        d_gamma = (1.0 - s * psi) * psi ** 3 - rho * gamma
    else:
        d_gamma = (1.0 - s * gamma * psi) * psi ** 3 - rho * gamma
    if d_psi.ndim == 0:
        return float(d_psi), float(d_gamma)
    return d_psi, d_gamma


def jacobian_reduced(psi: float, gamma: float, hyper: Hyper, form: str = "published") -> np.ndarray:
    """Analytic 2x2 Jacobian of rhs_reduced."""
    _check_form(form)
    s, rho = hyper.scale, hyper.rho
    j11 = 2.0 * (1.0 + gamma) * psi - 3.0 * s * (1.0 + gamma * gamma) * psi ** 2 - rho
    j12 = psi ** 2 - 2.0 * s * gamma * psi ** 3
    if form == "published":
        j21 = 3.0 * psi ** 2 - 4.0 * s * psi ** 3
        j22 = -rho
    else:
        j21 = 3.0 * psi ** 2 - 4.0 * s * gamma * psi ** 3
        j22 = -s * psi ** 4 - rho
    return np.array([[j11, j12], [j21, j22]], dtype=float)


def rhs_simsiam(psi, hyper: Hyper):
    """SimSiam psi dynamics."""
    psi = np.asarray(psi, dtype=float)
    d_psi = (1.0 - hyper.scale * psi) * psi * psi - hyper.rho * psi
    return float(d_psi) if d_psi.ndim == 0 else d_psi


def simsiam_slope(psi: float, hyper: Hyper) -> float:
    """d(psi_dot)/d(psi) of the SimSiam dynamics."""
    return 2.0 * psi - 3.0 * hyper.scale * psi ** 2 - hyper.rho


# =============================================================================
# Integration
# =============================================================================


def _pack(init, system: str) -> np.ndarray:
    if system == "full":
        if isinstance(init, EigenState):
            return init.as_array()
        return np.asarray(init, dtype=float).reshape(3)
    if system == "reduced":
        return np.asarray(init, dtype=float).reshape(2)
    return np.asarray(init, dtype=float).reshape(1)


def _unpack(vec: np.ndarray, system: str):
    if system == "full":
        return EigenState.from_array(vec)
    if system == "reduced":
        return float(vec[0]), float(vec[1])
    return float(vec[0])


def eigen_rhs(hyper: Hyper, system: str, form: str = "published") -> Callable[[np.ndarray], np.ndarray]:
    """Vector-valued right-hand side of a system, for use with integrate.py."""
    if system not in SYSTEMS:
        raise ConfigError(f"system must be one of {SYSTEMS}, got '{system}'")
    _check_form(form)
    s, rho = hyper.scale, hyper.rho

    if system == "full":
        def rhs(y):
            return np.array(_full_arrays(y[0], y[1], y[2], s, rho, form))
    elif system == "reduced":
        def rhs(y):
            return np.array(rhs_reduced(y[0], y[1], hyper, form))
    else:
        def rhs(y):
            return np.array([rhs_simsiam(y[0], hyper)])
    return rhs


def integrate_eigen(
    init,
    hyper: Hyper,
    dt: float,
    steps: int,
    system: str = "reduced",
    method: str = DEFAULT_METHOD,
    form: str = "published",
    stride: Optional[int] = None,
) -> Trajectory:
    """
    Fixed-step integration of one of the eigenvalue systems.

    States are EigenState (full), (psi, gamma) tuples (reduced) or floats (simsiam).
    Diagnostics carry the speed |rhs| and, for the full system, psi^2 - phi.
    """
    rhs = eigen_rhs(hyper, system, form)
    y0 = _pack(init, system)
    _require_finite(y0)

    def diagnose(y):
        diag = {"speed": float(np.linalg.norm(rhs(y)))}
        if system == "full":
            diag["parabola_residual"] = float(y[1] ** 2 - y[0])
        return diag

    times, states, diagnostics = integrate(rhs, y0, dt, steps, method=method, stride=stride, diagnose=diagnose)
    return Trajectory(times=times, states=[_unpack(v, system) for v in states], diagnostics=diagnostics)


# =============================================================================
# Equilibria
# =============================================================================


def classify(eigs: Sequence[complex], tol: float = DEGENERACY_TOL) -> str:
    """sink / source / saddle / degenerate from Jacobian eigenvalues."""
    re = np.real(np.asarray(eigs, dtype=complex))
    if np.all(re < -tol):
        return "sink"
    if np.all(re > tol):
        return "source"
    if np.any(re < -tol) and np.any(re > tol):
        return "saddle"
    return "degenerate"


def simsiam_critical_rho(sigma2: float) -> float:
    """Weight decay above which the SimSiam dynamics keeps only the collapsed sink."""
    if not np.isfinite(sigma2) or sigma2 < 0:
        raise ContractError(f"sigma2 must be a finite number >= 0, got {sigma2}")
    return 1.0 / (4.0 * (1.0 + sigma2))


def simsiam_equilibria(hyper: Hyper) -> List[Equilibrium]:
    """psi = 0 plus the real roots of (1+s2) psi^2 - psi + rho = 0."""
    s, rho = hyper.scale, hyper.rho
    candidates = [0.0]
    disc = 1.0 - 4.0 * rho * s
    if disc >= 0:
        root = np.sqrt(disc)
        candidates.extend([(1.0 - root) / (2.0 * s), (1.0 + root) / (2.0 * s)])

    equilibria: List[Equilibrium] = []
    for psi in sorted(candidates):
        if any(abs(psi - eq.psi) <= DEDUP_TOL for eq in equilibria):
            continue
        slope = simsiam_slope(psi, hyper)
        equilibria.append(Equilibrium(state=(float(psi),), jacobian_eigs=(complex(slope),), klass=classify([slope])))
    return equilibria


def gamma_nullcline(psi, hyper: Hyper, form: str = "published"):
    """gamma on the gamma_dot = 0 nullcline, as a function of psi (rho > 0)."""
    if hyper.rho <= 0:
        raise UnsupportedParameterError("the explicit gamma_dot = 0 branch needs rho > 0")
    s, rho = hyper.scale, hyper.rho
    psi = np.asarray(psi, dtype=float)
    if form == "published":
        return psi ** 3 * (1.0 - s * psi) / rho
    return psi ** 3 / (rho + s * psi ** 4)


def _psi_balance(psi, hyper: Hyper, form: str):
    """psi_dot / psi along the gamma nullcline; its roots are the nonzero equilibria."""
    s, rho = hyper.scale, hyper.rho
    gamma = gamma_nullcline(psi, hyper, form)
    return ((1.0 + gamma) - s * (1.0 + gamma * gamma) * psi) * psi - rho


def default_psi_window(sigma2: float) -> Tuple[float, float]:
    half = WINDOW_FACTOR / (1.0 + sigma2)
    return -half, half


def _polish(psi: float, gamma: float, hyper: Hyper, form: str) -> Tuple[float, float]:
    """A few Newton steps on rhs_reduced, kept only while the residual drops."""
    state = np.array([psi, gamma])
    residual = np.linalg.norm(rhs_reduced(state[0], state[1], hyper, form))
    for _ in range(NEWTON_POLISH_ITERS):
        jac = jacobian_reduced(state[0], state[1], hyper, form)
        try:
            step = np.linalg.solve(jac, np.array(rhs_reduced(state[0], state[1], hyper, form)))
        except np.linalg.LinAlgError:
            break
        candidate = state - step
        cand_residual = np.linalg.norm(rhs_reduced(candidate[0], candidate[1], hyper, form))
        if not np.isfinite(cand_residual) or cand_residual >= residual:
            break
        state, residual = candidate, cand_residual
    return float(state[0]), float(state[1])


def reduced_equilibrium(psi: float, gamma: float, hyper: Hyper, form: str = "published") -> Equilibrium:
    eigs = np.linalg.eigvals(jacobian_reduced(psi, gamma, hyper, form))
    eigs = tuple(complex(e) for e in sorted(eigs, key=lambda e: (np.real(e), np.imag(e))))
    return Equilibrium(state=(psi, gamma), jacobian_eigs=eigs, klass=classify(eigs))


def find_equilibria_reduced(
    hyper: Hyper,
    psi_bounds: Optional[Tuple[float, float]] = None,
    resolution: int = DEFAULT_RESOLUTION,
    form: str = "published",
) -> List[Equilibrium]:
    """
    All equilibria of the reduced system with psi inside ``psi_bounds``.

    gamma is eliminated through the gamma_dot = 0 nullcline, the remaining
    univariate function of psi is bracketed on a dense grid, each bracket is
    solved with Brent's method and then polished by Newton on the 2-D system.
    The collapsed point (0, 0) is always included.
    """
    _check_form(form)
    if hyper.rho <= 0:
        raise UnsupportedParameterError("find_equilibria_reduced needs rho > 0 (the nullcline divides by rho)")
    if resolution < MIN_RESOLUTION:
        raise ConfigError(f"resolution must be >= {MIN_RESOLUTION} to avoid missed roots, got {resolution}")
    lo, hi = psi_bounds if psi_bounds is not None else default_psi_window(hyper.sigma2)
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ConfigError(f"psi_bounds must be a finite interval with lo < hi, got {(lo, hi)}")

    def balance(p: float) -> float:
        return float(_psi_balance(p, hyper, form))

    grid = np.linspace(lo, hi, int(resolution))
    with np.errstate(over="ignore", invalid="ignore"):
        values = _psi_balance(grid, hyper, form)

    roots: List[float] = [float(p) for p, v in zip(grid, values) if v == 0.0]
    signs = np.sign(values)
    for i in np.nonzero(signs[:-1] * signs[1:] < 0)[0]:
        roots.append(brentq(balance, grid[i], grid[i + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200))

    points = [(0.0, 0.0)]
    for psi in roots:
        gamma = float(gamma_nullcline(psi, hyper, form))
        psi, gamma = _polish(psi, gamma, hyper, form)
        if any(abs(psi - p) <= DEDUP_TOL and abs(gamma - g) <= DEDUP_TOL for p, g in points):
            continue
        points.append((psi, gamma))

    points.sort()
    return [reduced_equilibrium(p, g, hyper, form) for p, g in points]


def regime(
    hyper: Hyper,
    system: str = "phinet",
    form: str = "published",
    psi_bounds: Optional[Tuple[float, float]] = None,
    resolution: int = DEFAULT_RESOLUTION,
) -> RegimeReport:
    """Classify (strong / medium / light / weak / other) by the number of sinks."""
    if hyper.rho <= 0:
        raise UnsupportedParameterError("regime classification needs rho > 0")
    if system == "phinet":
        equilibria = find_equilibria_reduced(hyper, psi_bounds=psi_bounds, resolution=resolution, form=form)
    elif system == "simsiam":
        equilibria = simsiam_equilibria(hyper)
    else:
        raise ConfigError(f"system must be 'phinet' or 'simsiam', got '{system}'")
    sinks = sum(1 for eq in equilibria if eq.klass == "sink")
    return RegimeReport(
        hyper=hyper,
        equilibria=equilibria,
        regime=REGIME_NAMES.get(sinks, "other"),
        sink_count=sinks,
        system=system,
    )


def parallel_map(fn, items: Sequence, threads: int = THREADS) -> list:
    """Order-preserving map, threaded when threads > 1."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def sweep_rho(
    sigma2: float,
    rho_min: float,
    rho_max: float,
    grid: int = SWEEP_GRID,
    system: str = "phinet",
    form: str = "published",
    resolution: int = DEFAULT_RESOLUTION,
    rtol: float = SWEEP_RTOL,
    threads: int = THREADS,
    verbose: bool = False,
) -> SweepResult:
    """
    Regime reports on a log-spaced rho grid plus the bifurcation boundaries.

    Wherever the sink count changes between neighbouring grid points the boundary
    is bisected (in log rho) down to relative width ``rtol``. Returned boundaries
    are sorted ascending.
    """
    if not (0 < rho_min < rho_max) or not np.isfinite(rho_max):
        raise ConfigError(f"need 0 < rho_min < rho_max, got {rho_min}, {rho_max}")
    if grid < 2:
        raise ConfigError(f"grid must have at least 2 points, got {grid}")

    def report_at(rho: float) -> RegimeReport:
        return regime(Hyper(sigma2, float(rho)), system=system, form=form, resolution=resolution)

    def count_at(rho: float) -> int:
        return report_at(rho).sink_count

    rhos = np.geomspace(rho_min, rho_max, grid)
    if verbose:
        print(f"Sweeping {grid} rho values in [{rho_min:g}, {rho_max:g}] (sigma2={sigma2:g}, {system})")
    reports = parallel_map(report_at, list(rhos), threads)

    def locate(lo: float, c_lo: int, hi: float, c_hi: int) -> List[float]:
        if hi / lo - 1.0 <= rtol:
            return [float(np.sqrt(lo * hi))]
        mid = float(np.sqrt(lo * hi))
        c_mid = count_at(mid)
        found = []
        if c_mid != c_lo:
            found += locate(lo, c_lo, mid, c_mid)
        if c_mid != c_hi:
            found += locate(mid, c_mid, hi, c_hi)
        return found

    boundaries: List[float] = []
    for (rho_a, rep_a), (rho_b, rep_b) in zip(zip(rhos, reports), zip(rhos[1:], reports[1:])):
        if rep_a.sink_count != rep_b.sink_count:
            found = locate(float(rho_a), rep_a.sink_count, float(rho_b), rep_b.sink_count)
            boundaries.extend(found)
            if verbose:
                for b in found:
                    print(f"  ✓ boundary {rep_a.sink_count} -> {rep_b.sink_count} sinks near rho={b:.6g}")

    return SweepResult(
        sigma2=sigma2,
        system=system,
        reports=[(float(r), rep) for r, rep in zip(rhos, reports)],
        boundaries=sorted(boundaries),
    )
