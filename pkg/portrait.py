"""
Phase-portrait data for the reduced PhiNet and SimSiam dynamics:
vector fields, nullclines and basin-of-attraction maps.

Nothing here plots; the CLI writes the arrays out for external rendering.
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from config import (
    ATTRACTION_RADIUS,
    BASIN_DT,
    BASIN_HORIZON,
    DEFAULT_RESOLUTION,
    ESCAPE_BOUND,
    GAMMA_RANGE,
    PSI_RANGE,
    WEAK_DECAY_RHO,
)
from eigen import Equilibrium, find_equilibria_reduced, gamma_nullcline, rhs_reduced, rhs_simsiam, simsiam_equilibria
from errors import ConfigError, UnsupportedParameterError
from flows import Hyper
from integrate import check_run_args, rk4_step

# seeds this close to a sink are settled and stop integrating
SETTLE_FRACTION = 0.1


@dataclass(frozen=True)
class GridSpec:
    psi_range: Tuple[float, float] = PSI_RANGE
    gamma_range: Tuple[float, float] = GAMMA_RANGE
    nx: int = 71
    ny: int = 81

    def __post_init__(self):
        for name in ("psi_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ConfigError(f"{name} must be a finite interval with lo < hi, got {(lo, hi)}")
        if self.nx < 2 or self.ny < 2:
            raise ConfigError(f"grid needs nx, ny >= 2, got nx={self.nx}, ny={self.ny}")

    @property
    def psi_nodes(self) -> np.ndarray:
        return np.linspace(self.psi_range[0], self.psi_range[1], self.nx)

    @property
    def gamma_nodes(self) -> np.ndarray:
        return np.linspace(self.gamma_range[0], self.gamma_range[1], self.ny)

    def mesh(self) -> Tuple[np.ndarray, np.ndarray]:
        """(psi, gamma) node arrays of shape (nx, ny)."""
        return np.meshgrid(self.psi_nodes, self.gamma_nodes, indexing="ij")


@dataclass
class VectorField:
    psi: np.ndarray
    gamma: np.ndarray
    d_psi: np.ndarray
    d_gamma: np.ndarray

    @property
    def speed(self) -> np.ndarray:
        return np.hypot(self.d_psi, self.d_gamma)

    def rows(self):
        """(psi, gamma, d_psi, d_gamma) per node, in grid index order."""
        return np.column_stack([a.ravel() for a in (self.psi, self.gamma, self.d_psi, self.d_gamma)])


@dataclass
class Nullclines:
    """Polylines (k x 2 arrays of (psi, gamma) points) of both nullclines."""

    gamma_dot_zero: List[np.ndarray]
    psi_dot_zero: List[np.ndarray]

    def rows(self):
        """(curve, branch, psi, gamma) rows for tabular output."""
        out = []
        for curve, lines in (("gamma_dot_zero", self.gamma_dot_zero), ("psi_dot_zero", self.psi_dot_zero)):
            for branch, line in enumerate(lines):
                out.extend((curve, branch, float(p), float(g)) for p, g in line)
        return out


@dataclass
class BasinMap:
    """
    Attractor labels of a seed grid (-1 = divergent or unclassified).

    2-D maps carry ``grid`` and labels of shape (nx, ny); SimSiam maps carry
    ``psi_seeds`` and 1-D labels.
    """

    labels: np.ndarray
    attractors: List[Equilibrium]
    grid: Optional[GridSpec] = None
    psi_seeds: Optional[np.ndarray] = None
    horizon: float = BASIN_HORIZON
    dt: float = BASIN_DT

    def __post_init__(self):
        bad = (self.labels < -1) | (self.labels >= len(self.attractors))
        if np.any(bad):
            raise ConfigError("basin labels must be -1 or index into attractors")

    def fractions(self) -> dict:
        """Share of seeds per attractor index (and -1)."""
        total = self.labels.size
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): float(c) / total for v, c in zip(values, counts)}

    def rows(self):
        """(psi, gamma, label) per seed; gamma is omitted for 1-D maps."""
        if self.grid is not None:
            psi, gamma = self.grid.mesh()
            return np.column_stack([psi.ravel(), gamma.ravel(), self.labels.ravel()])
        return np.column_stack([self.psi_seeds, self.labels])


# =============================================================================
# Fields and nullclines
# =============================================================================


def vector_field(hyper: Hyper, grid: GridSpec, form: str = "published") -> VectorField:
    """rhs_reduced at every grid node."""
    psi, gamma = grid.mesh()
    d_psi, d_gamma = rhs_reduced(psi, gamma, hyper, form)
    return VectorField(psi=psi, gamma=gamma, d_psi=d_psi, d_gamma=d_gamma)


def _runs(mask: np.ndarray) -> List[slice]:
    """Contiguous True runs of a boolean array, as slices."""
    runs = []
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append(slice(start, i))
            start = None
    if start is not None:
        runs.append(slice(start, len(mask)))
    return runs


def nullclines(hyper: Hyper, grid: GridSpec, form: str = "published") -> Nullclines:
    """
    gamma_dot = 0 as an explicit curve gamma(psi); psi_dot = 0 as the line psi = 0
    plus both real root branches of (1+s2)(1+g^2) psi^2 - (1+g) psi + rho = 0 per gamma sample.
    """
    if hyper.rho <= 0:
        raise UnsupportedParameterError("the explicit gamma_dot = 0 branch needs rho > 0")

    psi = grid.psi_nodes
    gamma_curve = [np.column_stack([psi, gamma_nullcline(psi, hyper, form)])]

    gamma = grid.gamma_nodes
    psi_lines = [np.column_stack([np.zeros_like(gamma), gamma])]
    a = hyper.scale * (1.0 + gamma ** 2)
    b = 1.0 + gamma
    disc = b ** 2 - 4.0 * a * hyper.rho
    real = disc >= 0
    root = np.sqrt(np.where(real, disc, 0.0))
    for sign in (-1.0, 1.0):
        branch = (b + sign * root) / (2.0 * a)
        for run in _runs(real):
            psi_lines.append(np.column_stack([branch[run], gamma[run]]))

    return Nullclines(gamma_dot_zero=gamma_curve, psi_dot_zero=psi_lines)


# =============================================================================
# Basins
# =============================================================================


def default_horizon(rho: float) -> float:
    """BASIN_HORIZON, stretched to 10 / rho for weak decay."""
    if 0 < rho < WEAK_DECAY_RHO:
        return max(BASIN_HORIZON, 10.0 / rho)
    return BASIN_HORIZON


def _settle(
    rhs: Callable[[np.ndarray], np.ndarray],
    seeds: np.ndarray,
    sinks: np.ndarray,
    horizon: float,
    dt: float,
    radius: float,
) -> np.ndarray:
    """
    Integrate a (dim, n) block of seeds and label each by the sink it ends near.

    Seeds are dropped from the block once they settle within SETTLE_FRACTION * radius
    of a sink or leave the ESCAPE_BOUND box; the rest are labelled at ``horizon``.
    """
    check_run_args(dt, 1)
    if not (np.isfinite(horizon) and horizon > 0):
        raise ConfigError(f"horizon must be a positive finite number, got {horizon}")
    steps = max(1, math.ceil(horizon / dt))
    n = seeds.shape[1]
    labels = np.full(n, -1, dtype=int)
    y = np.array(seeds, dtype=float)
    active = np.arange(n)

    def nearest(block: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if len(sinks) == 0:
            return np.full(block.shape[1], -1), np.full(block.shape[1], np.inf)
        dist = np.linalg.norm(block[:, :, None] - sinks.T[:, None, :], axis=0)
        return np.argmin(dist, axis=1), np.min(dist, axis=1)

    for _ in range(steps):
        if active.size == 0:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            block = rk4_step(rhs, y[:, active], dt)
        y[:, active] = block
        escaped = ~np.all(np.isfinite(block), axis=0) | np.any(np.abs(block) > ESCAPE_BOUND, axis=0)
        index, dist = nearest(np.where(np.isfinite(block), block, 0.0))
        settled = ~escaped & (dist < SETTLE_FRACTION * radius)
        labels[active[settled]] = index[settled]
        active = active[~(escaped | settled)]

    if active.size:
        index, dist = nearest(y[:, active])
        labels[active] = np.where(dist < radius, index, -1)
    return labels


def _sink_array(sinks: Sequence[Equilibrium], dim: int) -> np.ndarray:
    return np.array([eq.state[:dim] for eq in sinks], dtype=float).reshape(len(sinks), dim)


def basin_map(
    hyper: Hyper,
    grid: GridSpec,
    horizon: Optional[float] = None,
    dt: float = BASIN_DT,
    form: str = "published",
    radius: float = ATTRACTION_RADIUS,
    resolution: int = DEFAULT_RESOLUTION,
    verbose: bool = False,
) -> BasinMap:
    """Label every grid node by the reduced-system sink its trajectory reaches."""
    if hyper.rho <= 0:
        raise UnsupportedParameterError("basin_map needs rho > 0 to locate the sinks")
    horizon = default_horizon(hyper.rho) if horizon is None else horizon
    sinks = [eq for eq in find_equilibria_reduced(hyper, resolution=resolution, form=form) if eq.klass == "sink"]

    def rhs(y):
        return np.stack(rhs_reduced(y[0], y[1], hyper, form))

    psi, gamma = grid.mesh()
    seeds = np.vstack([psi.ravel(), gamma.ravel()])
    if verbose:
        print(f"Basin map: {seeds.shape[1]} seeds, {len(sinks)} sinks, horizon={horizon:g}, dt={dt:g}")
    labels = _settle(rhs, seeds, _sink_array(sinks, 2), horizon, dt, radius)
    if verbose:
        print(f"  ✓ {np.count_nonzero(labels >= 0)} / {labels.size} seeds reached a sink")
    return BasinMap(labels=labels.reshape(grid.nx, grid.ny), attractors=sinks, grid=grid, horizon=horizon, dt=dt)


def simsiam_basin(
    hyper: Hyper,
    psi_range: Tuple[float, float] = PSI_RANGE,
    n: int = 141,
    horizon: Optional[float] = None,
    dt: float = BASIN_DT,
    radius: float = ATTRACTION_RADIUS,
) -> BasinMap:
    """1-D basin map of the SimSiam dynamics over psi seeds."""
    lo, hi = psi_range
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi) or n < 2:
        raise ConfigError(f"need a finite psi_range with lo < hi and n >= 2, got {psi_range}, n={n}")
    horizon = default_horizon(hyper.rho) if horizon is None else horizon
    sinks = [eq for eq in simsiam_equilibria(hyper) if eq.klass == "sink"]
    seeds = np.linspace(lo, hi, n)

    def rhs(y):
        return rhs_simsiam(y, hyper)

    labels = _settle(rhs, seeds[None, :], _sink_array(sinks, 1), horizon, dt, radius)
    return BasinMap(labels=labels, attractors=sinks, psi_seeds=seeds, horizon=horizon, dt=dt)


def attractor_of(
    seed,
    hyper: Hyper,
    system: str = "phinet",
    horizon: Optional[float] = None,
    dt: float = BASIN_DT,
    form: str = "published",
    radius: float = ATTRACTION_RADIUS,
) -> Optional[Equilibrium]:
    """Sink reached from a single seed ((psi, gamma) or psi), or None."""
    horizon = default_horizon(hyper.rho) if horizon is None else horizon
    if system == "phinet":
        if hyper.rho <= 0:
            raise UnsupportedParameterError("attractor_of needs rho > 0 to locate the sinks")
        sinks = [eq for eq in find_equilibria_reduced(hyper, form=form) if eq.klass == "sink"]

        def rhs(y):
            return np.stack(rhs_reduced(y[0], y[1], hyper, form))

        block, dim = np.asarray(seed, dtype=float).reshape(2, 1), 2
    elif system == "simsiam":
        sinks = [eq for eq in simsiam_equilibria(hyper) if eq.klass == "sink"]

        def rhs(y):
            return rhs_simsiam(y, hyper)

        block, dim = np.asarray(seed, dtype=float).reshape(1, 1), 1
    else:
        raise ConfigError(f"system must be 'phinet' or 'simsiam', got '{system}'")

    label = int(_settle(rhs, block, _sink_array(sinks, dim), horizon, dt, radius)[0])
    return sinks[label] if label >= 0 else None


def boundary_band(labels: np.ndarray) -> np.ndarray:
    """Nodes with a 4-neighbour of a different label."""
    band = np.zeros(labels.shape, dtype=bool)
    diff_x = labels[1:, :] != labels[:-1, :]
    band[1:, :] |= diff_x
    band[:-1, :] |= diff_x
    if labels.ndim > 1:
        diff_y = labels[:, 1:] != labels[:, :-1]
        band[:, 1:] |= diff_y
        band[:, :-1] |= diff_y
    return band
