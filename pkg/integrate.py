"""Fixed-step explicit integrators (euler, rk4) and the recording loop shared by all flows.

States are numpy arrays of any shape; ``rhs`` maps a state to its time derivative
with the same shape. Stepping is vectorised, so a batch of independent states
(e.g. basin seeds) can be advanced in one call.
"""

import math
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from config import DIVERGENCE_NORM, MAX_RECORDED_STEPS
from errors import ConfigError, DivergenceError, NumericError

Rhs = Callable[[np.ndarray], np.ndarray]


def euler_step(rhs: Rhs, y: np.ndarray, dt: float) -> np.ndarray:
    return y + dt * rhs(y)


def rk4_step(rhs: Rhs, y: np.ndarray, dt: float) -> np.ndarray:
    """Classical 4th order Runge-Kutta step."""
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * dt * k1)
    k3 = rhs(y + 0.5 * dt * k2)
    k4 = rhs(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


STEPPERS = {"euler": euler_step, "rk4": rk4_step}


def get_stepper(method: str):
    if method not in STEPPERS:
        raise ConfigError(f"Unknown integration method '{method}'. Use one of {sorted(STEPPERS)}.")
    return STEPPERS[method]


def recording_stride(steps: int, stride: Optional[int] = None) -> int:
    """Every step for short runs, else every ceil(steps / MAX_RECORDED_STEPS)-th step."""
    if stride is not None:
        if stride < 1:
            raise ConfigError(f"Recording stride must be >= 1, got {stride}")
        return stride
    if steps <= MAX_RECORDED_STEPS:
        return 1
    return math.ceil(steps / MAX_RECORDED_STEPS)


def check_run_args(dt: float, steps: int) -> None:
    if not (np.isfinite(dt) and dt > 0):
        raise ConfigError(f"dt must be a positive finite number, got {dt}")
    if int(steps) != steps or steps < 1:
        raise ConfigError(f"steps must be a positive integer, got {steps}")


def integrate(
    rhs: Rhs,
    y0: np.ndarray,
    dt: float,
    steps: int,
    method: str = "rk4",
    stride: Optional[int] = None,
    diagnose: Optional[Callable[[np.ndarray], Dict[str, float]]] = None,
    divergence_norm: float = DIVERGENCE_NORM,
) -> Tuple[List[float], List[np.ndarray], Dict[str, List[float]]]:
    """
    Advance ``y0`` for ``steps`` fixed steps of size ``dt``.

    Returns recorded (times, states, diagnostics). Step 0 and the final step are
    always recorded. Raises DivergenceError on a non-finite state or a state norm
    above ``divergence_norm``. Stability (dt times the largest eigenvalue scale) is
    the caller's responsibility.
    """
    check_run_args(dt, steps)
    step = get_stepper(method)
    every = recording_stride(steps, stride)

    y = np.array(y0, dtype=float)
    times: List[float] = []
    states: List[np.ndarray] = []
    diagnostics: Dict[str, List[float]] = {}

    def record(n: int, state: np.ndarray) -> None:
        times.append(n * dt)
        states.append(state.copy())
        if diagnose is not None:
            for key, value in diagnose(state).items():
                diagnostics.setdefault(key, []).append(float(value))

    record(0, y)
    for n in range(1, steps + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                y_next = step(rhs, y, dt)
        except NumericError:
            y_next = None  # an intermediate stage went non-finite
        if y_next is None or not np.all(np.isfinite(y_next)) or np.linalg.norm(y_next) > divergence_norm:
            raise DivergenceError(
                f"Integration diverged at step {n} (t={n * dt:.6g})",
                last_finite_step=n - 1,
                diagnostics={"time": (n - 1) * dt, "norm": float(np.linalg.norm(y))},
            )
        y = y_next
        if n % every == 0 or n == steps:
            record(n, y)

    return times, states, diagnostics
