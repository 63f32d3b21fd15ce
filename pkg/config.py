"""Numerical defaults, tolerances, and environment settings."""

import os

from dotenv import load_dotenv

load_dotenv()

# Runtime
THREADS = max(1, int(os.getenv("PHINET_LAB_THREADS", "1")))
OUTPUT_DIR = os.getenv("PHINET_LAB_OUTPUT_DIR", "results")

# Integrators
DEFAULT_METHOD = "rk4"
MAX_RECORDED_STEPS = 10_000  # longer runs are recorded with stride ceil(steps / 1e4)
DIVERGENCE_NORM = 1e8

# Equilibria
DEGENERACY_TOL = 1e-9
DEDUP_TOL = 1e-8
MIN_RESOLUTION = 100
DEFAULT_RESOLUTION = 20_001
WINDOW_FACTOR = 2.0  # psi window is +-WINDOW_FACTOR / (1 + sigma2)
NEWTON_POLISH_ITERS = 3
EQUILIBRIUM_RESIDUAL = 1e-10

# Bifurcation sweep
SWEEP_RTOL = 1e-4
SWEEP_GRID = 40

# Alignment
SYMMETRY_TOL = 1e-10
FIT_TAIL_FRACTION = 0.5

# Phase portraits (axes of the state-space diagrams)
PSI_RANGE = (-0.2, 0.5)
GAMMA_RANGE = (-0.2, 0.6)
ATTRACTION_RADIUS = 0.02
BASIN_HORIZON = 2000.0
BASIN_DT = 0.01
WEAK_DECAY_RHO = 5e-3  # below this the horizon is stretched to 10 / rho
ESCAPE_BOUND = 10.0

# Trainer
COSINE_EPS = 1e-12
COLLAPSE_EIG = 1e-3

# Output
CSV_DIGITS = 17
