"""
Discrete-time SimSiam / PhiNet / X-PhiNet on the isotropic Gaussian data model.

x ~ N(0, I_d) and two views x1, x2 ~ N(x, sigma2 I). Sim-1 compares the
predictor outputs h(f(x1)), h(f(x2)) with the stop-gradiented encodings of the
other view; Sim-2 compares g(h(f(x_i))) with the stop-gradiented encoding of the
clean x (by f_long, an EMA copy of f, for X-PhiNet). Gradients come from torch
autograd in float64, or from the closed-form expectation in exact mode.
"""

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import torch

from config import COSINE_EPS, DIVERGENCE_NORM, THREADS
from errors import ConfigError, DivergenceError, ModeError
from eval.metrics import compute_collapse_metrics, stable_rank  # noqa: F401  (stable_rank re-exported)
from flows import Hyper, MatrixParams, expected_loss, flow_rhs, integrate_flow

MODELS = ("simsiam", "phinet", "xphinet")
LOSSES = ("cosine", "mse")
ARCHS = ("linear", "mlp1")
DTYPE = torch.float64


@dataclass
class TrainerConfig:
    model: str = "phinet"
    sim1_loss: str = "cosine"
    sim2_loss: str = "mse"
    arch: str = "linear"
    hidden_width: int = 16
    tanh_output: bool = False
    d: int = 2
    m: int = 2
    sigma2: float = 1.5
    rho: float = 0.03
    lr: float = 0.05
    batch: int = 256
    steps: int = 1000
    ema_beta: float = 0.99
    seed: int = 0
    exact: bool = False
    with_aug: bool = False
    init_scale: Optional[float] = None  # std of initial entries; default 1/sqrt(fan_in)
    record_every: int = 1

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got '{self.model}'")
        for name in ("sim1_loss", "sim2_loss"):
            if getattr(self, name) not in LOSSES:
                raise ConfigError(f"{name} must be one of {LOSSES}, got '{getattr(self, name)}'")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got '{self.arch}'")
        for name in ("d", "m", "batch", "steps", "hidden_width", "record_every"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be a positive finite number, got {self.lr}")
        if not 0.0 <= self.ema_beta <= 1.0:
            raise ConfigError(f"ema_beta must lie in [0, 1], got {self.ema_beta}")
        if self.init_scale is not None and not self.init_scale >= 0:
            raise ConfigError(f"init_scale must be >= 0, got {self.init_scale}")
        if self.exact and not self.is_closed_form:
            raise ConfigError("exact mode needs arch=linear, sim1_loss=mse, sim2_loss=mse and model simsiam/phinet")
        Hyper(self.sigma2, self.rho)  # validates sigma2 and rho

    @property
    def hyper(self) -> Hyper:
        return Hyper(self.sigma2, self.rho)

    @property
    def is_closed_form(self) -> bool:
        """Expected loss and gradients have a closed form (the analysed linear MSE model)."""
        return (
            self.arch == "linear"
            and self.sim1_loss == "mse"
            and self.sim2_loss == "mse"
            and self.model in ("simsiam", "phinet")
            and not self.with_aug
        )

    @classmethod
    def from_dict(cls, values: Mapping) -> "TrainerConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"Unknown trainer config keys: {unknown}")
        return cls(**values)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


@dataclass
class ModelState:
    """Online parameters of f, h (and g); ``long`` holds f_long for X-PhiNet."""

    online: Dict[str, torch.Tensor]
    long: Optional[Dict[str, torch.Tensor]] = None

    def clone(self) -> "ModelState":
        return ModelState(
            online={k: v.detach().clone() for k, v in self.online.items()},
            long=None if self.long is None else {k: v.detach().clone() for k, v in self.long.items()},
        )

    def to_dict(self) -> Dict:
        out = {"online": {k: v.tolist() for k, v in self.online.items()}}
        if self.long is not None:
            out["long"] = {k: v.tolist() for k, v in self.long.items()}
        return out


@dataclass
class Batch:
    x: torch.Tensor
    x1: torch.Tensor
    x2: torch.Tensor
    x3: Optional[torch.Tensor] = None  # augmented view of x for the with_aug variant


@dataclass
class TrainMetrics:
    steps: List[int] = field(default_factory=list)
    series: Dict[str, List[float]] = field(default_factory=dict)

    def record(self, step: int, values: Mapping[str, float]) -> None:
        self.steps.append(step)
        for key, value in values.items():
            self.series.setdefault(key, []).append(float(value))

    def columns(self) -> List[str]:
        return ["step"] + list(self.series)

    def rows(self):
        keys = list(self.series)
        for i, step in enumerate(self.steps):
            yield [step] + [self.series[k][i] for k in keys]

    def final(self, key: str) -> float:
        return self.series[key][-1]


# =============================================================================
# Data and parameters
# =============================================================================


def sample_batch(n: int, d: int, sigma2: float, rng: np.random.Generator, with_aug: bool = False) -> Batch:
    """x ~ N(0, I_d); views x + sqrt(sigma2) * noise, drawn independently."""
    if n < 1 or d < 1:
        raise ConfigError(f"need n, d >= 1, got n={n}, d={d}")
    if sigma2 < 0:
        raise ConfigError(f"sigma2 must be >= 0, got {sigma2}")
    std = np.sqrt(sigma2)
    x = rng.standard_normal((n, d))
    x1 = x + std * rng.standard_normal((n, d))
    x2 = x + std * rng.standard_normal((n, d))
    x3 = x + std * rng.standard_normal((n, d)) if with_aug else None
    as_tensor = lambda a: None if a is None else torch.from_numpy(a).to(DTYPE)  # noqa: E731
    return Batch(x=as_tensor(x), x1=as_tensor(x1), x2=as_tensor(x2), x3=as_tensor(x3))


def parameter_shapes(config: TrainerConfig) -> Dict[str, Tuple[int, int]]:
    m, d, k = config.m, config.d, config.hidden_width
    shapes = {"wf": (m, d)}
    if config.arch == "linear":
        shapes["wh"] = (m, m)
        if config.model != "simsiam":
            shapes["wg"] = (m, m)
    else:
        shapes.update({"h_in": (k, m), "h_out": (m, k)})
        if config.model != "simsiam":
            shapes.update({"g_in": (k, m), "g_out": (m, k)})
    return shapes


def init_state(config: TrainerConfig, rng: np.random.Generator) -> ModelState:
    """I.i.d. normal entries with std init_scale, or 1/sqrt(fan_in) by default."""
    online = {}
    for name, (rows, cols) in parameter_shapes(config).items():
        std = config.init_scale if config.init_scale is not None else 1.0 / np.sqrt(cols)
        online[name] = torch.from_numpy(std * rng.standard_normal((rows, cols))).to(DTYPE)
    long = {"wf": online["wf"].clone()} if config.model == "xphinet" else None
    return ModelState(online=online, long=long)


def params_of(state: ModelState) -> MatrixParams:
    """Linear-arch state as numpy MatrixParams (wg None for SimSiam)."""
    p = state.online
    if "wh" not in p:
        raise ModeError("params_of needs the linear arch")
    return MatrixParams(
        wf=p["wf"].numpy().copy(),
        wh=p["wh"].numpy().copy(),
        wg=p["wg"].numpy().copy() if "wg" in p else None,
    )


# =============================================================================
# Losses
# =============================================================================


def _norm_guarded(v: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    norms = v.norm(dim=1, keepdim=True)
    return v / (norms + COSINE_EPS), bool((norms < COSINE_EPS).any())


def _distance(p: torch.Tensor, z: torch.Tensor, kind: str) -> Tuple[torch.Tensor, bool]:
    """Batch-mean negative cosine, or half squared error, between p and (detached) z."""
    if kind == "mse":
        return 0.5 * ((p - z) ** 2).sum(dim=1).mean(), False
    p_unit, p_flag = _norm_guarded(p)
    z_unit, z_flag = _norm_guarded(z)
    return -(p_unit * z_unit).sum(dim=1).mean(), p_flag or z_flag


def _h(params: Mapping[str, torch.Tensor], z: torch.Tensor) -> torch.Tensor:
    if "wh" in params:
        return z @ params["wh"].T
    return torch.relu(z @ params["h_in"].T) @ params["h_out"].T


def _g(params: Mapping[str, torch.Tensor], y: torch.Tensor, tanh_output: bool) -> torch.Tensor:
    if "wg" in params:
        return y @ params["wg"].T
    out = torch.relu(y @ params["g_in"].T) @ params["g_out"].T
    return torch.tanh(out) if tanh_output else out


def _losses(
    online: Mapping[str, torch.Tensor],
    target_wf: torch.Tensor,
    long_wf: torch.Tensor,
    batch: Batch,
    config: TrainerConfig,
) -> Tuple[torch.Tensor, torch.Tensor, bool]:
    """(sim1, sim2, guarded) with stop-gradient encodings from ``target_wf`` / ``long_wf``."""
    wf = online["wf"]
    p1 = _h(online, batch.x1 @ wf.T)
    p2 = _h(online, batch.x2 @ wf.T)
    z1 = (batch.x1 @ target_wf.T).detach()
    z2 = (batch.x2 @ target_wf.T).detach()

    d12, flag_a = _distance(p1, z2, config.sim1_loss)
    d21, flag_b = _distance(p2, z1, config.sim1_loss)
    sim1 = 0.5 * (d12 + d21)
    guarded = flag_a or flag_b

    sim2 = torch.zeros((), dtype=DTYPE)
    if config.model != "simsiam":
        source = batch.x3 if (config.with_aug and batch.x3 is not None) else batch.x
        z0 = (source @ long_wf.T).detach()
        y1 = _g(online, p1, config.tanh_output)
        y2 = _g(online, p2, config.tanh_output)
        e1, flag_c = _distance(y1, z0, config.sim2_loss)
        e2, flag_d = _distance(y2, z0, config.sim2_loss)
        sim2 = 0.5 * (e1 + e2)  # mean over views; its expectation is expected_loss
        guarded = guarded or flag_c or flag_d
    return sim1, sim2, guarded


def _long_wf(state: ModelState) -> torch.Tensor:
    if state.long is not None:
        return state.long["wf"]
    return state.online["wf"]


def loss_terms(
    state: ModelState,
    batch: Batch,
    config: TrainerConfig,
    target: Optional[ModelState] = None,
) -> Dict[str, float]:
    """
    Loss values only, with stop-gradient encodings taken from ``target``
    (default: ``state`` itself). Holding ``target`` fixed while perturbing ``state``
    gives the loss whose gradient loss_and_grads returns.
    """
    target = state if target is None else target
    with torch.no_grad():
        sim1, sim2, guarded = _losses(state.online, target.online["wf"], _long_wf(target), batch, config)
    return {"sim1": float(sim1), "sim2": float(sim2), "total": float(sim1 + sim2), "guarded": guarded}


def _closed_form(state: ModelState, config: TrainerConfig) -> Tuple[Dict[str, float], Dict[str, torch.Tensor]]:
    """Expected losses and gradients of the linear MSE model (no sampling)."""
    params = params_of(state)
    total = expected_loss(params, params, config.hyper)
    sim1 = expected_loss(MatrixParams(wf=params.wf, wh=params.wh), MatrixParams(wf=params.wf, wh=params.wh), config.hyper)
    # the exact flow without weight decay is minus the expected gradient
    rates = flow_rhs(params, Hyper(config.sigma2, 0.0), form="exact")
    grads = {name: torch.from_numpy(-mat).to(DTYPE) for name, mat in rates.items()}
    losses = {"sim1": sim1, "sim2": total - sim1, "total": total, "guarded": False}
    return losses, grads


def loss_and_grads(
    state: ModelState,
    batch: Optional[Batch],
    config: TrainerConfig,
) -> Tuple[Dict[str, float], Dict[str, torch.Tensor]]:
    """
    Losses and gradients w.r.t. the online parameters.

    Stop-gradient encodings are detached, so they contribute nothing. In exact mode
    (``batch`` may be None) the closed-form expectations are used instead.
    """
    if config.exact:
        return _closed_form(state, config)
    if batch is None:
        raise ConfigError("a batch is required unless config.exact is set")

    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in state.online.items()}
    sim1, sim2, guarded = _losses(leaves, state.online["wf"], _long_wf(state), batch, config)
    total = sim1 + sim2
    names = list(leaves)
    grads = torch.autograd.grad(total, [leaves[k] for k in names], allow_unused=True)
    grads = {k: (torch.zeros_like(leaves[k]) if g is None else g.detach()) for k, g in zip(names, grads)}
    losses = {"sim1": float(sim1), "sim2": float(sim2), "total": float(total), "guarded": guarded}
    return losses, grads


# =============================================================================
# Updates
# =============================================================================


def sgd_step(state: ModelState, grads: Mapping[str, torch.Tensor], config: TrainerConfig) -> ModelState:
    """theta <- theta - lr * (grad + rho * theta) on the online parameters."""
    online = {}
    for name, theta in state.online.items():
        online[name] = theta - config.lr * (grads[name] + config.rho * theta)
    long = None if state.long is None else {k: v.clone() for k, v in state.long.items()}
    return ModelState(online=online, long=long)


def ema_update(state: ModelState, config: TrainerConfig) -> ModelState:
    """f_long <- beta * f_long + (1 - beta) * f."""
    if config.model != "xphinet" or state.long is None:
        raise ModeError("ema_update applies to xphinet only")
    beta = config.ema_beta
    long = {k: beta * v + (1.0 - beta) * state.online[k] for k, v in state.long.items()}
    return ModelState(online={k: v.clone() for k, v in state.online.items()}, long=long)


# =============================================================================
# Training loop
# =============================================================================


def step_metrics(state: ModelState, losses: Mapping, config: TrainerConfig) -> Dict[str, float]:
    wf = state.online["wf"].numpy()
    values = {"loss_sim1": losses["sim1"], "loss_sim2": losses["sim2"], "loss_total": losses["total"]}
    linear = config.arch == "linear"
    collapse = compute_collapse_metrics(
        wf,
        wh=state.online["wh"].numpy() if linear else None,
        wg=state.online["wg"].numpy() if (linear and "wg" in state.online) else None,
    )
    values["top_eigenvalue"] = collapse["top_eigenvalue"]
    values["stable_rank"] = collapse["stable_rank_wf"]
    values["stable_rank_wg"] = collapse.get("stable_rank_wg", float("nan"))
    values["principal_angle_max"] = collapse.get("principal_angle_max", float("nan"))
    for name, theta in state.online.items():
        values[f"norm_{name}"] = float(theta.norm())
    values["cosine_guarded"] = float(losses["guarded"])
    return values


def _check_finite(state: ModelState, step: int) -> None:
    for name, theta in state.online.items():
        norm = float(theta.norm())
        if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
            raise DivergenceError(
                f"Training diverged at step {step} ({name} norm {norm:.3g})",
                last_finite_step=step - 1,
                diagnostics={"parameter": name, "norm": norm},
            )


def train(
    config: TrainerConfig,
    init: Optional[ModelState] = None,
    verbose: bool = False,
) -> Tuple[ModelState, TrainMetrics]:
    """
    sample -> loss_and_grads -> sgd_step (-> ema_update) for config.steps iterations.

    Deterministic given config.seed. Metrics are recorded at step 0, every
    ``record_every`` steps and at the last step.
    """
    torch.set_num_threads(THREADS)
    rng = np.random.default_rng(config.seed)
    state = init_state(config, rng) if init is None else init.clone()
    if config.model == "xphinet" and state.long is None:
        state.long = {"wf": state.online["wf"].clone()}

    metrics = TrainMetrics()
    if verbose:
        print("=" * 60)
        print(f"Training {config.model} ({config.arch}, sim1={config.sim1_loss}, sim2={config.sim2_loss})")
        print(f"sigma2={config.sigma2:g}  rho={config.rho:g}  lr={config.lr:g}  steps={config.steps}")
        print("=" * 60)

    def draw() -> Optional[Batch]:
        if config.exact:
            return None
        return sample_batch(config.batch, config.d, config.sigma2, rng, with_aug=config.with_aug)

    batch = draw()
    losses, grads = loss_and_grads(state, batch, config)
    metrics.record(0, step_metrics(state, losses, config))

    for step in range(1, config.steps + 1):
        state = sgd_step(state, grads, config)
        if config.model == "xphinet":
            state = ema_update(state, config)
        _check_finite(state, step)

        batch = draw()
        losses, grads = loss_and_grads(state, batch, config)
        if step % config.record_every == 0 or step == config.steps:
            metrics.record(step, step_metrics(state, losses, config))
            if verbose and step % max(1, config.steps // 10) == 0:
                print(f"[{step}/{config.steps}] loss={losses['total']:.6g}  "
                      f"top_eig={metrics.final('top_eigenvalue'):.4g}")

    if verbose:
        print(f"  ✓ Done. Final top eigenvalue of Phi: {metrics.final('top_eigenvalue'):.6g}")
    return state, metrics


# =============================================================================
# Flow agreement
# =============================================================================


def flow_agreement(config: TrainerConfig, horizon: float, init: Optional[ModelState] = None) -> float:
    """
    Max parameter deviation between training and the exact gradient flow at time horizon.

    Training runs horizon / lr steps; the flow is integrated with rk4 at a step no
    larger than lr, so the deviation measures the SGD (Euler) discretisation and,
    outside exact mode, the sampling noise.
    """
    if not config.is_closed_form:
        raise ConfigError("flow_agreement needs arch=linear, sim1_loss=mse, sim2_loss=mse (simsiam or phinet)")
    if not config.exact and config.batch < 10_000:
        raise ConfigError("flow_agreement needs exact mode or batch >= 10000")
    if not (np.isfinite(horizon) and horizon > 0):
        raise ConfigError(f"horizon must be a positive finite number, got {horizon}")
    steps = int(round(horizon / config.lr))
    if steps < 1 or abs(steps * config.lr - horizon) > 1e-9 * horizon:
        raise ConfigError(f"horizon {horizon} is not a whole number of lr={config.lr} steps")

    run = dataclasses.replace(config, steps=steps, record_every=steps)
    start = init_state(run, np.random.default_rng(run.seed)) if init is None else init.clone()
    final, _ = train(run, init=start)

    flow_steps = max(steps, 1000)
    trajectory = integrate_flow(params_of(start), config.hyper, horizon / flow_steps, flow_steps, form="exact")
    flow_final = trajectory.final
    return float(np.max(np.abs(params_of(final).flatten() - flow_final.flatten())))


def flow_agreement_ratio(config: TrainerConfig, horizon: float) -> float:
    """deviation(lr) / deviation(lr / 2) from a shared init; about 2 for a first-order method."""
    start = init_state(config, np.random.default_rng(config.seed))
    coarse = flow_agreement(config, horizon, init=start)
    fine = flow_agreement(dataclasses.replace(config, lr=config.lr / 2), horizon, init=start)
    return coarse / fine if fine > 0 else float("inf")
