"""
Matrix-level gradient flows of the linear PhiNet / SimSiam analysis model.

The model is f(x) = W_f x, h(z) = W_h z, g(h) = W_g h with inputs x ~ N(0, I) and
views x1, x2 ~ N(x, sigma2 I). Stop-gradient branches are baked into the
closed-form right-hand sides; ``expected_loss`` takes a separate frozen
``target`` copy so that finite-difference gradients of it are well posed.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from config import DEFAULT_METHOD
from errors import ContractError, ModeError, NumericError
from integrate import integrate

FORMS = ("published", "exact")


@dataclass(frozen=True)
class Hyper:
    """Augmentation variance sigma2 and weight decay rho."""

    sigma2: float
    rho: float

    def __post_init__(self):
        for name in ("sigma2", "rho"):
            value = getattr(self, name)
            if not np.isfinite(value):
                raise NumericError(f"{name} must be finite, got {value}")
            if value < 0:
                raise ContractError(f"{name} must be >= 0, got {value}")

    @property
    def scale(self) -> float:
        """1 + sigma2, the second moment of an augmented view."""
        return 1.0 + self.sigma2


@dataclass
class MatrixParams:
    """Weights of the analysis model. ``wg`` is None in SimSiam mode."""

    wf: np.ndarray
    wh: np.ndarray
    wg: Optional[np.ndarray] = None

    def __post_init__(self):
        self.wf = np.atleast_2d(np.asarray(self.wf, dtype=float))
        self.wh = np.atleast_2d(np.asarray(self.wh, dtype=float))
        if self.wg is not None:
            self.wg = np.atleast_2d(np.asarray(self.wg, dtype=float))

        m = self.wf.shape[0]
        if self.wh.shape != (m, m):
            raise ContractError(f"wh must be {m}x{m} to match wf rows, got {self.wh.shape}")
        if self.wg is not None and self.wg.shape != (m, m):
            raise ContractError(f"wg must be {m}x{m} to match wf rows, got {self.wg.shape}")
        for name, mat in self.items():
            if not np.all(np.isfinite(mat)):
                raise NumericError(f"{name} contains non-finite entries")

    @property
    def m(self) -> int:
        return self.wf.shape[0]

    @property
    def d(self) -> int:
        return self.wf.shape[1]

    @property
    def is_simsiam(self) -> bool:
        return self.wg is None

    def items(self):
        """(name, matrix) pairs in flattening order: wf, wg (if present), wh."""
        pairs = [("wf", self.wf)]
        if self.wg is not None:
            pairs.append(("wg", self.wg))
        pairs.append(("wh", self.wh))
        return pairs

    def flatten(self) -> np.ndarray:
        """Row-major concatenation of wf, wg, wh."""
        return np.concatenate([mat.ravel() for _, mat in self.items()])

    def unflatten(self, vec: np.ndarray) -> "MatrixParams":
        """Inverse of flatten, using this instance's shapes."""
        parts = {}
        offset = 0
        for name, mat in self.items():
            size = mat.size
            parts[name] = np.asarray(vec[offset:offset + size]).reshape(mat.shape)
            offset += size
        return MatrixParams(wf=parts["wf"], wh=parts["wh"], wg=parts.get("wg"))

    def column_names(self) -> List[str]:
        names = []
        for name, mat in self.items():
            rows, cols = mat.shape
            names.extend(f"{name}[{i},{j}]" for i in range(rows) for j in range(cols))
        return names

    def norms(self) -> Dict[str, float]:
        return {f"norm_{name}": float(np.linalg.norm(mat)) for name, mat in self.items()}

    def copy(self) -> "MatrixParams":
        return self.unflatten(self.flatten().copy())


@dataclass
class Trajectory:
    """Recorded states of an integrator run, with per-record diagnostics."""

    times: np.ndarray
    states: list
    diagnostics: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.states):
            raise ContractError(
                f"times ({len(self.times)}) and states ({len(self.states)}) must have equal length"
            )
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ContractError("trajectory times must be strictly increasing")
        self.diagnostics = {k: np.asarray(v, dtype=float) for k, v in self.diagnostics.items()}

    def __len__(self) -> int:
        return len(self.states)

    @property
    def final(self):
        return self.states[-1]


INITS = ("random", "random_symmetric", "aligned", "identity", "zero")


def init_params(
    kind: str,
    m: int,
    d: int,
    rng: np.random.Generator,
    scale: float = 0.5,
    simsiam: bool = False,
) -> MatrixParams:
    """
    Initial weights for flow runs.

    random: i.i.d. N(0, scale^2) entries. random_symmetric: as random with wg, wh
    symmetrised. aligned: diagonal wf, wg, wh (all commutators vanish). identity
    and zero are deterministic.
    """
    if kind not in INITS:
        raise ContractError(f"init must be one of {INITS}, got '{kind}'")
    if m < 1 or d < 1:
        raise ContractError(f"need m, d >= 1, got m={m}, d={d}")

    if kind == "zero":
        wf, wh, wg = np.zeros((m, d)), np.zeros((m, m)), np.zeros((m, m))
    elif kind == "identity":
        wf, wh, wg = np.eye(m, d), np.eye(m), np.eye(m)
    elif kind == "aligned":
        wf = np.eye(m, d) * scale * rng.standard_normal(m)[:, None]
        wh = np.diag(scale * rng.standard_normal(m))
        wg = np.diag(scale * rng.standard_normal(m))
    else:
        wf = scale * rng.standard_normal((m, d))
        wh = scale * rng.standard_normal((m, m))
        wg = scale * rng.standard_normal((m, m))
        if kind == "random_symmetric":
            wh, wg = _symmetric(wh), _symmetric(wg)
    return MatrixParams(wf=wf, wh=wh, wg=None if simsiam else wg)


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """[A, B] = AB - BA."""
    return a @ b - b @ a


def phi_of(params: MatrixParams) -> np.ndarray:
    """Encoder Gram matrix Phi = W_f W_f^T (symmetric PSD)."""
    return params.wf @ params.wf.T


def _check_pair(online: MatrixParams, target: MatrixParams) -> None:
    if online.wf.shape != target.wf.shape:
        raise ContractError(f"online wf {online.wf.shape} and target wf {target.wf.shape} differ")
    if online.is_simsiam != target.is_simsiam:
        raise ContractError("online and target must both carry wg, or both omit it")


def expected_loss(online: MatrixParams, target: MatrixParams, hyper: Hyper) -> float:
    """
    Closed-form expectation of the non-symmetrised MSE loss.

    Uses E[x1 x1^T] = (1 + sigma2) I, E[x2 x1^T] = I, E[x x1^T] = I. Stop-gradient
    factors (W_f x2 and W_f x) come from ``target``. SimSiam mode (no wg) keeps the
    first term only.
    """
    _check_pair(online, target)
    s = hyper.scale
    wf, wh = online.wf, online.wh
    wf_sg = target.wf

    pred = wh @ wf
    sg_gram = float(np.sum(wf_sg * wf_sg))
    loss = 0.5 * (s * np.sum(pred * pred) - 2.0 * np.sum(pred * wf_sg) + s * sg_gram)

    if online.wg is not None:
        out = online.wg @ pred
        loss += 0.5 * (s * np.sum(out * out) - 2.0 * np.sum(out * wf_sg) + sg_gram)

    return max(float(loss), 0.0)


def _symmetric(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def grad_flow_rhs(
    params: MatrixParams,
    hyper: Hyper,
    form: str = "published",
    symmetrize: bool = False,
) -> MatrixParams:
    """
    Time derivative (dW_f, dW_g, dW_h) of the PhiNet gradient flow with weight decay.

    ``form="published"`` gives dW_g = -{(1+s2) W_h - I} Phi W_h^T - rho W_g, the
    equation the eigenvalue dynamics are decoupled from. ``form="exact"`` gives the
    true negative gradient -{(1+s2) W_g W_h - I} Phi W_h^T - rho W_g. dW_f and dW_h
    are the same in both. ``symmetrize`` projects dW_g and dW_h onto symmetric
    matrices, keeping W_g and W_h symmetric along the flow.
    """
    if params.wg is None:
        raise ModeError("params have no wg (SimSiam mode); use simsiam_grad_flow_rhs instead")
    if form not in FORMS:
        raise ContractError(f"form must be one of {FORMS}, got '{form}'")

    s, rho = hyper.scale, hyper.rho
    wf, wg, wh = params.wf, params.wg, params.wh
    eye = np.eye(params.m)
    phi = wf @ wf.T

    inner = s * (eye + wg.T @ wg) @ wh - (eye + wg.T)
    d_wf = -wh.T @ inner @ wf - rho * wf
    d_wh = -inner @ phi - rho * wh
    if form == "published":
        d_wg = -(s * wh - eye) @ phi @ wh.T - rho * wg
    else:
        d_wg = -(s * wg @ wh - eye) @ phi @ wh.T - rho * wg

    if symmetrize:
        d_wg = _symmetric(d_wg)
        d_wh = _symmetric(d_wh)

    return MatrixParams(wf=d_wf, wh=d_wh, wg=d_wg)


def simsiam_grad_flow_rhs(params: MatrixParams, hyper: Hyper) -> MatrixParams:
    """SimSiam flow: the PhiNet flow with every W_g term deleted."""
    if params.wg is not None:
        raise ModeError("params carry wg (PhiNet mode); use grad_flow_rhs instead")

    s, rho = hyper.scale, hyper.rho
    wf, wh = params.wf, params.wh
    residual = s * wh - np.eye(params.m)
    d_wf = -wh.T @ residual @ wf - rho * wf
    d_wh = -residual @ (wf @ wf.T) - rho * wh
    return MatrixParams(wf=d_wf, wh=d_wh)


def flow_rhs(params: MatrixParams, hyper: Hyper, form: str = "published", symmetrize: bool = False) -> MatrixParams:
    """Dispatch on mode: PhiNet flow when wg is present, SimSiam flow otherwise."""
    if params.is_simsiam:
        return simsiam_grad_flow_rhs(params, hyper)
    return grad_flow_rhs(params, hyper, form=form, symmetrize=symmetrize)


def flow_diagnostics(params: MatrixParams, hyper: Hyper) -> Dict[str, float]:
    """Loss, Frobenius norms and (PhiNet mode) commutator norms of one state."""
    diag = {"loss": expected_loss(params, params, hyper)}
    diag.update(params.norms())
    if params.wg is not None:
        phi = phi_of(params)
        diag["norm_c1"] = float(np.linalg.norm(commutator(phi, params.wg)))
        diag["norm_c2"] = float(np.linalg.norm(commutator(phi, params.wh)))
        diag["norm_c3"] = float(np.linalg.norm(commutator(params.wg, params.wh)))
    return diag


def integrate_flow(
    init: MatrixParams,
    hyper: Hyper,
    dt: float,
    steps: int,
    method: str = DEFAULT_METHOD,
    form: str = "published",
    symmetrize: bool = False,
    stride: Optional[int] = None,
) -> Trajectory:
    """
    Fixed-step integration of the matrix flow (PhiNet or SimSiam by mode).

    dt times the largest eigenvalue scale of the flow must be small enough for the
    chosen method to be stable; this is the caller's responsibility.
    """

    def rhs(vec: np.ndarray) -> np.ndarray:
        return flow_rhs(init.unflatten(vec), hyper, form=form, symmetrize=symmetrize).flatten()

    def diagnose(vec: np.ndarray) -> Dict[str, float]:
        return flow_diagnostics(init.unflatten(vec), hyper)

    times, states, diagnostics = integrate(
        rhs, init.flatten(), dt, steps, method=method, stride=stride, diagnose=diagnose
    )
    return Trajectory(times=times, states=[init.unflatten(v) for v in states], diagnostics=diagnostics)
