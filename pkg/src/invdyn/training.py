"""Trajectory matching: rollouts, the MSE loss and its exact gradient, Adam then BFGS."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import blas

from . import _kernels
from .core import STATE_VARS, VAR_INDEX, PhysicalParams, SystemState, TimeGrid, Trajectory
from .dynamics import IntegrationBlowup, tsit5_step
from .models import (
    DemandDriftSpec,
    InputNorm,
    ModelKind,
    NodeModel,
    UdeModel,
    fit_input_norm,
    make_model,
)
from .nnet import MlpArch

log = logging.getLogger(__name__)

PENALTY = 1e10


@dataclass(frozen=True)
class LossSpec:
    fitted_vars: tuple[str, ...] = STATE_VARS
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        fv = tuple(self.fitted_vars)
        if not fv:
            raise ValueError("fitted_vars must be non-empty")
        bad = [v for v in fv if v not in VAR_INDEX]
        if bad:
            raise ValueError(f"unknown state variables {bad}")
        w = (1.0,) * len(fv) if self.weights is None else tuple(float(x) for x in self.weights)
        if len(w) != len(fv) or min(w) < 0:
            raise ValueError("need one non-negative weight per fitted variable")
        object.__setattr__(self, "fitted_vars", fv)
        object.__setattr__(self, "weights", w)

    @classmethod
    def for_kind(cls, kind: ModelKind | str) -> "LossSpec":
        kind = ModelKind.parse(kind) if isinstance(kind, str) else kind
        return cls(("I", "O")) if kind is ModelKind.UDE else cls(STATE_VARS)

    def weight_vector(self) -> np.ndarray:
        w = np.zeros(3)
        for v, wv in zip(self.fitted_vars, self.weights):
            w[VAR_INDEX[v]] = wv
        return w


@dataclass(frozen=True)
class OptimizerBudget:
    adam_iters: int = 300
    adam_lr: float = 1e-2
    bfgs_iters: int = 200
    bfgs_tol: float = 1e-8

    def __post_init__(self):
        if self.adam_iters < 0 or self.bfgs_iters < 0:
            raise ValueError("iteration budgets must be non-negative")
        if not (self.adam_lr > 0 and self.bfgs_tol > 0):
            raise ValueError("adam_lr and bfgs_tol must be positive")


@dataclass
class OptResult:
    x: np.ndarray
    fun: float
    loss_history: list[float] = field(default_factory=list)
    grad_norm_history: list[float] = field(default_factory=list)
    n_iter: int = 0
    flags: list[str] = field(default_factory=list)


@dataclass
class TrainReport:
    final_loss: float
    loss_history: list[float]
    grad_norm_history: list[float]
    wall_time: float
    phase_boundary: int
    flags: list[str] = field(default_factory=list)
    init_seed: int | None = None

    def to_text(self) -> str:
        from .core import fmt_float

        lines = [
            f"final_loss={fmt_float(self.final_loss)}",
            f"wall_time={self.wall_time:.3f}",
            f"phase_boundary={self.phase_boundary}",
            f"init_seed={'' if self.init_seed is None else self.init_seed}",
            f"flags={';'.join(self.flags)}",
            "loss_history=iter,loss,grad_norm",
        ]
        for k, (f, g) in enumerate(zip(self.loss_history, self.grad_norm_history)):
            lines.append(f"{k},{fmt_float(f)},{fmt_float(g)}")
        return "\n".join(lines) + "\n"


# -- rollouts ------------------------------------------------------------------

def _is_learnable(model) -> bool:
    return isinstance(model, (NodeModel, UdeModel))


def rollout_states(model, init, grid: TimeGrid, fast: bool = True) -> tuple[np.ndarray, int]:
    """States on ``grid`` from ``init`` and the number of steps completed before any blow-up.

    ``model`` is a NODE/UDE model, a plain ``rhs(t, x)`` callable, or an
    object with ``at_step(n) -> rhs`` for step-dependent forcing.
    """
    x0 = np.asarray(init, dtype=float)
    if fast and _is_learnable(model):
        traj, _, _, n_done = _kernels.rollout_packed(_kernels.pack(model), x0, grid.n_steps, grid.dt)
        return traj, int(n_done)
    times = grid.times()
    out = np.zeros((grid.n_points, x0.size))
    out[0] = x0
    x = x0
    for n in range(grid.n_steps):
        rhs = model.at_step(n) if hasattr(model, "at_step") else model
        try:
            x = tsit5_step(rhs, x, float(times[n]), grid.dt)
        except (IntegrationBlowup, ArithmeticError):
            return out, n
        out[n + 1] = x
    return out, grid.n_steps


def rollout(model, init, grid: TimeGrid, fast: bool = True) -> Trajectory:
    """Integrate an autonomous model over ``grid``; raises ``IntegrationBlowup`` on divergence."""
    states, n_done = rollout_states(model, init, grid, fast)
    if n_done < grid.n_steps:
        raise IntegrationBlowup(grid.t0 + n_done * grid.dt, states[n_done], "rollout blew up")
    return Trajectory(grid, states)


# -- loss ------------------------------------------------------------------------

def _loss_terms(pred: np.ndarray, data: np.ndarray, spec: LossSpec):
    w = spec.weight_vector()
    denom = data.shape[0] * len(spec.fitted_vars)
    r = pred - data
    value = float(np.sum(w * r * r) / denom)
    return value, 2.0 * w * r / denom


def loss(model, data: Trajectory, spec: LossSpec | None = None) -> float:
    """MSE of the free rollout from ``data``'s first state; ``PENALTY`` if it blows up."""
    spec = spec or (LossSpec.for_kind(model.kind) if _is_learnable(model) else LossSpec())
    states, n_done = rollout_states(model, data.states[0], data.grid)
    if n_done < data.grid.n_steps:
        return PENALTY
    value = _loss_terms(states, data.states, spec)[0]
    return value if np.isfinite(value) and value < PENALTY else PENALTY


def is_penalty(value: float) -> bool:
    return not value < PENALTY


def loss_grad(model, data: Trajectory, spec: LossSpec | None = None) -> tuple[float, np.ndarray]:
    """Loss and its exact gradient w.r.t. the flat network parameters.

    Differentiates the unrolled fixed-step Tsit5 rollout (discretize, then
    optimize). On blow-up returns ``(PENALTY, zeros)``.
    """
    spec = spec or LossSpec.for_kind(model.kind)
    packed = _kernels.pack(model)
    traj, pres, posts, n_done = _kernels.rollout_packed(packed, data.states[0], data.grid.n_steps, data.grid.dt)
    n_params = model.params.arch.n_params
    if n_done < data.grid.n_steps:
        return PENALTY, np.zeros(n_params)
    value, gtraj = _loss_terms(traj, data.states, spec)
    if not (np.isfinite(value) and value < PENALTY):
        return PENALTY, np.zeros(n_params)
    grad = _kernels.backward_packed(packed, pres, posts, gtraj, data.grid.dt)
    return value, grad


def loss_grad_reference(model, data: Trajectory, spec: LossSpec | None = None) -> tuple[float, np.ndarray]:
    """Pure NumPy counterpart of ``loss_grad``, built on ``tsit5_step`` and ``mlp_grad``."""
    from .dynamics import N_STAGES, TSIT5_A, TSIT5_B

    spec = spec or LossSpec.for_kind(model.kind)
    grid = data.grid
    dt = grid.dt
    x = np.asarray(data.states[0], dtype=float)
    traj = [x]
    stages = []
    for _ in range(grid.n_steps):
        k = np.zeros((N_STAGES, 3))
        ys = np.zeros((N_STAGES, 3))
        for i in range(N_STAGES):
            ys[i] = x + dt * (TSIT5_A[i, :i] @ k[:i])
            k[i] = model(0.0, ys[i])
        x = x + dt * (TSIT5_B @ k)
        traj.append(x)
        stages.append(ys)
    traj = np.array(traj)
    value, gtraj = _loss_terms(traj, data.states, spec)
    grad = np.zeros(model.params.arch.n_params)
    lam = gtraj[-1].copy()
    for n in range(grid.n_steps - 1, -1, -1):
        dk = dt * TSIT5_B[:, None] * lam[None, :]
        lam_new = lam.copy()
        for i in range(N_STAGES - 1, -1, -1):
            gp, gy = model.vjp(stages[n][i], dk[i])
            grad += gp
            lam_new += gy
            dk[:i] += dt * TSIT5_A[i, :i, None] * gy[None, :]
        lam = lam_new + gtraj[n]
    return value, grad


# -- optimizers ------------------------------------------------------------------

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


def adam_run(objective: Objective, params0, budget: OptimizerBudget,
             beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptResult:
    """Full-gradient Adam; returns the best iterate seen."""
    x = np.array(params0, dtype=float)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best_x, best_f = x.copy(), np.inf
    res = OptResult(x, np.inf)
    for it in range(budget.adam_iters + 1):
        f, g = objective(x)
        res.loss_history.append(f)
        res.grad_norm_history.append(float(np.max(np.abs(g))) if g.size else 0.0)
        if f < best_f:
            best_f, best_x = f, x.copy()
        if it == budget.adam_iters:
            break
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** (it + 1))
        vhat = v / (1 - beta2 ** (it + 1))
        x = x - budget.adam_lr * mhat / (np.sqrt(vhat) + eps)
    res.x, res.fun, res.n_iter = best_x, best_f, budget.adam_iters
    if is_penalty(best_f):
        res.flags.append("adam_no_finite_loss")
    return res


def _interpolate(a_lo, a_hi, f_lo, f_hi, d_lo, d_hi):
    """Minimizer of the cubic (or quadratic, if ``d_hi`` is unusable) through the bracket ends."""
    w = a_hi - a_lo
    if np.isfinite(d_hi) and not is_penalty(f_hi):
        d1 = d_lo + d_hi - 3 * (f_lo - f_hi) / (a_lo - a_hi)
        rad = d1 * d1 - d_lo * d_hi
        if rad >= 0:
            d2 = np.copysign(np.sqrt(rad), a_hi - a_lo)
            denom = d_hi - d_lo + 2 * d2
            if denom != 0:
                return a_hi - (a_hi - a_lo) * (d_hi + d2 - d1) / denom
    c = (f_hi - f_lo - d_lo * w) / (w * w)
    if c > 0:
        return a_lo - d_lo / (2 * c)
    return np.nan


def strong_wolfe(phi, f0: float, d0: float, alpha1: float, c1: float = 1e-4, c2: float = 0.9,
                 max_iter: int = 30, alpha_max: float = 1e8):
    """Line search for step lengths satisfying the strong Wolfe conditions.

    ``phi(alpha) -> (f, dphi, payload)``. Returns the payload of the accepted
    step, or ``None`` on failure. Bracketing then zoom with safeguarded
    cubic interpolation (Nocedal & Wright, Algorithms 3.5 and 3.6).
    """

    def zoom(a_lo, a_hi, f_lo, f_hi, d_lo, d_hi):
        for _ in range(max_iter):
            w = a_hi - a_lo
            a = _interpolate(a_lo, a_hi, f_lo, f_hi, d_lo, d_hi)
            lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
            if not np.isfinite(a) or a < lo + 0.1 * abs(w) or a > hi - 0.1 * abs(w):
                a = a_lo + 0.5 * w
            if abs(w) < 1e-16 * max(1.0, abs(a_lo)):
                return None
            f, d, payload = phi(a)
            if f > f0 + c1 * a * d0 or f >= f_lo:
                a_hi, f_hi, d_hi = a, f, d
            else:
                if abs(d) <= -c2 * d0:
                    return payload
                if d * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
                a_lo, f_lo, d_lo = a, f, d
        return None

    a_prev, f_prev, d_prev = 0.0, f0, d0
    a = alpha1
    for i in range(max_iter):
        f, d, payload = phi(a)
        if f > f0 + c1 * a * d0 or (i > 0 and f >= f_prev):
            return zoom(a_prev, a, f_prev, f, d_prev, d)
        if abs(d) <= -c2 * d0:
            return payload
        if d >= 0:
            return zoom(a, a_prev, f, f_prev, d, d_prev)
        a_prev, f_prev, d_prev = a, f, d
        a = min(2.0 * a, alpha_max)
    return None


class _InverseHessian:
    """Dense symmetric inverse-Hessian approximation, upper triangle stored, updated in place."""

    def __init__(self, n: int):
        self.n = n
        self.H = None

    def apply(self, g):
        if self.H is None:
            return g.copy()
        return blas.dsymv(1.0, self.H, g)

    def update(self, s, y) -> bool:
        sy = float(s @ y)
        if not sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        if self.H is None:
            self.H = np.asfortranarray(np.eye(self.n) * (sy / float(y @ y)))
        rho = 1.0 / sy
        Hy = blas.dsymv(1.0, self.H, y)
        c = rho * rho * float(y @ Hy) + rho
        w = -rho * Hy + 0.5 * c * s
        # H <- H + s w^T + w s^T
        self.H = blas.dsyr2(1.0, s, w, a=self.H, overwrite_a=1)
        return True

    def reset(self):
        self.H = None


def bfgs_run(objective: Objective, params0, budget: OptimizerBudget,
             c1: float = 1e-4, c2: float = 0.9) -> OptResult:
    """Dense BFGS with a strong-Wolfe line search; returns the best iterate.

    Stops after ``bfgs_iters`` accepted steps or when ``max|grad| < bfgs_tol``.
    Steps that violate the curvature condition skip the update. A failed line
    search resets the Hessian approximation once; a second consecutive
    failure ends the run with the ``line_search_failed`` flag.
    """
    x = np.array(params0, dtype=float)
    f, g = objective(x)
    res = OptResult(x.copy(), f, [f], [float(np.max(np.abs(g))) if g.size else 0.0])
    if is_penalty(f):
        res.flags.append("bfgs_start_penalty")
        return res
    H = _InverseHessian(x.size)
    f_prev_est = f + 0.5 * np.linalg.norm(g)
    failed_once = False
    n_skipped = 0
    for _ in range(budget.bfgs_iters):
        if np.max(np.abs(g)) < budget.bfgs_tol:
            break
        p = -H.apply(g)
        d0 = float(g @ p)
        # an almost-orthogonal direction means H has collapsed along g
        if not d0 < -1e-12 * np.linalg.norm(g) * np.linalg.norm(p):
            H.reset()
            f_prev_est = f + 0.5 * np.linalg.norm(g)
            p = -g
            d0 = -float(g @ g)
        if H.H is None:
            alpha1 = min(1.0, 1.01 * 2 * (f - f_prev_est) / d0)
            if not alpha1 > 0:
                alpha1 = 1.0
        else:
            alpha1 = 1.0

        def phi(a, x=x, p=p):
            xa = x + a * p
            fa, ga = objective(xa)
            da = float(ga @ p) if not is_penalty(fa) else np.nan
            return fa, da, (xa, fa, ga)

        out = strong_wolfe(phi, f, d0, alpha1, c1, c2)
        if out is None:
            if failed_once or H.H is None:
                res.flags.append("line_search_failed")
                break
            failed_once = True
            H.reset()
            f_prev_est = f + 0.5 * np.linalg.norm(g)
            continue
        failed_once = False
        x_new, f_new, g_new = out
        if not H.update(x_new - x, g_new - g):
            n_skipped += 1
        f_prev_est = f
        x, f, g = x_new, f_new, g_new
        res.n_iter += 1
        res.loss_history.append(f)
        res.grad_norm_history.append(float(np.max(np.abs(g))))
    res.x, res.fun = x, f
    if n_skipped:
        res.flags.append(f"curvature_skips={n_skipped}")
    return res


# -- training --------------------------------------------------------------------

MAX_NODE_RETRIES = 3


def _derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def train(
    kind: ModelKind | str,
    data: Trajectory,
    spec: LossSpec | None = None,
    budget: OptimizerBudget | None = None,
    seed: int = 0,
    *,
    norm: InputNorm | None = None,
    phys: PhysicalParams | None = None,
    drift: DemandDriftSpec | None = None,
    arch: MlpArch | None = None,
):
    """Fit a fresh model to ``data``: initialize, Adam, then BFGS from Adam's best iterate.

    ``norm`` defaults to statistics of ``data``. NODE runs whose every
    iterate blows up are retried with a new initialization, up to
    ``MAX_NODE_RETRIES`` times. Returns ``(model, TrainReport)``.
    """
    kind = ModelKind.parse(kind) if isinstance(kind, str) else kind
    spec = spec or LossSpec.for_kind(kind)
    budget = budget or OptimizerBudget()
    norm = norm or fit_input_norm(data)
    t_start = time.perf_counter()
    flags: list[str] = []
    attempts = 1 + (MAX_NODE_RETRIES if kind is ModelKind.NODE else 0)
    for attempt in range(attempts):
        init_seed = seed if attempt == 0 else _derive_seed(seed, attempt)
        model = make_model(kind, norm, init_seed, phys=phys, drift=drift, arch=arch)

        def objective(flat, model=model):
            return loss_grad(model.with_flat(flat), data, spec)

        adam = adam_run(objective, model.params.flat, budget)
        bfgs = bfgs_run(objective, adam.x, budget)
        if not is_penalty(bfgs.fun) or attempt == attempts - 1:
            break
        flags.append(f"diverged_init_seed={init_seed}")
        log.warning("NODE training diverged with init seed %d; retrying", init_seed)
    fitted = model.with_flat(bfgs.x)
    report = TrainReport(
        final_loss=float(bfgs.fun),
        loss_history=adam.loss_history + bfgs.loss_history,
        grad_norm_history=adam.grad_norm_history + bfgs.grad_norm_history,
        wall_time=time.perf_counter() - t_start,
        phase_boundary=len(adam.loss_history),
        flags=flags + adam.flags + bfgs.flags,
        init_seed=init_seed,
    )
    return fitted, report
