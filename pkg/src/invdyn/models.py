"""Learnable vector fields: the black-box NODE and the structured UDE.

Both are autonomous 3-state systems over (I, O, D). The UDE keeps the
inventory balance exactly, adds a scalar learned correction to the order
rate equation, and lets demand relax toward its mean at a known rate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .core import PhysicalParams, Trajectory
from .demand import Regime
from .dynamics import Derivative
from .nnet import (
    NODE_ARCH,
    UDE_ARCH,
    InitScale,
    MlpArch,
    ModelParams,
    init_params,
    mlp_forward,
    mlp_grad,
)

NORM_SCALE_FLOOR = 1e-6


class ModelKind(str, enum.Enum):
    NODE = "NODE"
    UDE = "UDE"

    @classmethod
    def parse(cls, name: str) -> "ModelKind":
        try:
            return cls(name.strip().upper())
        except ValueError:
            raise ValueError(f"unknown model kind {name!r}; expected NODE or UDE") from None


class ModelBlowup(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class InputNorm:
    center: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        c = np.array(self.center, dtype=float)
        s = np.array(self.scale, dtype=float)
        if c.shape != (3,) or s.shape != (3,):
            raise ValueError("center and scale must be 3-vectors")
        if not np.all(s > 0):
            raise ValueError(f"scale must be positive, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> "InputNorm":
        return cls(np.zeros(3), np.ones(3))

    def __call__(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.center) / self.scale


def fit_input_norm(train: Trajectory) -> InputNorm:
    """Per-variable mean and population standard deviation (floored) over the window."""
    s = train.states
    return InputNorm(s.mean(axis=0), np.maximum(s.std(axis=0), NORM_SCALE_FLOOR))


@dataclass(frozen=True)
class DemandDriftSpec:
    """Mean-reverting demand drift ``dD/dt = rate * (mean - D)`` used by the UDE."""

    rate: float
    mean: float
    kind: str = "MeanReverting"

    def __post_init__(self):
        if not (np.isfinite(self.rate) and self.rate >= 0):
            raise ValueError(f"drift rate must be finite and >= 0, got {self.rate}")


def default_drift(regime: Regime | str, mu: float, dt: float, phi: float = 0.6) -> DemandDriftSpec:
    """Expected demand motion per regime.

    AR(1): ``(1 - phi)/dt`` matches the one-step conditional mean
    ``mu + phi*(D - mu)`` under an Euler step. Memoryless regimes revert
    within one step: ``1/dt``.
    """
    regime = Regime.parse(regime) if isinstance(regime, str) else regime
    rate = (1.0 - phi) / dt if regime is Regime.AR1 else 1.0 / dt
    return DemandDriftSpec(rate, mu)


@dataclass(frozen=True, eq=False)
class NodeModel:
    params: ModelParams
    norm: InputNorm

    kind = ModelKind.NODE

    def __call__(self, t, x):
        return np.asarray(node_rhs(self, x))

    def with_flat(self, flat) -> "NodeModel":
        return replace(self, params=self.params.replace_flat(flat))

    def vjp(self, x, u):
        """``(grad_params, grad_x)`` of ``u . f(x)``."""
        gp, gz = mlp_grad(self.params, self.norm(x), u)
        return gp, gz / self.norm.scale


@dataclass(frozen=True, eq=False)
class UdeModel:
    residual_params: ModelParams
    phys: PhysicalParams
    demand_drift: DemandDriftSpec
    norm: InputNorm

    kind = ModelKind.UDE

    def __post_init__(self):
        arch = self.residual_params.arch
        if arch.n_in != 3 or arch.n_out != 1:
            raise ValueError(f"UDE residual must map 3 -> 1, got {arch.layer_widths}")

    @property
    def params(self) -> ModelParams:
        return self.residual_params

    def __call__(self, t, x):
        return np.asarray(ude_rhs(self, x))

    def with_flat(self, flat) -> "UdeModel":
        return replace(self, residual_params=self.residual_params.replace_flat(flat))

    def residual(self, x) -> float:
        return float(mlp_forward(self.residual_params, self.norm(x))[0])

    def vjp(self, x, u):
        p, dr = self.phys, self.demand_drift
        gp, gz = mlp_grad(self.residual_params, self.norm(x), np.array([u[1]]))
        gx = gz / self.norm.scale
        gx[0] += -p.alpha / p.tau * u[1]
        gx[1] += u[0] - u[1] / p.tau
        gx[2] += -u[0] + u[1] / p.tau - dr.rate * u[2]
        return gp, gx


def node_rhs(model: NodeModel, state) -> Derivative:
    y = mlp_forward(model.params, model.norm(state))
    if not np.all(np.isfinite(y)):
        raise ModelBlowup(f"NODE output non-finite at state {list(state)}")
    return Derivative(*map(float, y))


def ude_rhs(model: UdeModel, state) -> Derivative:
    I, O, D = (float(v) for v in state)
    p, dr = model.phys, model.demand_drift
    g = model.residual(state)
    out = Derivative(
        O - D,
        (D + p.alpha * (p.I_target - I) - O) / p.tau + g,
        dr.rate * (dr.mean - D),
    )
    if not all(np.isfinite(out)):
        raise ModelBlowup(f"UDE output non-finite at state {list(state)}")
    return out


def make_model(
    kind: ModelKind | str,
    norm: InputNorm,
    seed: int,
    *,
    phys: PhysicalParams | None = None,
    drift: DemandDriftSpec | None = None,
    arch: MlpArch | None = None,
):
    """Freshly initialized model: standard init for NODE, small init for the UDE residual."""
    kind = ModelKind.parse(kind) if isinstance(kind, str) else kind
    if kind is ModelKind.NODE:
        return NodeModel(init_params(arch or NODE_ARCH, seed, InitScale.STANDARD), norm)
    phys = phys or PhysicalParams()
    drift = drift or DemandDriftSpec(0.0, phys.mu)
    return UdeModel(init_params(arch or UDE_ARCH, seed, InitScale.SMALL), phys, drift, norm)
