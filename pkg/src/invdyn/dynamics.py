"""Ground-truth inventory dynamics and the fixed-step Tsit5 integrator."""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .core import PhysicalParams, SystemState, Trajectory
from .demand import DemandSeries

# Tsitouras (2011) 5(4) pair. Only the 5th-order propagating weights are used;
# the last row of A equals B (FSAL), so stage 7 never contributes to a step.
TSIT5_C = np.array([0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0])
TSIT5_A = np.zeros((7, 7))
TSIT5_A[1, :1] = [0.161]
TSIT5_A[2, :2] = [-0.008480655492356989, 0.335480655492357]
TSIT5_A[3, :3] = [2.897153057105493, -6.359448489975075, 4.3622954328695815]
TSIT5_A[4, :4] = [5.325864828439257, -11.748883564062828, 7.4955393428898365, -0.09249506636175525]
TSIT5_A[5, :5] = [
    5.86145544294642, -12.92096931784711, 8.159367898576159,
    -0.071584973281401, -0.028269050394068383,
]
TSIT5_A[6, :6] = [
    0.09646076681806523, 0.01, 0.4798896504144996,
    1.379008574103742, -3.290069515436081, 2.324710524099774,
]
TSIT5_B = TSIT5_A[6, :6].copy()
N_STAGES = 6

BLOWUP_LIMIT = 1e9

Rhs = Callable[[float, np.ndarray], np.ndarray]


class IntegrationBlowup(ArithmeticError):
    """A stage value or state left the finite range (or exceeded ``BLOWUP_LIMIT``)."""

    def __init__(self, t: float, state, message: str = "integration blew up"):
        self.t = t
        self.state = np.array(state, dtype=float)
        super().__init__(f"{message} at t={t:.6g}, state={self.state.tolist()}")


class Derivative(NamedTuple):
    dI: float
    dO: float
    dD: float


def true_rhs(state, p: PhysicalParams, d_drive: float) -> Derivative:
    """Inventory balance and order-up-to policy with demand held at ``d_drive``."""
    I, O, _ = state
    return Derivative(
        O - d_drive,
        (d_drive + p.alpha * (p.I_target - I) - O) / p.tau,
        0.0,
    )


def _check(t, x):
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > BLOWUP_LIMIT:
        raise IntegrationBlowup(t, x)


def tsit5_step(rhs: Rhs, state, t: float, dt: float):
    """Advance ``state`` by one fixed Tsit5 step (5th-order solution, no error control).

    ``rhs(t, x)`` must return an array-like of the same length as ``x``.
    Returns a ``SystemState`` when given one, else an ndarray.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(state, dtype=float)
    k = np.empty((N_STAGES, x.size))
    for i in range(N_STAGES):
        y = x + dt * (TSIT5_A[i, :i] @ k[:i]) if i else x
        k[i] = rhs(t + TSIT5_C[i] * dt, y)
        if not np.all(np.isfinite(k[i])):
            raise IntegrationBlowup(t, y, f"non-finite stage {i + 1}")
    out = x + dt * (TSIT5_B @ k)
    _check(t + dt, out)
    if isinstance(state, SystemState):
        return SystemState(*map(float, out))
    return out


def simulate(p: PhysicalParams, demand: DemandSeries, init: SystemState | None = None) -> Trajectory:
    """Closed-loop ground truth: demand is held constant within each step.

    The stored D at each grid point is the demand sample there; (I, O) are
    integrated with the demand of the step's left endpoint.
    """
    grid = demand.grid
    dt = grid.dt
    x0 = np.asarray(p.equilibrium() if init is None else init, dtype=float)
    times = grid.times()
    out = np.empty((grid.n_points, 3))
    out[0] = x0
    x = x0.copy()
    for n in range(grid.n_steps):
        d = float(demand.values[n])
        x = tsit5_step(lambda t, s: true_rhs(s, p, d), x, float(times[n]), dt)
        x[2] = demand.values[n + 1]
        out[n + 1] = x
    return Trajectory(grid, out)


class ForcedTruth:
    """Ground-truth vector field driven by a demand schedule, usable by ``training.rollout``.

    During step ``n`` demand is held at ``values[n]`` and the D slot moves
    linearly to ``values[n+1]``, so a fixed-step rollout lands on the samples.
    """

    def __init__(self, p: PhysicalParams, demand: DemandSeries):
        self.p = p
        self.demand = demand

    def at_step(self, n: int) -> Rhs:
        d = float(self.demand.values[n])
        slope = (float(self.demand.values[n + 1]) - d) / self.demand.grid.dt
        p = self.p

        def rhs(t, x):
            dI, dO, _ = true_rhs(x, p, d)
            return np.array([dI, dO, slope])

        return rhs
