"""Train/test splits, free-running forecasts, RMSE and the bullwhip ratio."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .core import STATE_VARS, VAR_INDEX, GridMismatchError, TimeGrid, Trajectory
from .demand import Regime, generate
from .dynamics import simulate
from .models import ModelKind, fit_input_norm
from .training import LossSpec, TrainReport, _derive_seed, rollout_states, train

log = logging.getLogger(__name__)

RESULTS_HEADER = (
    "regime", "model", "p", "seed", "rmse_I", "rmse_O", "rmse_D",
    "train_loss", "bullwhip_true", "bullwhip_pred", "flags",
)

INIT_STREAM = 1


class DegenerateSplitError(ValueError):
    pass


def boundary_index(n_steps: int, p: float) -> int:
    """``round(p * n_steps)`` with halves rounded up."""
    return int(np.floor(p * n_steps + 0.5))


def split(traj: Trajectory, p: float) -> tuple[Trajectory, Trajectory]:
    """Training prefix ``0..k`` and test suffix ``k..n``; point ``k`` is in both."""
    if not 0 < p < 1:
        raise DegenerateSplitError(f"split fraction must lie in (0, 1), got {p}")
    n = traj.grid.n_steps
    k = boundary_index(n, p)
    if k <= 0 or k >= n:
        raise DegenerateSplitError(f"p={p} on {n} steps puts the boundary at index {k}")
    return traj.slice(0, k), traj.slice(k, n)


@dataclass
class Forecast:
    trajectory: Trajectory
    n_valid: int  # points that were actually integrated (all of them unless the rollout blew up)

    @property
    def blew_up(self) -> bool:
        return self.n_valid < self.trajectory.grid.n_points


def forecast(model, boundary_state, test_grid: TimeGrid) -> Forecast:
    """Integrate ``model`` from the true boundary state with no access to later data."""
    states, n_done = rollout_states(model, boundary_state, test_grid)
    if n_done < test_grid.n_steps:
        states = states.copy()
        states[n_done + 1 :] = np.nan
    return Forecast(Trajectory(test_grid, states), n_done + 1)


def rmse(pred: Trajectory, truth: Trajectory, var: str, skip_first: bool = False) -> float:
    """Root-mean-square error of one variable over the shared grid.

    ``skip_first`` drops the initial point (the given forecast initial
    condition). NaN entries (after a blow-up) are excluded.
    """
    if not pred.grid.same_as(truth.grid):
        raise GridMismatchError("prediction and truth grids differ")
    j = VAR_INDEX[var]
    a, b = pred.states[:, j], truth.states[:, j]
    if skip_first:
        a, b = a[1:], b[1:]
    ok = np.isfinite(a)
    if not ok.any():
        return float("nan")
    return float(np.sqrt(np.mean((a[ok] - b[ok]) ** 2)))


def bullwhip_ratio(traj: Trajectory) -> float | None:
    """Sample variance of O over sample variance of D; ``None`` when Var(D) is zero."""
    if len(traj) < 2:
        raise ValueError("bullwhip ratio needs at least two points")
    O = traj.O[np.isfinite(traj.O)]
    D = traj.D[np.isfinite(traj.D)]
    if len(O) < 2 or len(D) < 2:
        return None
    vd = float(np.var(D, ddof=1))
    if vd <= 0 or not np.isfinite(vd):
        return None
    return float(np.var(O, ddof=1)) / vd


@dataclass
class EvalReport:
    regime: str
    model: str
    p: float
    seed: int
    rmse: dict[str, float]
    train_loss: float
    bullwhip_true: float | None
    bullwhip_pred: float | None
    flags: list[str] = field(default_factory=list)
    truth: Trajectory | None = field(default=None, repr=False)
    prediction: Trajectory | None = field(default=None, repr=False)
    train_report: TrainReport | None = field(default=None, repr=False)

    def row(self) -> list[str]:
        from .core import fmt_float

        def num(v):
            return "" if v is None else fmt_float(v)

        return [
            self.regime, self.model, f"{self.p:g}", str(self.seed),
            num(self.rmse["I"]), num(self.rmse["O"]), num(self.rmse["D"]),
            num(self.train_loss), num(self.bullwhip_true), num(self.bullwhip_pred),
            ";".join(self.flags),
        ]


def demand_seed(seed: int) -> int:
    return seed


def init_seed(seed: int) -> int:
    """Network-initialization seed, a separate stream from the demand draws."""
    return _derive_seed(seed, INIT_STREAM)


def make_truth(cfg: ExperimentConfig, regime: Regime, seed: int) -> Trajectory:
    demand = generate(cfg.demand_config(regime, demand_seed(seed)), cfg.grid())
    return simulate(cfg.phys, demand)


def fit_cell(cfg: ExperimentConfig, regime: Regime, kind: ModelKind, train_seg: Trajectory, seed: int):
    """Train one model on a training segment only; returns ``(model, TrainReport)``."""
    return train(
        kind,
        train_seg,
        LossSpec.for_kind(kind),
        cfg.budget,
        init_seed(seed),
        norm=fit_input_norm(train_seg),
        phys=cfg.phys,
        drift=cfg.drift(regime),
        arch=cfg.arch(kind),
    )


def run_cell(cfg: ExperimentConfig, regime: Regime | str, kind: ModelKind | str, p: float, seed: int) -> EvalReport:
    """Generate, simulate, split, fit, forecast and score one (regime, model, p, seed) cell.

    Failures become flags on the report; nothing here aborts a sweep.
    """
    regime = Regime.parse(regime) if isinstance(regime, str) else regime
    kind = ModelKind.parse(kind) if isinstance(kind, str) else kind
    flags: list[str] = []
    nan = float("nan")
    truth = make_truth(cfg, regime, seed)
    train_seg, test_seg = split(truth, p)
    if regime is Regime.GAUSSIAN:
        n_neg = int(np.sum(truth.D < 0))
        if n_neg:
            log.info("Gaussian seed %d: %d negative demand draws (kept)", seed, n_neg)
    try:
        model, report = fit_cell(cfg, regime, kind, train_seg, seed)
    except Exception as exc:  # keep the sweep alive
        log.exception("training failed for %s/%s/p=%g/seed=%d", regime.value, kind.value, p, seed)
        return EvalReport(regime.value, kind.value, p, seed, dict.fromkeys(STATE_VARS, nan), nan,
                          None, None, [f"train_error={type(exc).__name__}"], truth)
    flags.extend(report.flags)
    if report.final_loss >= 1e10:
        flags.append("train_penalty")
    fc = forecast(model, test_seg.states[0], test_seg.grid)
    if fc.blew_up:
        flags.append(f"forecast_blowup_after={fc.n_valid - 1}")
    scores = {v: rmse(fc.trajectory, test_seg, v, skip_first=True) for v in STATE_VARS}
    scored_truth = test_seg.slice(1, test_seg.grid.n_steps) if test_seg.grid.n_steps > 1 else test_seg
    scored_pred = fc.trajectory.slice(1, test_seg.grid.n_steps) if test_seg.grid.n_steps > 1 else fc.trajectory
    return EvalReport(
        regime.value, kind.value, p, seed, scores, report.final_loss,
        bullwhip_ratio(scored_truth), bullwhip_ratio(scored_pred), flags,
        truth, fc.trajectory, report,
    )
