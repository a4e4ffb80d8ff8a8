"""Shared state types, time grids and trajectory containers."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

STATE_VARS = ("I", "O", "D")
VAR_INDEX = {name: k for k, name in enumerate(STATE_VARS)}

_GRID_TOL = 1e-9


class GridMismatchError(ValueError):
    """Raised when a span is not an integer number of steps, or two grids disagree."""


class SystemState(NamedTuple):
    I: float
    O: float
    D: float


@dataclass(frozen=True)
class PhysicalParams:
    """Constants of the order-up-to inventory loop."""

    tau: float = 5.0
    alpha: float = 0.8
    I_target: float = 100.0
    mu: float = 10.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    def equilibrium(self) -> SystemState:
        return SystemState(self.I_target, self.mu, self.mu)


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_steps * self.dt

    def times(self) -> np.ndarray:
        # t0 + k*dt, not cumulative sums, so long horizons do not drift
        return self.t0 + np.arange(self.n_points) * self.dt

    def sub(self, start: int, stop: int) -> "TimeGrid":
        """Grid over point indices ``start..stop`` inclusive."""
        if not 0 <= start < stop <= self.n_steps:
            raise GridMismatchError(f"bad sub-grid [{start}, {stop}] of {self.n_steps} steps")
        return TimeGrid(self.t0 + start * self.dt, self.dt, stop - start)

    def same_as(self, other: "TimeGrid") -> bool:
        return (
            self.n_steps == other.n_steps
            and abs(self.dt - other.dt) <= _GRID_TOL
            and abs(self.t0 - other.t0) <= _GRID_TOL
        )


def make_grid(t0: float, t_end: float, dt: float) -> TimeGrid:
    """Build an equally spaced grid; the span must be a whole number of steps."""
    if not t_end > t0:
        raise ValueError(f"t_end ({t_end}) must exceed t0 ({t0})")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    ratio = (t_end - t0) / dt
    n = round(ratio)
    if abs(ratio - n) > _GRID_TOL or n < 1:
        raise GridMismatchError(f"span {t_end - t0} is not a multiple of dt={dt} (ratio {ratio})")
    return TimeGrid(float(t0), float(dt), int(n))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A state per grid point, stored as an ``(n_points, 3)`` array of (I, O, D)."""

    grid: TimeGrid
    states: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.states, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"states must have shape (n, 3), got {arr.shape}")
        if arr.shape[0] != self.grid.n_points:
            raise GridMismatchError(
                f"{arr.shape[0]} states for a grid of {self.grid.n_points} points"
            )
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "states", arr)

    def __len__(self):
        return self.grid.n_points

    def state(self, k: int) -> SystemState:
        return SystemState(*map(float, self.states[k]))

    @property
    def t(self) -> np.ndarray:
        return self.grid.times()

    @property
    def I(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def O(self) -> np.ndarray:
        return self.states[:, 1]

    @property
    def D(self) -> np.ndarray:
        return self.states[:, 2]

    def column(self, var: str) -> np.ndarray:
        return self.states[:, VAR_INDEX[var]]

    def slice(self, start: int, stop: int) -> "Trajectory":
        """Sub-trajectory over point indices ``start..stop`` inclusive."""
        return Trajectory(self.grid.sub(start, stop), self.states[start : stop + 1])

    def to_csv(self, path: str | Path | None = None) -> str:
        text = _format_rows(("t", *STATE_VARS), np.column_stack([self.t, self.states]))
        if path is not None:
            Path(path).write_bytes(text.encode())
        return text

    @classmethod
    def from_csv(cls, path: str | Path) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t = data[:, 0]
        if len(t) < 2:
            raise GridMismatchError(f"{path}: need at least two rows")
        dt = (t[-1] - t[0]) / (len(t) - 1)
        grid = make_grid(t[0], t[-1], dt)
        if not np.allclose(grid.times(), t, rtol=0, atol=1e-9 * max(1.0, abs(t[-1]))):
            raise GridMismatchError(f"{path}: time column is not equally spaced")
        return cls(grid, data[:, 1:4])


def fmt_float(x: float) -> str:
    # 17 significant digits round-trips any double
    return format(float(x), ".17g")


def _format_rows(header, rows: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(fmt_float(v) for v in row) + "\n")
    return buf.getvalue()


def write_table_csv(path: str | Path, header, rows) -> None:
    Path(path).write_bytes(_format_rows(header, np.asarray(rows, dtype=float)).encode())
