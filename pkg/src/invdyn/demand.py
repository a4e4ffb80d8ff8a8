"""Seeded exogenous demand series for the three regimes.

Random numbers come from NumPy's ``Generator`` over the PCG64 bit generator
(PCG-XSL-RR 128/64, O'Neill 2014), seeded directly with the integer seed.
Standard normals use NumPy's 256-layer ziggurat sampler
(``Generator.standard_normal``). Reference vectors for portability checks::

    seed 0  -> 0.1257302210933933, -0.1321048632913019, 0.6404226504432821
    seed 42 -> 0.30471707975443135, -1.0399841062404955, 0.7504511958064572

Every generator draws exactly ``n_steps`` standard normals, in order, and
uses draw ``k`` for grid point ``k + 1``; point 0 is always ``mu``.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import TimeGrid, fmt_float


class Regime(str, enum.Enum):
    AR1 = "AR1"
    GAUSSIAN = "Gaussian"
    LOGNORMAL = "Lognormal"

    @classmethod
    def parse(cls, name: str) -> "Regime":
        key = name.strip().lower().replace("(", "").replace(")", "")
        for r in cls:
            if r.value.lower() == key:
                return r
        raise ValueError(f"unknown demand regime {name!r}; expected one of {[r.value for r in cls]}")


class StationarityError(ValueError):
    pass


# Per-regime defaults for the shock scale
DEFAULT_SIGMA = {Regime.AR1: 3.0, Regime.GAUSSIAN: 5.0, Regime.LOGNORMAL: 0.0}


@dataclass(frozen=True)
class DemandConfig:
    regime: Regime
    mu: float = 10.0
    phi: float = 0.6
    sigma: float | None = None
    sigma_tilde: float = 2.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime.parse(self.regime) if isinstance(self.regime, str) else self.regime)
        if self.sigma is None:
            object.__setattr__(self, "sigma", DEFAULT_SIGMA[self.regime])
        if self.sigma < 0 or self.sigma_tilde < 0:
            raise ValueError("demand standard deviations must be non-negative")

    def with_seed(self, seed: int) -> "DemandConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True, eq=False)
class DemandSeries:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.n_points,):
            raise ValueError(f"expected {self.grid.n_points} demand values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("demand series contains non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        buf.write("t,D\n")
        for t, d in zip(self.grid.times(), self.values):
            buf.write(f"{fmt_float(t)},{fmt_float(d)}\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_bytes(text.encode())
        return text


def _shocks(seed: int, n: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(n)


def gen_ar1(cfg: DemandConfig, grid: TimeGrid) -> DemandSeries:
    """AR(1) demand ``D[n+1] = mu + phi*(D[n] - mu) + eps[n]``, ``eps ~ N(0, sigma^2)``.

    At spacing ``dt`` this is the exact sampling of an Ornstein-Uhlenbeck
    process with relaxation rate ``-ln(phi)/dt``.
    """
    if not abs(cfg.phi) < 1:
        raise StationarityError(f"AR(1) requires |phi| < 1, got phi={cfg.phi}")
    eps = cfg.sigma * _shocks(cfg.seed, grid.n_steps)
    d = np.empty(grid.n_points)
    d[0] = cfg.mu
    for n in range(grid.n_steps):
        d[n + 1] = cfg.mu + cfg.phi * (d[n] - cfg.mu) + eps[n]
    return DemandSeries(grid, d)


def gen_gaussian(cfg: DemandConfig, grid: TimeGrid) -> DemandSeries:
    z = _shocks(cfg.seed, grid.n_steps)
    return DemandSeries(grid, np.concatenate([[cfg.mu], cfg.mu + cfg.sigma * z]))


def gen_lognormal(cfg: DemandConfig, grid: TimeGrid) -> DemandSeries:
    """Multiplicative shocks with ``ln(D/mu) ~ N(0, sigma_tilde^2)``; median ``mu``, mean ``mu*exp(sigma_tilde^2/2)``."""
    z = _shocks(cfg.seed, grid.n_steps)
    return DemandSeries(grid, np.concatenate([[cfg.mu], cfg.mu * np.exp(cfg.sigma_tilde * z)]))


_GENERATORS = {
    Regime.AR1: gen_ar1,
    Regime.GAUSSIAN: gen_gaussian,
    Regime.LOGNORMAL: gen_lognormal,
}


def generate(cfg: DemandConfig, grid: TimeGrid) -> DemandSeries:
    return _GENERATORS[cfg.regime](cfg, grid)


def fit_ar1_phi(values: np.ndarray, mu: float | None = None) -> float:
    """Least-squares lag-1 coefficient of a demand series around ``mu`` (sample mean if omitted)."""
    x = np.asarray(values, dtype=float)
    m = x.mean() if mu is None else mu
    a, b = x[:-1] - m, x[1:] - m
    return float(a @ b / (a @ a))
