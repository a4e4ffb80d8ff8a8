"""Experiment configuration: an INI file with one section per concern.

Example (all keys optional; these are the defaults)::

    [experiment]
    regimes = AR1, Gaussian, Lognormal
    splits = 0.5, 0.6, 0.7, 0.8, 0.9
    featured_splits = 0.9, 0.6
    seeds = 0, 1, 2, 3, 4
    horizon = 30
    dt = 0.2

    [physics]
    tau = 5
    alpha = 0.8
    I_target = 100
    mu = 10

    [demand]
    phi = 0.6
    sigma_ar1 = 3
    sigma_gaussian = 5
    sigma_tilde = 2

    [node]
    widths = 3, 64, 64, 3
    activation = leakyrelu

    [ude]
    widths = 3, 16, 16, 1
    activation = tanh
    drift_rate = auto

    [optimizer]
    adam_iters = 300
    adam_lr = 0.01
    bfgs_iters = 200
    bfgs_tol = 1e-8

    [output]
    dir = results
    plots = false

Keys are addressed as ``section.key`` in overrides, e.g. ``demand.sigma_gaussian=0``.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .core import PhysicalParams, make_grid
from .demand import DemandConfig, Regime
from .models import DemandDriftSpec, default_drift
from .nnet import NODE_ARCH, UDE_ARCH, Activation, MlpArch
from .training import OptimizerBudget

OUT_ENV_VAR = "INVDYN_OUT"


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(";", ",").split(",") if x.strip())


def _list(values) -> str:
    return ", ".join(str(v) for v in values)


@dataclass(frozen=True)
class ExperimentConfig:
    regimes: tuple[Regime, ...] = (Regime.AR1, Regime.GAUSSIAN, Regime.LOGNORMAL)
    splits: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9)
    featured_splits: tuple[float, ...] = (0.9, 0.6)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    horizon: float = 30.0
    dt: float = 0.2
    phys: PhysicalParams = field(default_factory=PhysicalParams)
    phi: float = 0.6
    sigma_ar1: float = 3.0
    sigma_gaussian: float = 5.0
    sigma_tilde: float = 2.0
    node_arch: MlpArch = NODE_ARCH
    ude_arch: MlpArch = UDE_ARCH
    drift_rate: float | None = None
    budget: OptimizerBudget = field(default_factory=OptimizerBudget)
    out_dir: str = "results"
    emit_plots: bool = False

    def __post_init__(self):
        if not self.regimes or not self.splits or not self.seeds:
            raise ConfigError("regimes, splits and seeds must be non-empty")
        for p in (*self.splits, *self.featured_splits):
            if not 0 < p < 1:
                raise ConfigError(f"split fractions must lie in (0, 1), got {p}")
        if not abs(self.phi) < 1:
            raise ConfigError(f"demand.phi must satisfy |phi| < 1, got {self.phi}")
        try:
            make_grid(0.0, self.horizon, self.dt)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def grid(self):
        return make_grid(0.0, self.horizon, self.dt)

    def demand_config(self, regime: Regime, seed: int) -> DemandConfig:
        sigma = {Regime.AR1: self.sigma_ar1, Regime.GAUSSIAN: self.sigma_gaussian}.get(regime, 0.0)
        return DemandConfig(regime, self.phys.mu, self.phi, sigma, self.sigma_tilde, seed)

    def drift(self, regime: Regime) -> DemandDriftSpec:
        if self.drift_rate is not None:
            return DemandDriftSpec(self.drift_rate, self.phys.mu)
        return default_drift(regime, self.phys.mu, self.dt, self.phi)

    def arch(self, kind) -> MlpArch:
        return self.node_arch if str(getattr(kind, "value", kind)).upper() == "NODE" else self.ude_arch

    # -- serialization -------------------------------------------------------

    def to_parser(self) -> configparser.ConfigParser:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["experiment"] = {
            "regimes": _list(r.value for r in self.regimes),
            "splits": _list(self.splits),
            "featured_splits": _list(self.featured_splits),
            "seeds": _list(self.seeds),
            "horizon": repr(self.horizon),
            "dt": repr(self.dt),
        }
        cp["physics"] = {k: repr(getattr(self.phys, k)) for k in ("tau", "alpha", "I_target", "mu")}
        cp["demand"] = {k: repr(getattr(self, k)) for k in ("phi", "sigma_ar1", "sigma_gaussian", "sigma_tilde")}
        cp["node"] = {"widths": _list(self.node_arch.layer_widths), "activation": self.node_arch.activation.value}
        cp["ude"] = {
            "widths": _list(self.ude_arch.layer_widths),
            "activation": self.ude_arch.activation.value,
            "drift_rate": "auto" if self.drift_rate is None else repr(self.drift_rate),
        }
        b = self.budget
        cp["optimizer"] = {
            "adam_iters": str(b.adam_iters),
            "adam_lr": repr(b.adam_lr),
            "bfgs_iters": str(b.bfgs_iters),
            "bfgs_tol": repr(b.bfgs_tol),
        }
        cp["output"] = {"dir": self.out_dir, "plots": str(self.emit_plots).lower()}
        return cp

    def to_ini(self) -> str:
        buf = io.StringIO()
        self.to_parser().write(buf)
        return buf.getvalue()

    def config_hash(self) -> str:
        """SHA-256 over every setting that can change a result (output settings excluded)."""
        cp = self.to_parser()
        cp.remove_section("output")
        buf = io.StringIO()
        cp.write(buf)
        return hashlib.sha256(buf.getvalue().encode()).hexdigest()

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser) -> "ExperimentConfig":
        known = cls().to_parser()
        for section in cp.sections():
            if section not in known:
                raise ConfigError(f"unknown config section [{section}]")
            for key in cp[section]:
                if key not in known[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
        get = lambda s, k: cp.get(s, k, fallback=None)  # noqa: E731
        d = cls()
        try:
            regimes = get("experiment", "regimes")
            phys = PhysicalParams(
                tau=float(get("physics", "tau") or d.phys.tau),
                alpha=float(get("physics", "alpha") or d.phys.alpha),
                I_target=float(get("physics", "I_target") or d.phys.I_target),
                mu=float(get("physics", "mu") or d.phys.mu),
            )
            budget = OptimizerBudget(
                adam_iters=int(get("optimizer", "adam_iters") or d.budget.adam_iters),
                adam_lr=float(get("optimizer", "adam_lr") or d.budget.adam_lr),
                bfgs_iters=int(get("optimizer", "bfgs_iters") or d.budget.bfgs_iters),
                bfgs_tol=float(get("optimizer", "bfgs_tol") or d.budget.bfgs_tol),
            )

            def arch(section, default):
                w = get(section, "widths")
                a = get(section, "activation")
                return MlpArch(_ints(w) if w else default.layer_widths, Activation(a.strip().lower()) if a else default.activation)

            rate = (get("ude", "drift_rate") or "auto").strip().lower()

            def num(section, key, default):
                v = get(section, key)
                return default if v is None or v.strip() == "" else float(v)

            return cls(
                regimes=tuple(Regime.parse(r) for r in regimes.split(",")) if regimes else d.regimes,
                splits=_floats(get("experiment", "splits")) if get("experiment", "splits") else d.splits,
                featured_splits=_floats(get("experiment", "featured_splits")) if get("experiment", "featured_splits") else d.featured_splits,
                seeds=_ints(get("experiment", "seeds")) if get("experiment", "seeds") else d.seeds,
                horizon=num("experiment", "horizon", d.horizon),
                dt=num("experiment", "dt", d.dt),
                phys=phys,
                phi=num("demand", "phi", d.phi),
                sigma_ar1=num("demand", "sigma_ar1", d.sigma_ar1),
                sigma_gaussian=num("demand", "sigma_gaussian", d.sigma_gaussian),
                sigma_tilde=num("demand", "sigma_tilde", d.sigma_tilde),
                node_arch=arch("node", d.node_arch),
                ude_arch=arch("ude", d.ude_arch),
                drift_rate=None if rate == "auto" else float(rate),
                budget=budget,
                out_dir=get("output", "dir") or d.out_dir,
                emit_plots=cp.getboolean("output", "plots", fallback=d.emit_plots),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, overrides: list[str]) -> "ExperimentConfig":
        """Apply ``section.key=value`` overrides."""
        cp = self.to_parser()
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            lhs, value = item.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            if section not in cp or key not in cp[section]:
                raise ConfigError(f"unknown config key {lhs.strip()}")
            cp[section][key] = value.strip()
        return ExperimentConfig.from_parser(cp)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if os.environ.get(OUT_ENV_VAR):
        cfg = replace(cfg, out_dir=os.environ[OUT_ENV_VAR])
    if path is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        base = cfg.to_parser()
        for section in cp.sections():
            if section not in base:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in cp[section].items():
                if key not in base[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                base[section][key] = value
        cfg = ExperimentConfig.from_parser(base)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
