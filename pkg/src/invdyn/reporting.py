"""Results-CSV parsing, Table-style summaries, paired win rates and the headline ordering checks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import STATE_VARS
from .evaluation import RESULTS_HEADER

# (regime, scored variable, model expected to win) at the featured p = 0.9 split
HEADLINES = (
    ("AR1", "I", "UDE"),
    ("Gaussian", "I", "UDE"),
    ("Lognormal", "O", "NODE"),
)
HEADLINE_P = 0.9
MIN_WIN_SHARE = 0.6  # 3 of 5 paired seeds

# NODE inventory error should grow as the training window shrinks
TREND = ("AR1", "I", "NODE", 0.6, 0.9)

# flags that mean a number in the row cannot be trusted; the rest are optimizer diagnostics
NUMERICAL_FLAGS = ("train_penalty", "train_error", "forecast_blowup", "bfgs_start_penalty", "adam_no_finite_loss")


class ResultsParseError(ValueError):
    pass


@dataclass(frozen=True)
class ResultRow:
    regime: str
    model: str
    p: float
    seed: int
    rmse: dict
    train_loss: float
    bullwhip_true: float | None
    bullwhip_pred: float | None
    flags: tuple[str, ...]

    @property
    def numerical_failure(self) -> bool:
        return any(f.startswith(NUMERICAL_FLAGS) for f in self.flags)


def _opt(text: str) -> float | None:
    return None if text == "" else float(text)


def _rmse_value(text: str) -> float:
    return float("nan") if text == "" else float(text)


def parse_results(lines) -> list[ResultRow]:
    """Parse results-CSV lines; errors name the 1-based file row."""
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        return []
    if tuple(header) != RESULTS_HEADER:
        raise ResultsParseError(f"row 1: expected header {','.join(RESULTS_HEADER)}, got {','.join(header)}")
    rows = []
    for rownum, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(RESULTS_HEADER):
            raise ResultsParseError(f"row {rownum}: expected {len(RESULTS_HEADER)} fields, got {len(rec)}")
        try:
            r = dict(zip(RESULTS_HEADER, rec))
            rows.append(ResultRow(
                r["regime"], r["model"], float(r["p"]), int(r["seed"]),
                {v: _rmse_value(r[f"rmse_{v}"]) for v in STATE_VARS},
                _rmse_value(r["train_loss"]), _opt(r["bullwhip_true"]), _opt(r["bullwhip_pred"]),
                tuple(f for f in r["flags"].split(";") if f),
            ))
        except ValueError as exc:
            raise ResultsParseError(f"row {rownum}: {exc}") from None
    return rows


def read_results(path: str | Path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        return parse_results(fh)


def _median(values) -> float:
    # an unscored (NaN) cell counts as arbitrarily bad
    v = np.array([np.inf if not np.isfinite(x) else x for x in values], dtype=float)
    return float(np.median(v)) if v.size else float("nan")


def _cells(rows, regime, model, p):
    return {r.seed: r for r in rows if r.regime == regime and r.model == model and math.isclose(r.p, p)}


def median_rmse(rows, regime, model, p, var) -> float:
    return _median([r.rmse[var] for r in _cells(rows, regime, model, p).values()])


def paired(rows, regime, p, var):
    """``(node, ude)`` RMSE pairs for seeds present under both models."""
    node, ude = _cells(rows, regime, "NODE", p), _cells(rows, regime, "UDE", p)
    return [(node[s].rmse[var], ude[s].rmse[var]) for s in sorted(node.keys() & ude.keys())]


def _less(a, b) -> bool:
    a = np.inf if not np.isfinite(a) else a
    b = np.inf if not np.isfinite(b) else b
    return a < b


def win_rates(rows) -> dict:
    """Per regime and variable: ``(UDE wins, paired cells)`` over all splits and seeds."""
    out = {}
    for regime in sorted({r.regime for r in rows}):
        splits = sorted({r.p for r in rows if r.regime == regime})
        for var in STATE_VARS:
            pairs = [pr for p in splits for pr in paired(rows, regime, p, var)]
            out[(regime, var)] = (sum(_less(u, n) for n, u in pairs), len(pairs))
    return out


@dataclass(frozen=True)
class OrderingCheck:
    regime: str
    var: str
    winner: str
    p: float
    median_node: float
    median_ude: float
    wins: int
    n_pairs: int

    @property
    def median_holds(self) -> bool:
        m_w, m_l = (self.median_node, self.median_ude) if self.winner == "NODE" else (self.median_ude, self.median_node)
        return _less(m_w, m_l)

    @property
    def passed(self) -> bool:
        return self.n_pairs > 0 and self.median_holds and self.wins >= math.ceil(MIN_WIN_SHARE * self.n_pairs - 1e-9)

    def line(self) -> str:
        loser = "UDE" if self.winner == "NODE" else "NODE"
        return (f"{'PASS' if self.passed else 'FAIL'} {self.regime} p={self.p:g}: "
                f"RMSE_{self.var}({self.winner}) < RMSE_{self.var}({loser}); "
                f"median NODE {self.median_node:.4g} vs UDE {self.median_ude:.4g}; "
                f"{self.winner} wins {self.wins}/{self.n_pairs} seeds")


def ordering_check(rows, regime, var, winner, p=HEADLINE_P) -> OrderingCheck:
    pairs = paired(rows, regime, p, var)
    wins = sum(_less(n, u) if winner == "NODE" else _less(u, n) for n, u in pairs)
    return OrderingCheck(regime, var, winner, p, median_rmse(rows, regime, "NODE", p, var),
                         median_rmse(rows, regime, "UDE", p, var), wins, len(pairs))


def headline_checks(rows) -> list[OrderingCheck]:
    return [ordering_check(rows, *h) for h in HEADLINES]


@dataclass(frozen=True)
class TrendCheck:
    regime: str
    var: str
    model: str
    p_small: float
    p_large: float
    median_small: float
    median_large: float

    @property
    def available(self) -> bool:
        # NaN means no cells at that split; inf (all unscored) still counts as data
        return not (np.isnan(self.median_small) or np.isnan(self.median_large))

    @property
    def passed(self) -> bool:
        return _less(self.median_large, self.median_small)

    def line(self) -> str:
        if not self.available:
            return f"N/A {self.regime} {self.model} RMSE_{self.var}: need both p={self.p_small:g} and p={self.p_large:g}"
        return (f"{'PASS' if self.passed else 'FAIL'} {self.regime} {self.model} median RMSE_{self.var} "
                f"p={self.p_small:g} {self.median_small:.4g} > p={self.p_large:g} {self.median_large:.4g} (report-only)")


def trend_check(rows) -> TrendCheck:
    regime, var, model, ps, pl = TREND
    return TrendCheck(regime, var, model, ps, pl,
                      median_rmse(rows, regime, model, ps, var), median_rmse(rows, regime, model, pl, var))


def summary_table(rows, featured_splits) -> tuple[list[str], list[list[str]]]:
    """Median-over-seeds RMSE, one row per (regime, model), columns per featured split and variable."""
    header = ["regime", "model"] + [f"rmse_{v}@{p:g}" for p in featured_splits for v in STATE_VARS]
    regimes = list(dict.fromkeys(r.regime for r in rows))
    body = []
    for regime in regimes:
        for model in ("NODE", "UDE"):
            vals = [median_rmse(rows, regime, model, p, v) for p in featured_splits for v in STATE_VARS]
            body.append([regime, model] + ["" if not np.isfinite(x) else f"{x:.6g}" for x in vals])
    return header, body


def render_markdown(rows, featured_splits=(0.9, 0.6)) -> str:
    lines = ["# NODE vs UDE forecast comparison", ""]
    lines.append(f"Cells: {len(rows)}")
    lines.append("")
    if not rows:
        lines += ["**no data**: the results file holds no cells.", ""]
        return "\n".join(lines)
    n_bad = sum(r.numerical_failure for r in rows)
    lines += [f"Cells with numerical failure flags: {n_bad}", ""]

    lines += ["## Median RMSE over seeds", ""]
    header, body = summary_table(rows, featured_splits)
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    lines += ["| " + " | ".join(b) + " |" for b in body]
    lines.append("")

    lines += ["## UDE win rate (paired cells, all splits)", "", "| regime | I | O | D |", "|---|---|---|---|"]
    rates = win_rates(rows)
    for regime in sorted({r.regime for r in rows}):
        cells = []
        for v in STATE_VARS:
            w, n = rates[(regime, v)]
            cells.append(f"{100 * w / n:.0f}% ({w}/{n})" if n else "n/a")
        lines.append(f"| {regime} | " + " | ".join(cells) + " |")
    lines.append("")

    lines += ["## Headline orderings", ""]
    for c in headline_checks(rows):
        lines.append(f"- {c.line()}" if c.n_pairs else f"- N/A {c.regime} p={c.p:g}: no paired cells")
    lines.append(f"- {trend_check(rows).line()}")
    lines.append("")
    return "\n".join(lines)
