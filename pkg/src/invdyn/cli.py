"""Command-line entry point: ``invdyn simulate | train | evaluate | report``.

Exit codes: 0 success, 2 configuration or input error, 3 at least one cell
hit a numerical failure (blow-up, penalty loss, training exception).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .core import STATE_VARS, PhysicalParams, Trajectory, fmt_float, write_table_csv
from .demand import Regime, generate
from .dynamics import simulate
from .evaluation import (
    RESULTS_HEADER,
    DegenerateSplitError,
    bullwhip_ratio,
    demand_seed,
    fit_cell,
    run_cell,
    split,
)
from .models import DemandDriftSpec, InputNorm, ModelKind, NodeModel, UdeModel
from .nnet import export_text, load_checkpoint, save_checkpoint
from .reporting import ResultsParseError, parse_results, read_results, render_markdown, summary_table
from .training import is_penalty, loss

log = logging.getLogger("invdyn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
HASH_LEN = 12


def _tag(cfg: ExperimentConfig) -> str:
    return cfg.config_hash()[:HASH_LEN]


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    if not out.exists():
        log.info("creating output directory %s", out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, cfg: ExperimentConfig, command: str, files: list[Path]) -> Path:
    path = out / f"manifest_{command}_{_tag(cfg)}.txt"
    lines = [f"command={command}", f"config_hash={cfg.config_hash()}", "files="]
    lines += [f"  {f.name}" for f in sorted(files)]
    # the directory is where the manifest lives; leaving it out keeps equal-hash manifests identical
    cp = cfg.to_parser()
    cp.remove_option("output", "dir")
    buf = io.StringIO()
    cp.write(buf)
    lines += ["config=", buf.getvalue()]
    path.write_text("\n".join(lines))
    return path


# -- model persistence -----------------------------------------------------------

def _vec(v) -> str:
    return ",".join(fmt_float(x) for x in v)


def checkpoint_extras(model, cfg: ExperimentConfig, regime: Regime, p: float, seed: int) -> dict[str, str]:
    extra = {
        "kind": model.kind.value,
        "regime": regime.value,
        "split": f"{p:g}",
        "data_seed": str(seed),
        "config_hash": cfg.config_hash(),
        "norm_center": _vec(model.norm.center),
        "norm_scale": _vec(model.norm.scale),
    }
    if isinstance(model, UdeModel):
        ph, dr = model.phys, model.demand_drift
        extra.update(tau=fmt_float(ph.tau), alpha=fmt_float(ph.alpha), I_target=fmt_float(ph.I_target),
                     mu=fmt_float(ph.mu), drift_rate=fmt_float(dr.rate), drift_mean=fmt_float(dr.mean))
    return extra


def load_model(path: str | Path):
    """Rebuild a trained NODE or UDE model from a checkpoint written by ``train``."""
    params, meta = load_checkpoint(path)
    norm = InputNorm(np.array(meta["norm_center"].split(","), dtype=float),
                     np.array(meta["norm_scale"].split(","), dtype=float))
    if ModelKind.parse(meta["kind"]) is ModelKind.NODE:
        return NodeModel(params, norm)
    phys = PhysicalParams(float(meta["tau"]), float(meta["alpha"]), float(meta["I_target"]), float(meta["mu"]))
    return UdeModel(params, phys, DemandDriftSpec(float(meta["drift_rate"]), float(meta["drift_mean"])), norm)


# -- subcommands -----------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    regimes = [Regime.parse(args.regime)] if args.regime else list(cfg.regimes)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    written = []
    for regime in regimes:
        for seed in seeds:
            demand = generate(cfg.demand_config(regime, demand_seed(seed)), cfg.grid())
            traj = simulate(cfg.phys, demand)
            stem = f"{regime.value}_seed{seed}_{_tag(cfg)}"
            for name, obj in ((f"truth_{stem}.csv", traj), (f"demand_{stem}.csv", demand)):
                obj.to_csv(out / name)
                written.append(out / name)
            bw = bullwhip_ratio(traj)
            stats = "  ".join(
                f"{v}: mean={np.mean(traj.column(v)):.4f} var={np.var(traj.column(v), ddof=1):.4f}"
                for v in STATE_VARS)
            print(f"{regime.value} seed={seed}  {stats}  bullwhip={'n/a' if bw is None else f'{bw:.4f}'}")
    _write_manifest(out, cfg, "simulate", written)
    return EXIT_OK


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:8]


def cmd_train(cfg: ExperimentConfig, args) -> int:
    regime = Regime.parse(args.regime or cfg.regimes[0].value)
    kind = ModelKind.parse(args.model or "UDE")
    p = args.split if args.split is not None else max(cfg.splits)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    if args.data:
        try:
            truth = Trajectory.from_csv(args.data)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read trajectory {args.data}: {exc}") from exc
        source = f"_data{_file_digest(Path(args.data))}"
    else:
        truth = simulate(cfg.phys, generate(cfg.demand_config(regime, demand_seed(seed)), cfg.grid()))
        source = ""
    try:
        train_seg, _ = split(truth, p)
    except DegenerateSplitError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(cfg)
    model, report = fit_cell(cfg, regime, kind, train_seg, seed)
    stem = f"{kind.value}_{regime.value}_p{p:g}_seed{seed}{source}_{_tag(cfg)}"
    files = [out / f"{stem}.ckpt", out / f"{stem}.params.txt", out / f"{stem}.train.txt"]
    save_checkpoint(files[0], model.params, checkpoint_extras(model, cfg, regime, p, seed))
    export_text(files[1], model.params)
    files[2].write_text(report.to_text())
    _write_manifest(out, cfg, f"train_{stem}", files)
    print(f"{kind.value} {regime.value} p={p:g} seed={seed}: final_loss={report.final_loss:.6g} "
          f"flags={';'.join(report.flags) or '-'} -> {files[0]}")
    return EXIT_NUMERIC if is_penalty(report.final_loss) else EXIT_OK


def _cells(cfg: ExperimentConfig, args):
    regimes = [Regime.parse(args.regime)] if args.regime else list(cfg.regimes)
    kinds = [ModelKind.parse(args.model)] if args.model else [ModelKind.NODE, ModelKind.UDE]
    splits = [args.split] if args.split is not None else list(cfg.splits)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    return [(r, k, p, s) for r in regimes for k in kinds for p in splits for s in seeds]


def _run_one(job):
    cfg, cell = job
    return run_cell(cfg, *cell)


def _plot_rows(rep) -> np.ndarray:
    truth, pred = rep.truth, rep.prediction
    n = len(truth)
    rows = np.full((n, 7), np.nan)
    rows[:, 0] = truth.t
    rows[:, 1:4] = truth.states
    if pred is not None:
        rows[n - len(pred):, 4:7] = pred.states
    return rows


PLOT_HEADER = ("t", "I_true", "O_true", "D_true", "I_pred", "O_pred", "D_pred")


def _render_svg(path: Path, reports, var: str) -> bool:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", path.name)
        return False
    j = STATE_VARS.index(var)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    truth = reports[0].truth
    ax.plot(truth.t, truth.states[:, j], color="black", lw=1.2, label="truth")
    for rep in reports:
        if rep.prediction is not None:
            ax.plot(rep.prediction.t, rep.prediction.states[:, j], lw=1.2, ls="--", label=rep.model)
    ax.axvline(reports[0].prediction.t[0] if reports[0].prediction is not None else truth.t[0], color="grey", ls=":")
    ax.set_xlabel("t")
    ax.set_ylabel(var)
    ax.legend(frameon=False)
    fig.tight_layout()
    plt.rcParams["svg.hashsalt"] = "invdyn"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return True


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    tag = _tag(cfg)
    cells = _cells(cfg, args)
    jobs = [(cfg, c) for c in cells]
    log.info("evaluating %d cells with %d worker(s)", len(cells), args.jobs)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_run_one, jobs))  # map keeps submission order
    else:
        reports = [_run_one(j) for j in jobs]

    files = []
    results = out / f"results_{tag}.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for rep in reports:
        w.writerow(rep.row())
    results.write_bytes(buf.getvalue().encode())
    files.append(results)

    rows = parse_results(io.StringIO(buf.getvalue()))
    header, body = summary_table(rows, cfg.featured_splits)
    summary = out / f"summary_{tag}.csv"
    sbuf = io.StringIO()
    sw = csv.writer(sbuf, lineterminator="\n")
    sw.writerow(header)
    sw.writerows(body)
    summary.write_bytes(sbuf.getvalue().encode())
    files.append(summary)

    plot_dir = out / f"plots_{tag}"
    plot_dir.mkdir(exist_ok=True)
    for rep in reports:
        if rep.truth is None:
            continue
        path = plot_dir / f"{rep.regime}_{rep.model}_p{rep.p:g}_seed{rep.seed}.csv"
        write_table_csv(path, PLOT_HEADER, _plot_rows(rep))
        files.append(path)
    if cfg.emit_plots:
        for regime in dict.fromkeys(r.regime for r in reports):
            for p in cfg.featured_splits:
                group = [r for r in reports if r.regime == regime and r.p == p and r.seed == cells[0][3]
                         and r.truth is not None]
                for var in STATE_VARS:
                    path = plot_dir / f"{regime}_p{p:g}_seed{cells[0][3]}_{var}.svg"
                    if group and _render_svg(path, group, var):
                        files.append(path)
    _write_manifest(out, cfg, "evaluate", files)

    n_bad = sum(r.numerical_failure for r in rows)
    print(f"{len(rows)} cells -> {results}")
    print(render_markdown(rows, cfg.featured_splits))
    if n_bad:
        log.warning("%d cell(s) flagged with numerical failures", n_bad)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args) -> int:
    src = Path(args.results)
    try:
        rows = read_results(src)
    except OSError as exc:
        raise ConfigError(f"cannot read results {src}: {exc}") from exc
    except ResultsParseError as exc:
        raise ConfigError(f"{src}: {exc}") from exc
    text = render_markdown(rows, cfg.featured_splits)
    out = Path(args.out) if args.out else src.parent
    out.mkdir(parents=True, exist_ok=True)
    dest = out / f"{src.stem}.report.md"
    dest.write_text(text)
    print(text)
    log.info("wrote %s", dest)
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--out", help="output directory (default: config [output] dir, or $INVDYN_OUT)")
    common.add_argument("-v", "--verbose", action="store_true")

    cell = argparse.ArgumentParser(add_help=False)
    cell.add_argument("--regime", help="AR1, Gaussian or Lognormal")
    cell.add_argument("--model", help="NODE or UDE")
    cell.add_argument("--split", type=float, help="training fraction p in (0, 1)")
    cell.add_argument("--seed", type=int)

    ap = argparse.ArgumentParser(prog="invdyn", description="NODE vs UDE inventory-dynamics experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common, cell], help="write ground-truth trajectories and demand series")
    tr = sub.add_parser("train", parents=[common, cell], help="fit one model and write its checkpoint")
    tr.add_argument("--data", help="train on this trajectory CSV (t,I,O,D) instead of a simulated one")
    ev = sub.add_parser("evaluate", parents=[common, cell], help="run the sweep and write results")
    ev.add_argument("--jobs", type=int, default=1, help="worker processes")
    rp = sub.add_parser("report", parents=[common], help="summarize a results CSV as markdown")
    rp.add_argument("results", help="results CSV written by evaluate")
    return ap


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.out and args.command != "report":
            cfg = replace(cfg, out_dir=args.out)
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be at least 1")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"invdyn: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:  # bad --regime / --model names and similar
        print(f"invdyn: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
