"""Command-line entry point.

Subcommands:

* ``run``   -- run benchmark trials and write ``results.csv``, ``manifest.json``
  and optionally SVG box plots.
* ``check`` -- run the invariant and gradient self-test suite.
* ``solve`` -- solve one problem given as a JSON file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .boosting import BoostConfig
from .experiments import METHODS, PROBLEMS, TAUS, ExperimentSpec, TrialResult, motivating_traces, run_trial
from .qcp import MaxIterationsExceeded, QcpProblem, SolverSettings, kkt_residuals, solve

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["problem", "method", "depth", "tau", "trial", "split", "excess_cost", "n_trees",
               "stop_reason", "runtime_s"]
EXIT_OK = 0
EXIT_ERROR = 1  # I/O failures, unreadable problem files
EXIT_PARTIAL = 2  # some methods failed, or a solve hit the iteration cap
EXIT_USAGE = 64  # sysexits EX_USAGE; keeps bad flags apart from partial failures


@dataclass
class RunConfig:
    command: str = "run"
    problem: str = "qp"
    tau: list = field(default_factory=lambda: [0.0])
    depth: list = field(default_factory=lambda: [1])
    trials: int = 10
    seed: int = 0
    out: str = "results"
    m_train: int = 1000
    m_test: int = 1000
    methods: list = field(default_factory=lambda: list(METHODS))
    n_trees: int = 100
    plot: bool = False
    jobs: int = 1
    allow_any_tau: bool = False
    edge_exponent: str = "as-printed"
    split_grid: int = 10
    max_iter: int = SolverSettings.max_iter
    tol_abs: float = SolverSettings.tol_abs
    tol_rel: float = SolverSettings.tol_rel
    max_stages: int = BoostConfig.max_stages
    eps_beta: float = BoostConfig.eps_beta
    eps_loss: float = BoostConfig.eps_loss
    # check / solve
    quick: bool = False
    problem_file: Optional[str] = None

    def settings(self) -> SolverSettings:
        return SolverSettings(max_iter=self.max_iter, tol_abs=self.tol_abs, tol_rel=self.tol_rel)

    def boost(self) -> BoostConfig:
        return BoostConfig(max_stages=self.max_stages, eps_beta=self.eps_beta, eps_loss=self.eps_loss,
                           split_grid=self.split_grid, seed=self.seed)

    def specs(self) -> list[ExperimentSpec]:
        return [
            ExperimentSpec(
                problem=self.problem, tau=tau, depth=depth, m_train=self.m_train, m_test=self.m_test,
                trials=self.trials, seed=self.seed, methods=tuple(self.methods), n_trees=self.n_trees,
                edge_exponent=self.edge_exponent, split_grid=self.split_grid, settings=self.settings(),
                boost=self.boost(), allow_any_tau=self.allow_any_tau,
            )
            for tau in self.tau
            for depth in self.depth
        ]

    def to_json(self) -> str:
        """Config-file form: loading it with ``--config`` reproduces this config."""
        d = asdict(self)
        del d["command"]
        return json.dumps(d, indent=2, sort_keys=True)


_CONFIG_KEYS = {f.name for f in fields(RunConfig)} - {"command"}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="JSON file of defaults; flags take precedence")
    p.add_argument("--problem", choices=PROBLEMS)
    p.add_argument("--tau", type=float, nargs="+", help="noise level(s), from {0, 0.5, 1}")
    p.add_argument("--allow-any-tau", action="store_true", default=None)
    p.add_argument("--depth", type=int, nargs="+", help="tree depth(s)")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--m-train", type=int)
    p.add_argument("--m-test", type=int)
    p.add_argument("--methods", nargs="+", choices=METHODS)
    p.add_argument("--n-trees", type=int, help="trees per forest")
    p.add_argument("--plot", action="store_true", default=None, help="write SVG box plots")
    p.add_argument("--jobs", type=int, help="trials run in this many processes")
    p.add_argument("--edge-exponent", choices=("as-printed", "adjacent-favored"))
    p.add_argument("--split-grid", type=int)
    p.add_argument("--max-iter", type=int, help="solver iteration cap")
    p.add_argument("--tol-abs", type=float)
    p.add_argument("--tol-rel", type=float)
    p.add_argument("--max-stages", type=int)
    p.add_argument("--eps-beta", type=float)
    p.add_argument("--eps-loss", type=float)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coneboost", description="Decision-focused boosting benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _add_run_flags(sub.add_parser("run", help="run benchmark trials"))
    chk = sub.add_parser("check", help="run the invariant self-test suite")
    chk.add_argument("--quick", action="store_true", default=None, help="fewer random instances")
    chk.add_argument("--seed", type=int)
    slv = sub.add_parser("solve", help="solve a problem given as JSON")
    slv.add_argument("problem_file", help="problem JSON (see README)")
    slv.add_argument("--max-iter", type=int)
    slv.add_argument("--tol-abs", type=float)
    slv.add_argument("--tol-rel", type=float)
    return parser


def load_config_file(path: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must hold a JSON object")
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ValueError(f"config {path}: unknown keys {sorted(unknown)}")
    return data


def parse_args(argv=None) -> RunConfig:
    """Parse flags into a RunConfig; exits with a usage error on bad input."""
    parser = build_parser()
    args = parser.parse_args(argv)
    values = {}
    if getattr(args, "config", None):
        try:
            values.update(load_config_file(args.config))
        except ValueError as exc:
            parser.error(str(exc))
    for key, val in vars(args).items():
        if key == "config" or val is None:
            continue
        values[key] = val
    for key in ("tau", "depth", "methods"):
        if key in values and not isinstance(values[key], list):
            values[key] = [values[key]]
    cfg = RunConfig(**values)
    if cfg.command == "run":
        if not cfg.allow_any_tau and any(float(t) not in TAUS for t in cfg.tau):
            parser.error(f"--tau must be in {list(TAUS)} (use --allow-any-tau to override)")
        if any(d < 0 for d in cfg.depth):
            parser.error("--depth must be >= 0")
        if min(cfg.trials, cfg.m_train, cfg.m_test, cfg.jobs, cfg.n_trees) < 1:
            parser.error("--trials, --m-train, --m-test, --jobs and --n-trees must be >= 1")
        try:
            cfg.specs()
        except ValueError as exc:
            parser.error(str(exc))
    return cfg


# -- output -------------------------------------------------------------------

def format_row(row: dict) -> list[str]:
    return [
        row["problem"], row["method"], str(row["depth"]), f"{row['tau']:g}", str(row["trial"]), row["split"],
        f"{row['excess_cost']:.6g}", str(row["n_trees"]), row["stop_reason"], f"{row['runtime_s']:.3f}",
    ]


def write_results(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow(format_row(row))


def read_results(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["depth"] = int(r["depth"])
        r["tau"] = float(r["tau"])
        r["trial"] = int(r["trial"])
        r["excess_cost"] = float(r["excess_cost"])
        r["n_trees"] = int(r["n_trees"])
        r["runtime_s"] = float(r["runtime_s"])
    return rows


def _write_dicts(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


# -- plots --------------------------------------------------------------------

_PALETTE = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"]


def _quartiles(values):
    q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75])
    return float(min(values)), float(q1), float(med), float(q3), float(max(values))


def box_plot_svg(groups: list[tuple[str, list[float]]], title: str, failed: dict[str, str] | None = None,
                 width: int = 720, height: int = 400) -> str:
    """Grouped box plot as a standalone SVG string.

    ``groups`` is a list of ``(label, values)``; an empty value list draws an
    annotated gap.  ``failed`` maps labels to failure notes shown under the axis.
    """
    failed = failed or {}
    left, right, top, bottom = 70, 20, 40, 90
    pw, ph = width - left - right, height - top - bottom
    allv = [v for _, vals in groups for v in vals]
    lo, hi = (min(allv), max(allv)) if allv else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5 * max(abs(lo), 1e-3), hi + 0.5 * max(abs(hi), 1e-3)
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def ypos(v):
        return top + ph * (hi - v) / (hi - lo)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<text x="16" y="{top + ph / 2:.1f}" transform="rotate(-90 16 {top + ph / 2:.1f})" '
        f'text-anchor="middle">out-of-sample excess cost</text>',
    ]
    for t in np.linspace(lo, hi, 5):
        y = ypos(t)
        out.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    slot = pw / max(len(groups), 1)
    for k, (label, vals) in enumerate(groups):
        cx = left + slot * (k + 0.5)
        bw = min(40.0, 0.6 * slot)
        color = _PALETTE[k % len(_PALETTE)]
        out.append(f'<text x="{cx:.1f}" y="{top + ph + 16}" text-anchor="middle">{_esc(label)}</text>')
        if label in failed:
            out.append(f'<text x="{cx:.1f}" y="{top + ph + 30}" text-anchor="middle" fill="#c00">'
                       f'failed: {_esc(failed[label])}</text>')
        if not vals:
            continue
        vmin, q1, med, q3, vmax = _quartiles(vals)
        out.append(f'<line x1="{cx:.1f}" y1="{ypos(vmax):.1f}" x2="{cx:.1f}" y2="{ypos(vmin):.1f}" stroke="black"/>')
        out.append(f'<rect x="{cx - bw / 2:.1f}" y="{ypos(q3):.1f}" width="{bw:.1f}" '
                   f'height="{max(ypos(q1) - ypos(q3), 1.0):.1f}" fill="{color}" stroke="black"/>')
        out.append(f'<line x1="{cx - bw / 2:.1f}" y1="{ypos(med):.1f}" x2="{cx + bw / 2:.1f}" '
                   f'y2="{ypos(med):.1f}" stroke="black" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text: str) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_plots(rows: list[dict], out_dir, failures: dict | None = None) -> list[Path]:
    """One SVG per (problem, tau): boxes of test excess cost per method and depth.

    ``failures`` maps ``(problem, tau, depth, method)`` to a note.
    """
    if not rows:
        raise ValueError("no results to plot")
    failures = failures or {}
    out_dir = Path(out_dir)
    test = [r for r in rows if r["split"] == "test"]
    keys = sorted({(r["problem"], r["tau"]) for r in rows} | {(k[0], k[1]) for k in failures})
    written = []
    for problem, tau in keys:
        sel = [r for r in test if r["problem"] == problem and r["tau"] == tau]
        depths = sorted({r["depth"] for r in sel} | {k[2] for k in failures if k[:2] == (problem, tau)})
        groups, failed = [], {}
        for depth in depths:
            for method in METHODS:
                vals = [r["excess_cost"] for r in sel if r["method"] == method and r["depth"] == depth]
                note = failures.get((problem, tau, depth, method))
                if not vals and note is None:
                    continue
                label = f"{method} d{depth}"
                groups.append((label, vals))
                if note is not None:
                    failed[label] = note
        path = out_dir / f"{problem}_tau{tau:g}.svg"
        path.write_text(box_plot_svg(groups, f"{problem}, tau = {tau:g}", failed))
        written.append(path)
    return written


# -- commands -----------------------------------------------------------------

def _run_spec_trials(spec: ExperimentSpec, jobs: int) -> list[TrialResult]:
    if jobs <= 1 or spec.trials == 1:
        return [run_trial(spec, t) for t in range(spec.trials)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_trial, [spec] * spec.trials, range(spec.trials)))


def run(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory {out}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    rows, failures = [], {}
    for spec in cfg.specs():
        for res in _run_spec_trials(spec, cfg.jobs):
            rows.extend(res.rows)
            for method, msg in res.failures.items():
                failures[(spec.problem, float(spec.tau), spec.depth, method)] = f"trial {res.trial}: {msg}"
                print(f"{spec.problem} tau={spec.tau:g} depth={spec.depth} trial {res.trial}: "
                      f"{method} failed: {msg}", file=sys.stderr)
        if spec.problem == "motivating":
            trace, curve = motivating_traces(spec)
            _write_dicts(trace, out / f"loss_trace_tau{spec.tau:g}_d{spec.depth}.csv"
                         if len(cfg.specs()) > 1 else out / "loss_trace.csv")
            _write_dicts(curve, out / f"prediction_curve_tau{spec.tau:g}_d{spec.depth}.csv"
                         if len(cfg.specs()) > 1 else out / "prediction_curve.csv")
    order = {m: i for i, m in enumerate(METHODS)}
    rows.sort(key=lambda r: (r["tau"], r["depth"], r["trial"], order[r["method"]], r["split"] != "train"))
    try:
        write_results(rows, out / "results.csv")
        manifest = {"config": asdict(cfg), "specs": [_spec_dict(s) for s in cfg.specs()],
                    "failures": {"|".join(map(str, k)): v for k, v in sorted(failures.items())}}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if cfg.plot and (rows or failures):
            emit_plots(rows, out, failures)
    except OSError as exc:
        print(f"cannot write results under {out}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _print_summary(rows)
    return EXIT_PARTIAL if failures else EXIT_OK


def _spec_dict(spec: ExperimentSpec) -> dict:
    d = asdict(spec)
    d["methods"] = list(spec.methods)
    return d


def _print_summary(rows: list[dict]) -> None:
    test = [r for r in rows if r["split"] == "test"]
    keys = sorted({(r["tau"], r["depth"], r["method"]) for r in test}, key=lambda k: (k[0], k[1], METHODS.index(k[2])))
    for tau, depth, method in keys:
        vals = [r["excess_cost"] for r in test if (r["tau"], r["depth"], r["method"]) == (tau, depth, method)]
        print(f"tau={tau:g} depth={depth} {method:12s} mean test excess cost {np.mean(vals):.6g} (n={len(vals)})")


def solve_file(cfg: RunConfig) -> int:
    try:
        data = json.loads(Path(cfg.problem_file).read_text())
        problem = QcpProblem.from_dict(data)
    except OSError as exc:
        print(f"cannot read {cfg.problem_file}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, KeyError, TypeError) as exc:
        print(f"invalid problem file {cfg.problem_file}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    status = "optimal"
    try:
        sol = solve(problem, settings=cfg.settings())
    except MaxIterationsExceeded as exc:
        sol, status = exc.solution, "max_iterations"
    rp, rd, gap = kkt_residuals(problem, sol)
    print(json.dumps({
        "status": status, "z": sol.z.tolist(), "y": sol.y.tolist(), "s": sol.s.tolist(),
        "objective": float(problem.objective(sol.z)), "iterations": int(sol.iterations),
        "primal_residual": rp, "dual_residual": rd, "gap": gap,
    }, indent=2))
    return EXIT_OK if status == "optimal" else EXIT_PARTIAL


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    cfg = parse_args(argv)
    if cfg.command == "run":
        return run(cfg)
    if cfg.command == "check":
        from .checks import run_checks

        return EXIT_OK if run_checks(quick=cfg.quick, seed=cfg.seed) else EXIT_PARTIAL
    return solve_file(cfg)


if __name__ == "__main__":
    sys.exit(main())
