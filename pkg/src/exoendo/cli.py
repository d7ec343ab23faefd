"""Experiment runner: replicated training runs, comparison plots, L sweeps and summaries.

Results layout::

    <output_dir>/<name>/config.toml
    <output_dir>/<name>/summary.tsv           metric, mean, std, n, n_failed
    <output_dir>/<name>/timing_summary.tsv    wall-clock statistics
    <output_dir>/<name>/<rep>/curve.tsv       one row per policy update
    <output_dir>/<name>/<rep>/decomposition.tsv
    <output_dir>/<name>/<rep>/model.ckpt      reward model (discovery methods only)
    <output_dir>/<name>/<rep>/status.tsv      ok/failed plus notes
    <output_dir>/<name>/<rep>/timing.tsv      total and decomposition wall time

Every file except the two timing files is a deterministic function of the
config, so reruns overwrite them byte for byte.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.linalg import null_space

from .analysis import principal_angles
from .config import ExperimentConfig, dump_config, load_config
from .decompose import TransitionDataset
from .errors import ExoEndoError
from .regress import model_to_text
from .rl import CURVE_COLUMNS, PolicyValueNets, run_discovery, collect_rollout, run_two_phase

__all__ = [
    "RunResult",
    "run_experiment",
    "summarize_experiment",
    "plot_comparison",
    "sensitivity_sweep",
    "SweepPoint",
    "analyze",
    "main",
]

SUMMARY_METRICS = ("rank", "final_eval_reward", "final_eval_endo", "final_eval_total")
TIMING_METRICS = ("total_time", "decomposition_time")
DISCOVERY_METHODS = ("grds", "simplified_grds", "sras")


@dataclass
class RunResult:
    experiment_dir: Path
    curves: List[Optional[np.ndarray]] = field(default_factory=list)
    ranks: List[int] = field(default_factory=list)
    total_times: List[float] = field(default_factory=list)
    decomposition_times: List[float] = field(default_factory=list)
    failed: List[int] = field(default_factory=list)
    summary: Dict[str, tuple] = field(default_factory=dict)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_tsv(path: Path, header: Sequence[str], rows) -> None:
    lines = ["\t".join(header)] + ["\t".join(_fmt(v) if not isinstance(v, str) else v for v in row)
                                   for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_tsv(path: Path):
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    header = lines[0].split("\t")
    return header, [ln.split("\t") for ln in lines[1:]]


def _run_replication(config: ExperimentConfig, index: int, exp_dir: str) -> Dict[str, object]:
    rep_dir = Path(exp_dir) / str(index)
    rep_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("curve.tsv", "decomposition.tsv", "model.ckpt"):
        (rep_dir / stale).unlink(missing_ok=True)
    try:
        res = run_two_phase(config, index)
    except Exception as exc:  # recorded per replication, the experiment goes on
        msg = f"{type(exc).__name__}: {exc}".replace("\t", " ").replace("\n", " ")
        _write_tsv(rep_dir / "status.tsv", ("status", "note"), [("failed", msg)])
        _write_tsv(rep_dir / "timing.tsv", TIMING_METRICS, [(float("nan"), float("nan"))])
        return {"index": index, "ok": False, "error": traceback.format_exc()}
    _write_tsv(rep_dir / "curve.tsv", CURVE_COLUMNS, res.curve)
    if res.report is not None:
        (rep_dir / "decomposition.tsv").write_text(res.report.to_tsv(), encoding="utf-8")
    else:
        (rep_dir / "decomposition.tsv").write_text(
            f"key\tvalue\nalgorithm\tnone\nrank\t0\nd\t{config.build_env(config.base_seed + index).obs_dim}\n",
            encoding="utf-8")
    if res.estimator is not None and res.estimator.model is not None:
        (rep_dir / "model.ckpt").write_text(model_to_text(res.estimator.model), encoding="utf-8")
    notes = [("ok", n.replace("\t", " ")) for n in res.notes] or [("ok", "")]
    _write_tsv(rep_dir / "status.tsv", ("status", "note"), notes)
    _write_tsv(rep_dir / "timing.tsv", TIMING_METRICS, [(res.total_time, res.decomposition_time)])
    return {"index": index, "ok": True}


def _stats(values: List[float]):
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan"), 0
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std, int(arr.size)


def _rep_dirs(exp_dir: Path) -> List[Path]:
    return sorted((p for p in exp_dir.iterdir() if p.is_dir() and p.name.isdigit()), key=lambda p: int(p.name))


def _load_curve(rep_dir: Path) -> Optional[np.ndarray]:
    path = rep_dir / "curve.tsv"
    if not path.exists():
        return None
    _, rows = _read_tsv(path)
    return np.array([[float(v) for v in row] for row in rows]).reshape(-1, len(CURVE_COLUMNS))


def _load_rank(rep_dir: Path) -> Optional[int]:
    path = rep_dir / "decomposition.tsv"
    if not path.exists():
        return None
    _, rows = _read_tsv(path)
    return int(dict((r[0], r[1]) for r in rows if len(r) > 1)["rank"])


def _status_ok(rep_dir: Path) -> bool:
    path = rep_dir / "status.tsv"
    if not path.exists():
        return False
    _, rows = _read_tsv(path)
    return bool(rows) and rows[0][0] == "ok"


def summarize_experiment(exp_dir, write: bool = True) -> RunResult:
    """Recompute summary statistics from the per-replication files (and optionally persist them)."""
    exp_dir = Path(exp_dir)
    result = RunResult(exp_dir)
    cols: Dict[str, List[float]] = {k: [] for k in SUMMARY_METRICS + TIMING_METRICS}
    for rep in _rep_dirs(exp_dir):
        idx = int(rep.name)
        if not _status_ok(rep):
            result.failed.append(idx)
            result.curves.append(None)
            continue
        curve = _load_curve(rep)
        rank = _load_rank(rep)
        result.curves.append(curve)
        result.ranks.append(rank)
        cols["rank"].append(rank)
        if curve is not None and len(curve):
            cols["final_eval_reward"].append(curve[-1, 3])
            cols["final_eval_endo"].append(curve[-1, 4])
            cols["final_eval_total"].append(curve[-1, 5])
        _, trow = _read_tsv(rep / "timing.tsv")
        cols["total_time"].append(float(trow[0][0]))
        cols["decomposition_time"].append(float(trow[0][1]))
    result.total_times = cols["total_time"]
    result.decomposition_times = cols["decomposition_time"]
    nf = len(result.failed)
    for k in SUMMARY_METRICS + TIMING_METRICS:
        result.summary[k] = _stats(cols[k]) + (nf,)
    if write:
        _write_tsv(exp_dir / "summary.tsv", ("metric", "mean", "std", "n", "n_failed"),
                   [(k, *result.summary[k]) for k in SUMMARY_METRICS])
        _write_tsv(exp_dir / "timing_summary.tsv", ("metric", "mean", "std", "n", "n_failed"),
                   [(k, *result.summary[k]) for k in TIMING_METRICS])
    return result


def run_experiment(config: ExperimentConfig, workers: Optional[int] = None) -> RunResult:
    """Run all replications of ``config`` and persist curves, reports and summaries."""
    exp_dir = Path(config.resolved_output_dir()) / config.name
    exp_dir.mkdir(parents=True, exist_ok=True)
    (exp_dir / "config.toml").write_text(dump_config(config), encoding="utf-8")
    n = config.replications
    if workers is None:
        workers = config.workers or min(n, os.cpu_count() or 1)
    workers = max(1, min(workers, n))
    if workers == 1:
        outcomes = [_run_replication(config, i, str(exp_dir)) for i in range(n)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_replication, config, i, str(exp_dir)) for i in range(n)]
            outcomes = [f.result() for f in futures]
    for out in outcomes:
        if not out["ok"]:
            warnings.warn(f"replication {out['index']} failed:\n{out['error']}")
    # drop replication directories left over from an earlier run with more replications
    for rep in _rep_dirs(exp_dir):
        if int(rep.name) >= n:
            for f in rep.iterdir():
                f.unlink()
            rep.rmdir()
    return summarize_experiment(exp_dir)


# ---------------------------------------------------------------------------
# plotting

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def _experiment_label(exp_dir: Path) -> str:
    cfg = exp_dir / "config.toml"
    if cfg.exists():
        try:
            return load_config(cfg).method
        except ExoEndoError:
            pass
    return exp_dir.name


def plot_comparison(result_dirs: Sequence, output) -> Path:
    """Mean eval curve per experiment with a +-1 std band, written as SVG plus a TSV of the data."""
    if not result_dirs:
        raise ValueError("need at least one result directory")
    series = []
    for d in result_dirs:
        d = Path(d)
        curves = [c for c in (_load_curve(r) for r in _rep_dirs(d) if _status_ok(r)) if c is not None and len(c)]
        if not curves:
            warnings.warn(f"no curves under {d}; skipped")
            continue
        length = min(len(c) for c in curves)
        if any(len(c) != length for c in curves):
            warnings.warn(f"{d}: replications have different update counts; truncated to {length}")
        ys = np.stack([c[:length, 3] for c in curves])
        std = ys.std(axis=0, ddof=1) if len(ys) > 1 else np.zeros(length)
        series.append((_experiment_label(d), curves[0][:length, 0], ys.mean(axis=0), std))
    if not series:
        raise ValueError("no curves found in the given directories")
    shortest = min(len(s[1]) for s in series)
    if any(len(s[1]) != shortest for s in series):
        warnings.warn(f"experiments have different update counts; truncated to {shortest}")
        series = [(lab, x[:shortest], m[:shortest], s[:shortest]) for lab, x, m, s in series]
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    rows = [(lab, int(x), m, s) for lab, xs, ms, ss in series for x, m, s in zip(xs, ms, ss)]
    _write_tsv(output.with_suffix(".tsv"), ("label", "update", "mean", "std"), rows)
    output.write_text(_render_svg(series), encoding="utf-8")
    return output


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    return np.arange(np.ceil(lo / step) * step, hi + 1e-9 * step, step)


def _render_svg(series, width: int = 720, height: int = 440) -> str:
    left, right, top, bottom = 70, 170, 30, 55
    pw, ph = width - left - right, height - top - bottom
    x_all = np.concatenate([s[1] for s in series])
    y_lo = min(float(np.min(m - s)) for _, _, m, s in series)
    y_hi = max(float(np.max(m + s)) for _, _, m, s in series)
    pad = 0.05 * max(y_hi - y_lo, 1e-6)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    x_lo, x_hi = float(x_all.min()), float(x_all.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0

    def px(x):
        return left + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return top + (y_hi - y) / (y_hi - y_lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _ticks(y_lo, y_hi):
        y = py(t)
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end">{t:g}</text>')
    for t in _ticks(x_lo, x_hi):
        x = px(t)
        out.append(f'<line x1="{x:.2f}" y1="{top + ph}" x2="{x:.2f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{top + ph + 18}" text-anchor="middle">{t:g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle">policy update</text>')
    out.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2})">mean eval reward</text>')
    for k, (label, xs, mean, std) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        upper = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, mean + std))
        lower = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs[::-1], (mean - std)[::-1]))
        out.append(f'<polygon points="{upper} {lower}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, mean))
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = top + 16 + 20 * k
        lx = left + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 24}" y2="{ly}" stroke="{color}" stroke-width="3"/>')
        out.append(f'<text x="{lx + 30}" y="{ly + 4}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# sensitivity sweep

@dataclass
class SweepPoint:
    length: int
    rank: int
    achieved_ccc: float
    angle_to_previous: float      # largest principal angle between consecutive complements
    w_exo: np.ndarray


def sensitivity_sweep(config: ExperimentConfig, lengths: Sequence[int], output: Optional[Path] = None,
                      collected: Optional[int] = None) -> List[SweepPoint]:
    """Discovery on nested prefixes of one trajectory collected by the initial (uniform) policy.

    Reports the rank found at each L and the largest principal angle between
    the orthogonal complements of consecutive discovered subspaces.
    """
    lengths = [int(v) for v in lengths]
    if collected is None:
        collected = min(max(lengths), config.schedule.total_steps)
    seed = config.base_seed
    env = config.build_env(seed)
    nets = PolicyValueNets(env.obs_dim, env.action_choices, config.ppo, seed)
    rng = np.random.default_rng([seed, 2])
    buf = collect_rollout(nets, env, collected, rng, env.reset(seed=seed))
    full = TransitionDataset.from_arrays(buf.obs, buf.action_values, buf.raw_rewards, buf.next_obs)
    method = config.method if config.method in DISCOVERY_METHODS else "simplified_grds"
    points: List[SweepPoint] = []
    prev_comp = None
    for length in lengths:
        if length > collected:
            warnings.warn(f"L={length} exceeds the {collected} collected steps; skipped")
            continue
        report = run_discovery(method, full.prefix(length), config, seed)
        w = report.projection.w_exo.w
        comp = null_space(w.T) if w.shape[1] else np.eye(full.d)
        angle = float("nan")
        if prev_comp is not None:
            angles = principal_angles(prev_comp, comp).angles
            angle = float(angles.max()) if angles.size else 0.0
        prev_comp = comp
        points.append(SweepPoint(length, report.rank, report.projection.achieved_ccc_full, angle, w))
    if output is not None:
        output = Path(output)
        output.parent.mkdir(parents=True, exist_ok=True)
        _write_tsv(output, ("L", "rank", "achieved_ccc", "max_angle_to_previous"),
                   [(p.length, p.rank, p.achieved_ccc, p.angle_to_previous) for p in points])
    return points


# ---------------------------------------------------------------------------
# summaries

def analyze(exp_dir) -> str:
    """Table-style text summary: rank, total time, decomposition time and final reward."""
    res = summarize_experiment(exp_dir, write=False)
    s = res.summary

    def pm(key, digits):
        mean, std, n, _ = s[key]
        return f"{mean:.{digits}f} ± {std:.{digits}f}" if n else "n/a"

    header = f"{'experiment':<24}{'method':<18}{'rank':<16}{'total time (s)':<20}{'decomp time (s)':<20}{'final reward':<18}{'failed':<6}"
    row = (f"{Path(exp_dir).name:<24}{_experiment_label(Path(exp_dir)):<18}{pm('rank', 1):<16}"
           f"{pm('total_time', 1):<20}{pm('decomposition_time', 2):<20}{pm('final_eval_reward', 3):<18}"
           f"{len(res.failed):<6}")
    return header + "\n" + row


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="exoendo", description="Exo/endo decomposition experiments")
    sub = parser.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", help="run all replications of a config")
    p_run.add_argument("config")
    p_run.add_argument("--workers", type=int, default=None)
    p_plot = sub.add_parser("plot", help="plot mean eval curves of experiment directories")
    p_plot.add_argument("dirs", nargs="+")
    p_plot.add_argument("-o", "--output", required=True)
    p_sweep = sub.add_parser("sweep", help="discovery at several decomposition lengths L")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--L", required=True, help="comma-separated list of L values")
    p_sweep.add_argument("-o", "--output", default=None)
    p_an = sub.add_parser("analyze", help="print a summary table for an experiment directory")
    p_an.add_argument("dir")
    args = parser.parse_args(argv)

    try:
        if args.verb == "run":
            cfg = load_config(args.config)
            res = run_experiment(cfg, args.workers)
            print(analyze(res.experiment_dir))
            return 1 if res.failed else 0
        if args.verb == "plot":
            out = plot_comparison(args.dirs, args.output)
            print(f"wrote {out} and {out.with_suffix('.tsv')}")
            return 0
        if args.verb == "sweep":
            cfg = load_config(args.config)
            lengths = [int(v) for v in args.L.split(",") if v.strip()]
            out = args.output or str(Path(cfg.resolved_output_dir()) / cfg.name / "sweep.tsv")
            points = sensitivity_sweep(cfg, lengths, Path(out))
            print("L\trank\tachieved_ccc\tmax_angle_to_previous")
            for p in points:
                print(f"{p.length}\t{p.rank}\t{p.achieved_ccc:.4g}\t{p.angle_to_previous:.4g}")
            return 0
        print(analyze(args.dir))
        return 0
    except (ExoEndoError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
