"""Experiment runner: hyperparameter tables, task-stream trials and metric files.

Output layout under ``out_dir``::

    metrics_<method>_trial<k>.csv   one row per task (see MetricsRow.COLUMNS)
    summary_<method>.csv            mean/std of the fraction solved every 10,000 steps
    stream_trial<k>.txt             the sampled task stream, replayable

``flat_q_baseline`` (Q-learning on the finest partition, no refinement) is a
sanity baseline of this package, not one of the compared methods.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

from .agent import METHODS, Agent, TaskResult, solve_stream
from .catrl import Hyper
from .core import format_stream
from .domains import DOMAIN_IDS, make_domain, sample_stream

CHECKPOINT_EVERY = 10_000

# domain -> (H, decay, min_eps, alpha, gamma, stepmax, k_cap chirp, k_cap catrl, delta_thre, sigma_thre,
#            s_factor, e_max)
_TABLES = {
    "maze": (1_500_000, 0.997, 0.05, 0.05, 0.99, 500, 2, 5, 0.0, 0.95, 10, 500),
    "four_rooms": (2_000_000, 0.998, 0.05, 0.05, 0.999, 800, 2, 5, 0.0, 0.95, 10, 500),
    "taxi": (4_000_000, 0.999, 0.05, 0.05, 1.0, 1000, 2, 5, 0.0, 1.0, 4, 200),
    "office": (4_000_000, 0.9991, 0.05, 0.05, 0.99, 800, 5, 5, 0.0, 1.0, 10, 200),
    "minecraft": (3_000_000, 0.999, 0.05, 0.05, 1.0, 1000, 2, 5, 0.0, 1.0, 10, 200),
}


def default_hyper(domain_id: str, method: str = "chirp") -> Hyper:
    """The table column for ``(domain_id, method)``; the flat baseline uses the CAT+RL column."""
    if domain_id not in _TABLES:
        raise ValueError(f"unknown domain {domain_id!r}")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    H, decay, min_eps, alpha, gamma, stepmax, k_chirp, k_catrl, dthre, sthre, sfac, emax = _TABLES[domain_id]
    return Hyper(alpha=alpha, gamma=gamma, decay=decay, min_epsilon=min_eps, stepmax=stepmax,
                 k_cap=k_chirp if method == "chirp" else k_catrl, s_factor=sfac, e_max=emax,
                 delta_thre=dthre, sigma_thre=sthre, budget=H)


def _coerce(kind, text: str):
    if kind is bool:
        return text.lower() in ("1", "true", "yes")
    if kind is tuple:
        return tuple(float(v) for v in text.strip("()").split(","))
    return kind(text)


def hyper_overrides(overrides: dict) -> dict:
    """Convert string overrides (from a config file or CLI) to Hyper field types."""
    types = {f.name: type(getattr(Hyper(), f.name)) for f in fields(Hyper)}
    out = {}
    for k, v in overrides.items():
        if k not in types:
            raise ValueError(f"unknown hyperparameter {k!r}")
        out[k] = _coerce(types[k], v) if isinstance(v, str) else v
    return out


@dataclass
class ExperimentConfig:
    domain_id: str
    method: str = "chirp"
    n_tasks: int = 20
    n_trials: int = 1
    seed: int = 0
    out_dir: str = "runs"
    size: str = "full"
    budget: int | None = None
    map_file: str | None = None
    overrides: dict = field(default_factory=dict)
    checkpoints: bool = False

    def __post_init__(self):
        if self.domain_id not in DOMAIN_IDS:
            raise ValueError(f"unknown domain {self.domain_id!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.n_trials < 1 or self.n_tasks < 1:
            raise ValueError("n_trials and n_tasks must be at least 1")

    def hyper(self) -> Hyper:
        h = default_hyper(self.domain_id, self.method)
        changes = hyper_overrides(self.overrides)
        if self.budget is not None:
            changes["budget"] = int(self.budget)
        return h.with_(**changes) if changes else h

    def trial_seed(self, trial: int) -> int:
        return self.seed + trial


@dataclass
class MetricsRow:
    trial: int
    task: int
    cumulative_timesteps: int
    solved: bool
    fraction_solved: float
    option_count: int
    leaf_count: int

    COLUMNS = ("trial", "task", "cumulative_timesteps", "solved", "fraction_solved", "option_count", "leaf_count")

    def as_row(self) -> list:
        return [self.trial, self.task, self.cumulative_timesteps, int(self.solved), repr(self.fraction_solved),
                self.option_count, self.leaf_count]


def metrics_rows(trial: int, results: Iterable[TaskResult], n_tasks: int) -> list[MetricsRow]:
    rows, cum, solved = [], 0, 0
    for r in results:
        cum += r.timesteps
        solved += bool(r.solved)
        rows.append(MetricsRow(trial, r.task_index, cum, r.solved, solved / n_tasks, r.option_count, r.leaf_count))
    return rows


def write_metrics(path: Path, rows: list[MetricsRow]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricsRow.COLUMNS)
    for r in rows:
        w.writerow(r.as_row())
    try:
        path.write_text(buf.getvalue(), encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write metrics to {path}: {e}") from e


def read_metrics(path: Path) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        out = []
        for d in csv.DictReader(fh):
            out.append(MetricsRow(int(d["trial"]), int(d["task"]), int(d["cumulative_timesteps"]),
                                  d["solved"] == "1", float(d["fraction_solved"]), int(d["option_count"]),
                                  int(d["leaf_count"])))
        return out


def fraction_at(rows: list[MetricsRow], step: int) -> float:
    """Fraction of tasks solved by the time ``step`` cumulative steps were spent."""
    best = 0.0
    for r in rows:
        if r.cumulative_timesteps <= step:
            best = r.fraction_solved
        else:
            break
    return best


def curve(trials: list[list[MetricsRow]], every: int = CHECKPOINT_EVERY) -> list[tuple[int, float, float]]:
    """``(step, mean, std)`` of the fraction solved across trials at every checkpoint."""
    if not trials or not any(trials):
        raise ValueError("no metrics to summarize")
    end = max(r.cumulative_timesteps for rows in trials for r in rows)
    out = []
    for k in range(0, math.ceil(end / every) + 1):
        step = k * every
        vals = [fraction_at(rows, step) for rows in trials]
        out.append((step, statistics.fmean(vals), statistics.pstdev(vals)))
    return out


def _write_curve(path: Path, points, header=("step", "mean", "std")) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for step, mean, std in points:
        w.writerow([step, repr(mean), repr(std)])
    path.write_text(buf.getvalue(), encoding="utf-8")


def run_experiment(config: ExperimentConfig, log=None) -> dict:
    """Run every trial of ``config``; returns ``{"metrics": [paths], "summary": path, "results": [...]}``."""
    out = Path(config.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    hyper = config.hyper()
    spec = make_domain(config.domain_id, config.size, map_file=config.map_file)
    paths, all_rows, all_results = [], [], []
    for trial in range(config.n_trials):
        seed = config.trial_seed(trial)
        stream = sample_stream(config.domain_id, seed, config.n_tasks, hyper.budget, config.size, spec=spec)
        (out / f"stream_trial{trial}.txt").write_text(format_stream(stream), encoding="utf-8")
        agent = Agent(spec, hyper, config.method, seed=seed)
        ckpt = out / f"checkpoints_{config.method}_trial{trial}" if config.checkpoints else None

        def report(res, trial=trial):
            if log is not None:
                log(f"[{config.method} trial {trial}] task {res.task_index}: solved={res.solved} "
                    f"steps={res.timesteps} options={res.option_count} leaves={res.leaf_count}")

        results = solve_stream(stream, hyper, config.method, spec=spec, agent=agent, checkpoint_dir=ckpt,
                               on_result=report)
        rows = metrics_rows(trial, results, config.n_tasks)
        path = out / f"metrics_{config.method}_trial{trial}.csv"
        write_metrics(path, rows)
        paths.append(path)
        all_rows.append(rows)
        all_results.append(results)
    summary = out / f"summary_{config.method}.csv"
    _write_curve(summary, curve(all_rows))
    return {"metrics": paths, "summary": summary, "results": all_results}


def emit_curve(metric_files: Iterable[str | Path], out_path: str | Path, every: int = CHECKPOINT_EVERY) -> Path:
    """Columnar ``step, <method>_mean, <method>_std, ...`` file from per-trial metrics CSVs.

    The method is taken from the file name (``metrics_<method>_trial<k>.csv``).
    """
    groups: dict[str, list[list[MetricsRow]]] = {}
    for f in metric_files:
        f = Path(f)
        stem = f.stem
        method = stem[len("metrics_"):stem.rindex("_trial")] if stem.startswith("metrics_") and "_trial" in stem \
            else stem
        groups.setdefault(method, []).append(read_metrics(f))
    if not groups:
        raise ValueError("no metrics files given")
    curves = {m: curve(t, every) for m, t in sorted(groups.items())}
    length = max(len(c) for c in curves.values())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["step"]
    for m in curves:
        header += [f"{m}_mean", f"{m}_std"]
    w.writerow(header)
    for k in range(length):
        row = [k * every]
        for c in curves.values():
            _, mean, std = c[min(k, len(c) - 1)]  # a finished trial holds its final fraction
            row += [repr(mean), repr(std)]
        w.writerow(row)
    out_path = Path(out_path)
    out_path.write_text(buf.getvalue(), encoding="utf-8")
    return out_path


def config_from_text(text: str) -> dict:
    """Parse a ``key=value`` config file; ``hyper.<name>`` keys override hyperparameters."""
    out: dict = {"overrides": {}}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed config line {raw!r}")
        key, value = key.strip(), value.strip()
        if key.startswith("hyper."):
            out["overrides"][key[len("hyper."):]] = value
        else:
            out[key.replace("-", "_")] = value
    return out


__all__ = ["ExperimentConfig", "MetricsRow", "default_hyper", "run_experiment", "emit_curve", "curve",
           "read_metrics", "write_metrics", "metrics_rows", "config_from_text", "hyper_overrides", "asdict"]
