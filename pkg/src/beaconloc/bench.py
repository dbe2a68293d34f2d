"""Benchmark runs over environments, models and particle counts.

A plan is a YAML file::

    report: results/table2.csv
    defaults: {env: world10, dataset: data/w10/manifest.json, seed: 0}
    runs:
      - {name: pf-200, model: pf, particles: 200}
      - {name: pf-10k, model: pf, particles: 10000}
      - {name: me, model: checkpoint, checkpoint: ckpt/me.ckpt}

Relative paths resolve against the plan file's directory. A run that fails
(missing file, numeric blow-up) is recorded with its error and the plan goes on.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .environment import load_map
from .errors import ConfigError, LocalizationError, ValidationError
from .filters import FilterStepper, filter_dataset
from .losses import evaluate_poses
from .models import ModelStepper, load_checkpoint
from .simulator import MotionNoiseConfig, TrajectoryDataset, load_manifest, load_split, noise_config_from_dict
from .training import predict

log = logging.getLogger(__name__)

FILTER_KINDS = ("pf", "mkf")
MODEL_LABELS = {"pf": "PF", "mkf": "MKF (reimplementation)", "checkpoint": None}
REPORT_FIELDS = ("run", "env", "model", "particles", "mse_c", "mse_c_std", "fse", "fse_std",
                 "n_params", "ckpt_mb", "ms_per_step", "status")
MIN_TIMING_STEPS = 1000


@dataclass(frozen=True)
class BenchRun:
    name: str
    model: str
    env: str = "world10"
    particles: int = 0
    dataset: str = ""
    split: str = "test"
    checkpoint: str = ""
    seed: int = 0
    n_traj: int = 0
    output: str = ""
    timing_steps: int = MIN_TIMING_STEPS
    warmup: int = 20
    exact_init: bool = False


RUN_KEYS = tuple(f.name for f in fields(BenchRun))


@dataclass
class BenchPlan:
    runs: list = field(default_factory=list)
    report: str = "bench.csv"
    root: str = "."

    def __post_init__(self):
        names = [r.name for r in self.runs]
        if len(set(names)) != len(names):
            raise ConfigError("run names must be unique", key="name")
        outs = [r.output for r in self.runs if r.output]
        if len(set(outs)) != len(outs):
            raise ConfigError("run output paths must be unique", key="output")

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else Path(self.root) / p

    @classmethod
    def from_dict(cls, d, root="."):
        d = dict(d or {})
        unknown = set(d) - {"runs", "report", "defaults"}
        if unknown:
            raise ConfigError(f"unknown plan key {sorted(unknown)[0]!r}", key=sorted(unknown)[0])
        defaults = d.get("defaults") or {}
        runs = []
        for i, r in enumerate(d.get("runs") or []):
            merged = {**defaults, **(r or {})}
            bad = set(merged) - set(RUN_KEYS)
            if bad:
                raise ConfigError(f"run {i}: unknown key {sorted(bad)[0]!r}", key=sorted(bad)[0])
            merged.setdefault("name", f"run{i}")
            if "model" not in merged:
                raise ConfigError(f"run {i}: missing key 'model'", key="model")
            runs.append(BenchRun(**merged))
        return cls(runs, d.get("report", "bench.csv"), str(root))

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            d = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read plan {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            line = getattr(getattr(exc, "problem_mark", None), "line", None)
            raise ConfigError(f"plan {path} is not valid YAML", line=None if line is None else line + 1) from exc
        return cls.from_dict(d, path.parent)


def time_inference(stepper, trajectories, warmup=20, min_steps=MIN_TIMING_STEPS):
    """Mean wall-clock ms per step over at least ``min_steps`` steps after ``warmup``.

    ``trajectories`` is a sequence of ``(speeds, measurements)`` pairs, cycled
    (with ``stepper.reset()`` at each boundary) until enough steps were timed.
    """
    if warmup < 0:
        raise ValidationError("warmup must be >= 0")
    trajectories = list(trajectories)
    if not trajectories:
        raise ValidationError("need at least one trajectory to time")

    def steps():
        while True:
            for speeds, meas in trajectories:
                stepper.reset()
                for u, y in zip(speeds, meas):
                    yield u, y

    it = steps()
    for _ in range(warmup):
        stepper.step(*next(it))
    elapsed, n = 0.0, 0
    while n < min_steps:
        u, y = next(it)
        t0 = time.perf_counter()
        stepper.step(u, y)
        elapsed += time.perf_counter() - t0
        n += 1
    return 1000.0 * elapsed / n


def _dataset_for(plan, run):
    path = plan.resolve(run.dataset)
    if path.suffix == ".json":
        ds = load_split(load_manifest(path), run.split)
    else:
        ds = TrajectoryDataset.load(path)
    if run.n_traj:
        ds = ds.subset(np.arange(min(run.n_traj, len(ds))))
    return ds


def _noise_cfg(ds):
    cfg = ds.meta.get("cfg")
    return noise_config_from_dict(cfg) if cfg else MotionNoiseConfig()


def execute_run(plan, run, timing=True):
    """Run one benchmark entry and return its report row (never raises for run-level failures)."""
    row = {k: "" for k in REPORT_FIELDS}
    row.update(run=run.name, env=run.env, model=MODEL_LABELS.get(run.model) or run.model,
               particles=run.particles or "", n_params="-", ckpt_mb="-")
    try:
        env = load_map(run.env) if not run.env.endswith(".map") else load_map(plan.resolve(run.env))
        if not run.dataset:
            raise ConfigError(f"run {run.name!r} has no dataset", key="dataset")
        ds = _dataset_for(plan, run)
        if run.model in FILTER_KINDS:
            if run.particles < 1:
                raise ConfigError(f"run {run.name!r} needs particles >= 1", key="particles")
            cfg = _noise_cfg(ds)
            pred = filter_dataset(run.model, env, ds, run.particles, cfg, run.seed, run.exact_init)

            def make_stepper():
                return FilterStepper(run.model, env, run.particles, cfg,
                                     np.random.Generator(np.random.Philox(run.seed)))
        elif run.model == "checkpoint":
            cpath = plan.resolve(run.checkpoint)
            ckpt = load_checkpoint(cpath)
            row["model"] = ckpt.spec.kind
            row["particles"] = ckpt.spec.members
            row["n_params"] = len(ckpt.params)
            row["ckpt_mb"] = f"{cpath.stat().st_size / 2**20:.3f}"
            pred = predict(ckpt, ds, env, run.seed)

            def make_stepper():
                return ModelStepper(ckpt, env, run.seed)
        else:
            raise ConfigError(f"unknown model {run.model!r}", key="model")
        rep = evaluate_poses(pred, ds.poses)
        ms = float("nan")
        if timing:
            pairs = [(ds.speeds[i], ds.measurements[i]) for i in range(len(ds))]
            ms = time_inference(make_stepper(), pairs, run.warmup, run.timing_steps)
        row.update(mse_c=f"{rep.mse_c:.6g}", mse_c_std=f"{rep.mse_c_std:.6g}", fse=f"{rep.fse:.6g}",
                   fse_std=f"{rep.fse_std:.6g}", ms_per_step="" if math.isnan(ms) else f"{ms:.4g}",
                   status="ok")
        if run.output:
            out = plan.resolve(run.output)
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(json.dumps({"run": run.name, **rep.summary(), "ms_per_step": ms,
                                       "version": __version__}, indent=2, sort_keys=True) + "\n")
    except (LocalizationError, OSError, ValueError) as exc:
        log.warning("run %s failed: %s", run.name, exc)
        row["status"] = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
    return row


def _execute_star(args):
    return execute_run(*args)


def run_bench(plan, report_path=None, jobs=1, timing=True, header=None):
    """Execute every run and write the CSV report; returns the rows.

    With ``jobs > 1`` runs execute in worker processes and timing is disabled,
    since concurrent runs would distort wall-clock measurements.
    """
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_execute_star, [(plan, r, False) for r in plan.runs]))
    else:
        rows = [execute_run(plan, r, timing) for r in plan.runs]
    path = Path(report_path) if report_path else plan.resolve(plan.report)
    write_report(rows, path, header)
    return rows


def plan_hash(plan):
    blob = json.dumps([r.__dict__ for r in plan.runs], sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_report(rows, path, header=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return path


def read_report(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def render_table(rows):
    """Aligned plain-text rendering of report rows."""
    cols = [c for c in REPORT_FIELDS]
    cells = [cols] + [[str(r.get(c, "")) for c in cols] for r in rows]
    width = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, width)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in width))
    return "\n".join(lines) + "\n"
