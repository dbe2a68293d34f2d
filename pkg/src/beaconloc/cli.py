"""Command-line entry point: ``beaconloc <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
Failures print a single JSON line prefixed with ``error:`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _provenance(cfg, command):
    return {"version": __version__, "command": command, "config_hash": cfg.digest(), "seed": cfg.seed}


def _header(prov):
    return " ".join(f"{k}={v}" for k, v in prov.items())


def _dataset_dir(cfg):
    from .config import default_data_dir
    if cfg.data.dir:
        return Path(cfg.data.dir)
    return Path(default_data_dir()) / Path(cfg.env).stem


def _env(cfg):
    from .environment import load_map
    return load_map(cfg.env, k_measure=cfg.noise.k_measure)


def _write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _metrics(rep):
    s = rep.summary()
    s.pop("ms_per_step", None)
    return s


# --------------------------------------------------------------------------- subcommands


def cmd_map_check(args, cfg):
    from .environment import load_map
    env = load_map(args.file)
    print(f"ok {args.file}: {env.width}x{env.height}, {int(env.grid.sum())} obstacle cells, {env.n_beacons} beacons")


def cmd_gen(args, cfg):
    from .simulator import generate_dataset
    env = _env(cfg)
    counts = {"train": cfg.data.train, "val": cfg.data.val, "test": cfg.data.test}
    out = _dataset_dir(cfg)
    path = generate_dataset(env, cfg.noise, counts, cfg.seed, out, cfg.data.n_steps,
                            env_id=env.name, provenance=_provenance(cfg, "gen"))
    print(path)


def cmd_train(args, cfg):
    from .models import Checkpoint, save_checkpoint
    from .simulator import load_manifest, load_split
    from .training import train, write_history
    env = _env(cfg)
    manifest = load_manifest(_dataset_dir(cfg) / "manifest.json")
    train_ds, val_ds = load_split(manifest, "train"), load_split(manifest, "val")
    spec = cfg.model.for_environment(env)
    ckpt = Checkpoint.fresh(spec, cfg.train.seed)

    def progress(row):
        if args.verbose:
            print(f"epoch {row['epoch']:5d}  loss {row['train_loss']:.5f}  val {row['val_mse_c']:.5f}",
                  file=sys.stderr)

    best, history = train(ckpt, train_ds, val_ds, cfg.train, env, progress=progress)
    prov = _provenance(cfg, "train")
    best.provenance.update(prov)
    for out in (cfg.paths.checkpoint, cfg.paths.history):
        Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, cfg.paths.checkpoint)
    write_history(history, cfg.paths.history, _header(prov))
    print(json.dumps({"checkpoint": cfg.paths.checkpoint, "epochs": history[-1]["epoch"],
                      "best_val_mse_c": best.provenance["best_val_mse_c"]}, sort_keys=True))


def _run_filter(cfg, kind, particles, ds, env):
    from .filters import filter_dataset
    from .simulator import noise_config_from_dict
    noise = noise_config_from_dict(ds.meta["cfg"]) if "cfg" in ds.meta else cfg.noise
    return filter_dataset(kind, env, ds, particles, noise, cfg.seed, cfg.filter.exact_init,
                          cfg.filter.jitter_sigma)


def _split(cfg):
    from .simulator import load_manifest, load_split
    ds = load_split(load_manifest(_dataset_dir(cfg) / "manifest.json"), cfg.eval.split)
    if cfg.eval.n_traj:
        import numpy as np
        ds = ds.subset(np.arange(min(cfg.eval.n_traj, len(ds))))
    return ds


def cmd_eval(args, cfg):
    from .errors import ConfigError
    from .losses import evaluate_poses
    env = _env(cfg)
    ds = _split(cfg)
    prov = _provenance(cfg, "eval")
    if cfg.eval.model == "checkpoint":
        from .models import load_checkpoint
        from .training import evaluate
        ckpt = load_checkpoint(cfg.paths.checkpoint)
        rep = evaluate(ckpt, ds, env, cfg.seed)
        model, n_params = ckpt.spec.kind, len(ckpt.params)
    elif cfg.eval.model in ("pf", "mkf"):
        rep = evaluate_poses(_run_filter(cfg, cfg.eval.model, cfg.filter.particles, ds, env), ds.poses)
        model, n_params = cfg.eval.model, None
    else:
        raise ConfigError(f"unknown eval.model {cfg.eval.model!r}", key="eval.model")
    metrics = {"model": model, "n_params": n_params, "split": cfg.eval.split, **_metrics(rep)}
    _write_json(cfg.paths.report, {"provenance": prov, "metrics": metrics,
                                   "ms_per_step": rep.ms_per_step if rep.ms_per_step == rep.ms_per_step else None,
                                   "per_trajectory_mse_c": rep.mse_c_per_traj.tolist()})
    print(json.dumps(metrics, sort_keys=True))


def cmd_filter(args, cfg):
    import numpy as np
    from .losses import evaluate_poses
    env = _env(cfg)
    ds = _split(cfg)
    pred = _run_filter(cfg, cfg.filter.kind, cfg.filter.particles, ds, env)
    rep = evaluate_poses(pred, ds.poses)
    prov = _provenance(cfg, "filter")
    if cfg.paths.predictions:
        Path(cfg.paths.predictions).parent.mkdir(parents=True, exist_ok=True)
        np.savez(cfg.paths.predictions, poses=pred, provenance=np.array(json.dumps(prov, sort_keys=True)))
    metrics = {"model": cfg.filter.kind, "particles": cfg.filter.particles, "split": cfg.eval.split,
               **_metrics(rep)}
    _write_json(cfg.paths.report, {"provenance": prov, "metrics": metrics})
    print(json.dumps(metrics, sort_keys=True))


def cmd_bench(args, cfg):
    from .bench import BenchPlan, plan_hash, render_table, run_bench
    plan = BenchPlan.load(args.plan)
    header = f"version={__version__} plan={plan_hash(plan)} seed={cfg.seed}"
    rows = run_bench(plan, args.report, jobs=cfg.threads, timing=cfg.threads == 1, header=header)
    sys.stdout.write(render_table(rows))


def cmd_params(args, cfg):
    from .cells import count_params
    from .environment import load_map
    envs = args.env or [cfg.env]
    for name in envs:
        env = load_map(name, k_measure=cfg.model.k_measure)
        spec = cfg.model.for_environment(env)
        print(f"{spec.kind}\t{env.name}\t{count_params(spec)}")


# --------------------------------------------------------------------------- parser


def build_parser():
    from .config import DATA_DIR_ENV, key_reference
    keys = (f"config keys (YAML sections, defaults shown; override with --set section.key=value):\n"
            f"{key_reference()}\n\nenvironment: {DATA_DIR_ENV} sets the default data directory.")
    fmt = argparse.RawDescriptionHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for all randomness (overrides config)")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default 1)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="beaconloc", description="Beacon-based localization workbench.",
                                epilog=keys, formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"beaconloc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("map", help="map utilities")
    msub = m.add_subparsers(dest="map_command", required=True)
    mc = msub.add_parser("check", help="validate a map file", parents=[common])
    mc.add_argument("file")
    mc.set_defaults(func=cmd_map_check, config=None)

    for name, func, helptext in [
        ("gen", cmd_gen, "generate train/val/test trajectories"),
        ("train", cmd_train, "train a recurrent model"),
        ("eval", cmd_eval, "evaluate a checkpoint or a PF/MKF baseline on a split"),
        ("filter", cmd_filter, "run PF or MKF over a dataset split"),
    ]:
        s = sub.add_parser(name, help=helptext, epilog=keys, formatter_class=fmt, parents=[common])
        s.add_argument("config", nargs="?", default=None, help="YAML run config")
        s.set_defaults(func=func)

    b = sub.add_parser("bench", help="run a benchmark plan", parents=[common])
    b.add_argument("plan")
    b.add_argument("--report", default=None, help="CSV path (default: the plan's report key)")
    b.set_defaults(func=cmd_bench, config=None)

    pr = sub.add_parser("params", help="print the parameter count of a model spec", epilog=keys,
                        formatter_class=fmt, parents=[common])
    pr.add_argument("config", nargs="?", default=None, help="YAML config with a model section")
    pr.add_argument("--env", action="append", default=None, help="map name or file (repeatable)")
    pr.set_defaults(func=cmd_params)
    return p


def _fail(exc, code):
    info = {"error": type(exc).__name__, "exit": code, "message": str(exc)}
    for attr in ("key", "line"):
        if getattr(exc, attr, None) is not None:
            info[attr] = getattr(exc, attr)
    print("error: " + json.dumps(info, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = args.threads if args.threads is not None else 1
    for var in THREAD_VARS:
        os.environ.setdefault(var, str(threads))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .config import load_config, with_seed
    from .errors import LocalizationError
    try:
        overrides = list(args.set)
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        cfg = with_seed(load_config(getattr(args, "config", None), overrides), args.seed)
        args.func(args, cfg)
    except LocalizationError as exc:
        return _fail(exc, exc.exit_code)
    except FileNotFoundError as exc:
        return _fail(exc, 3)
    except FloatingPointError as exc:
        return _fail(exc, 4)
    return 0


if __name__ == "__main__":
    sys.exit(main())
