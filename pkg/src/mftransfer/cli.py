"""Command line entry point: train, rate-sweep, bounds, similarity, verify.

Exit codes: 0 ok, 1 invariant failure, 2 config error, 3 divergence.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, harness, trainer
from .harness import ConfigError
from .measures import load_dataset
from .priors import GibbsPrior
from .tasks import TaskSpec, gen_task

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError("config", "must be a JSON object")
    return d


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("THREADS", f"expected an integer, got {env!r}") from None
    return 1


def _experiment(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.from_dict(_read_json(args.config)) if args.config else harness.default_experiment()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


_TRAIN_KEYS = {"task", "task_seed", "n_t", "n_s", "act", "loss", "prior", "train"}


def cmd_train(args) -> int:
    d = _read_json(args.config)
    for k in d:
        if k not in _TRAIN_KEYS:
            raise ConfigError(k, "unknown field")
    try:
        task = gen_task(TaskSpec(**d.get("task", {})), int(d.get("task_seed", 0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError("task", str(exc)) from None
    tdict = dict(d.get("train", {}))
    if args.seed is not None:
        tdict["seed"] = args.seed
    try:
        tc = trainer.TrainConfig.from_dict(tdict)
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from None
    pd = {"potential": "poly10", "sigma": tc.sigma, **d.get("prior", {})}
    try:
        prior = GibbsPrior(pd["potential"], float(pd["sigma"]), task.spec.q + 1)
    except (TypeError, ValueError) as exc:
        raise ConfigError("prior", str(exc)) from None
    n_t, n_s = int(d.get("n_t", 64)), int(d.get("n_s", 64))
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 17]))
    dt = task.target.draw(n_t, rng)
    ds = None if tc.scenario == "supervised" else task.source.draw(n_s, rng)
    model = trainer.train(tc, dt, ds, d.get("act", task.spec.act), d.get("loss", "quadratic"), prior)
    out = Path(args.out or "train_out")
    out.mkdir(parents=True, exist_ok=True)
    trainer.save_model(model, out / "model.jsonl")
    trainer.write_trace_csv(model, out / "trace.csv")
    (out / "config.json").write_text(json.dumps({**d, "train": tc.to_dict()}, indent=2, sort_keys=True) + "\n")
    print(trainer.model_summary(model))
    return EXIT_OK


def cmd_rate_sweep(args) -> int:
    cfg = _experiment(args)
    result = harness.run_rate_sweep(cfg, args.out or "sweep_out", threads=_threads(args), plot=args.plot,
                                    log=lambda s: print(s, file=sys.stderr))
    for name, rep in result.reports.items():
        if isinstance(rep, str):
            print(f"{name}: {rep}")
        else:
            print(f"{name}: slope {rep.slope:.3f} vs {rep.x_label} (R2 {rep.r_squared:.3f}, dropped {list(rep.dropped)})")
    return EXIT_OK


def cmd_bounds(args) -> int:
    cfg = _experiment(args)
    task = gen_task(cfg.task, cfg.task_seed)
    reports = []
    for plan in cfg.scenarios:
        for n_t in cfg.n_grid:
            tc, n_s, alpha = cfg.train_config(plan, n_t)
            rep = harness._cell_bound(cfg, task, plan, tc, n_t, n_s, alpha)
            if rep is None:
                raise ConfigError("prior.potential", "bounds need the poly10 prior")
            reports.append({"n_t": n_t, "n_s": n_s, **rep.to_dict()})
    payload = {"config": cfg.to_dict(), "master_seed": cfg.seed, "reports": reports}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bounds.json").write_text(text)
    for r in reports:
        print(f"{r['scenario']} n_t={r['n_t']}: rhs {r['rhs_value']:.6g}")
    return EXIT_OK


def cmd_similarity(args) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.data_a and args.data_b:
        a, b = load_dataset(args.data_a), load_dataset(args.data_b)
        meta = {"data_a": args.data_a, "data_b": args.data_b}
    else:
        d = _read_json(args.config)
        try:
            spec = TaskSpec(**d.get("task", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError("task", str(exc)) from None
        task = gen_task(spec, int(d.get("task_seed", 0)))
        n = int(d.get("n", args.n))
        a = task.source.draw(n, np.random.default_rng(np.random.SeedSequence([seed, 1])))
        b = task.target.draw(n, np.random.default_rng(np.random.SeedSequence([seed, 2])))
        meta = {"task": spec.to_dict(), "n": n}
    value = analysis.ipm_dictionary(a, b, args.p, args.size, seed)
    payload = {**meta, "p": args.p, "dictionary_size": args.size, "seed": seed, "ipm_lower_bound": value}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "similarity.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(payload, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = harness.run_verify("fast" if args.fast else "full", log=print)
    failed = [r for r in results if not r.passed]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.json").write_text(json.dumps([r.__dict__ for r in results], indent=2) + "\n")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_INVARIANT if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mftransfer", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads; also read from $THREADS; never changes results")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="train one model and write model + trace")
    t.set_defaults(func=cmd_train)
    r = sub.add_parser("rate-sweep", parents=[common], help="WTGE over a grid of sample sizes")
    r.add_argument("--plot", action="store_true", help="also write SVG log-log plots")
    r.set_defaults(func=cmd_rate_sweep)
    b = sub.add_parser("bounds", parents=[common], help="bound right-hand sides for an experiment config")
    b.set_defaults(func=cmd_bounds)
    s = sub.add_parser("similarity", parents=[common], help="dictionary IPM between two datasets")
    s.add_argument("--data-a")
    s.add_argument("--data-b")
    s.add_argument("--p", type=int, default=2, choices=(2, 4))
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--n", type=int, default=2000)
    s.set_defaults(func=cmd_similarity)
    v = sub.add_parser("verify", parents=[common], help="run the invariant suite")
    v.add_argument("--fast", action="store_true")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (trainer.Diverged, analysis.EstimationAborted) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
