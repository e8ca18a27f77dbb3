"""Rate sweeps over sample sizes, the verification suite, and their file outputs."""
from __future__ import annotations

import contextlib
import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import analysis, mfnet, trainer
from .measures import DataSet, ParticleCloud
from .objective import Lattice, Objective, gibbs_residual
from .priors import GibbsPrior, TiltedPrior, comp_alpha, comp_finetune, finetune_priors, sample
from .tasks import MODES, TaskSpec, gen_task
from .trainer import SCENARIOS, TrainConfig

ALPHA_RULES = ("fixed", "n_t/(n_t+n_s)", "1-1/n_t")
BETA_RULES = ("fixed", "(n_t+n_s)^(1/4)", "beta_s^2=sqrt(n_s),beta_t^2=sqrt(n_t)", "(alpha/n_t+(1-alpha)/n_s)^(-1/4)")
N_S_RULES = ("fixed", "proportional")
# fields of TrainConfig that the rules fill in per grid cell
RULE_FIELDS = ("scenario", "alpha", "beta", "beta_s", "beta_t", "seed")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


# -- configuration -----------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioPlan:
    """One scenario of a sweep with the rules that set n_s, alpha and beta per cell."""

    name: str
    n_s_rule: dict = field(default_factory=lambda: {"kind": "fixed", "n_s": 256})
    alpha_rule: dict = field(default_factory=lambda: {"kind": "n_t/(n_t+n_s)"})
    beta_rule: dict = field(default_factory=lambda: {"kind": "fixed", "beta": 10.0})
    train: dict = field(default_factory=dict)
    replicates: int | None = None

    def n_s(self, n_t: int) -> int:
        if self.name == "supervised":
            return 0
        r = self.n_s_rule
        if r["kind"] == "fixed":
            return int(r["n_s"])
        return int(round(r["k"] * n_t))

    def alpha(self, n_t: int, n_s: int) -> float | None:
        if self.name == "supervised":
            return 1.0
        if self.name == "finetune":
            return None
        r = self.alpha_rule
        if r["kind"] == "fixed":
            return float(r["alpha"])
        if r["kind"] == "n_t/(n_t+n_s)":
            return n_t / (n_t + n_s)
        return 1.0 - 1.0 / n_t

    def betas(self, n_t: int, n_s: int, alpha: float | None) -> dict:
        r = self.beta_rule
        kind = r["kind"]
        if self.name == "finetune":
            if kind == "fixed":
                return {"beta_s": float(r["beta_s"]), "beta_t": float(r["beta_t"])}
            if kind == "beta_s^2=sqrt(n_s),beta_t^2=sqrt(n_t)":
                return {"beta_s": n_s**0.25, "beta_t": n_t**0.25}
            raise ConfigError("beta_rule.kind", f"{kind!r} does not apply to finetune")
        if kind == "fixed":
            return {"beta": float(r["beta"])}
        if kind == "(n_t+n_s)^(1/4)":
            return {"beta": (n_t + n_s) ** 0.25}
        if kind == "(alpha/n_t+(1-alpha)/n_s)^(-1/4)":
            inner = alpha / n_t + ((1.0 - alpha) / n_s if n_s > 0 else 0.0)
            return {"beta": inner ** (-0.25)}
        raise ConfigError("beta_rule.kind", f"{kind!r} does not apply to {self.name}")

    def x_label(self) -> str:
        return "n_t+n_s" if self.name == "alpha_erm" else "n_t"


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    task_seed: int = 0
    seed: int = 0
    n_grid: tuple[int, ...] = (32, 64, 128, 256)
    replicates: int = 40
    test_size: int = 20_000
    act: str = "tanh"
    loss: str = "quadratic"
    prior: dict = field(default_factory=lambda: {"potential": "poly10", "sigma": 1.0})
    control_variate: bool = True
    train: dict = field(default_factory=lambda: {"particles": 128, "steps": 400, "step_size": 0.02})
    scenarios: tuple[ScenarioPlan, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_grid"] = list(self.n_grid)
        d["scenarios"] = [asdict(s) for s in self.scenarios]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _parse_experiment(d)

    def prior_for(self) -> GibbsPrior:
        return GibbsPrior(self.prior["potential"], float(self.prior["sigma"]), self.task.q + 1)

    def train_config(self, plan: ScenarioPlan, n_t: int) -> tuple[TrainConfig, int, float | None]:
        n_s = plan.n_s(n_t)
        alpha = plan.alpha(n_t, n_s)
        kwargs = {**self.train, **plan.train, "scenario": plan.name, "sigma": float(self.prior["sigma"])}
        kwargs.update(plan.betas(n_t, n_s, alpha))
        if plan.name == "alpha_erm":
            kwargs["alpha"] = alpha
        return TrainConfig(**kwargs), n_s, alpha


def default_experiment(seed: int = 0) -> ExperimentConfig:
    """The similar-task, noiseless sweep used for the rate acceptance checks."""
    return ExperimentConfig(
        seed=seed,
        scenarios=(
            ScenarioPlan("supervised", beta_rule={"kind": "fixed", "beta": 10.0}),
            ScenarioPlan("alpha_erm", n_s_rule={"kind": "proportional", "k": 1.0},
                         alpha_rule={"kind": "n_t/(n_t+n_s)"}, beta_rule={"kind": "fixed", "beta": 10.0}),
            ScenarioPlan("finetune", n_s_rule={"kind": "fixed", "n_s": 256},
                         beta_rule={"kind": "fixed", "beta_s": 10.0, "beta_t": 10.0},
                         train={"stage2_steps": 2000, "stage2_step_size": 1.0}, replicates=100),
        ),
    )


def _expect(d: dict, allowed: set, where: str):
    if not isinstance(d, dict):
        raise ConfigError(where or "config", "must be a JSON object")
    for k in d:
        if k not in allowed:
            raise ConfigError(f"{where}.{k}" if where else k, "unknown field")


def _typed(value, kind, name):
    ok = {int: lambda v: isinstance(v, int) and not isinstance(v, bool),
          float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
          bool: lambda v: isinstance(v, bool),
          str: lambda v: isinstance(v, str)}[kind]
    if not ok(value):
        raise ConfigError(name, f"expected {kind.__name__}, got {value!r}")
    return kind(value)


def _parse_rule(d: dict, name: str, kinds: tuple, params: dict) -> dict:
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError(name, "must be an object with a 'kind'")
    if d["kind"] not in kinds:
        raise ConfigError(f"{name}.kind", f"must be one of {kinds}")
    need = params.get(d["kind"], ())
    _expect(d, {"kind", *need}, name)
    for p in need:
        if p not in d:
            raise ConfigError(f"{name}.{p}", "missing")
    return {"kind": d["kind"], **{p: _typed(d[p], int if p == "n_s" else float, f"{name}.{p}") for p in need}}


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - set(RULE_FIELDS) - {"sigma"}


def _parse_train(d: dict, where: str) -> dict:
    _expect(d, _TRAIN_FIELDS, where)
    return dict(d)


def _parse_plan(d: dict, i: int) -> ScenarioPlan:
    where = f"scenarios[{i}]"
    _expect(d, {"name", "n_s_rule", "alpha_rule", "beta_rule", "train", "replicates"}, where)
    if d.get("name") not in SCENARIOS:
        raise ConfigError(f"{where}.name", f"must be one of {SCENARIOS}")
    plan = ScenarioPlan(d["name"])
    kw = {}
    if "n_s_rule" in d:
        kw["n_s_rule"] = _parse_rule(d["n_s_rule"], f"{where}.n_s_rule", N_S_RULES,
                                     {"fixed": ("n_s",), "proportional": ("k",)})
    if "alpha_rule" in d:
        kw["alpha_rule"] = _parse_rule(d["alpha_rule"], f"{where}.alpha_rule", ALPHA_RULES, {"fixed": ("alpha",)})
    if "beta_rule" in d:
        fixed = ("beta_s", "beta_t") if d["name"] == "finetune" else ("beta",)
        kw["beta_rule"] = _parse_rule(d["beta_rule"], f"{where}.beta_rule", BETA_RULES, {"fixed": fixed})
    elif d["name"] == "finetune":
        kw["beta_rule"] = {"kind": "fixed", "beta_s": 10.0, "beta_t": 10.0}
    if "train" in d:
        kw["train"] = _parse_train(d["train"], f"{where}.train")
    if d.get("replicates") is not None:
        kw["replicates"] = _typed(d["replicates"], int, f"{where}.replicates")
    return replace(plan, **kw)


def _parse_experiment(d: dict) -> ExperimentConfig:
    base = ExperimentConfig()
    _expect(d, {f.name for f in fields(ExperimentConfig)}, "")
    kw = {}
    if "task" in d:
        _expect(d["task"], {f.name for f in fields(TaskSpec)}, "task")
        if d["task"].get("mode", "shared_teacher") not in MODES:
            raise ConfigError("task.mode", f"must be one of {MODES}")
        try:
            kw["task"] = TaskSpec(**d["task"])
        except (TypeError, ValueError) as exc:
            raise ConfigError("task", str(exc)) from None
    for name, kind in (("task_seed", int), ("seed", int), ("replicates", int), ("test_size", int),
                       ("act", str), ("loss", str), ("control_variate", bool)):
        if name in d:
            kw[name] = _typed(d[name], kind, name)
    if "n_grid" in d:
        if not isinstance(d["n_grid"], list) or not d["n_grid"]:
            raise ConfigError("n_grid", "must be a non-empty list of sizes")
        kw["n_grid"] = tuple(_typed(n, int, "n_grid") for n in d["n_grid"])
        if any(n < 1 for n in kw["n_grid"]) or any(b <= a for a, b in zip(kw["n_grid"], kw["n_grid"][1:])):
            raise ConfigError("n_grid", "sizes must be positive and strictly increasing")
    if "prior" in d:
        _expect(d["prior"], {"potential", "sigma"}, "prior")
        kw["prior"] = {**base.prior, **d["prior"]}
    if "train" in d:
        kw["train"] = {**base.train, **_parse_train(d["train"], "train")}
    if "scenarios" in d:
        if not isinstance(d["scenarios"], list) or not d["scenarios"]:
            raise ConfigError("scenarios", "must be a non-empty list")
        kw["scenarios"] = tuple(_parse_plan(s, i) for i, s in enumerate(d["scenarios"]))
    cfg = replace(base, **kw)
    if not cfg.scenarios:
        cfg = replace(cfg, scenarios=default_experiment().scenarios)
    for what, value, allowed in (("act", cfg.act, mfnet.ACTIVATIONS), ("loss", cfg.loss, mfnet.LOSSES)):
        if value not in allowed:
            raise ConfigError(what, f"must be one of {allowed}")
    if cfg.replicates < 2:
        raise ConfigError("replicates", "must be at least 2")
    if cfg.test_size < 10_000:
        raise ConfigError("test_size", "must be at least 10000")
    try:
        cfg.prior_for()
    except (TypeError, ValueError) as exc:
        raise ConfigError("prior", str(exc)) from None
    try:
        for plan in cfg.scenarios:
            cfg.train_config(plan, cfg.n_grid[0])
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from None
    return cfg


def load_experiment(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    return ExperimentConfig.from_dict(d)


# -- rate sweep ---------------------------------------------------------------------

@dataclass
class CellResult:
    scenario: str
    n_t: int
    n_s: int
    alpha: float | None
    betas: dict
    gen: analysis.GenEstimate
    wter: float | None
    bound: analysis.BoundReport | None

    @property
    def x(self) -> int:
        return self.n_t + self.n_s if self.scenario == "alpha_erm" else self.n_t

    @property
    def dominated(self) -> bool | None:
        if self.bound is None:
            return None
        return abs(self.gen.mean) + 3.0 * self.gen.std_error <= self.bound.rhs_value

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "n_t": self.n_t, "n_s": self.n_s, "alpha": self.alpha,
                **self.betas, "wtge": self.gen.to_dict(), "wter": self.wter,
                "bound": None if self.bound is None else self.bound.to_dict(), "dominated": self.dominated}


@dataclass
class SweepResult:
    config: ExperimentConfig
    cells: list[CellResult]
    reports: dict  # scenario -> RateReport or error message
    rows: list[dict]
    regime: str = "similar"
    similarity: float | None = None

    def report(self, scenario: str) -> analysis.RateReport:
        r = self.reports[scenario]
        if isinstance(r, str):
            raise analysis.InsufficientData(r)
        return r

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "master_seed": self.config.seed,
                "regime": self.regime, "similarity_ipm_lower_bound": self.similarity,
                "cells": [c.to_dict() for c in self.cells],
                "rates": {k: (v if isinstance(v, str) else v.to_dict()) for k, v in self.reports.items()}}


def scenario_seed(seed: int, index: int) -> int:
    """Replicate streams are keyed by scenario, not by cell, so every grid cell of a
    scenario reuses the same source draws and training seeds."""
    return int(np.random.SeedSequence([int(seed), 211, int(index)]).generate_state(1, np.uint32)[0])


def _cell_bound(cfg: ExperimentConfig, task, plan: ScenarioPlan, tc: TrainConfig, n_t: int, n_s: int, alpha):
    if cfg.prior["potential"] != "poly10":
        return None
    consts = analysis.constants_extract(cfg.act, cfg.loss)
    sigma = float(cfg.prior["sigma"])
    mt = analysis.task_moments(task, "target")
    if plan.name == "finetune":
        ms = analysis.task_moments(task, "source")
        return analysis.bound_rhs_wtge_finetune(consts, _comp_ft(sigma, task.spec.q), mt, ms, tc.beta_t, sigma, n_t)
    comp = _comp_alpha(sigma, task.spec.q + 1)
    if plan.name == "supervised":
        return analysis.bound_rhs_wtge_alpha(consts, comp, mt, None, 1.0, tc.beta, sigma, n_t, "supervised")
    ms = analysis.task_moments(task, "source")
    return analysis.bound_rhs_wtge_alpha(consts, comp, mt, ms, alpha, tc.beta, sigma, n_t)


_COMP_CACHE: dict = {}


def _comp_alpha(sigma: float, dim: int) -> float:
    key = ("alpha", sigma, dim)
    if key not in _COMP_CACHE:
        _COMP_CACHE[key] = comp_alpha(TiltedPrior(GibbsPrior("poly10", sigma, dim)))
    return _COMP_CACHE[key]


def _comp_ft(sigma: float, q: int) -> float:
    key = ("ft", sigma, q)
    if key not in _COMP_CACHE:
        _COMP_CACHE[key] = comp_finetune(*finetune_priors(sigma, q))
    return _COMP_CACHE[key]


def task_regime(spec: TaskSpec) -> str:
    """'similar' when source and target generators coincide, else 'dissimilar'."""
    if spec.mode == "shared_teacher" or spec.shift == 0.0:
        return "similar"
    return "dissimilar"


def measured_similarity(task, seed: int, n: int = 4000) -> float:
    """Dictionary IPM between fresh source and target draws (a lower bound)."""
    a = task.source.draw(n, np.random.default_rng(np.random.SeedSequence([int(seed), 307, 1])))
    b = task.target.draw(n, np.random.default_rng(np.random.SeedSequence([int(seed), 307, 2])))
    return analysis.ipm_dictionary(a, b, 2, 256, seed)


def run_rate_sweep(cfg: ExperimentConfig, out_dir=None, threads: int = 1, plot: bool = False,
                   log=None) -> SweepResult:
    """WTGE (and WTER on noiseless tasks) for every scenario and grid size, plus rate fits.

    ``threads`` only changes how replicates are scheduled: every replicate has
    its own seed and results are collected in replicate order.
    """
    task = gen_task(cfg.task, cfg.task_seed)
    prior = cfg.prior_for()
    cells, rows, reports = [], [], {}
    for idx, plan in enumerate(cfg.scenarios):
        sseed = scenario_seed(cfg.seed, idx)
        reps = plan.replicates or cfg.replicates
        plan_cells = []
        for n_t in cfg.n_grid:
            tc, n_s, alpha = cfg.train_config(plan, n_t)
            t0 = time.perf_counter()
            gen = analysis.wtge_estimate(task, tc, n_t, n_s, reps, cfg.test_size, sseed, act=cfg.act, ol=cfg.loss,
                                         prior=prior, control_variate=cfg.control_variate, threads=threads)
            # the estimator's primary models are exactly what wter_estimate would train
            wter = float(np.mean([r.test_risk for r in gen.records])) if task.noiseless else None
            betas = {k: getattr(tc, k) for k in ("beta", "beta_s", "beta_t") if getattr(tc, k) is not None}
            if plan.name == "finetune":
                betas.pop("beta", None)
            cell = CellResult(plan.name, n_t, n_s, alpha, betas, gen, wter,
                              _cell_bound(cfg, task, plan, tc, n_t, n_s, alpha))
            plan_cells.append(cell)
            beta_col = tc.beta_t if plan.name == "finetune" else tc.beta
            rows.extend(analysis.records_to_rows(gen.records, plan.name, n_t, n_s, alpha, beta_col))
            if log is not None:
                log(f"{plan.name} n_t={n_t} n_s={n_s} gen={gen.mean:.3e}+-{gen.std_error:.1e} "
                    f"({time.perf_counter() - t0:.1f}s)")
        cells.extend(plan_cells)
        try:
            reports[plan.name] = analysis.rate_fit([(c.x, c.gen.mean, c.gen.std_error) for c in plan_cells],
                                                   plan.name, plan.x_label())
        except analysis.InsufficientData as exc:
            reports[plan.name] = f"insufficient data: {exc}"
    result = SweepResult(cfg, cells, reports, rows, task_regime(cfg.task), measured_similarity(task, cfg.task_seed))
    if out_dir is not None:
        write_outputs(result, Path(out_dir), plot)
    return result


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def csv_text(result: SweepResult) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps({"config": result.config.to_dict(), "master_seed": result.config.seed,
                                 "regime": result.regime},
                                sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(analysis.CSV_COLUMNS)
    for row in result.rows:
        w.writerow([_fmt(row[c]) for c in analysis.CSV_COLUMNS])
    return buf.getvalue()


def write_outputs(result: SweepResult, out: Path, plot: bool = False) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "rates.csv").write_text(csv_text(result))
    (out / "report.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    if plot:
        for name, rep in result.reports.items():
            if not isinstance(rep, str):
                (out / f"rate_{name}.svg").write_text(svg_rate_plot(rep, result.config))


def svg_rate_plot(rep: analysis.RateReport, cfg: ExperimentConfig | None = None, width=480, height=360) -> str:
    """Log-log scatter of |gen| against n with the fitted line."""
    pts = [(n, m) for n, m, _ in rep.points if m > 0]
    lx = [math.log10(n) for n, _ in pts]
    ly = [math.log10(m) for _, m in pts]
    fit_y = [(rep.slope * math.log(10 ** x) + rep.intercept) / math.log(10) for x in lx]
    x0, x1 = min(lx) - 0.1, max(lx) + 0.1
    allv = ly + fit_y
    y0, y1 = min(allv) - 0.2, max(allv) + 0.2
    pad = 50

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    if cfg is not None:
        parts.append("<!-- " + json.dumps({"config": cfg.to_dict(), "master_seed": cfg.seed},
                                          sort_keys=True).replace("--", "- -") + " -->")
    parts.append(f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
                 'fill="none" stroke="black"/>')
    parts.append(f'<polyline fill="none" stroke="steelblue" points="'
                 + " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(lx, fit_y)) + '"/>')
    for (n, _), x, y in zip(pts, lx, ly):
        color = "gray" if n in rep.dropped else "black"
        parts.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="4" fill="{color}"/>')
    parts.append(f'<text x="{pad}" y="{pad - 15}" font-size="14">{rep.scenario}: slope {rep.slope:.3f}, '
                 f'R2 {rep.r_squared:.3f}</text>')
    parts.append(f'<text x="{width / 2:.0f}" y="{height - 15}" font-size="12" text-anchor="middle">'
                 f'log10 {rep.x_label}</text>')
    parts.append(f'<text x="15" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 15 {height / 2:.0f})" '
                 'text-anchor="middle">log10 |gen|</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- verification suite -------------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    module: str
    name: str
    passed: bool
    observed: float
    required: str
    seconds: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.module}.{self.name}: observed {self.observed:.4g}, required {self.required} ({self.seconds:.1f}s)"


@contextlib.contextmanager
def inject_noise_fault():
    """Temporarily use noise sigma * sqrt(eta) instead of (sigma / beta) * sqrt(eta)."""
    original = trainer.noise_scale
    trainer.noise_scale = lambda sigma, beta, eta: sigma * math.sqrt(eta)
    try:
        yield
    finally:
        trainer.noise_scale = original


def _random_cloud(rng, r, d, scale=1.0):
    return ParticleCloud(scale * rng.standard_normal((r, d)))


def check_flat_identity(instances: int = 200, seed: int = 0) -> float:
    """Worst residual of the mixture-path identity over random quadratic-loss instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        q = int(rng.integers(1, 5))
        act = mfnet.ACTIVATIONS[i % len(mfnet.ACTIVATIONS)]
        m = _random_cloud(rng, int(rng.integers(1, 9)), q + 1)
        m2 = _random_cloud(rng, int(rng.integers(1, 9)), q + 1, 1.5)
        z = (rng.standard_normal(q), float(rng.standard_normal()))
        worst = max(worst, analysis.flat_identity_residual(m, m2, z, act, "quadratic"))
    return worst


def check_normalization(instances: int = 10_000, seed: int = 1) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        q = int(rng.integers(1, 5))
        act = mfnet.ACTIVATIONS[i % len(mfnet.ACTIVATIONS)]
        ol = mfnet.LOSSES[(i // 4) % 2]
        z = (rng.standard_normal(q), float(rng.standard_normal()))
        if i % 2 == 0:
            worst = max(worst, analysis.normalization_residual(_random_cloud(rng, int(rng.integers(1, 9)), q + 1),
                                                               z, act, ol))
        else:
            w = _random_cloud(rng, int(rng.integers(1, 9)), q)
            a = _random_cloud(rng, int(rng.integers(1, 9)), 1)
            worst = max(worst, analysis.normalization_residual_sp(w, a, z, act, ol))
    return worst


def gibbs_toy_data(zero_risk: bool = False) -> DataSet:
    if zero_risk:
        # x = 0 makes every unit output vanish, so the Gibbs density is the prior itself
        return DataSet(np.zeros((8, 1)), np.zeros(8))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 1))
    return DataSet(x, 0.8 * np.tanh(1.5 * x[:, 0]))


def gibbs_toy(particles: int = 10_000, steps: int = 2000, step_size: float = 0.005, beta: float = 3.0,
              zero_risk: bool = False, bins: int = 16, seed: int = 1) -> float:
    """TV distance between a long MFLD run on a two-parameter network and its Gibbs density."""
    data = gibbs_toy_data(zero_risk)
    prior = GibbsPrior("poly10", 1.0, 2)
    tc = TrainConfig("supervised", beta=beta, particles=particles, steps=steps, step_size=step_size, seed=seed)
    model = trainer.train(tc, data, None, "tanh", "quadratic", prior)
    obj = Objective("tanh", "quadratic", prior, beta)
    return gibbs_residual(model.cloud, data, obj, Lattice.covering(model.cloud.atoms, bins=bins))


def alpha_one_bitwise(seed: int = 3) -> bool:
    task = gen_task(TaskSpec(), 0)
    rng = np.random.default_rng(seed)
    dt, ds = task.target.draw(32, rng), task.source.draw(32, rng)
    prior = GibbsPrior("poly10", 1.0, task.spec.q + 1)
    base = dict(particles=64, steps=100, step_size=0.02, beta=5.0, seed=seed)
    m1 = trainer.train(TrainConfig("supervised", **base), dt, None, "tanh", "quadratic", prior)
    m2 = trainer.train(TrainConfig("alpha_erm", alpha=1.0, **base), dt, ds, "tanh", "quadratic", prior)
    return bool(np.array_equal(m1.cloud.atoms, m2.cloud.atoms) and m1.trace == m2.trace)


def identity_config(scenario: str = "supervised") -> TrainConfig:
    kw = dict(particles=64, steps=300, step_size=0.02, beta=10.0)
    if scenario == "alpha_erm":
        return TrainConfig("alpha_erm", alpha=0.5, **kw)
    return TrainConfig("supervised", **kw)


def bound_audit_reports() -> list[analysis.BoundReport]:
    task = gen_task(TaskSpec(), 0)
    q = task.spec.q
    consts = analysis.constants_extract("tanh", "quadratic")
    mt, ms = analysis.task_moments(task, "target"), analysis.task_moments(task, "source")
    return [
        analysis.bound_rhs_wtge_alpha(consts, _comp_alpha(1.0, q + 1), mt, ms, 0.5, 10.0, 1.0, 64),
        analysis.bound_rhs_wtge_alpha(consts, _comp_alpha(1.0, q + 1), mt, None, 1.0, 10.0, 1.0, 64, "supervised"),
        analysis.bound_rhs_wtge_finetune(consts, _comp_ft(1.0, q), mt, ms, 10.0, 1.0, 64),
        analysis.bound_rhs_wter("alpha_erm", n_t=64, n_s=64, sigma=1.0, coefficients={"C_t": 1, "C_s": 1, "C_d": 1},
                                alpha=0.5, beta=10.0, kl=0.3, similarity=0.01, similarity_source="ipm_dictionary"),
        analysis.bound_rhs_wter("finetune", n_t=64, n_s=256, sigma=1.0, coefficients={"C_t": 1, "C_s": 1, "C_d": 1},
                                beta_t=4.0, beta_s=5.0, kl_t=0.2, kl_s=0.4),
    ]


def run_verify(selector: str = "fast", log=None) -> list[CheckResult]:
    """Run the invariant batteries; ``fast`` uses smaller sizes where the check allows."""
    if selector not in ("fast", "full"):
        raise ValueError("selector must be 'fast' or 'full'")
    fast = selector == "fast"
    results = []

    def record(module, name, fn, ok, required):
        t0 = time.perf_counter()
        value = fn()
        res = CheckResult(module, name, bool(ok(value)), float(value), required, time.perf_counter() - t0)
        results.append(res)
        if log is not None:
            log(res.line())

    record("mfnet", "flat_derivative_identity", lambda: check_flat_identity(200), lambda v: v <= 1e-10, "<= 1e-10")
    record("mfnet", "normalization", lambda: check_normalization(2000 if fast else 10_000),
           lambda v: v <= 1e-10, "<= 1e-10")
    draws = 200_000 if fast else 1_000_000
    for act in mfnet.ACTIVATIONS:
        for ol in mfnet.LOSSES:
            record("analysis", f"assumption_battery[{act},{ol}]",
                   lambda a=act, o=ol: sum(analysis.assumption_battery(a, o, draws).violations.values()),
                   lambda v: v == 0, "0 violations")
    particles, bins = (3000, 10) if fast else (10_000, 16)
    record("objective", "gibbs_residual", lambda: gibbs_toy(particles, bins=bins), lambda v: v <= 0.15, "<= 0.15")
    record("objective", "gibbs_prior_recovery", lambda: gibbs_toy(particles, bins=bins, zero_risk=True),
           lambda v: v <= 0.10, "<= 0.10")
    record("trainer", "alpha_one_reduction", lambda: float(alpha_one_bitwise()), lambda v: v == 1.0, "bitwise equal")
    task = gen_task(TaskSpec(), 0)
    for scenario in (("supervised",) if fast else ("supervised", "alpha_erm")):
        def gap(s=scenario):
            lhs, rhs = analysis.resampling_identity_check(task, identity_config(s), 8, 8, 50 if fast else 200, seed=5)
            diff, se = analysis.identity_gap(lhs, rhs)
            return diff / se
        record("analysis", f"resampling_identity[{scenario}]", gap, lambda v: v <= 3.0, "|LHS-RHS| <= 3 SE")
    for rep in bound_audit_reports():
        record("analysis", f"bound_self_audit[{rep.formula}]",
               lambda r=rep: abs(r.recompute() - r.rhs_value) / abs(r.rhs_value), lambda v: v <= 1e-12, "<= 1e-12")
    return results
