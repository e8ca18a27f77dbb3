"""Generalization estimators, the resampling identity, bound evaluation, IPM
diagnostics, rate fitting and the pointwise assumption battery."""
from __future__ import annotations

import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import mfnet
from .measures import DataSet, data_moment, resample_one
from .objective import KLEstimate
from .priors import GibbsPrior
from .tasks import TaskPair
from .trainer import Diverged, TrainConfig, TrainedModel, finetune_stage1, train, train_finetune

FAILURE_LIMIT = 0.2
CSV_COLUMNS = ("scenario", "n_t", "n_s", "alpha", "beta", "replicate", "train_risk", "test_risk", "gen_gap", "seed")


class EstimationAborted(RuntimeError):
    """Too many replicates diverged for the estimate to be trusted."""


class InsufficientData(ValueError):
    pass


# -- constants --------------------------------------------------------------

@dataclass(frozen=True)
class Constants:
    L_l: float
    L_l1: float
    L_l2: float
    L_phi: float
    L_m: float
    L_e: float

    def to_dict(self) -> dict:
        return asdict(self)


def constants_extract(act, ol) -> Constants:
    """Growth constants of the loss/activation pair and the derived L_m, L_e.

    L_m = 4 L_l L_phi^2 bounds the loss, L_e = 24 L_l1 L_phi (1 + L_phi) bounds
    its flat derivative, both against (1 + 4th moments)(1 + ||z||^2).
    """
    act, ol = mfnet._as_act(act), mfnet._as_loss(ol)
    c = ol.constants
    lphi = act.growth_constant
    return Constants(
        L_l=c["L_l"], L_l1=c["L_l1"], L_l2=c["L_l2"], L_phi=lphi,
        L_m=4.0 * c["L_l"] * lphi**2,
        L_e=24.0 * c["L_l1"] * lphi * (1.0 + lphi),
    )


# -- replicate estimators ----------------------------------------------------

@dataclass(frozen=True)
class ReplicateRecord:
    replicate: int
    seed: int
    train_risk: float
    test_risk: float
    gen_gap: float


@dataclass(frozen=True)
class GenEstimate:
    mean: float
    std_error: float
    replicates: int
    values: tuple[float, ...]
    failed: int = 0
    method: str = "plain"
    records: tuple[ReplicateRecord, ...] = field(default=(), repr=False)

    @classmethod
    def from_values(cls, values, failed: int = 0, method: str = "plain", records=()) -> "GenEstimate":
        v = np.asarray(values, dtype=float)
        if v.size < 2:
            raise InsufficientData("an estimate needs at least 2 successful replicates")
        return cls(float(np.mean(v)), float(np.std(v, ddof=1) / np.sqrt(v.size)), int(v.size),
                   tuple(float(x) for x in v), failed, method, tuple(records))

    def within(self, target: float, k: float = 3.0) -> bool:
        return abs(self.mean - target) <= k * self.std_error

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "replicates": self.replicates,
                "failed": self.failed, "method": self.method}


def replicate_seed(seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(replicate)]).generate_state(1, np.uint32)[0])


def _stream(seed: int, replicate: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate), tag]))


def _default_prior(task: TaskPair, cfg: TrainConfig, prior: GibbsPrior | None) -> GibbsPrior:
    if prior is not None:
        return prior
    return GibbsPrior("poly10", cfg.sigma, task.spec.q + 1)


_STAGE1_CACHE: dict = {}
_STAGE1_LOCK = threading.Lock()
_STAGE1_MAX = 1024


def _stage1_key(ds: DataSet, cfg: TrainConfig, act, ol, prior: GibbsPrior):
    used = (cfg.seed, cfg.particles, cfg.steps, cfg.step_size, cfg.beta_s, cfg.sigma, cfg.batch)
    return (ds.x.tobytes(), ds.y.tobytes(), used, mfnet._as_act(act).kind, mfnet._as_loss(ol).kind, prior)


def _fit(cfg: TrainConfig, dt: DataSet, ds: DataSet | None, act, ol, prior: GibbsPrior) -> TrainedModel:
    if cfg.scenario != "finetune":
        return train(cfg, dt, ds, act, ol, prior)
    # stage 1 sees only the source, so it is shared by every fit with the same source and seed
    key = _stage1_key(ds, cfg, act, ol, prior)
    with _STAGE1_LOCK:
        stage1 = _STAGE1_CACHE.get(key)
    if stage1 is None:
        stage1 = finetune_stage1(ds, cfg, act, ol, prior)
        with _STAGE1_LOCK:
            if len(_STAGE1_CACHE) >= _STAGE1_MAX:
                _STAGE1_CACHE.clear()
            _STAGE1_CACHE[key] = stage1
    return train_finetune(dt, ds, cfg, act, ol, prior, stage1)


def _draw_source(task: TaskPair, cfg: TrainConfig, n_s: int, seed: int, rep: int) -> DataSet | None:
    if cfg.scenario == "supervised":
        return None
    if n_s < 1:
        raise ValueError(f"{cfg.scenario} needs n_s >= 1")
    return task.source.draw(n_s, _stream(seed, rep, 1))


def _gap_replicate(task, cfg, n_t, n_s, test_size, seed, rep, act, ol, prior, control_variate):
    rseed = replicate_seed(seed, rep)
    c = replace(cfg, seed=rseed)
    ds = _draw_source(task, cfg, n_s, seed, rep)
    dt = task.target.draw(n_t, _stream(seed, rep, 2))
    test = task.target.draw(test_size, _stream(seed, rep, 3))
    model = _fit(c, dt, ds, act, ol, prior)
    tr, te = model.risk(dt), model.risk(test)
    gap = te - tr
    if control_variate:
        # twin trained on an independent target set: its gap on dt has mean zero
        twin = _fit(c, task.target.draw(n_t, _stream(seed, rep, 4)), ds, act, ol, prior)
        gap -= twin.risk(test) - twin.risk(dt)
    return ReplicateRecord(rep, rseed, tr, te, gap)


def _run_replicates(fn, replicates: int, threads: int) -> tuple[list, int]:
    """Run fn(rep) for every replicate; divergences count as failures."""
    def guarded(rep):
        try:
            return fn(rep)
        except Diverged:
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(guarded, range(replicates)))
    else:
        results = [guarded(rep) for rep in range(replicates)]
    failed = sum(r is None for r in results)
    if failed >= FAILURE_LIMIT * replicates:
        raise EstimationAborted(f"{failed} of {replicates} replicates diverged")
    return [r for r in results if r is not None], failed


def _check_common(replicates: int, test_size: int):
    if replicates < 2:
        raise ValueError("replicates must be at least 2")
    if test_size < 10_000:
        raise ValueError("test_size must be at least 1e4")


def wtge_estimate(task: TaskPair, cfg: TrainConfig, n_t: int, n_s: int, replicates: int,
                  test_size: int = 20_000, seed: int = 0, *, act=None, ol="quadratic",
                  prior: GibbsPrior | None = None, control_variate: bool = False,
                  threads: int = 1) -> GenEstimate:
    """Mean over replicates of R(model, test) - R(model, train_t).

    Each replicate draws fresh training sets and a fresh test set from streams
    keyed by (seed, replicate). With ``control_variate`` the gap of a twin
    model, trained with the same seed and source data on an independent target
    set, is subtracted; the twin is independent of train_t, so its gap has mean
    zero and the estimator stays unbiased with a much smaller spread.
    """
    _check_common(replicates, test_size)
    act = act if act is not None else task.spec.act
    prior = _default_prior(task, cfg, prior)
    records, failed = _run_replicates(
        lambda rep: _gap_replicate(task, cfg, n_t, n_s, test_size, seed, rep, act, ol, prior, control_variate),
        replicates, threads)
    return GenEstimate.from_values([r.gen_gap for r in records], failed,
                                   "control_variate" if control_variate else "plain", records)


def wter_estimate(task: TaskPair, cfg: TrainConfig, n_t: int, n_s: int, replicates: int,
                  test_size: int = 20_000, seed: int = 0, *, act=None, ol="quadratic",
                  prior: GibbsPrior | None = None, threads: int = 1) -> GenEstimate:
    """Mean test risk; on a noiseless task the infimum of the risk is 0."""
    if not task.noiseless:
        raise ValueError("excess risk needs a noiseless task; the infimum of a noisy risk is unknown")
    _check_common(replicates, test_size)
    act = act if act is not None else task.spec.act
    prior = _default_prior(task, cfg, prior)

    def one(rep):
        rseed = replicate_seed(seed, rep)
        ds = _draw_source(task, cfg, n_s, seed, rep)
        dt = task.target.draw(n_t, _stream(seed, rep, 2))
        test = task.target.draw(test_size, _stream(seed, rep, 3))
        model = _fit(replace(cfg, seed=rseed), dt, ds, act, ol, prior)
        tr, te = model.risk(dt), model.risk(test)
        return ReplicateRecord(rep, rseed, tr, te, te - tr)

    records, failed = _run_replicates(one, replicates, threads)
    return GenEstimate.from_values([r.test_risk for r in records], failed, "test_risk", records)


def resampling_identity_check(task: TaskPair, cfg: TrainConfig, n_t: int, n_s: int, outer_replicates: int,
                              seed: int = 0, *, test_size: int = 10_000, act=None, ol="quadratic",
                              prior: GibbsPrior | None = None, threads: int = 1) -> tuple[GenEstimate, GenEstimate]:
    """Both sides of gen = E[l(m(nu), Zbar) - l(m(nu_(1)), Zbar)].

    LHS: test risk minus train risk. RHS: loss at a fresh point Zbar of the
    model trained on the original set minus the model trained with point 0
    replaced by Zbar, both with the same seed.
    """
    if n_t > 16:
        raise ValueError("n_t must be at most 16")
    if outer_replicates < 50:
        raise ValueError("outer_replicates must be at least 50")
    act = act if act is not None else task.spec.act
    prior = _default_prior(task, cfg, prior)

    def one(rep):
        rseed = replicate_seed(seed, rep)
        c = replace(cfg, seed=rseed)
        ds = _draw_source(task, cfg, n_s, seed, rep)
        dt = task.target.draw(n_t, _stream(seed, rep, 2))
        test = task.target.draw(test_size, _stream(seed, rep, 3))
        zbar = task.target.draw(1, _stream(seed, rep, 5))
        model = _fit(c, dt, ds, act, ol, prior)
        swapped = _fit(c, resample_one(dt, 0, (zbar.x[0], zbar.y[0])), ds, act, ol, prior)
        lhs = model.risk(test) - model.risk(dt)
        rhs = float(model.losses(zbar)[0] - swapped.losses(zbar)[0])
        return lhs, rhs

    pairs, failed = _run_replicates(one, outer_replicates, threads)
    lhs = GenEstimate.from_values([p[0] for p in pairs], failed, "test_minus_train")
    rhs = GenEstimate.from_values([p[1] for p in pairs], failed, "replace_one")
    return lhs, rhs


def identity_gap(lhs: GenEstimate, rhs: GenEstimate) -> tuple[float, float]:
    """|LHS - RHS| and the combined standard error."""
    return abs(lhs.mean - rhs.mean), math.hypot(lhs.std_error, rhs.std_error)


def records_to_rows(records, scenario: str, n_t: int, n_s: int, alpha, beta) -> list[dict]:
    return [
        {"scenario": scenario, "n_t": n_t, "n_s": n_s, "alpha": alpha, "beta": beta, "replicate": r.replicate,
         "train_risk": r.train_risk, "test_risk": r.test_risk, "gen_gap": r.gen_gap, "seed": r.seed}
        for r in records
    ]


# -- data moments ---------------------------------------------------------------

@dataclass(frozen=True)
class DataMoments:
    """E(1 + ||z||^2)^k for k = 1, 2, 4, with z = (x, y)."""

    m1: float
    m2: float
    m4: float
    samples: int


_MOMENT_CACHE: dict = {}


def task_moments(task: TaskPair, which: str, seed: int = 0, samples: int = 100_000) -> DataMoments:
    """Monte-Carlo data moments of the source or target generator, cached per task and seed."""
    if which not in ("source", "target"):
        raise ValueError("which must be 'source' or 'target'")
    key = (task.spec, task.seed, which, int(seed), int(samples))
    if key not in _MOMENT_CACHE:
        gen = task.source if which == "source" else task.target
        data = gen.draw(samples, np.random.default_rng(np.random.SeedSequence([int(seed), 31, int(which == "target")])))
        _MOMENT_CACHE[key] = DataMoments(data_moment(data, 1), data_moment(data, 2), data_moment(data, 4), samples)
    return _MOMENT_CACHE[key]


# -- bound right-hand sides -----------------------------------------------------

def _formula_wtge_alpha(t: dict) -> float:
    c_t = math.sqrt(2.0) * t["L_e"] ** 2 * (1.0 + t["alpha"] * t["L_m"]) ** 2 * (1.0 + 2.0 / t["n_t"]) ** 2
    bracket = (2.0 * (2.0 + t["alpha"]) ** 2 * t["E_t4"]
               + 2.0 * (1.0 - t["alpha"]) ** 2 * t["E_t2"] * t["E_s2"])
    return c_t * (t["alpha"] / t["n_t"]) * (2.0 * t["beta"] ** 2 / t["sigma"] ** 2) * t["comp"] * bracket


def _formula_wtge_finetune(t: dict) -> float:
    n = t["n_t"]
    return ((2.0 / n) * (1.0 + 2.0 / n) ** 2 * (16.0 * t["beta_t"] ** 2 / t["sigma"] ** 2)
            * t["L_e"] ** 2 * (1.0 + t["L_m"]) ** 2 * t["comp"] * t["E_s2"] * t["E_t4"])


def _wter_alpha_terms(t: dict) -> dict:
    scale = 8.0 * t["beta"] ** 2 / t["sigma"] ** 2
    return {
        "rate_target": t["C_t"] * t["alpha"] / t["n_t"] * scale,
        "rate_source": t["C_s"] * (1.0 - t["alpha"]) / t["n_s"] * scale,
        "similarity": (1.0 - t["alpha"]) * t["C_d"] * t["d_sim"],
        "kl": t["sigma"] ** 2 / (2.0 * t["beta"] ** 2) * t["kl"],
    }


def _wter_finetune_terms(t: dict) -> dict:
    s2 = t["sigma"] ** 2
    return {
        "rate_target": t["C_t"] / t["n_t"] * t["beta_t"] ** 2 / s2,
        "kl_target": s2 / (2.0 * t["beta_t"] ** 2) * t["kl_t"],
        "rate_source": t["C_s"] / t["n_s"] * t["beta_s"] ** 2 / s2,
        "kl_source": s2 / (2.0 * t["beta_s"] ** 2) * t["kl_s"],
        "similarity": t["C_d"] * t["d_sim"],
    }


FORMULAS = {
    "wtge_alpha": _formula_wtge_alpha,
    "wtge_finetune": _formula_wtge_finetune,
    "wter_alpha": lambda t: math.fsum(_wter_alpha_terms(t).values()),
    "wter_finetune": lambda t: math.fsum(_wter_finetune_terms(t).values()),
}


@dataclass(frozen=True)
class BoundReport:
    """A bound value with every input named, so it can be re-evaluated by hand."""

    scenario: str
    formula: str
    constants: dict
    notes: dict
    rhs_value: float
    terms: dict = field(default_factory=dict)
    flags: tuple[str, ...] = ()

    def recompute(self) -> float:
        return float(FORMULAS[self.formula](self.constants))

    def audit(self, rtol: float = 1e-12) -> bool:
        again = self.recompute()
        return abs(again - self.rhs_value) <= rtol * max(abs(self.rhs_value), 1e-300)

    @property
    def certificate(self) -> bool:
        return "NOT-A-CERTIFICATE" not in self.flags

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "formula": self.formula, "rhs_value": self.rhs_value,
                "constants": dict(self.constants), "notes": dict(self.notes), "terms": dict(self.terms),
                "flags": list(self.flags)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _constant_items(constants: Constants) -> tuple[dict, dict]:
    vals = constants.to_dict()
    notes = {
        "L_l": "loss growth |l| <= L_l(1 + yhat^2 + y^2)",
        "L_l1": "derivative growth |dl| <= L_l1(1 + |yhat| + |y|)",
        "L_l2": "curvature |d2l| <= L_l2",
        "L_phi": "activation growth |act(w.x)| <= L_phi(1 + ||x||)(1 + ||w||)",
        "L_m": "4 L_l L_phi^2",
        "L_e": "24 L_l1 L_phi (1 + L_phi)",
    }
    return vals, notes


def _need(value, name):
    if value is None:
        raise ValueError(f"missing {name}")
    return value


def bound_rhs_wtge_alpha(constants: Constants, comp_value: float, moments_t: DataMoments,
                         moments_s: DataMoments | None, alpha: float, beta: float, sigma: float,
                         n_t: int, scenario: str = "alpha_erm") -> BoundReport:
    """Generalization bound for alpha-ERM; alpha = 1 is plain supervised learning.

    Source moments only enter through (1 - alpha)^2 and may be omitted when alpha = 1.
    """
    _need(moments_t, "target data moments")
    if moments_s is None:
        if alpha != 1.0:
            raise ValueError("missing source data moments")
        e_s2, s_note = 0.0, "unused: multiplied by (1 - alpha)^2 = 0"
    else:
        e_s2, s_note = moments_s.m2, f"E(1+||Z_s||^2)^2, Monte Carlo over {moments_s.samples} draws"
    vals, notes = _constant_items(constants)
    vals.update(comp=float(comp_value), E_t4=moments_t.m4, E_t2=moments_t.m2, E_s2=e_s2,
                alpha=float(alpha), beta=float(beta), sigma=float(sigma), n_t=int(n_t))
    vals["c_t"] = math.sqrt(2.0) * vals["L_e"] ** 2 * (1 + alpha * vals["L_m"]) ** 2 * (1 + 2.0 / n_t) ** 2
    notes.update(comp="(1 + 2 M8 + 2 M4)^2 of the 8th-power tilted prior, radial quadrature",
                 E_t4=f"E(1+||Z_t||^2)^4, Monte Carlo over {moments_t.samples} draws",
                 E_t2=f"E(1+||Z_t||^2)^2, Monte Carlo over {moments_t.samples} draws",
                 E_s2=s_note, alpha="target weight", beta="inverse temperature", sigma="prior scale",
                 n_t="target sample size", c_t="sqrt(2) L_e^2 (1 + alpha L_m)^2 (1 + 2/n_t)^2")
    rhs = _formula_wtge_alpha(vals)
    return BoundReport(scenario, "wtge_alpha", vals, notes, float(rhs))


def bound_rhs_wtge_finetune(constants: Constants, comp_ft_value: float, moments_t: DataMoments,
                            moments_s: DataMoments, beta_t: float, sigma: float, n_t: int) -> BoundReport:
    _need(moments_t, "target data moments")
    _need(moments_s, "source data moments")
    vals, notes = _constant_items(constants)
    vals.update(comp=float(comp_ft_value), E_t4=moments_t.m4, E_s2=moments_s.m2, beta_t=float(beta_t),
                sigma=float(sigma), n_t=int(n_t))
    notes.update(comp="fine-tuning complexity from block moments of the tilted priors",
                 E_t4=f"E(1+||Z_t||^2)^4, Monte Carlo over {moments_t.samples} draws",
                 E_s2=f"E(1+||Z_s||^2)^2, Monte Carlo over {moments_s.samples} draws",
                 beta_t="stage-2 inverse temperature", sigma="prior scale", n_t="target sample size")
    return BoundReport("finetune", "wtge_finetune", vals, notes, float(_formula_wtge_finetune(vals)))


def _kl_value(kl) -> float:
    v = kl.value if isinstance(kl, KLEstimate) else float(kl)
    if not np.isfinite(v):
        raise ValueError("KL divergence is infinite; the reference measure is not absolutely continuous")
    return float(v)


def bound_rhs_wter(scenario: str, *, n_t: int, n_s: int, sigma: float, coefficients: dict,
                   similarity: float = 0.0, similarity_source: str = "identical_tasks",
                   alpha: float | None = None, beta: float | None = None, kl=None,
                   beta_t: float | None = None, beta_s: float | None = None, kl_t=None, kl_s=None) -> BoundReport:
    """Excess-risk bound in the simplified form that assumes a zero-risk reference measure.

    ``coefficients`` holds C_t, C_s, C_d. A similarity measured by
    ipm_dictionary is only a lower bound of the true IPM, so such reports are
    flagged NOT-A-CERTIFICATE.
    """
    flags = ()
    if similarity_source == "ipm_dictionary":
        flags = ("NOT-A-CERTIFICATE",)
    elif similarity_source != "identical_tasks" and similarity_source != "exact":
        raise ValueError("similarity_source must be 'identical_tasks', 'exact' or 'ipm_dictionary'")
    if similarity_source == "identical_tasks" and similarity != 0.0:
        raise ValueError("identical tasks have zero similarity distance")
    base = {"C_t": float(coefficients["C_t"]), "C_s": float(coefficients["C_s"]), "C_d": float(coefficients["C_d"]),
            "n_t": int(n_t), "n_s": int(n_s), "sigma": float(sigma), "d_sim": float(similarity)}
    notes = {"C_t": "user coefficient", "C_s": "user coefficient", "C_d": "user coefficient",
             "d_sim": f"similarity distance ({similarity_source})", "sigma": "prior scale"}
    if scenario in ("alpha_erm", "supervised"):
        base.update(alpha=float(_need(alpha, "alpha")), beta=float(_need(beta, "beta")), kl=_kl_value(_need(kl, "kl")))
        notes.update(kl="KL(reference || prior), parametric Monte Carlo", alpha="target weight")
        terms, formula = _wter_alpha_terms(base), "wter_alpha"
    elif scenario == "finetune":
        base.update(beta_t=float(_need(beta_t, "beta_t")), beta_s=float(_need(beta_s, "beta_s")),
                    kl_t=_kl_value(_need(kl_t, "kl_t")), kl_s=_kl_value(_need(kl_s, "kl_s")))
        notes.update(kl_t="KL(target outer-weight reference || prior)", kl_s="KL(source reference || prior)")
        terms, formula = _wter_finetune_terms(base), "wter_finetune"
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    return BoundReport(scenario, formula, base, notes, float(FORMULAS[formula](base)), terms, flags)


# -- similarity -------------------------------------------------------------------

def ipm_dictionary(data_a: DataSet, data_b: DataSet, p: int = 2, dictionary_size: int = 256, seed: int = 0) -> float:
    """max_k |avg_a f_k - avg_b f_k| over f_k(z) = (1 + ||z||^p) * logistic(u_k . z/||z|| + b_k).

    The maximum over a finite dictionary is a lower bound of the true IPM.
    """
    if p not in (2, 4):
        raise ValueError("p must be 2 or 4")
    if dictionary_size < 256:
        raise ValueError("dictionary_size must be at least 256")
    if data_a.q != data_b.q:
        raise mfnet.DimensionError("datasets have different input dimensions")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 97]))
    d = data_a.q + 1
    u = rng.standard_normal((dictionary_size, d))
    b = rng.standard_normal(dictionary_size)

    def averages(data):
        z = data.z()
        norm = np.linalg.norm(z, axis=1)
        zhat = z / np.where(norm > 0, norm, 1.0)[:, None]
        f = (1.0 + norm**p)[:, None] * expit(zhat @ u.T + b)
        return f.mean(axis=0)

    return float(np.max(np.abs(averages(data_a) - averages(data_b))))


# -- rate fitting -----------------------------------------------------------------

@dataclass(frozen=True)
class RateReport:
    scenario: str
    x_label: str
    points: tuple[tuple[float, float, float], ...]
    slope: float
    intercept: float
    r_squared: float
    used: tuple[float, ...]
    dropped: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "x_label": self.x_label,
                "points": [{"n": n, "mean": m, "std_error": s} for n, m, s in self.points],
                "slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared,
                "used": list(self.used), "dropped": list(self.dropped)}


def rate_fit(points, scenario: str = "", x_label: str = "n") -> RateReport:
    """Least squares of log mean on log n; points with mean <= 2 SE are dropped."""
    pts = [(float(n), float(m), float(s)) for n, m, s in points]
    if len(pts) < 4:
        raise InsufficientData(f"rate fit needs at least 4 grid points, got {len(pts)}")
    ns = [p[0] for p in pts]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("grid sizes must be strictly increasing")
    keep = [p for p in pts if p[1] > 0 and p[1] > 2.0 * p[2]]
    dropped = tuple(p[0] for p in pts if p not in keep)
    if len(keep) < 3:
        raise InsufficientData(f"only {len(keep)} usable points (mean > 2 SE); dropped n = {list(dropped)}")
    x = np.log([p[0] for p in keep])
    y = np.log([p[1] for p in keep])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    if ss_tot == 0.0:
        slope = 0.0
    return RateReport(scenario, x_label, tuple(pts), float(slope), float(intercept), float(r2),
                      tuple(p[0] for p in keep), dropped)


# -- pointwise invariants ---------------------------------------------------------

def flat_identity_residual(cloud_m, cloud_m2, z, act, ol) -> float:
    """|l(m') - l(m) - int_0^1 int dl/dm(m_lambda, z, .) d(m' - m) dlambda|.

    m_lambda = (1 - lambda) m + lambda m' is kept as a weighted union of atoms;
    the lambda integral uses 2-point Gauss-Legendre, exact for quadratic loss.
    """
    x, y = mfnet._split(z)
    a1, a2 = cloud_m.atoms, cloud_m2.atoms
    atoms = np.vstack([a1, a2])
    r1, r2 = a1.shape[0], a2.shape[0]
    nodes, weights = np.polynomial.legendre.leggauss(2)
    total = 0.0
    for t, w in zip(0.5 * (nodes + 1.0), 0.5 * weights):
        mix = np.concatenate([np.full(r1, (1.0 - t) / r1), np.full(r2, t / r2)])
        vals = np.array([mfnet._flat_derivative_weighted(atoms, mix, x, y, th, act, ol) for th in atoms])
        signed = np.concatenate([np.full(r1, -1.0 / r1), np.full(r2, 1.0 / r2)])
        total += w * float(signed @ vals)
    diff = mfnet.loss(cloud_m2, z, act, ol) - mfnet.loss(cloud_m, z, act, ol)
    return abs(diff - total)


def normalization_residual(cloud, z, act, ol) -> float:
    """|E_{theta ~ m} dl/dm(m, z, theta)|."""
    vals = [mfnet.flat_derivative(cloud, z, th, act, ol) for th in cloud.atoms]
    return abs(float(np.mean(vals)))


def normalization_residual_sp(w_cloud, a_cloud, z, act, ol) -> float:
    vals = [mfnet.flat_derivative_sp(w_cloud, a_cloud, z, a, act, ol) for a in a_cloud.atoms[:, 0]]
    return abs(float(np.mean(vals)))


@dataclass(frozen=True)
class BatteryResult:
    act: str
    loss: str
    draws: int
    violations: dict

    @property
    def passed(self) -> bool:
        return all(v == 0 for v in self.violations.values())


def _log_uniform(rng, lo, hi, size):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


def assumption_battery(act, ol, draws: int = 1_000_000, seed: int = 0, chunk: int = 50_000,
                       constants: Constants | None = None) -> BatteryResult:
    """Count violations of the pointwise growth bounds over random draws.

    Checks the loss, loss-derivative, curvature and activation bounds, and the
    two network-level bounds l <= L_m (1 + E||theta||^4)(1 + ||z||^2) and
    |dl/dm| <= L_e (1 + E||theta||^4 + ||theta||^4)(1 + ||z||^2), on clouds of
    1 to 8 atoms. Scales are log-uniform over several decades. ``constants``
    overrides the extracted ones, e.g. to confirm that shrunken ones fail.
    """
    act, ol = mfnet._as_act(act), mfnet._as_loss(ol)
    c = constants if constants is not None else constants_extract(act, ol)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 53]))
    counts = dict.fromkeys(("loss", "loss_deriv", "loss_curv", "activation", "growth_loss", "growth_deriv"), 0)
    slack = 1e-12
    done = 0
    dims = (1, 2, 3, 5)
    while done < draws:
        size = min(chunk, draws - done)
        q = dims[(done // chunk) % len(dims)]
        # outer loss on arbitrary (yhat, y)
        yhat = rng.standard_normal(size) * _log_uniform(rng, 1e-3, 1e3, size)
        y = rng.standard_normal(size) * _log_uniform(rng, 1e-3, 1e3, size)
        counts["loss"] += int(np.sum(np.abs(ol(yhat, y)) > c.L_l * (1 + yhat**2 + y**2) * (1 + slack)))
        counts["loss_deriv"] += int(np.sum(np.abs(ol.d1(yhat, y)) > c.L_l1 * (1 + np.abs(yhat) + np.abs(y)) * (1 + slack)))
        counts["loss_curv"] += int(np.sum(np.abs(ol.d2(yhat, y)) > c.L_l2 * (1 + slack)))
        # network-level draws
        k = rng.integers(1, 9, size)
        mask = np.arange(8)[None, :] < k[:, None]
        atoms = rng.standard_normal((size, 8, q + 1)) * _log_uniform(rng, 1e-2, 1e1, (size, 1, 1))
        x = rng.standard_normal((size, q)) * _log_uniform(rng, 1e-2, 1e2, (size, 1))
        yy = rng.standard_normal(size) * _log_uniform(rng, 1e-2, 1e2, size)
        theta = rng.standard_normal((size, q + 1)) * _log_uniform(rng, 1e-2, 1e1, (size, 1))
        pre = np.einsum("bkq,bq->bk", atoms[:, :, 1:], x)
        feat = act(pre)
        counts["activation"] += int(np.sum(
            (np.abs(feat) > c.L_phi * (1 + np.linalg.norm(x, axis=1))[:, None]
             * (1 + np.linalg.norm(atoms[:, :, 1:], axis=2)) * (1 + slack)) & mask))
        yhat_m = np.sum(np.where(mask, atoms[:, :, 0] * feat, 0.0), axis=1) / k
        m4 = np.sum(np.where(mask, np.sum(atoms**2, axis=2) ** 2, 0.0), axis=1) / k
        zz = 1 + np.sum(x**2, axis=1) + yy**2
        counts["growth_loss"] += int(np.sum(ol(yhat_m, yy) > c.L_m * (1 + m4) * zz * (1 + slack)))
        phi_theta = theta[:, 0] * act(np.sum(theta[:, 1:] * x, axis=1))
        deriv = ol.d1(yhat_m, yy) * (phi_theta - yhat_m)
        t4 = np.sum(theta**2, axis=1) ** 2
        counts["growth_deriv"] += int(np.sum(np.abs(deriv) > c.L_e * (1 + m4 + t4) * zz * (1 + slack)))
        done += size
    return BatteryResult(act.kind, ol.kind, draws, counts)
