"""Mean-field Langevin dynamics over particle clouds and the transfer scenarios built on it.

Noise is counter-based: the normal draws for step s come from a Philox
generator keyed by the run seed with the counter set to s, so a run is a pure
function of (inputs, seed) no matter how work is scheduled.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mfnet
from .measures import DataSet, MixedDataView, ParticleCloud, _fmt, _read_rows, _write_rows
from .objective import Objective
from .priors import GibbsPrior, sample

SCENARIOS = ("supervised", "alpha_erm", "finetune")
DIVERGENCE_LIMIT = 1e8


class Diverged(RuntimeError):
    def __init__(self, step: int, stage: str = "", trace=None):
        self.step = step
        self.stage = stage
        self.trace = list(trace or [])
        where = f"{stage} " if stage else ""
        super().__init__(f"{where}Langevin update diverged at step {step}")


@dataclass(frozen=True)
class TrainConfig:
    scenario: str = "supervised"
    alpha: float | None = None
    beta: float | None = 2.0
    beta_s: float | None = None
    beta_t: float | None = None
    sigma: float = 1.0
    particles: int = 256
    steps: int = 400
    step_size: float = 0.02
    stage2_steps: int | None = None  # None = steps
    stage2_step_size: float | None = None  # None = step_size
    batch: int | None = None  # None = full batch
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.scenario == "alpha_erm":
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ValueError("alpha_erm needs alpha in [0, 1]")
        if self.scenario == "finetune":
            if self.beta_s is None or self.beta_t is None:
                raise ValueError("finetune needs both beta_s and beta_t")
            if self.beta_s <= 0 or self.beta_t <= 0:
                raise ValueError("beta_s and beta_t must be positive")
        elif self.beta is None or self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.sigma <= 0 or self.step_size < 0:
            raise ValueError("sigma must be positive and step_size non-negative")
        if self.particles < 1 or self.steps < 0:
            raise ValueError("particles must be >= 1 and steps >= 0")
        if self.stage2_step_size is not None and self.stage2_step_size < 0:
            raise ValueError("stage2_step_size must be non-negative")
        if self.stage2_steps is not None and self.stage2_steps < 0:
            raise ValueError("stage2_steps must be non-negative")
        if self.batch is not None and self.batch < 1:
            raise ValueError("minibatch size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class NoiseStream:
    """Standard normals keyed by (seed, tag, step); row i belongs to atom i."""

    def __init__(self, seed: int, tag: int = 0):
        ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag])
        self.key = ss.generate_state(2, np.uint64)

    def generator(self, step: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key, counter=[0, 0, 0, step]))

    def normal(self, step: int, shape) -> np.ndarray:
        return self.generator(step).standard_normal(shape)


def _init_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, 1000 + tag]))


def _minibatch(data, size: int, gen: np.random.Generator) -> DataSet:
    """Draw ``size`` samples; for a mixture pick target with probability alpha."""
    comps = data.components()
    if len(comps) == 1:
        idx = gen.integers(0, comps[0][1].n, size)
        ds = comps[0][1]
        return DataSet(ds.x[idx], ds.y[idx])
    (alpha, tgt), (_, src) = comps
    from_t = gen.random(size) < alpha
    it = gen.integers(0, tgt.n, size)
    is_ = gen.integers(0, src.n, size)
    x = np.where(from_t[:, None], tgt.x[it], src.x[is_])
    y = np.where(from_t, tgt.y[it], src.y[is_])
    return DataSet(x, y)


def _checked(atoms: np.ndarray, step: int, stage: str, trace) -> np.ndarray:
    if not np.all(np.isfinite(atoms)) or np.max(np.abs(atoms)) > DIVERGENCE_LIMIT:
        raise Diverged(step, stage, trace)
    return atoms


def _drift(atoms, data, obj: Objective, batch_data=None):
    """Full drift and the (full-data) risk of the current atoms."""
    if batch_data is None:
        drift, r = mfnet.data_drift(atoms, data, obj.act, obj.ol, return_risk=True)
    else:
        drift = mfnet.data_drift(atoms, batch_data, obj.act, obj.ol)
        r = sum(w * float(np.mean(obj.ol(mfnet.network_output(atoms, ds.x, obj.act), ds.y)))
                for w, ds in data.components())
    return drift + obj.prior.potential_grad(atoms) / (2.0 * obj.beta**2), r


def noise_scale(sigma: float, beta: float, eta: float) -> float:
    """Standard deviation of the Gaussian increment per step: (sigma / beta) sqrt(eta)."""
    return sigma / beta * np.sqrt(eta)


def _update(atoms, drift, obj: Objective, eta: float, noise: NoiseStream, step: int) -> np.ndarray:
    if eta == 0:
        return atoms
    scale = noise_scale(obj.sigma, obj.beta, eta)
    return atoms - eta * drift + scale * noise.normal(step, atoms.shape)


def langevin_step(cloud: ParticleCloud, data, obj: Objective, eta: float, noise: NoiseStream,
                  step: int = 0) -> ParticleCloud:
    """One Euler-Maruyama step of mean-field Langevin dynamics.

    theta_i <- theta_i - eta * (avg_z grad dl/dm(theta_i) + grad U(theta_i) / (2 beta^2))
               + (sigma / beta) * sqrt(eta) * xi_i
    """
    if eta < 0:
        raise ValueError("step size must be non-negative")
    if eta == 0:
        return cloud
    drift, _ = _drift(cloud.atoms, data, obj)
    atoms = _update(cloud.atoms, drift, obj, eta, noise, step)
    return ParticleCloud(_checked(atoms, step, "", None))


@dataclass
class TrainedModel:
    scenario: str
    config: TrainConfig
    act: mfnet.Activation
    ol: mfnet.OuterLoss
    cloud: ParticleCloud | None = None
    w_cloud: ParticleCloud | None = None
    a_cloud: ParticleCloud | None = None
    trace: list = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.scenario == "finetune":
            return mfnet.product_output(self.w_cloud.atoms, self.a_cloud.atoms, X, self.act)
        return mfnet.network_output(self.cloud.atoms, X, self.act)

    def losses(self, data: DataSet) -> np.ndarray:
        return self.ol(self.predict(data.x), data.y)

    def risk(self, data) -> float:
        return float(sum(w * np.mean(self.losses(ds)) for w, ds in data.components()))

    def loss_at(self, z) -> float:
        x, y = z
        return float(self.ol(self.predict(np.asarray(x, dtype=float)[None, :])[0], y))

    @property
    def steps_run(self) -> int:
        return len(self.trace)


def _run_joint(atoms, data, obj: Objective, cfg: TrainConfig, noise: NoiseStream, stage: str,
               batch_stream: NoiseStream):
    trace = []
    eta = cfg.step_size
    scale = noise_scale(obj.sigma, obj.beta, eta)
    for step in range(cfg.steps):
        batch_data = None if cfg.batch is None else _minibatch(data, cfg.batch, batch_stream.generator(step))
        drift, r = _drift(atoms, data, obj, batch_data)
        trace.append((step, r, float(np.linalg.norm(drift) / np.sqrt(atoms.shape[0])), scale))
        atoms = _checked(_update(atoms, drift, obj, eta, noise, step), step, stage, trace)
    return atoms, trace


def _objective(cfg: TrainConfig, act, ol, prior: GibbsPrior, beta: float) -> Objective:
    if prior.sigma != cfg.sigma:
        prior = replace(prior, sigma=cfg.sigma)
    return Objective(act, ol, prior, beta)


def _train_joint(data, cfg: TrainConfig, act, ol, prior: GibbsPrior, scenario: str) -> TrainedModel:
    act, ol = mfnet._as_act(act), mfnet._as_loss(ol)
    if act.kind == "heaviside" and cfg.steps > 0:
        raise mfnet.UnsupportedForTraining("heaviside activation cannot be trained")
    obj = _objective(cfg, act, ol, prior, cfg.beta)
    if obj.prior.dim != data.q + 1:
        raise mfnet.DimensionError(f"prior dimension {obj.prior.dim} does not match data dimension {data.q} + 1")
    atoms = sample(obj.prior, cfg.particles, _init_rng(cfg.seed, 0)).atoms
    atoms, trace = _run_joint(atoms, data, obj, cfg, NoiseStream(cfg.seed, 0), "", NoiseStream(cfg.seed, 10))
    return TrainedModel(scenario, cfg, act, ol, cloud=ParticleCloud(atoms), trace=trace)


def train_supervised(data_t: DataSet, cfg: TrainConfig, act, ol, prior: GibbsPrior) -> TrainedModel:
    """MFLD from a prior sample on the target data alone."""
    if cfg.scenario != "supervised":
        raise ValueError("train_supervised needs scenario='supervised'")
    return _train_joint(data_t, cfg, act, ol, prior, "supervised")


def train_alpha_erm(data_t: DataSet, data_s: DataSet, cfg: TrainConfig, act, ol, prior: GibbsPrior) -> TrainedModel:
    """MFLD on alpha * target + (1 - alpha) * source with exact mixture weights."""
    if cfg.scenario != "alpha_erm":
        raise ValueError("train_alpha_erm needs scenario='alpha_erm'")
    return _train_joint(MixedDataView(data_t, data_s, cfg.alpha), cfg, act, ol, prior, "alpha_erm")


def separable_prior(prior: GibbsPrior) -> GibbsPrior:
    """The (a | w) block-separable version of a prior over theta = (a, w)."""
    return GibbsPrior(prior.potential, prior.sigma, prior.dim, (1, prior.dim - 1))


def finetune_stage1(data_s: DataSet, cfg: TrainConfig, act, ol, prior: GibbsPrior) -> tuple[np.ndarray, list]:
    """Joint MFLD on the source with beta_s; returns the frozen w-atoms and the trace.

    It only depends on the source data, the seed and the config, so callers
    may reuse one result across several target sets.
    """
    act, ol = mfnet._as_act(act), mfnet._as_loss(ol)
    if act.kind == "heaviside" and cfg.steps > 0:
        raise mfnet.UnsupportedForTraining("heaviside activation cannot be trained")
    prior = separable_prior(replace(prior, sigma=cfg.sigma))
    if prior.dim != data_s.q + 1:
        raise mfnet.DimensionError(f"prior dimension {prior.dim} does not match data dimension {data_s.q} + 1")
    obj_s = Objective(act, ol, prior, cfg.beta_s)
    atoms = sample(prior, cfg.particles, _init_rng(cfg.seed, 0)).atoms
    atoms, trace1 = _run_joint(atoms, data_s, obj_s, cfg, NoiseStream(cfg.seed, 0), "stage-1", NoiseStream(cfg.seed, 10))
    w_atoms = atoms[:, 1:].copy()
    w_atoms.setflags(write=False)
    return w_atoms, trace1


def train_finetune(data_t: DataSet, data_s: DataSet, cfg: TrainConfig, act, ol, prior: GibbsPrior,
                   stage1: tuple[np.ndarray, list] | None = None) -> TrainedModel:
    """Stage 1: joint MFLD on the source with beta_s. Stage 2: freeze the w-atoms,
    draw a fresh a-cloud from the prior's a-marginal and run Langevin on it
    against the target with beta_t, using the product-form prediction.

    ``stage1`` is a cached result of finetune_stage1 for the same source and config.
    """
    if cfg.scenario != "finetune":
        raise ValueError("train_finetune needs scenario='finetune'")
    act, ol = mfnet._as_act(act), mfnet._as_loss(ol)
    w_atoms, trace1 = stage1 if stage1 is not None else finetune_stage1(data_s, cfg, act, ol, prior)
    prior = separable_prior(replace(prior, sigma=cfg.sigma))
    a_prior = prior.marginal(0)
    a_atoms = sample(a_prior, cfg.particles, _init_rng(cfg.seed, 1)).atoms
    eta = cfg.step_size if cfg.stage2_step_size is None else cfg.stage2_step_size
    scale = noise_scale(cfg.sigma, cfg.beta_t, eta)
    reg = 1.0 / (2.0 * cfg.beta_t**2)
    noise = NoiseStream(cfg.seed, 1)
    batch_stream = NoiseStream(cfg.seed, 11)
    trace2 = []
    steps2 = cfg.steps if cfg.stage2_steps is None else cfg.stage2_steps
    full_feats = mfnet.finetune_features(w_atoms, data_t, act)
    for step in range(steps2):
        if cfg.batch is None:
            drift, r = mfnet.finetune_drift(w_atoms, a_atoms, data_t, act, ol, full_feats, return_risk=True)
        else:
            batch = _minibatch(data_t, cfg.batch, batch_stream.generator(step))
            drift = mfnet.finetune_drift(w_atoms, a_atoms, batch, act, ol)
            _, r = mfnet.finetune_drift(w_atoms, a_atoms, data_t, act, ol, full_feats, return_risk=True)
        drift = drift + reg * a_prior.potential_grad(a_atoms)
        trace2.append((step, r, float(np.linalg.norm(drift) / np.sqrt(a_atoms.shape[0])), scale))
        if eta > 0:
            a_atoms = a_atoms - eta * drift + scale * noise.normal(step, a_atoms.shape)
            a_atoms = _checked(a_atoms, step, "stage-2", trace2)
    model = TrainedModel("finetune", cfg, act, ol, w_cloud=ParticleCloud(w_atoms), a_cloud=ParticleCloud(a_atoms),
                         trace=trace1 + trace2)
    model.stage1_trace = trace1
    model.stage2_trace = trace2
    return model


def train(cfg: TrainConfig, data_t: DataSet, data_s: DataSet | None, act, ol, prior: GibbsPrior) -> TrainedModel:
    if cfg.scenario == "supervised":
        return train_supervised(data_t, cfg, act, ol, prior)
    if data_s is None:
        raise ValueError(f"{cfg.scenario} needs a source dataset")
    if cfg.scenario == "alpha_erm":
        return train_alpha_erm(data_t, data_s, cfg, act, ol, prior)
    return train_finetune(data_t, data_s, cfg, act, ol, prior)


# -- outputs --------------------------------------------------------------------

def write_trace_csv(model: TrainedModel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_risk", "drift_norm", "noise_scale"])
        for step, r, dn, ns in model.trace:
            w.writerow([step, _fmt(r), _fmt(dn), _fmt(ns)])


def save_model(model: TrainedModel, path) -> None:
    header = {"kind": "model", "scenario": model.scenario, "act": model.act.kind, "loss": model.ol.kind,
              "config": model.config.to_dict()}
    if model.scenario == "finetune":
        rows = np.column_stack([model.a_cloud.atoms[:, 0], model.w_cloud.atoms])
        header["layout"] = "a|w"
    else:
        rows = model.cloud.atoms
        header["layout"] = "theta"
    header["dim"] = rows.shape[1]
    _write_rows(Path(path), header, rows)


def load_model(path) -> TrainedModel:
    header, rows = _read_rows(Path(path))
    if header.get("kind") != "model":
        raise ValueError(f"{path} does not hold a trained model")
    rows = rows.reshape(-1, header["dim"])
    cfg = TrainConfig.from_dict(header["config"])
    act, ol = mfnet.Activation(header["act"]), mfnet.OuterLoss(header["loss"])
    if header["layout"] == "a|w":
        return TrainedModel("finetune", cfg, act, ol, w_cloud=ParticleCloud(rows[:, 1:]),
                            a_cloud=ParticleCloud(rows[:, :1]))
    return TrainedModel(header["scenario"], cfg, act, ol, cloud=ParticleCloud(rows))


def model_summary(model: TrainedModel) -> str:
    final = model.trace[-1][1] if model.trace else float("nan")
    return json.dumps({"scenario": model.scenario, "steps": model.steps_run, "final_train_risk": final})
