"""Risk, KL estimators, the regularised objective and the Gibbs fixed-point residual."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from . import mfnet
from .measures import DataSet, MixedDataView, ParticleCloud
from .priors import GibbsPrior, NotNormalizable


@dataclass(frozen=True)
class Objective:
    """risk + sigma^2 / (2 beta^2) * KL(m || prior)."""

    act: mfnet.Activation
    ol: mfnet.OuterLoss
    prior: GibbsPrior
    beta: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        object.__setattr__(self, "act", mfnet._as_act(self.act))
        object.__setattr__(self, "ol", mfnet._as_loss(self.ol))

    @property
    def sigma(self) -> float:
        return self.prior.sigma

    @property
    def reg_weight(self) -> float:
        return self.sigma**2 / (2.0 * self.beta**2)


def risk(cloud: ParticleCloud, data: DataSet | MixedDataView, act, ol) -> float:
    """Average loss over the data measure; mixtures are weighted exactly."""
    if cloud.dim != data.q + 1:
        raise mfnet.DimensionError(f"cloud dimension {cloud.dim} does not match data dimension {data.q} + 1")
    total = 0.0
    for weight, ds in data.components():
        total += weight * float(np.mean(mfnet.batch_loss(cloud, ds, act, ol)))
    return total


# -- KL estimators -------------------------------------------------------------

@dataclass(frozen=True)
class GaussianDensity:
    """Isotropic N(mean, scale^2 I)."""

    mean: np.ndarray
    scale: float

    def log_pdf(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        mean = np.asarray(self.mean, dtype=float)
        d = mean.shape[0]
        sq = np.sum((theta - mean) ** 2, axis=1)
        return -0.5 * sq / self.scale**2 - d * np.log(self.scale) - 0.5 * d * np.log(2 * np.pi)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=float)
        return mean + self.scale * rng.standard_normal((count, mean.shape[0]))


@dataclass(frozen=True)
class GaussianMixture:
    weights: tuple[float, ...]
    components: tuple[GaussianDensity, ...]

    def log_pdf(self, theta) -> np.ndarray:
        logs = np.stack([np.log(w) + c.log_pdf(theta) for w, c in zip(self.weights, self.components)])
        return np.logaddexp.reduce(logs, axis=0)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.weights), size=count, p=np.asarray(self.weights) / sum(self.weights))
        draws = np.stack([c.sample(count, rng) for c in self.components])
        return draws[idx, np.arange(count)]


@dataclass(frozen=True)
class PriorDensity:
    """Adapter so a Gibbs prior can play the role of the measure m."""

    prior: GibbsPrior

    def log_pdf(self, theta) -> np.ndarray:
        return self.prior.log_density(theta)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        from .priors import sample

        return sample(self.prior, count, rng).atoms


@dataclass(frozen=True)
class KLEstimate:
    value: float
    std_error: float
    method: str
    jittered: bool = False


def kl_parametric(density_m, prior: GibbsPrior, mc_count: int, rng: np.random.Generator) -> KLEstimate:
    """Monte-Carlo E_m[log m - log prior] with the prior normaliser from quadrature."""
    if mc_count < 1000:
        raise ValueError("mc_count must be at least 1000")
    theta = np.atleast_2d(density_m.sample(mc_count, rng))
    if theta.shape[1] != prior.dim:
        theta = theta.reshape(mc_count, prior.dim)
    log_f = prior.log_normalizer()
    if not np.isfinite(log_f):
        raise NotNormalizable("prior normaliser is not finite")
    vals = density_m.log_pdf(theta) + prior.potential_value(theta) / prior.sigma**2 + log_f
    return KLEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(mc_count)), "parametric")


def _log_unit_ball(d: int) -> float:
    return 0.5 * d * np.log(np.pi) - gammaln(0.5 * d + 1.0)


def kl_knn_diagnostic(cloud: ParticleCloud, prior: GibbsPrior, k: int = 5) -> KLEstimate:
    """Kozachenko-Leonenko entropy plus the prior cross term; a diagnostic only.

    A cloud has no density, so this smooths it implicitly through k-th
    neighbour distances. Duplicate atoms are jittered by 1e-12 and flagged.
    """
    r, d = cloud.atoms.shape
    if r < 50:
        raise ValueError("k-NN diagnostic needs at least 50 atoms")
    pts = cloud.atoms
    jittered = False
    dist = cKDTree(pts).query(pts, k=k + 1)[0]
    eps = dist[:, k]
    if np.any(dist[:, 1] <= 0):
        jittered = True
        warnings.warn("duplicate atoms in cloud; jittering by 1e-12", RuntimeWarning, stacklevel=2)
        rng = np.random.default_rng(0)
        pts = pts + 1e-12 * rng.standard_normal(pts.shape)
        eps = cKDTree(pts).query(pts, k=k + 1)[0][:, k]
    entropy = digamma(r) - digamma(k) + _log_unit_ball(d) + d * np.mean(np.log(eps))
    cross = np.mean(prior.potential_value(pts)) / prior.sigma**2 + prior.log_normalizer()
    return KLEstimate(float(cross - entropy), float("nan"), "knn", jittered)


def v_beta(obj: Objective, cloud_or_density, data, rng: np.random.Generator | None = None,
           mc_count: int = 20000, k: int = 5) -> tuple[float, KLEstimate]:
    """Regularised objective; returns (value, KL estimate used).

    A ParticleCloud uses the k-NN diagnostic; a density needs ``.cloud`` or a
    sampler for the risk term and uses the parametric estimator.
    """
    if isinstance(cloud_or_density, ParticleCloud):
        kl = kl_knn_diagnostic(cloud_or_density, obj.prior, k)
        r = risk(cloud_or_density, data, obj.act, obj.ol)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        kl = kl_parametric(cloud_or_density, obj.prior, mc_count, rng)
        atoms = cloud_or_density.sample(mc_count, rng)
        r = risk(ParticleCloud(atoms), data, obj.act, obj.ol)
    return r + obj.reg_weight * kl.value, kl


# -- Gibbs fixed-point residual ----------------------------------------------

@dataclass(frozen=True)
class Lattice:
    """Axis-aligned bins on [lo, hi] with ``bins`` cells per axis."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    bins: int = 16
    sub: int = 4

    @classmethod
    def covering(cls, atoms: np.ndarray, bins: int = 16, sub: int = 4, pad: float = 0.05) -> "Lattice":
        lo = atoms.min(axis=0)
        hi = atoms.max(axis=0)
        span = hi - lo
        return cls(tuple(lo - pad * span), tuple(hi + pad * span), bins, sub)

    def edges(self) -> list[np.ndarray]:
        return [np.linspace(a, b, self.bins + 1) for a, b in zip(self.lo, self.hi)]

    def quadrature_points(self) -> tuple[np.ndarray, tuple[int, ...]]:
        """Midpoints of a sub x sub refinement of every bin, flattened."""
        fine = self.bins * self.sub
        axes = []
        for a, b in zip(self.lo, self.hi):
            h = (b - a) / fine
            axes.append(a + h * (np.arange(fine) + 0.5))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh]), tuple([fine] * len(axes))


def self_consistent_log_density(cloud: ParticleCloud, data, obj: Objective, theta: np.ndarray,
                                offset: float = 0.0) -> np.ndarray:
    """-(2 beta^2 / sigma^2) * dR/dm(cloud, theta) - U(theta) / sigma^2, unnormalised.

    dR/dm is used without its centring constant, which cancels on normalisation.
    """
    atoms = cloud.atoms
    dr = np.zeros(theta.shape[0])
    for weight, ds in data.components():
        yhat = mfnet.network_output(atoms, ds.x, obj.act)
        g = obj.ol.d1(yhat, ds.y)
        dr += weight * (mfnet.unit_outputs(theta, ds.x, obj.act) @ g) / ds.n
    dr += offset
    return -(2.0 * obj.beta**2 / obj.sigma**2) * dr - obj.prior.potential_value(theta) / obj.sigma**2


def gibbs_residual(cloud: ParticleCloud, data, obj: Objective, grid: Lattice | None = None,
                   offset: float = 0.0) -> float:
    """Total variation between the cloud histogram and the self-consistent Gibbs density."""
    if cloud.dim > 2:
        raise ValueError(f"Gibbs residual supports parameter dimension <= 2, got {cloud.dim}")
    grid = grid if grid is not None else Lattice.covering(cloud.atoms)
    pts, shape = grid.quadrature_points()
    logp = self_consistent_log_density(cloud, data, obj, pts, offset).reshape(shape)
    p = np.exp(logp - logp.max())
    # fold the sub-cells back into bins
    d = cloud.dim
    new_shape = []
    for _ in range(d):
        new_shape += [grid.bins, grid.sub]
    p = p.reshape(new_shape).sum(axis=tuple(range(1, 2 * d, 2)))
    p /= p.sum()
    hist, _ = np.histogramdd(cloud.atoms, bins=grid.edges())
    h = hist / cloud.size
    outside = 1.0 - h.sum()
    return float(0.5 * (np.abs(p - h).sum() + outside))
