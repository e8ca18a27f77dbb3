"""Gibbs priors exp(-U/sigma^2), their 8th-power tilts, samplers and moment integrals.

All supported potentials are radial within each block of coordinates, so every
integral reduces to a one-dimensional radial quadrature done in log-space.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln, logsumexp

from .measures import ParticleCloud

POTENTIALS = ("poly10", "gaussian")
N_NODES = 4096
R_MIN = 1e-6
LOG_DROP = 60.0


class NotNormalizable(ValueError):
    pass


@dataclass(frozen=True)
class GibbsPrior:
    """gamma(theta) proportional to exp(-U(theta) / sigma^2).

    ``blocks`` splits the coordinates into consecutive groups with
    U = sum_b U_b(||theta_b||); ``None`` means a single block.
    """

    potential: str = "poly10"
    sigma: float = 1.0
    dim: int = 1
    blocks: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.potential not in POTENTIALS:
            raise ValueError(f"unknown potential {self.potential!r}; choose from {POTENTIALS}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.blocks is not None:
            object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
            if sum(self.blocks) != self.dim or min(self.blocks) < 1:
                raise ValueError(f"blocks {self.blocks} do not partition dimension {self.dim}")

    @property
    def block_sizes(self) -> tuple[int, ...]:
        return self.blocks if self.blocks is not None else (self.dim,)

    def _slices(self):
        start = 0
        for k in self.block_sizes:
            yield slice(start, start + k), k
            start += k

    def radial_potential(self, r):
        r = np.asarray(r, dtype=float)
        if self.potential == "poly10":
            return r**10
        return 0.5 * r * r

    def potential_value(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        total = np.zeros(theta.shape[0])
        for sl, _ in self._slices():
            total += self.radial_potential(np.linalg.norm(theta[:, sl], axis=1))
        return total

    def potential_grad(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if self.potential == "gaussian":
            return theta.copy()
        out = np.empty_like(theta)
        for sl, _ in self._slices():
            sq = np.einsum("ij,ij->i", theta[:, sl], theta[:, sl])
            out[:, sl] = 10.0 * (sq**4)[:, None] * theta[:, sl]
        return out

    def log_normalizer(self) -> float:
        """log F = log of the integral of exp(-U/sigma^2) over R^dim."""
        total = 0.0
        for k in self.block_sizes:
            total += _log_sphere_area(k) + _log_radial_integral(self.potential, self.sigma, k, 0, False)
        return total

    def log_density(self, theta) -> np.ndarray:
        return -self.potential_value(theta) / self.sigma**2 - self.log_normalizer()

    def marginal(self, block: int) -> "GibbsPrior":
        return GibbsPrior(self.potential, self.sigma, self.block_sizes[block])


@dataclass(frozen=True)
class TiltedPrior:
    """base reweighted by exp(||theta||^8); only normalisable over a poly10 base."""

    base: GibbsPrior

    def __post_init__(self):
        if self.base.potential != "poly10":
            raise NotNormalizable("exp(||theta||^8) tilt of a Gaussian prior is not normalisable")
        if len(self.base.block_sizes) != 1:
            raise ValueError("tilted prior needs a single-block base; tilt blocks separately")

    @property
    def sigma(self) -> float:
        return self.base.sigma

    @property
    def dim(self) -> int:
        return self.base.dim


def _log_sphere_area(k: int) -> float:
    return float(np.log(2.0) + 0.5 * k * np.log(np.pi) - gammaln(0.5 * k))


def _log_weight(potential: str, sigma: float, tilt: bool, r: np.ndarray) -> np.ndarray:
    u = r**10 if potential == "poly10" else 0.5 * r * r
    g = -u / sigma**2
    if tilt:
        g = g + r**8
    return g


@lru_cache(maxsize=256)
def _radial_nodes(potential: str, sigma: float, tilt: bool, n_nodes: int = N_NODES) -> np.ndarray:
    """Log-spaced nodes on [R_MIN, r_max], with g(r_max) <= max g - LOG_DROP."""
    if tilt and potential != "poly10":
        raise NotNormalizable("tilted Gaussian prior is not normalisable")
    if potential == "poly10":
        r_peak = np.sqrt(0.8) * sigma if tilt else 0.0
        scale = sigma**0.2
    else:
        r_peak, scale = 0.0, sigma
    g_star = _log_weight(potential, sigma, tilt, np.array([r_peak]))[0]
    r_max = max(scale, r_peak, 1.0) * 2.0
    while _log_weight(potential, sigma, tilt, np.array([r_max]))[0] > g_star - LOG_DROP:
        r_max *= 1.25
    return np.geomspace(R_MIN, r_max, n_nodes)


def _log_radial_integral(potential: str, sigma: float, k: int, p: float, tilt: bool,
                         n_nodes: int = N_NODES) -> float:
    """log of int_0^inf r^(p+k-1) exp(g(r)) dr by the trapezoid rule in t = log r.

    The sliver [0, R_MIN] is added analytically with g frozen at g(R_MIN).
    """
    r = _radial_nodes(potential, sigma, tilt, n_nodes)
    t = np.log(r)
    log_f = _log_weight(potential, sigma, tilt, r) + (p + k) * t
    dt = t[1] - t[0]
    w = np.full(r.shape, dt)
    w[0] = w[-1] = 0.5 * dt
    body = logsumexp(log_f, b=w)
    head = _log_weight(potential, sigma, tilt, r[:1])[0] + (p + k) * t[0] - np.log(p + k)
    return float(np.logaddexp(body, head))


def radial_moment(potential: str, sigma: float, k: int, p: float, tilt: bool = False,
                  n_nodes: int = N_NODES) -> float:
    """E||theta||^p under the k-dimensional radial law r^(k-1) exp(g(r))."""
    num = _log_radial_integral(potential, sigma, k, p, tilt, n_nodes)
    den = _log_radial_integral(potential, sigma, k, 0, tilt, n_nodes)
    return float(np.exp(num - den))


def _radial_inverse_cdf(potential: str, sigma: float, k: int):
    r = _radial_nodes(potential, sigma, False)
    log_dens = _log_weight(potential, sigma, False, r) + (k - 1) * np.log(r)
    dens = np.exp(log_dens - log_dens.max())
    head = dens[0] * r[0] / k
    cdf = np.concatenate([[0.0], head + np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(r))])])
    cdf /= cdf[-1]
    nodes = np.concatenate([[0.0], r])
    keep = np.concatenate([[True], np.diff(cdf) > 0])
    return cdf[keep], nodes[keep]


def _sample_block(potential: str, sigma: float, k: int, count: int, rng: np.random.Generator) -> np.ndarray:
    cdf, nodes = _radial_inverse_cdf(potential, sigma, k)
    radii = np.interp(rng.random(count), cdf, nodes)
    direction = rng.standard_normal((count, k))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    return direction * radii[:, None]


def sample(prior: GibbsPrior, count: int, rng: np.random.Generator) -> ParticleCloud:
    """i.i.d. draws: uniform direction times inverse-CDF radius, block by block."""
    if count < 1:
        raise ValueError("count must be at least 1")
    parts = [_sample_block(prior.potential, prior.sigma, k, count, rng) for k in prior.block_sizes]
    return ParticleCloud(np.concatenate(parts, axis=1))


def tilted_moment(tp: TiltedPrior, p: int) -> float:
    """int ||theta||^p d(tilted prior), p in {4, 8}."""
    if p not in (4, 8):
        raise ValueError(f"tilted moment order must be 4 or 8, got {p}")
    return radial_moment(tp.base.potential, tp.sigma, tp.dim, p, tilt=True)


def comp_from_moments(m8: float, m4: float) -> float:
    return (1.0 + 2.0 * m8 + 2.0 * m4) ** 2


def comp_alpha(tp: TiltedPrior) -> float:
    """(1 + 2 M8 + 2 M4)^2 with moments of the tilted prior."""
    return comp_from_moments(tilted_moment(tp, 8), tilted_moment(tp, 4))


@dataclass(frozen=True)
class FinetuneMoments:
    hat_c_m4: float
    hat_c_m8: float
    tilde_sp_m4: float
    tilde_sp_m8: float
    hat_sp_m4: float

    def bracket_terms(self) -> tuple[float, float, float]:
        return (
            2.0 * self.hat_c_m4 + self.hat_c_m8,
            self.tilde_sp_m4 + 2.0 * self.tilde_sp_m8,
            self.hat_sp_m4,
        )

    def comp(self) -> float:
        return comp_finetune_from_terms(*self.bracket_terms())


def comp_finetune_from_terms(common: float, specific_target: float, specific_source: float) -> float:
    return (1.0 + common + specific_target + specific_source) ** 2


def finetune_priors(sigma: float, q: int) -> tuple[TiltedPrior, TiltedPrior, GibbsPrior]:
    """Block laws under the separable potential ||theta_c||^10 + |a|^10.

    Returns (common-block marginal of the theta_c-tilted prior, tilted
    outer-weight prior, outer-weight marginal of the theta_c-tilted prior).
    The last one is untilted because the tilt only touches theta_c.
    """
    return (
        TiltedPrior(GibbsPrior("poly10", sigma, q)),
        TiltedPrior(GibbsPrior("poly10", sigma, 1)),
        GibbsPrior("poly10", sigma, 1),
    )


def finetune_moments(hat_c: TiltedPrior, tilde_sp: TiltedPrior, hat_sp: GibbsPrior) -> FinetuneMoments:
    if hat_sp.potential != "poly10":
        raise NotNormalizable("fine-tuning complexity needs poly10 priors")
    return FinetuneMoments(
        hat_c_m4=tilted_moment(hat_c, 4),
        hat_c_m8=tilted_moment(hat_c, 8),
        tilde_sp_m4=tilted_moment(tilde_sp, 4),
        tilde_sp_m8=tilted_moment(tilde_sp, 8),
        hat_sp_m4=radial_moment("poly10", hat_sp.sigma, hat_sp.dim, 4),
    )


def comp_finetune(hat_c: TiltedPrior, tilde_sp: TiltedPrior, hat_sp: GibbsPrior) -> float:
    return finetune_moments(hat_c, tilde_sp, hat_sp).comp()
