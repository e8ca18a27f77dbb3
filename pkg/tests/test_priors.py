import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from mftransfer.priors import (
    GibbsPrior, NotNormalizable, TiltedPrior, comp_alpha, comp_finetune, comp_finetune_from_terms,
    comp_from_moments, finetune_moments, finetune_priors, radial_moment, sample, tilted_moment,
)


def _quad_radial_moment(g, k, p, hi):
    num = integrate.quad(lambda r: r ** (p + k - 1) * np.exp(g(r)), 0, hi, limit=400, epsabs=0, epsrel=1e-12)[0]
    den = integrate.quad(lambda r: r ** (k - 1) * np.exp(g(r)), 0, hi, limit=400, epsabs=0, epsrel=1e-12)[0]
    return num / den


# -- sampling --------------------------------------------------------------------

def test_gaussian_sample_moments():
    n = 100_000
    th = sample(GibbsPrior("gaussian", 1.0, 1), n, np.random.default_rng(0)).atoms[:, 0]
    assert abs(np.mean(th**2) - 1.0) <= 3 / np.sqrt(n)
    assert abs(np.mean(th**4) - 3.0) <= 3 * np.sqrt(96.0 / n)


def test_poly10_sample_fourth_moment_matches_quadrature():
    n = 100_000
    th = sample(GibbsPrior("poly10", 1.0, 2), n, np.random.default_rng(1)).atoms
    r4 = np.sum(th**2, axis=1) ** 2
    oracle = _quad_radial_moment(lambda r: -(r**10), 2, 4, 5.0)
    se = r4.std(ddof=1) / np.sqrt(n)
    assert abs(r4.mean() - oracle) <= 3 * se


@pytest.mark.parametrize("dim", [1, 3])
def test_gaussian_radial_law_passes_ks(dim):
    th = sample(GibbsPrior("gaussian", 1.0, dim), 100_000, np.random.default_rng(2)).atoms
    res = stats.kstest(np.linalg.norm(th, axis=1), stats.chi(dim).cdf)
    assert res.pvalue > 0.01


def test_sample_respects_blocks():
    prior = GibbsPrior("poly10", 1.0, 3, (1, 2))
    th = sample(prior, 50_000, np.random.default_rng(3)).atoms
    m1 = radial_moment("poly10", 1.0, 1, 2)
    assert np.mean(th[:, 0] ** 2) == pytest.approx(m1, rel=0.02)
    assert prior.potential_value(th[:2]).shape == (2,)


def test_sample_is_deterministic_per_stream():
    p = GibbsPrior("poly10", 0.7, 3)
    a = sample(p, 10, np.random.default_rng(9)).atoms
    b = sample(p, 10, np.random.default_rng(9)).atoms
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        sample(p, 0, np.random.default_rng(0))


def test_prior_validation():
    with pytest.raises(ValueError):
        GibbsPrior("cubic", 1.0, 1)
    with pytest.raises(ValueError):
        GibbsPrior("poly10", 0.0, 1)
    with pytest.raises(ValueError):
        GibbsPrior("poly10", 1.0, 3, (1, 1))


@pytest.mark.parametrize("potential", ["poly10", "gaussian"])
def test_potential_grad_matches_finite_difference(potential, rng):
    prior = GibbsPrior(potential, 1.0, 3, (1, 2))
    th = rng.normal(size=(4, 3)) * 0.8
    h = 1e-6
    fd = np.empty_like(th)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd[:, k] = (prior.potential_value(th + e) - prior.potential_value(th - e)) / (2 * h)
    np.testing.assert_allclose(prior.potential_grad(th), fd, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("potential,dim,sigma", [("gaussian", 2, 1.3), ("poly10", 1, 1.0), ("poly10", 3, 0.5)])
def test_log_normalizer_matches_quadrature(potential, dim, sigma):
    prior = GibbsPrior(potential, sigma, dim)
    if potential == "gaussian":
        expected = 0.5 * dim * np.log(2 * np.pi * sigma**2)
    else:
        from scipy.special import gammaln
        area = np.log(2) + 0.5 * dim * np.log(np.pi) - gammaln(0.5 * dim)
        rad = integrate.quad(lambda r: r ** (dim - 1) * np.exp(-(r**10) / sigma**2), 0, 5, epsrel=1e-12)[0]
        expected = area + np.log(rad)
    assert prior.log_normalizer() == pytest.approx(expected, rel=1e-9)


# -- tilted moments ---------------------------------------------------------------

@pytest.mark.parametrize("sigma", [0.05, 0.5, 1.0, 2.0])
@pytest.mark.parametrize("dim", [1, 2, 4])
@pytest.mark.parametrize("p", [4, 8])
def test_tilted_moment_converged_under_node_doubling(sigma, dim, p):
    base = radial_moment("poly10", sigma, dim, p, tilt=True)
    for n in (8192, 16384):
        assert radial_moment("poly10", sigma, dim, p, tilt=True, n_nodes=n) == pytest.approx(base, rel=1e-8)


def test_tilted_moment_matches_importance_sampling():
    n = 400_000
    th = sample(GibbsPrior("poly10", 1.0, 2), n, np.random.default_rng(4)).atoms
    r2 = np.sum(th**2, axis=1)
    w = np.exp(r2**4)
    f = r2**4
    est = np.sum(w * f) / np.sum(w)
    # delta-method standard error of the self-normalised ratio
    wn = w / w.mean()
    se = np.sqrt(np.mean(wn**2 * (f - est) ** 2) / n)
    got = tilted_moment(TiltedPrior(GibbsPrior("poly10", 1.0, 2)), 8)
    assert abs(got - est) <= 3 * se


def test_tilted_moment_concentrates_at_peak_for_large_sigma():
    sigma = 3.0
    r = np.geomspace(1e-6, 10, 200_001)
    g = -(r**10) / sigma**2 + r**8
    r_star = r[np.argmax(g)]
    got = tilted_moment(TiltedPrior(GibbsPrior("poly10", sigma, 1)), 4)
    assert got == pytest.approx(r_star**4, rel=1e-3)


def test_tilted_moment_small_sigma_matches_quad():
    sigma = 0.05
    got = tilted_moment(TiltedPrior(GibbsPrior("poly10", sigma, 1)), 4)
    oracle = _quad_radial_moment(lambda r: -(r**10) / sigma**2 + r**8, 1, 4, 2.0)
    assert got == pytest.approx(oracle, rel=1e-7)


@given(st.floats(0.05, 3.0), st.integers(1, 6))
def test_tilted_moments_positive_and_jensen(sigma, dim):
    tp = TiltedPrior(GibbsPrior("poly10", sigma, dim))
    m4, m8 = tilted_moment(tp, 4), tilted_moment(tp, 8)
    assert np.isfinite(m4) and np.isfinite(m8) and m4 > 0 and m8 > 0
    assert m8 >= m4**2 * (1 - 1e-12)


def test_gaussian_tilt_is_rejected():
    with pytest.raises(NotNormalizable):
        TiltedPrior(GibbsPrior("gaussian", 1.0, 2))
    with pytest.raises(NotNormalizable):
        radial_moment("gaussian", 1.0, 2, 4, tilt=True)
    with pytest.raises(ValueError):
        tilted_moment(TiltedPrior(GibbsPrior("poly10", 1.0, 2)), 6)


# -- complexity terms ---------------------------------------------------------------

def test_comp_alpha_examples():
    assert comp_from_moments(0.0, 0.0) == 1.0
    assert comp_from_moments(1.0, 1.0) == 25.0
    tp = TiltedPrior(GibbsPrior("poly10", 1.0, 3))
    m8, m4 = tilted_moment(tp, 8), tilted_moment(tp, 4)
    assert comp_alpha(tp) == pytest.approx((1 + 2 * m8 + 2 * m4) ** 2, rel=1e-15)


def test_comp_finetune_examples():
    assert comp_finetune_from_terms(0.0, 0.0, 0.0) == 1.0
    assert comp_finetune_from_terms(1.0, 1.0, 1.0) == 16.0
    hat_c, tilde_sp, hat_sp = finetune_priors(1.0, 2)
    c4, c8 = tilted_moment(hat_c, 4), tilted_moment(hat_c, 8)
    s4, s8 = tilted_moment(tilde_sp, 4), tilted_moment(tilde_sp, 8)
    h4 = radial_moment("poly10", 1.0, 1, 4)
    expected = (1 + (2 * c4 + c8) + (s4 + 2 * s8) + h4) ** 2
    assert comp_finetune(hat_c, tilde_sp, hat_sp) == pytest.approx(expected, rel=1e-15)
    assert finetune_moments(hat_c, tilde_sp, hat_sp).comp() == pytest.approx(expected, rel=1e-15)
    with pytest.raises(NotNormalizable):
        comp_finetune(hat_c, tilde_sp, GibbsPrior("gaussian", 1.0, 1))
