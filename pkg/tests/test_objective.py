import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from mftransfer import harness, mfnet
from mftransfer.measures import DataSet, MixedDataView, ParticleCloud
from mftransfer.objective import (
    GaussianDensity, GaussianMixture, Lattice, Objective, PriorDensity, gibbs_residual,
    kl_knn_diagnostic, kl_parametric, risk, v_beta,
)
from mftransfer.priors import GibbsPrior, sample


def _teacher_data(rng, n=16):
    teacher = rng.normal(size=(3, 3))
    x = rng.normal(size=(n, 2))
    return ParticleCloud(teacher), DataSet(x, mfnet.network_output(teacher, x, "tanh"))


# -- risk -----------------------------------------------------------------------

def test_risk_examples(rng):
    teacher, data = _teacher_data(rng)
    assert risk(teacher, data, "tanh", "quadratic") == 0.0
    cloud = ParticleCloud(rng.normal(size=(5, 3)))
    one = DataSet(data.x[:1], data.y[:1])
    assert risk(cloud, one, "tanh", "logcosh") == pytest.approx(mfnet.loss(cloud, one.sample(0), "tanh", "logcosh"), rel=1e-14)
    four = DataSet(rng.normal(size=(4, 2)), rng.normal(size=4))
    direct = np.mean([mfnet.loss(cloud, four.sample(i), "tanh", "quadratic") for i in range(4)])
    assert risk(cloud, four, "tanh", "quadratic") == pytest.approx(direct, rel=1e-13)


def test_risk_dimension_mismatch(rng):
    with pytest.raises(mfnet.DimensionError):
        risk(ParticleCloud(rng.normal(size=(2, 4))), DataSet(np.zeros((2, 2)), np.zeros(2)), "tanh", "quadratic")


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.sampled_from(["quadratic", "logcosh"]))
def test_risk_is_affine_in_data_measure(seed, alpha, ol):
    g = np.random.default_rng(seed)
    cloud = ParticleCloud(g.normal(size=(6, 3)))
    dt = DataSet(g.normal(size=(5, 2)), g.normal(size=5))
    ds = DataSet(g.normal(size=(7, 2)), g.normal(size=7))
    mixed = risk(cloud, MixedDataView(dt, ds, alpha), "tanh", ol)
    parts = alpha * risk(cloud, dt, "tanh", ol) + (1 - alpha) * risk(cloud, ds, "tanh", ol)
    assert mixed == pytest.approx(parts, rel=1e-12, abs=1e-15)
    assert mixed >= 0.0


# -- parametric KL ----------------------------------------------------------------

def test_kl_parametric_of_prior_against_itself():
    for prior in (GibbsPrior("poly10", 1.0, 2), GibbsPrior("gaussian", 0.7, 3)):
        est = kl_parametric(PriorDensity(prior), prior, 5000, np.random.default_rng(0))
        assert abs(est.value) <= 3 * est.std_error + 1e-10


def test_kl_parametric_gaussian_closed_form():
    s = 2.0
    est = kl_parametric(GaussianDensity(np.zeros(1), s), GibbsPrior("gaussian", 1.0, 1), 20000, np.random.default_rng(1))
    assert abs(est.value - (np.log(1 / s) + (s * s - 1) / 2)) <= 3 * est.std_error


def test_kl_parametric_mixture_matches_quadrature():
    mix = GaussianMixture((0.3, 0.7), (GaussianDensity(np.array([-0.4]), 0.2), GaussianDensity(np.array([0.3]), 0.25)))
    prior = GibbsPrior("poly10", 1.0, 1)

    def integrand(t):
        lm = float(mix.log_pdf(np.array([[t]]))[0])
        return np.exp(lm) * (lm - float(prior.log_density(np.array([[t]]))[0]))

    oracle = integrate.quad(integrand, -3, 3, points=[-0.4, 0.3], limit=200)[0]
    est = kl_parametric(mix, prior, 50000, np.random.default_rng(2))
    assert abs(est.value - oracle) <= 3 * est.std_error


def test_kl_parametric_needs_enough_draws():
    with pytest.raises(ValueError):
        kl_parametric(GaussianDensity(np.zeros(1), 1.0), GibbsPrior("gaussian", 1.0, 1), 100, np.random.default_rng(0))


# -- k-NN diagnostic ----------------------------------------------------------------

@pytest.mark.parametrize("prior", [GibbsPrior("poly10", 1.0, 2), GibbsPrior("gaussian", 1.0, 1)])
def test_knn_on_prior_sample_is_near_zero(prior):
    cloud = sample(prior, 10_000, np.random.default_rng(3))
    assert abs(kl_knn_diagnostic(cloud, prior).value) <= 0.1


def test_knn_gaussian_closed_form():
    cloud = ParticleCloud(2.0 * np.random.default_rng(4).standard_normal((10_000, 1)))
    est = kl_knn_diagnostic(cloud, GibbsPrior("gaussian", 1.0, 1))
    assert abs(est.value - 0.5 * (4 - 1 - np.log(4))) <= 0.1
    assert est.method == "knn"


def test_knn_grows_under_gross_shift():
    prior = GibbsPrior("gaussian", 1.0, 2)
    cloud = sample(prior, 2000, np.random.default_rng(5))
    shifted = ParticleCloud(cloud.atoms + 10.0)
    assert kl_knn_diagnostic(shifted, prior).value > kl_knn_diagnostic(cloud, prior).value


def test_knn_duplicates_are_jittered_and_flagged():
    atoms = np.repeat(np.random.default_rng(6).normal(size=(30, 2)), 3, axis=0)
    with pytest.warns(RuntimeWarning):
        est = kl_knn_diagnostic(ParticleCloud(atoms), GibbsPrior("gaussian", 1.0, 2))
    assert est.jittered and np.isfinite(est.value)


def test_knn_needs_fifty_atoms():
    with pytest.raises(ValueError):
        kl_knn_diagnostic(ParticleCloud(np.zeros((10, 1))), GibbsPrior("gaussian", 1.0, 1))


# -- v_beta ------------------------------------------------------------------------

def test_v_beta_decomposes_for_clouds(rng):
    prior = GibbsPrior("poly10", 1.0, 3)
    cloud = sample(prior, 500, rng)
    data = DataSet(rng.normal(size=(10, 2)), rng.normal(size=10))
    for beta in (1.0, 10.0, 1e6):
        obj = Objective("tanh", "quadratic", prior, beta)
        val, kl = v_beta(obj, cloud, data)
        r = risk(cloud, data, "tanh", "quadratic")
        assert val == r + obj.reg_weight * kl.value
        assert abs(val - r) <= obj.reg_weight * abs(kl.value) + 4 * np.spacing(r)


def test_v_beta_zero_risk_prior_is_zero():
    prior = GibbsPrior("poly10", 1.0, 2)
    data = DataSet(np.zeros((4, 1)), np.zeros(4))  # tanh(0) = 0 gives zero output and zero risk
    val, kl = v_beta(Objective("tanh", "quadratic", prior, 2.0), PriorDensity(prior), data, np.random.default_rng(0), 5000)
    assert abs(val) <= 3 * kl.std_error + 1e-10


def test_v_beta_matches_hand_composition():
    prior = GibbsPrior("poly10", 1.0, 2)
    dens = GaussianDensity(np.array([0.2, -0.1]), 0.3)
    data = DataSet(np.array([[0.5], [-1.0], [2.0]]), np.array([0.1, -0.2, 0.3]))
    obj = Objective("sigmoid", "logcosh", prior, 3.0)
    val, _ = v_beta(obj, dens, data, np.random.default_rng(7), 4000)
    g = np.random.default_rng(7)
    kl = kl_parametric(dens, prior, 4000, g)
    r = risk(ParticleCloud(dens.sample(4000, g)), data, "sigmoid", "logcosh")
    assert val == pytest.approx(r + prior.sigma**2 / (2 * 9.0) * kl.value, rel=1e-14)


def test_objective_rejects_nonpositive_beta():
    with pytest.raises(ValueError):
        Objective("tanh", "quadratic", GibbsPrior(), 0.0)


# -- Gibbs residual ------------------------------------------------------------------

def test_gibbs_residual_prior_recovery():
    prior = GibbsPrior("poly10", 1.0, 2)
    cloud = sample(prior, 10_000, np.random.default_rng(8))
    obj = Objective("tanh", "quadratic", prior, 3.0)
    assert gibbs_residual(cloud, harness.gibbs_toy_data(zero_risk=True), obj) <= 0.1


def test_gibbs_residual_ignores_constant_offset(rng):
    prior = GibbsPrior("poly10", 1.0, 2)
    cloud = sample(prior, 2000, rng)
    data = harness.gibbs_toy_data()
    obj = Objective("tanh", "quadratic", prior, 3.0)
    grid = Lattice.covering(cloud.atoms, bins=12)
    base = gibbs_residual(cloud, data, obj, grid)
    for offset in (-3.0, 0.5, 40.0):
        assert gibbs_residual(cloud, data, obj, grid, offset=offset) == pytest.approx(base, abs=1e-12)


def test_gibbs_residual_is_discriminative():
    # a prior sample is far from the data-tilted Gibbs density
    prior = GibbsPrior("poly10", 1.0, 2)
    cloud = sample(prior, 5000, np.random.default_rng(9))
    obj = Objective("tanh", "quadratic", prior, 3.0)
    assert gibbs_residual(cloud, harness.gibbs_toy_data(), obj) > 0.3


def test_gibbs_residual_rejects_high_dimension(rng):
    obj = Objective("tanh", "quadratic", GibbsPrior("poly10", 1.0, 3), 1.0)
    with pytest.raises(ValueError):
        gibbs_residual(ParticleCloud(rng.normal(size=(100, 3))), DataSet(np.zeros((2, 2)), np.zeros(2)), obj)


def test_lattice_points_cover_bins():
    lat = Lattice((0.0, -1.0), (1.0, 1.0), bins=4, sub=2)
    pts, shape = lat.quadrature_points()
    assert shape == (8, 8) and pts.shape == (64, 2)
    assert pts[:, 0].min() > 0 and pts[:, 0].max() < 1
