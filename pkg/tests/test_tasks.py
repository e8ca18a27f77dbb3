import numpy as np
import pytest

from mftransfer import analysis, mfnet
from mftransfer.tasks import TaskSpec, gen_task


def _draws(task, n=4000, seed=0):
    a = task.source.draw(n, np.random.default_rng([seed, 1]))
    b = task.target.draw(n, np.random.default_rng([seed, 2]))
    return a, b


@pytest.mark.parametrize("mode", ["shared_teacher", "shifted_outer", "shifted_input"])
def test_zero_shift_gives_identical_generators(mode):
    task = gen_task(TaskSpec(mode=mode, shift=0.0), 3)
    a = task.source.draw(50, np.random.default_rng(1))
    b = task.target.draw(50, np.random.default_rng(1))
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)


def test_same_seed_same_teacher_and_different_seed_differs():
    spec = TaskSpec()
    t1, t2, t3 = gen_task(spec, 5), gen_task(spec, 5), gen_task(spec, 6)
    np.testing.assert_array_equal(t1.source.teacher.atoms, t2.source.teacher.atoms)
    assert not np.array_equal(t1.source.teacher.atoms, t3.source.teacher.atoms)


def test_noiseless_teacher_has_zero_risk():
    task = gen_task(TaskSpec(noise_std=0.0), 0)
    data = task.target.draw(200, np.random.default_rng(0))
    losses = mfnet.batch_loss(task.target.teacher, data, task.spec.act, "quadratic")
    assert np.max(losses) == 0.0
    assert task.noiseless


def test_noise_std_sets_label_residual_spread():
    task = gen_task(TaskSpec(noise_std=0.5), 0)
    data = task.source.draw(20000, np.random.default_rng(2))
    resid = data.y - mfnet.network_output(task.source.teacher.atoms, data.x, task.spec.act)
    assert np.std(resid) == pytest.approx(0.5, rel=0.03)
    assert not task.noiseless


def test_teacher_shape_and_scales():
    spec = TaskSpec(q=3, teacher_atoms=5, teacher_w_scale=0.9)
    t = gen_task(spec, 1).source.teacher.atoms
    assert t.shape == (5, 4)
    np.testing.assert_allclose(np.linalg.norm(t[:, 1:], axis=1), 0.9, rtol=1e-12)
    assert np.all(t[:, 0] > 0)
    alt = gen_task(TaskSpec(teacher_signs="alternating"), 1).source.teacher.atoms
    assert np.all(np.sign(alt[:, 0]) == np.array([1, -1, 1, -1]))


def test_shifted_outer_moves_every_outer_weight():
    task = gen_task(TaskSpec(mode="shifted_outer", shift=0.4), 2)
    diff = task.target.teacher.atoms - task.source.teacher.atoms
    np.testing.assert_allclose(diff[:, 0], 0.4, rtol=1e-12)
    assert np.all(diff[:, 1:] == 0)


def test_shifted_input_moves_input_mean():
    task = gen_task(TaskSpec(mode="shifted_input", shift=2.0), 2)
    data = task.target.draw(20000, np.random.default_rng(0))
    assert data.x[:, 0].mean() == pytest.approx(2.0, abs=0.05)
    assert abs(data.x[:, 1].mean()) < 0.05


@pytest.mark.parametrize("seed", range(5))
def test_input_shift_increases_measured_dissimilarity(seed):
    near = gen_task(TaskSpec(mode="shifted_input", shift=0.0), seed)
    far = gen_task(TaskSpec(mode="shifted_input", shift=1.0), seed)
    d0 = analysis.ipm_dictionary(*_draws(near, seed=seed), p=2, dictionary_size=256, seed=seed)
    d1 = analysis.ipm_dictionary(*_draws(far, seed=seed), p=2, dictionary_size=256, seed=seed)
    assert d1 > d0


@pytest.mark.parametrize("kw", [{"mode": "nope"}, {"q": 0}, {"teacher_atoms": 0}, {"shift": -1.0},
                                {"noise_std": -0.1}, {"teacher_signs": "mixed"}])
def test_invalid_specs_rejected(kw):
    with pytest.raises(ValueError):
        TaskSpec(**kw)
