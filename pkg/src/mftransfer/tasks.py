"""Synthetic teacher-student source/target tasks with a similarity knob."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import mfnet
from .measures import DataSet, ParticleCloud

MODES = ("shared_teacher", "shifted_outer", "shifted_input")


@dataclass(frozen=True)
class TaskSpec:
    """Teacher network y = Phi(teacher, x) + noise, x ~ N(0, I_q).

    A same-sign teacher (the default) is representable by the fine-tuning
    product predictor mean(a) * mean act(w . x); alternating signs are not.
    The target differs from the source by ``shift``: ``shifted_outer`` adds it
    to every teacher outer weight, ``shifted_input`` moves the target input
    mean to shift * e_1, ``shared_teacher`` ignores it.
    """

    q: int = 4
    teacher_atoms: int = 4
    teacher_a_scale: float = 0.8
    teacher_w_scale: float = 0.7
    noise_std: float = 0.0
    shift: float = 0.0
    mode: str = "shared_teacher"
    act: str = "tanh"
    teacher_signs: str = "positive"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.q < 1 or self.teacher_atoms < 1:
            raise ValueError("q and teacher_atoms must be positive")
        if self.teacher_signs not in ("positive", "alternating"):
            raise ValueError("teacher_signs must be 'positive' or 'alternating'")
        if self.noise_std < 0 or self.shift < 0:
            raise ValueError("noise_std and shift must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TaskGenerator:
    teacher: ParticleCloud
    input_mean: np.ndarray
    noise_std: float
    act: mfnet.Activation

    @property
    def q(self) -> int:
        return self.teacher.dim - 1

    def draw(self, n: int, rng: np.random.Generator) -> DataSet:
        x = self.input_mean + rng.standard_normal((n, self.q))
        y = mfnet.network_output(self.teacher.atoms, x, self.act)
        if self.noise_std > 0:
            y = y + self.noise_std * rng.standard_normal(n)
        return DataSet(x, y)


@dataclass(frozen=True)
class TaskPair:
    spec: TaskSpec
    source: TaskGenerator
    target: TaskGenerator
    seed: int = 0

    @property
    def noiseless(self) -> bool:
        return self.spec.noise_std == 0


def gen_task(spec: TaskSpec, seed: int) -> TaskPair:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    k, q = spec.teacher_atoms, spec.q
    if spec.teacher_signs == "alternating":
        signs = np.where(np.arange(k) % 2 == 0, 1.0, -1.0)
    else:
        signs = np.ones(k)
    a = spec.teacher_a_scale * signs * (0.75 + 0.5 * rng.random(k))
    w = rng.standard_normal((k, q))
    w *= spec.teacher_w_scale / np.linalg.norm(w, axis=1, keepdims=True)
    teacher = ParticleCloud(np.column_stack([a, w]))
    act = mfnet.Activation(spec.act)
    zero = np.zeros(q)
    source = TaskGenerator(teacher, zero, spec.noise_std, act)
    if spec.mode == "shifted_outer":
        shifted = teacher.atoms.copy()
        shifted[:, 0] += spec.shift
        target = TaskGenerator(ParticleCloud(shifted), zero, spec.noise_std, act)
    elif spec.mode == "shifted_input":
        mean = zero.copy()
        mean[0] = spec.shift
        target = TaskGenerator(teacher, mean, spec.noise_std, act)
    else:
        target = source
    return TaskPair(spec, source, target, int(seed))
