"""Particle clouds over parameter space and empirical data measures."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np


class MeasureError(ValueError):
    pass


@dataclass(frozen=True)
class ParticleCloud:
    """Uniform-weight atom set; row i of ``atoms`` is the parameter vector of neuron i."""

    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float, copy=True)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2 or atoms.shape[0] < 1 or atoms.shape[1] < 1:
            raise MeasureError(f"cloud needs at least one atom of positive dimension, got shape {atoms.shape}")
        if not np.all(np.isfinite(atoms)):
            raise MeasureError("cloud atoms must be finite")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    def __len__(self):
        return self.size


@dataclass(frozen=True)
class DataSet:
    """n labelled samples; x has shape (n, q) and y shape (n,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float, copy=True)
        y = np.array(self.y, dtype=float, copy=True).reshape(-1)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise MeasureError(f"dataset needs at least one sample, got x shape {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise MeasureError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise MeasureError("dataset entries must be finite")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def q(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return self.n

    def sample(self, i: int) -> tuple[np.ndarray, float]:
        return self.x[i], float(self.y[i])

    def z(self) -> np.ndarray:
        """Samples as concatenated (x, y) rows."""
        return np.column_stack([self.x, self.y])

    def average(self, f: Callable[[np.ndarray, float], float]) -> float:
        return float(np.mean([f(xi, yi) for xi, yi in zip(self.x, self.y)]))

    def components(self) -> list[tuple[float, "DataSet"]]:
        return [(1.0, self)]


@dataclass(frozen=True)
class MixedDataView:
    """The convex combination alpha * target + (1 - alpha) * source, kept unmerged."""

    target: DataSet
    source: DataSet
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise MeasureError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.target.q != self.source.q:
            raise MeasureError("target and source input dimensions differ")

    @property
    def q(self) -> int:
        return self.target.q

    def average(self, f: Callable[[np.ndarray, float], float]) -> float:
        return self.alpha * self.target.average(f) + (1.0 - self.alpha) * self.source.average(f)

    def components(self) -> list[tuple[float, DataSet]]:
        # zero-weight parts are dropped so alpha in {0, 1} reduces exactly to one set
        parts = [(self.alpha, self.target), (1.0 - self.alpha, self.source)]
        return [(w, ds) for w, ds in parts if w > 0.0]


DataMeasure = DataSet | MixedDataView


def resample_one(data: DataSet, index: int, replacement) -> DataSet:
    """Copy of ``data`` with sample ``index`` swapped for ``replacement = (x, y)``."""
    if not 0 <= index < data.n:
        raise MeasureError(f"index {index} out of range for {data.n} samples")
    xr, yr = replacement
    xr = np.asarray(xr, dtype=float).reshape(-1)
    if xr.shape[0] != data.q:
        raise MeasureError(f"replacement has input dimension {xr.shape[0]}, expected {data.q}")
    x = data.x.copy()
    y = data.y.copy()
    x[index] = xr
    y[index] = float(yr)
    return DataSet(x, y)


def cloud_moment(cloud: ParticleCloud, p: int) -> float:
    """(1/r) sum_i ||theta_i||^p for p in {2, 4, 8}."""
    if p not in (2, 4, 8):
        raise MeasureError(f"moment order must be 2, 4 or 8, got {p}")
    sq = np.einsum("ij,ij->i", cloud.atoms, cloud.atoms)
    return float(np.mean(sq ** (p // 2)))


def data_moment(data: DataSet, k: int) -> float:
    """(1/n) sum_i (1 + ||x_i||^2 + y_i^2)^k."""
    if k not in (1, 2, 4):
        raise MeasureError(f"data moment order must be 1, 2 or 4, got {k}")
    sq = np.einsum("ij,ij->i", data.x, data.x) + data.y**2
    return float(np.mean((1.0 + sq) ** k))


# -- JSON-lines persistence -------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _write_rows(path: Path, header: dict, rows: Iterable[Iterable[float]]) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            fh.write("[" + ", ".join(_fmt(v) for v in row) + "]\n")


def _read_rows(path: Path) -> tuple[dict, np.ndarray]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    return header, np.array(rows, dtype=float)


def save_cloud(cloud: ParticleCloud, path, **extra) -> None:
    header = {"kind": "cloud", "dim": cloud.dim, "count": cloud.size, **extra}
    _write_rows(Path(path), header, cloud.atoms)


def load_cloud(path) -> ParticleCloud:
    header, rows = _read_rows(Path(path))
    if header.get("kind") != "cloud":
        raise MeasureError(f"{path} does not hold a particle cloud")
    return ParticleCloud(rows.reshape(-1, header["dim"]))


def save_dataset(data: DataSet, path, **extra) -> None:
    header = {"kind": "dataset", "q": data.q, "count": data.n, **extra}
    _write_rows(Path(path), header, data.z())


def load_dataset(path) -> DataSet:
    header, rows = _read_rows(Path(path))
    if header.get("kind") != "dataset":
        raise MeasureError(f"{path} does not hold a dataset")
    rows = rows.reshape(-1, header["q"] + 1)
    return DataSet(rows[:, :-1], rows[:, -1])
