"""One-hidden-layer mean-field network: outputs, losses and flat derivatives.

Parameters are laid out as theta = (a, w): coordinate 0 is the outer weight,
coordinates 1..q the hidden weight. Fine-tuning keeps the two blocks in
separate clouds (a w-cloud over R^q and an a-cloud over R^1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .measures import DataSet, ParticleCloud

ACTIVATIONS = ("relu", "tanh", "sigmoid", "heaviside")
LOSSES = ("quadratic", "logcosh")


class DimensionError(ValueError):
    pass


class UnsupportedForTraining(ValueError):
    pass


@dataclass(frozen=True)
class Activation:
    kind: str = "tanh"

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}; choose from {ACTIVATIONS}")

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "relu":
            return np.maximum(u, 0.0)
        if self.kind == "tanh":
            return np.tanh(u)
        if self.kind == "sigmoid":
            return 0.5 * (1.0 + np.tanh(0.5 * u))
        return (u > 0).astype(float)

    def deriv(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "relu":
            # subgradient at 0 is taken as 0
            return (u > 0).astype(float)
        if self.kind == "tanh":
            t = np.tanh(u)
            return 1.0 - t * t
        if self.kind == "sigmoid":
            s = 0.5 * (1.0 + np.tanh(0.5 * u))
            return s * (1.0 - s)
        raise UnsupportedForTraining("heaviside has zero gradient almost everywhere; use it for evaluation only")

    @property
    def growth_constant(self) -> float:
        return 1.0


@dataclass(frozen=True)
class OuterLoss:
    """Loss between prediction yhat and label y, with its growth constants."""

    kind: str = "quadratic"

    def __post_init__(self):
        if self.kind not in LOSSES:
            raise ValueError(f"unknown loss {self.kind!r}; choose from {LOSSES}")

    def __call__(self, yhat, y):
        u = np.asarray(yhat, dtype=float) - np.asarray(y, dtype=float)
        if self.kind == "quadratic":
            return u * u
        au = np.abs(u)
        return au + np.log1p(np.exp(-2.0 * au)) - np.log(2.0)

    def d1(self, yhat, y):
        u = np.asarray(yhat, dtype=float) - np.asarray(y, dtype=float)
        if self.kind == "quadratic":
            return 2.0 * u
        return np.tanh(u)

    def d2(self, yhat, y):
        u = np.asarray(yhat, dtype=float) - np.asarray(y, dtype=float)
        if self.kind == "quadratic":
            return np.full_like(u, 2.0)
        t = np.tanh(u)
        return 1.0 - t * t

    @property
    def constants(self) -> dict[str, float]:
        """L_l, L_l1, L_l2 such that |l| <= L_l(1+yhat^2+y^2), |dl| <= L_l1(1+|yhat|+|y|), |d2l| <= L_l2."""
        if self.kind == "quadratic":
            return {"L_l": 2.0, "L_l1": 2.0, "L_l2": 2.0}
        return {"L_l": 1.0, "L_l1": 1.0, "L_l2": 1.0}


def _as_act(act) -> Activation:
    return act if isinstance(act, Activation) else Activation(act)


def _as_loss(ol) -> OuterLoss:
    return ol if isinstance(ol, OuterLoss) else OuterLoss(ol)


# -- vectorised kernels (arrays in, arrays out) ------------------------------

def unit_outputs(atoms: np.ndarray, X: np.ndarray, act) -> np.ndarray:
    """phi(theta_i, x_j) = a_i * act(w_i . x_j), shape (r, n)."""
    act = _as_act(act)
    return atoms[:, :1] * act(atoms[:, 1:] @ X.T)


def network_output(atoms: np.ndarray, X: np.ndarray, act, weights: np.ndarray | None = None) -> np.ndarray:
    """Phi(m, x_j) for every row of X; uniform weights unless given."""
    phi = unit_outputs(atoms, X, act)
    if weights is None:
        return phi.mean(axis=0)
    return weights @ phi


def product_output(w_atoms: np.ndarray, a_atoms: np.ndarray, X: np.ndarray, act) -> np.ndarray:
    act = _as_act(act)
    return act(w_atoms @ X.T).mean(axis=0) * a_atoms[:, 0].mean()


def data_drift(atoms: np.ndarray, data, act, ol, return_risk: bool = False):
    """Gradient in theta of the data-averaged flat derivative, one row per atom.

    ``data`` may be a DataSet or a MixedDataView; mixtures combine per-set
    drifts with their exact weights. With ``return_risk`` the risk of the
    current cloud, from the same forward pass, is returned as well.
    """
    act, ol = _as_act(act), _as_loss(ol)
    a = atoms[:, 0]
    W = atoms[:, 1:]
    out = np.zeros_like(atoms)
    risk = 0.0
    for weight, ds in data.components():
        H = W @ ds.x.T
        F = act(H)
        D = act.deriv(H)
        yhat = (a @ F) / atoms.shape[0]
        g = ol.d1(yhat, ds.y) / ds.n
        part = np.empty_like(atoms)
        part[:, 0] = F @ g
        part[:, 1:] = a[:, None] * ((D * g) @ ds.x)
        out = out + weight * part
        if return_risk:
            risk += weight * float(np.mean(ol(yhat, ds.y)))
    if return_risk:
        return out, risk
    return out


def finetune_features(w_atoms: np.ndarray, data, act) -> list[tuple[float, np.ndarray, np.ndarray]]:
    """(weight, mean_i act(w_i . x) per sample, labels) for each data component."""
    act = _as_act(act)
    return [(weight, act(w_atoms @ ds.x.T).mean(axis=0), ds.y) for weight, ds in data.components()]


def finetune_drift(w_atoms: np.ndarray, a_atoms: np.ndarray, data, act, ol, features=None,
                   return_risk: bool = False):
    """d/da of the data-averaged fine-tuning flat derivative, one row per a-atom.

    It does not depend on the atom itself: avg_z[dl(Y', y) * mean_i act(w_i . x)].
    ``features`` (from finetune_features) skips recomputing the frozen features.
    """
    ol = _as_loss(ol)
    feats = features if features is not None else finetune_features(w_atoms, data, act)
    abar = a_atoms[:, 0].mean()
    total = 0.0
    risk = 0.0
    for weight, feat, y in feats:
        yhat = feat * abar
        total = total + weight * float(np.mean(ol.d1(yhat, y) * feat))
        if return_risk:
            risk += weight * float(np.mean(ol(yhat, y)))
    out = np.full_like(a_atoms, total)
    if return_risk:
        return out, risk
    return out


# -- single-point operations --------------------------------------------------

def _check(cloud: ParticleCloud, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if cloud.dim != x.shape[0] + 1:
        raise DimensionError(f"cloud dimension {cloud.dim} does not match input dimension {x.shape[0]} + 1")
    return x


def _split(z):
    x, y = z
    return np.asarray(x, dtype=float).reshape(-1), float(y)


def predict(cloud: ParticleCloud, x, act) -> float:
    x = _check(cloud, x)
    return float(network_output(cloud.atoms, x[None, :], act)[0])


def loss(cloud: ParticleCloud, z, act, ol) -> float:
    x, y = _split(z)
    return float(_as_loss(ol)(predict(cloud, x, act), y))


def _flat_derivative_weighted(atoms, weights, x, y, theta, act, ol) -> float:
    act, ol = _as_act(act), _as_loss(ol)
    yhat = float(network_output(atoms, x[None, :], act, weights)[0])
    phi_theta = theta[0] * float(act(theta[1:] @ x))
    return float(ol.d1(yhat, y)) * (phi_theta - yhat)


def flat_derivative(cloud: ParticleCloud, z, theta, act, ol) -> float:
    """Centred linear functional derivative of the loss in m, evaluated at theta."""
    x, y = _split(z)
    x = _check(cloud, x)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != cloud.dim:
        raise DimensionError(f"theta has dimension {theta.shape[0]}, cloud has {cloud.dim}")
    return _flat_derivative_weighted(cloud.atoms, None, x, y, theta, act, ol)


def flat_derivative_grad(cloud: ParticleCloud, z, theta, act, ol) -> np.ndarray:
    act, ol = _as_act(act), _as_loss(ol)
    if act.kind == "heaviside":
        raise UnsupportedForTraining("heaviside has zero gradient almost everywhere; use it for evaluation only")
    x, y = _split(z)
    x = _check(cloud, x)
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != cloud.dim:
        raise DimensionError(f"theta has dimension {theta.shape[0]}, cloud has {cloud.dim}")
    g = float(ol.d1(predict(cloud, x, act), y))
    u = float(theta[1:] @ x)
    return g * np.concatenate([[float(act(u))], theta[0] * float(act.deriv(u)) * x])


def _check_product(w_cloud: ParticleCloud, a_cloud: ParticleCloud, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if a_cloud.dim != 1:
        raise DimensionError(f"a-cloud must be one-dimensional, got {a_cloud.dim}")
    if w_cloud.dim != x.shape[0]:
        raise DimensionError(f"w-cloud dimension {w_cloud.dim} does not match input dimension {x.shape[0]}")
    return x


def predict_product(w_cloud: ParticleCloud, a_cloud: ParticleCloud, x, act) -> float:
    x = _check_product(w_cloud, a_cloud, x)
    return float(product_output(w_cloud.atoms, a_cloud.atoms, x[None, :], act)[0])


def flat_derivative_sp(w_cloud: ParticleCloud, a_cloud: ParticleCloud, z, a: float, act, ol) -> float:
    """Derivative of the fine-tuning loss in the outer-weight measure, evaluated at a."""
    act, ol = _as_act(act), _as_loss(ol)
    x, y = _split(z)
    x = _check_product(w_cloud, a_cloud, x)
    feat = float(act(w_cloud.atoms @ x).mean())
    abar = float(a_cloud.atoms[:, 0].mean())
    return float(ol.d1(feat * abar, y)) * (float(a) - abar) * feat


def joint_cloud(w_cloud: ParticleCloud, a_cloud: ParticleCloud) -> ParticleCloud:
    """Pair atoms row by row; only meaningful when both clouds have the same size."""
    return ParticleCloud(np.column_stack([a_cloud.atoms[:, 0], w_cloud.atoms]))


def batch_predict(model_cloud, X, act, a_cloud: ParticleCloud | None = None) -> np.ndarray:
    if a_cloud is None:
        return network_output(model_cloud.atoms, X, act)
    return product_output(model_cloud.atoms, a_cloud.atoms, X, act)


def batch_loss(model_cloud, data: DataSet, act, ol, a_cloud: ParticleCloud | None = None) -> np.ndarray:
    return _as_loss(ol)(batch_predict(model_cloud, data.x, act, a_cloud), data.y)


__all__ = [
    "Activation", "OuterLoss", "DimensionError", "UnsupportedForTraining",
    "predict", "loss", "flat_derivative", "flat_derivative_grad",
    "predict_product", "flat_derivative_sp", "network_output", "product_output",
    "unit_outputs", "data_drift", "finetune_drift", "batch_predict", "batch_loss",
]
