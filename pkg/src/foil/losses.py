"""Loss functions and their gradients with respect to predictions.

Vector inputs ``(h,)`` give scalar losses; batches ``(n, h)`` give one loss
per row. All statistics are population statistics over the horizon axis.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict

import numpy as np

from .errors import DataError

SIGMA_FLOOR = 1e-8


def instance_standardize(v: np.ndarray):
    """Return ``((v - mu) / max(sigma, floor), mu, sigma)`` over the last axis."""
    v = np.asarray(v, dtype=np.float64)
    mu = v.mean(axis=-1, keepdims=True)
    sigma = v.std(axis=-1, keepdims=True)
    z = (v - mu) / np.maximum(sigma, SIGMA_FLOOR)
    if v.ndim == 1:
        return z, float(mu[0]), float(sigma[0])
    return z, mu[..., 0], sigma[..., 0]


def irn_residual(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Difference of the instance-standardized target and prediction."""
    y_hat, y = _check_pair(y_hat, y)
    return instance_standardize(y)[0] - instance_standardize(y_hat)[0]


def suf_loss(y_hat: np.ndarray, y: np.ndarray):
    res = irn_residual(y_hat, y)
    return np.mean(res * res, axis=-1)


def suf_loss_grad(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d suf_loss / d y_hat, per row.

    The standardization of ``y_hat`` is differentiated through. Rows whose
    std sits at the floor are treated as if sigma were the floor constant.
    """
    y_hat, y = _check_pair(y_hat, y)
    h = y_hat.shape[-1]
    z_hat, _, s_hat = instance_standardize(y_hat)
    z_y = instance_standardize(y)[0]
    g = 2.0 * (z_hat - z_y) / h  # d loss / d z_hat
    s_hat = np.asarray(s_hat)[..., None] if y_hat.ndim > 1 else np.asarray([s_hat])
    floored = s_hat <= SIGMA_FLOOR
    g_centered = g - g.mean(axis=-1, keepdims=True)
    proj = np.where(floored, 0.0, np.mean(g * z_hat, axis=-1, keepdims=True))
    return (g_centered - z_hat * proj) / np.maximum(s_hat, SIGMA_FLOOR)


def erm_loss(y_hat: np.ndarray, y: np.ndarray):
    y_hat, y = _check_pair(y_hat, y)
    d = y_hat - y
    return np.mean(d * d, axis=-1)


def erm_loss_grad(y_hat: np.ndarray, y: np.ndarray) -> np.ndarray:
    y_hat, y = _check_pair(y_hat, y)
    return 2.0 * (y_hat - y) / y_hat.shape[-1]


SAMPLE_LOSSES = {
    "suf": (suf_loss, suf_loss_grad),
    "mse": (erm_loss, erm_loss_grad),
}


@dataclass
class LossBreakdown:
    total: float
    env_risks: Dict[int, float]
    erm: float
    variance: float
    lambda1: float
    lambda2: float
    env_counts: Dict[int, int] = field(default_factory=dict)

    @property
    def mean_risk(self) -> float:
        return float(np.mean(list(self.env_risks.values())))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["env_risks"] = {str(k): v for k, v in self.env_risks.items()}
        d["env_counts"] = {str(k): v for k, v in self.env_counts.items()}
        return d


def til_loss(y_hat, y, env_labels, lambda1: float, lambda2: float, base: str = "suf", with_grad: bool = False):
    """Mean per-environment risk + lambda1 * ERM + lambda2 * Var over environments.

    The mean and (population) variance run over the environments present in
    the batch, unweighted by their sizes. ``base`` selects the per-sample
    risk: ``"suf"`` for the IRN surrogate or ``"mse"`` for plain squared error.
    With ``with_grad`` the gradient w.r.t. ``y_hat`` is returned as well.
    """
    y_hat, y = _check_pair(y_hat, y)
    if y_hat.ndim != 2 or len(y_hat) == 0:
        raise DataError("til_loss needs a non-empty (n, h) batch")
    labels = np.asarray(env_labels)
    if labels.shape != (len(y_hat),):
        raise DataError("every sample needs exactly one environment label")
    loss_fn, grad_fn = SAMPLE_LOSSES[base]
    per_sample = loss_fn(y_hat, y)
    envs = np.unique(labels)
    risks = np.array([per_sample[labels == e].mean() for e in envs])
    counts = {int(e): int(np.sum(labels == e)) for e in envs}
    n_env = len(envs)
    mean_risk = risks.mean()
    variance = float(np.mean((risks - mean_risk) ** 2))
    erm = float(erm_loss(y_hat, y).mean())
    total = float(mean_risk + lambda1 * erm + lambda2 * variance)
    out = LossBreakdown(
        total,
        {int(e): float(r) for e, r in zip(envs, risks)},
        erm,
        variance,
        float(lambda1),
        float(lambda2),
        counts,
    )
    if not with_grad:
        return out
    # d total / d risk_e, then spread over that environment's samples
    d_risk = 1.0 / n_env + lambda2 * 2.0 * (risks - mean_risk) / n_env
    weights = np.empty(len(y_hat))
    for e, w in zip(envs, d_risk):
        mask = labels == e
        weights[mask] = w / counts[int(e)]
    grad = weights[:, None] * grad_fn(y_hat, y)
    grad += lambda1 * erm_loss_grad(y_hat, y) / len(y_hat)
    return out, grad


def _check_pair(y_hat, y):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise DataError(f"prediction shape {y_hat.shape} does not match target shape {y.shape}")
    return y_hat, y
