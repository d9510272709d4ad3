"""Accuracy/efficiency objectives and their scalarizations.

Objectives whose preference weight is exactly zero are left out of the
Tchebycheff-style scalarizations, so ``w = (1, 0)`` reduces the smooth
Tchebycheff loss to the first objective itself rather than to
``mu * log(exp(f1 / mu) + 1)``.  Both ``tch_scalarize`` and
``stch_scalarize`` follow this convention, which keeps
``tch <= stch <= tch + mu * log(k)`` valid with ``k`` the number of
positively weighted objectives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class ObjectiveVector:
    mse: float
    occupancy: float
    soft_occupancy: float | None = None

    def __post_init__(self):
        if not (math.isfinite(self.mse) and math.isfinite(self.occupancy)):
            raise ValueError("objectives must be finite")
        if not 0.0 <= self.occupancy <= 1.0:
            raise ValueError(f"occupancy must lie in [0, 1], got {self.occupancy}")

    def as_array(self) -> np.ndarray:
        return np.array([self.mse, self.occupancy])


@dataclass(frozen=True)
class ScalarizationConfig:
    w_mse: float = 1.0
    mu: float = 0.1
    z_star: tuple = (0.0, 0.0)
    # Each objective is divided by its scale before weighting; (1, 1) leaves
    # the raw objectives untouched.
    scale: tuple = (1.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.w_mse <= 1.0:
            raise ValueError(f"w_mse must lie in [0, 1], got {self.w_mse}")
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if len(self.scale) != 2 or min(self.scale) <= 0:
            raise ValueError("scale must hold two positive numbers")

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.w_mse, 1.0 - self.w_mse])


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def avg_unit_occupancy(records) -> float:
    """Mean of every recorded delta-tensor occupancy (units, streams, steps, batch)."""
    flat = np.concatenate([np.ravel(np.asarray(r, dtype=np.float64)) for r in records]) \
        if len(records) else np.empty(0)
    if flat.size == 0:
        raise ValueError("no occupancy records")
    return float(flat.mean())


def _check_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
        raise ValueError(f"weights must be non-negative and sum to 1, got {w}")
    return w


def _objective_array(f) -> np.ndarray:
    if isinstance(f, ObjectiveVector):
        return f.as_array()
    return np.asarray(f, dtype=np.float64)


def linear_scalarize(f, w) -> float:
    return float(np.dot(_check_weights(w), _objective_array(f)))


def tch_scalarize(f, w, z_star=None) -> float:
    f = _objective_array(f)
    w = _check_weights(w)
    z = np.zeros_like(f) if z_star is None else np.asarray(z_star, dtype=np.float64)
    keep = w > 0
    return float(np.max(w[keep] * (f[keep] - z[keep])))


def _lse(terms: np.ndarray, mu: float) -> float:
    if terms.size == 1:
        return float(terms[0])
    top = terms.max()
    return float(top + mu * math.log(np.exp((terms - top) / mu).sum()))


def stch_scalarize(f, cfg: ScalarizationConfig | None = None, w=None, mu=None, z_star=None) -> float:
    """Smooth Tchebycheff value ``mu * log(sum_i exp(w_i (f_i - z_i) / mu))``.

    Weights, smoothing and ideal point come from ``cfg`` unless given
    explicitly; ``w`` may hold any number of objectives.  The objective
    scales of ``cfg`` fold into the weights.
    """
    f = _objective_array(f)
    scale = np.ones_like(f)
    if cfg is not None:
        scale = np.asarray(cfg.scale, dtype=np.float64)
        w = cfg.weights if w is None else w
        mu = cfg.mu if mu is None else mu
        z_star = cfg.z_star if z_star is None else z_star
    w = _check_weights(w)
    if mu is None or mu <= 0:
        raise ValueError("mu must be positive")
    z = np.zeros_like(f) if z_star is None else np.asarray(z_star, dtype=np.float64)
    keep = w > 0
    return _lse((w[keep] / scale[keep]) * (f[keep] - z[keep]), mu)


def composite_loss(mse_val, soft_occ, cfg: ScalarizationConfig):
    """Training loss: smooth Tchebycheff over (MSE, soft occupancy).

    Accepts floats or tape variables; with tape variables a differentiable
    ``Var`` is returned.
    """
    if not (isinstance(mse_val, ad.Var) or isinstance(soft_occ, ad.Var)):
        return stch_scalarize([float(mse_val), float(soft_occ)], cfg)
    w = cfg.weights / np.asarray(cfg.scale, dtype=np.float64)
    z1, z2 = cfg.z_star
    terms = []
    if w[0] > 0:
        terms.append(ad.mul(ad.sub(mse_val, z1), float(w[0])))
    if w[1] > 0:
        terms.append(ad.mul(ad.sub(soft_occ, z2), float(w[1])))
    if len(terms) == 1:
        return terms[0]
    return ad.mu_logsumexp(ad.stack_scalars(terms), cfg.mu)
