"""Preference-weight exploration with a two-task Gaussian process.

The surrogate maps a preference weight ``w`` in [0, 1] to the two trained
objectives (MSE, occupancy).  Both tasks share a squared-exponential kernel
on ``w`` and are coupled by a task covariance ``B = v v^T + diag(d)``
(rank-1 intrinsic coregionalization).  Targets are standardized per task
before fitting; hyperparameters are fitted by gradient descent on the
negative log marginal likelihood with a backtracking line search, so the
recorded NMLL trace never increases.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.linalg import cho_solve, cholesky

from .objectives import ObjectiveVector

log = logging.getLogger(__name__)

DEFAULT_INIT_WEIGHTS = (0.10, 0.25, 0.50, 0.75, 0.90, 1.00)
MAX_JITTER = 1e-2


class GPFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class ParetoRecord:
    w_mse: float
    objectives: ObjectiveVector
    run_id: str = ""
    seed: int = 0


@dataclass
class GPHyper:
    log_ell: float = math.log(0.2)
    v: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7]))
    log_d: np.ndarray = field(default_factory=lambda: np.log([0.5, 0.5]))
    log_noise: np.ndarray = field(default_factory=lambda: np.log([1e-2, 1e-2]))

    def pack(self, fit_noise: bool, independent: bool) -> np.ndarray:
        parts = [[self.log_ell]]
        if not independent:
            parts.append(self.v)
        parts.append(self.log_d)
        if fit_noise:
            parts.append(self.log_noise)
        return np.concatenate(parts).astype(np.float64)

    def unpack(self, theta: np.ndarray, fit_noise: bool, independent: bool) -> "GPHyper":
        i = 1
        v = self.v if independent else theta[i:i + 2]
        i += 0 if independent else 2
        log_d = theta[i:i + 2]
        i += 2
        log_noise = theta[i:i + 2] if fit_noise else self.log_noise
        return GPHyper(float(theta[0]), np.array(v, dtype=float), np.array(log_d, dtype=float),
                       np.array(log_noise, dtype=float))

    @property
    def task_cov(self) -> np.ndarray:
        return np.outer(self.v, self.v) + np.diag(np.exp(self.log_d))


def se_kernel(a, b, ell: float) -> np.ndarray:
    d = np.subtract.outer(np.asarray(a, float), np.asarray(b, float))
    return np.exp(-0.5 * (d / ell) ** 2)


class MultiTaskGP:
    """Two-output GP over a scalar input with ICM task coupling.

    ``jitter`` is a white-noise component of the latent prior: it is added to
    the training covariance and also to the cross-covariance of a query that
    coincides exactly with a training input, so with zero observation noise
    the posterior mean interpolates the training targets.
    """

    def __init__(self, x, y, hyper: GPHyper | None = None, noise=None, jitter: float = 1e-6,
                 independent: bool = False, log_mse: bool = False):
        self.x = np.asarray(x, dtype=np.float64).ravel()
        y = np.asarray(y, dtype=np.float64).reshape(len(self.x), 2).copy()
        self.log_mse = log_mse
        if log_mse:
            y[:, 0] = np.log(y[:, 0])
        self.y_mean = y.mean(axis=0)
        std = y.std(axis=0)
        self.y_std = np.where(std > 0, std, 1.0)
        self.z = (y - self.y_mean) / self.y_std
        self.hyper = hyper or GPHyper()
        if independent:
            self.hyper.v = np.zeros(2)
        self.fixed_noise = None if noise is None else np.broadcast_to(
            np.asarray(noise, dtype=float), (2,)).copy()
        self.jitter = jitter
        self.independent = independent
        self.nmll_trace: list[float] = []
        self._condition()

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def noise(self) -> np.ndarray:
        return self.fixed_noise if self.fixed_noise is not None else np.exp(self.hyper.log_noise)

    def _cov(self, hyper: GPHyper, noise: np.ndarray, jitter: float) -> tuple[np.ndarray, np.ndarray]:
        kx = se_kernel(self.x, self.x, math.exp(hyper.log_ell))
        cov = np.kron(hyper.task_cov, kx) + np.kron(np.diag(noise), np.eye(self.n))
        cov[np.diag_indices_from(cov)] += jitter
        return cov, kx

    def _factor(self, hyper: GPHyper, noise: np.ndarray):
        jitter = self.jitter
        while True:
            cov, kx = self._cov(hyper, noise, jitter)
            try:
                return cholesky(cov, lower=True), cov, kx, jitter
            except np.linalg.LinAlgError:
                jitter *= 10
                if jitter > MAX_JITTER:
                    raise GPFitError("covariance not positive definite after jitter escalation")

    def _condition(self) -> None:
        self.chol, _, _, self.used_jitter = self._factor(self.hyper, self.noise)
        self.alpha = cho_solve((self.chol, True), self.z.T.ravel())

    def nmll(self, hyper: GPHyper | None = None, noise=None) -> float:
        hyper = hyper or self.hyper
        noise = self.noise if noise is None else noise
        L, _, _, _ = self._factor(hyper, noise)
        yv = self.z.T.ravel()
        a = cho_solve((L, True), yv)
        return float(0.5 * yv @ a + np.log(np.diag(L)).sum() + 0.5 * len(yv) * math.log(2 * math.pi))

    def nmll_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        fit_noise = self.fixed_noise is None
        hyper = self.hyper.unpack(theta, fit_noise, self.independent)
        noise = np.exp(hyper.log_noise) if fit_noise else self.fixed_noise
        L, cov, kx, _ = self._factor(hyper, noise)
        yv = self.z.T.ravel()
        a = cho_solve((L, True), yv)
        value = float(0.5 * yv @ a + np.log(np.diag(L)).sum() + 0.5 * len(yv) * math.log(2 * math.pi))
        inner = cho_solve((L, True), np.eye(len(yv))) - np.outer(a, a)
        B = hyper.task_cov
        ell = math.exp(hyper.log_ell)
        d2 = np.subtract.outer(self.x, self.x) ** 2
        derivs = [np.kron(B, kx * d2 / ell ** 2)]
        if not self.independent:
            for k in range(2):
                e = np.zeros(2)
                e[k] = 1.0
                dB = np.outer(e, hyper.v) + np.outer(hyper.v, e)
                derivs.append(np.kron(dB, kx))
        for k in range(2):
            E = np.zeros((2, 2))
            E[k, k] = math.exp(hyper.log_d[k])
            derivs.append(np.kron(E, kx))
        if fit_noise:
            for k in range(2):
                E = np.zeros((2, 2))
                E[k, k] = noise[k]
                derivs.append(np.kron(E, np.eye(self.n)))
        grad = np.array([0.5 * np.sum(inner * dK) for dK in derivs])
        return value, grad

    def fit(self, iterations: int = 500, lr: float = 0.05) -> "MultiTaskGP":
        """Gradient descent in log-parameter space with backtracking."""
        fit_noise = self.fixed_noise is None
        theta = self.hyper.pack(fit_noise, self.independent)
        value, grad = self.nmll_and_grad(theta)
        self.nmll_trace = [value]
        for _ in range(iterations):
            step = lr
            accepted = False
            while step > 1e-10:
                cand = _clip_theta(theta - step * grad, fit_noise, self.independent)
                try:
                    cv, cg = self.nmll_and_grad(cand)
                except GPFitError:
                    cv = math.inf
                if cv <= value:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
            theta, value, grad = cand, cv, cg
            self.nmll_trace.append(value)
        self.hyper = self.hyper.unpack(theta, fit_noise, self.independent)
        self._condition()
        return self

    def predict_standardized(self, w) -> tuple[np.ndarray, np.ndarray]:
        """Posterior latent mean and variance per task, in standardized units."""
        w = np.atleast_1d(np.asarray(w, dtype=np.float64))
        ell = math.exp(self.hyper.log_ell)
        B = self.hyper.task_cov
        kx = se_kernel(w, self.x, ell)
        nugget = self.used_jitter * (np.subtract.outer(w, self.x) == 0)
        means = np.empty((len(w), 2))
        var = np.empty((len(w), 2))
        for t in range(2):
            k_star = np.kron(B[t][None, :], kx)  # (m, 2n)
            k_star[:, t * self.n:(t + 1) * self.n] += nugget
            means[:, t] = k_star @ self.alpha
            v = cho_solve((self.chol, True), k_star.T)
            var[:, t] = B[t, t] + self.used_jitter - np.einsum("ij,ji->i", k_star, v)
        return means, np.maximum(var, 0.0)

    def predict(self, w) -> tuple[np.ndarray, np.ndarray]:
        """De-standardized ``(mean, variance)``, each shaped ``(m, 2)``."""
        m, v = self.predict_standardized(w)
        mean = m * self.y_std + self.y_mean
        var = v * self.y_std ** 2
        if self.log_mse:
            # log-normal moments for the MSE task
            mu, s2 = mean[:, 0].copy(), var[:, 0].copy()
            mean[:, 0] = np.exp(mu + s2 / 2)
            var[:, 0] = (np.exp(s2) - 1) * np.exp(2 * mu + s2)
        return mean, var


def _clip_theta(theta: np.ndarray, fit_noise: bool, independent: bool) -> np.ndarray:
    theta = theta.copy()
    theta[0] = np.clip(theta[0], math.log(1e-2), math.log(10.0))
    i = 1 if independent else 3
    theta[i:i + 2] = np.clip(theta[i:i + 2], math.log(1e-6), math.log(1e3))
    if fit_noise:
        theta[i + 2:i + 4] = np.clip(theta[i + 2:i + 4], math.log(1e-8), math.log(10.0))
    return theta


def gp_fit(records, iterations: int = 500, lr: float = 0.05, noise=None, independent: bool = False,
           log_mse: bool = False) -> MultiTaskGP:
    if len(records) < 3:
        raise ValueError("need at least 3 records to fit the GP")
    x = [r.w_mse for r in records]
    y = [[r.objectives.mse, r.objectives.occupancy] for r in records]
    gp = MultiTaskGP(x, y, noise=noise, independent=independent, log_mse=log_mse)
    return gp.fit(iterations, lr)


def gp_predict(gp: MultiTaskGP, w_query):
    w = np.atleast_1d(np.asarray(w_query, dtype=np.float64))
    if np.any((w < 0) | (w > 1)):
        raise ValueError("preference weights must lie in [0, 1]")
    return gp.predict(w)


def default_grid(n: int = 101) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def acquisition_values(gp: MultiTaskGP, grid) -> np.ndarray:
    _, var = gp.predict_standardized(grid)
    return var.sum(axis=1)


def acquire_next(gp: MultiTaskGP, candidate_grid=None, exclude_tol: float = 1e-3,
                 interior: bool = True) -> float:
    """Grid point with the largest summed standardized posterior variance.

    Points within ``exclude_tol`` of an already sampled weight are skipped;
    ties go to the smaller weight.  With ``interior`` only points strictly
    between the smallest and largest sampled weight are candidates, so the
    explorer refines gaps in the front instead of extrapolating past its ends.
    """
    grid = default_grid() if candidate_grid is None else np.asarray(candidate_grid, dtype=float)
    if gp.n:
        keep = np.min(np.abs(np.subtract.outer(grid, gp.x)), axis=1) > exclude_tol
        if interior:
            keep &= (grid > gp.x.min()) & (grid < gp.x.max())
        grid = grid[keep]
    if grid.size == 0:
        raise ValueError("empty candidate grid")
    return float(grid[int(np.argmax(acquisition_values(gp, grid)))])


def _guarded(trainer, w):
    try:
        return trainer(w)
    except Exception as exc:  # training failures are skipped, not fatal
        return exc


def explore(trainer, init_weights=DEFAULT_INIT_WEIGHTS, iterations: int = 0, grid=None,
            fit_kwargs=None, map_fn=map):
    """Train at every initial weight, then alternate acquire -> train -> refit.

    ``trainer(w)`` returns a ``ParetoRecord`` or an ``ObjectiveVector``.
    Failed runs are logged, warned about and skipped.  The initial runs go
    through ``map_fn`` so a process pool's ``map`` can run them in parallel;
    the trainer must then be picklable.
    """
    fit_kwargs = fit_kwargs or {}
    records: list[ParetoRecord] = []

    def collect(w, out):
        if isinstance(out, Exception):
            warnings.warn(f"training at w_mse={w} failed: {out}")
            log.warning("training at w_mse=%s failed: %s", w, out)
            return
        if isinstance(out, ObjectiveVector):
            out = ParetoRecord(float(w), out, run_id=f"w{w:.3f}")
        records.append(out)

    def run(w):
        collect(w, _guarded(trainer, w))

    weights = [float(w) for w in init_weights]
    for w, out in zip(weights, map_fn(partial(_guarded, trainer), weights)):
        collect(w, out)
    gp = gp_fit(records, **fit_kwargs) if len(records) >= 3 else None
    for _ in range(iterations):
        if gp is None:
            break
        w_next = acquire_next(gp, grid)
        run(w_next)
        gp = gp_fit(records, **fit_kwargs)
    return records, gp


def dominates(a, b) -> bool:
    """``a`` dominates ``b`` under minimization: no worse anywhere, better somewhere."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return bool(np.all(a <= b) and np.any(a < b))


def _as_point(p) -> np.ndarray:
    if isinstance(p, ObjectiveVector):
        return p.as_array()
    if isinstance(p, ParetoRecord):
        return p.objectives.as_array()
    return np.asarray(p, dtype=float)


def dominated_mask(points) -> np.ndarray:
    pts = np.array([_as_point(p) for p in points]).reshape(len(points), -1)
    if len(pts) == 0:
        return np.zeros(0, dtype=bool)
    le = np.all(pts[:, None, :] <= pts[None, :, :], axis=2)
    lt = np.any(pts[:, None, :] < pts[None, :, :], axis=2)
    return np.any(le & lt, axis=0)  # column j dominated by some row i


def dominance_filter(points) -> list:
    """Members of ``points`` not dominated by any other member, in input order."""
    mask = dominated_mask(points)
    return [p for p, dom in zip(points, mask) if not dom]


FRONT_FIELDS = ["w_mse", "mse", "occupancy", "dominated", "source"]
CURVE_FIELDS = ["w", "mean_mse", "var_mse", "mean_occ", "var_occ"]


def front_rows(records, gp: MultiTaskGP | None = None, grid=None) -> list[dict]:
    """One row per sampled record, plus GP-mean rows over ``grid`` when a GP is given.

    Dominance is judged within each source group.
    """
    rows = []
    dom = dominated_mask(records)
    for r, d in zip(records, dom):
        rows.append({"w_mse": r.w_mse, "mse": r.objectives.mse, "occupancy": r.objectives.occupancy,
                     "dominated": bool(d), "source": "sampled"})
    if gp is not None:
        grid = default_grid() if grid is None else np.asarray(grid)
        mean, _ = gp.predict(grid)
        for w, m, d in zip(grid, mean, dominated_mask(list(mean))):
            rows.append({"w_mse": float(w), "mse": float(m[0]), "occupancy": float(m[1]),
                         "dominated": bool(d), "source": "gp_mean"})
    return rows


def curve_rows(gp: MultiTaskGP, grid=None) -> list[dict]:
    grid = default_grid() if grid is None else np.asarray(grid)
    mean, var = gp.predict(grid)
    return [{"w": float(w), "mean_mse": float(m[0]), "var_mse": float(v[0]),
             "mean_occ": float(m[1]), "var_occ": float(v[1])} for w, m, v in zip(grid, mean, var)]
