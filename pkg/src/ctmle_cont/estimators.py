"""Baseline ATE estimators, the probit working model and Wald intervals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .data import Dataset, DegenerateTreatmentError

Z_95 = 1.96
WORKING_COLUMNS = slice(2, 10)  # W3..W10


class DimensionError(ValueError):
    pass


class WorkingModelConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class EstimateWithCI:
    psi: float
    se: float
    ci_low: float
    ci_high: float
    method: str = ""

    @property
    def width(self) -> float:
        return self.ci_high - self.ci_low

    def covers(self, truth: float) -> bool:
        return self.ci_low <= truth <= self.ci_high


def wald_ci(psi: float, upsilon: float, n: int, method: str = "") -> EstimateWithCI:
    if upsilon < 0 or n < 1:
        raise ValueError("need upsilon >= 0 and n >= 1")
    se = float(np.sqrt(upsilon / n))
    return EstimateWithCI(float(psi), se, psi - Z_95 * se, psi + Z_95 * se, method)


def _probit_loss_grad(theta, x, y):
    """Mean cross-entropy of ``Phi(x @ theta)`` against ``y`` and its gradient."""
    eta = x @ theta
    lp, lq = log_ndtr(eta), log_ndtr(-eta)
    loss = -np.mean(y * lp + (1.0 - y) * lq)
    # d/d eta of the loss: phi(eta) * (Phi - y) / (Phi (1 - Phi)), written with logs
    log_phi = -0.5 * eta * eta - 0.5 * np.log(2 * np.pi)
    dl = -y * np.exp(log_phi - lp) + (1.0 - y) * np.exp(log_phi - lq)
    return loss, x.T @ dl / len(y)


def _gradient_descent(x, y, tol=1e-8, max_iter=10_000):
    """Steepest descent with Armijo backtracking.

    The trial step is the Barzilai-Borwein length from the previous move,
    which keeps the iteration count low on this ill-conditioned problem.
    """
    theta = np.zeros(x.shape[1])
    loss, grad = _probit_loss_grad(theta, x, y)
    step = 1.0
    for _ in range(max_iter):
        if np.max(np.abs(grad)) <= tol:
            return theta
        gg = grad @ grad
        while True:
            cand = theta - step * grad
            new_loss, new_grad = _probit_loss_grad(cand, x, y)
            if new_loss <= loss - 1e-4 * step * gg or step < 1e-14:
                break
            step *= 0.5
        s, r = cand - theta, new_grad - grad
        sr = s @ r
        step = (s @ s) / sr if sr > 0 else 2.0 * step
        theta, loss, grad = cand, new_loss, new_grad
    if np.max(np.abs(grad)) <= tol:
        return theta
    raise WorkingModelConvergenceError(f"gradient max-norm {np.max(np.abs(grad)):.3g} after {max_iter} iterations")


@dataclass(frozen=True)
class WorkingModelFit:
    """Arm-specific probit regressions on ``W3..W10``.

    ``intercept0``/``intercept1`` stay at zero unless the fit was asked for
    per-arm intercepts.
    """

    theta0: np.ndarray
    theta1: np.ndarray
    intercept0: float = 0.0
    intercept1: float = 0.0
    with_intercept: bool = False

    def _design(self, w):
        x = np.atleast_2d(np.asarray(w, dtype=float))[:, WORKING_COLUMNS]
        return np.column_stack([np.ones(len(x)), x]) if self.with_intercept else x

    def _coef(self, arm):
        theta, b = (self.theta1, self.intercept1) if arm else (self.theta0, self.intercept0)
        return np.concatenate([[b], theta]) if self.with_intercept else theta

    def __call__(self, a, w) -> np.ndarray:
        x = self._design(w)
        a = np.asarray(a)
        return ndtr(np.where(a == 1, x @ self._coef(1), x @ self._coef(0)))

    def gradient(self, dataset: Dataset) -> np.ndarray:
        """Gradient of the pooled empirical risk, arm 0 block first."""
        x = self._design(dataset.w)
        out = []
        for arm in (0, 1):
            m = dataset.a == arm
            coef = self._coef(arm)
            # each arm's loss enters the pooled risk with weight n_arm / n
            out.append(_probit_loss_grad(coef, x[m], dataset.y[m])[1] * m.mean() if m.any() else np.zeros(coef.size))
        return np.concatenate(out)

    def as_outcome_model(self):
        from .targeting import OutcomeModel

        return OutcomeModel(self)


def fit_working_model(
    dataset: Dataset, tol: float = 1e-8, max_iter: int = 10_000, intercept: bool = False
) -> WorkingModelFit:
    """Minimise the empirical cross-entropy of the probit working model.

    The two arms share no parameters, so each is fitted separately. The
    pooled-risk gradient is the arm gradient scaled by the arm proportion,
    so the per-arm stopping rule is the stricter one.
    """
    if dataset.p < 10:
        raise DimensionError(f"working model needs p >= 10 covariates, got {dataset.p}")
    x = dataset.w[:, WORKING_COLUMNS]
    if intercept:
        x = np.column_stack([np.ones(dataset.n), x])
    coefs = []
    for arm in (0, 1):
        m = dataset.a == arm
        if not m.any():
            coefs.append(np.zeros(x.shape[1]))
            continue
        coefs.append(_gradient_descent(x[m], dataset.y[m], tol, max_iter))
    if intercept:
        return WorkingModelFit(coefs[0][1:], coefs[1][1:], float(coefs[0][0]), float(coefs[1][0]), True)
    return WorkingModelFit(coefs[0], coefs[1])


def _l_g(a, g):
    return np.where(a == 1, g, 1.0 - g)


def unadjusted(dataset: Dataset) -> float:
    dataset.require_both_arms()
    a, y = dataset.a, dataset.y
    return float(y[a == 1].mean() - y[a == 0].mean())


def _blip(dataset: Dataset, q) -> np.ndarray:
    n = dataset.n
    return q(np.ones(n, dtype=int), dataset.w) - q(np.zeros(n, dtype=int), dataset.w)


def gcomp(dataset: Dataset, q) -> float:
    return float(np.mean(_blip(dataset, q)))


def iptw(dataset: Dataset, g) -> float:
    a = dataset.a
    return float(np.mean((2 * a - 1) * dataset.y / _l_g(a, g(dataset.w))))


def _aiptw_terms(dataset: Dataset, q, g) -> np.ndarray:
    a = dataset.a
    resid = dataset.y - q(a, dataset.w)
    return (2 * a - 1) / _l_g(a, g(dataset.w)) * resid + _blip(dataset, q)


def aiptw(dataset: Dataset, q, g) -> float:
    return float(np.mean(_aiptw_terms(dataset, q, g)))


def aiptw_with_ci(dataset: Dataset, q, g) -> EstimateWithCI:
    """A-IPTW with the empirical variance of its own per-row terms."""
    terms = _aiptw_terms(dataset, q, g)
    psi = float(np.mean(terms))
    return wald_ci(psi, float(np.mean((terms - psi) ** 2)), dataset.n, method="aiptw")


def upsilon(dataset: Dataset, q, g, psi: float) -> float:
    """Empirical second moment of the efficient influence curve."""
    return float(np.mean((_aiptw_terms(dataset, q, g) - psi) ** 2))

