"""L1-penalised logistic regression paths for the propensity score.

The penalty weight ``h`` indexes a continuum of estimators ``G_h`` of
``P(A = 1 | W)``; large ``h`` means heavy shrinkage. Covariates are
standardised internally (population variance) and coefficients are reported
on the original scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from . import _cd
from .data import Dataset, DegenerateTreatmentError, FoldScheme, split


class LassoError(RuntimeError):
    pass


class ConvergenceError(LassoError):
    def __init__(self, h: float, message: str = ""):
        super().__init__(message or f"coordinate descent did not converge at h={h:.6g}")
        self.h = h


class UnknownPenaltyError(KeyError):
    pass


class DerivativeUndefinedError(LassoError):
    pass


@dataclass(frozen=True)
class PropensityBounds:
    lower: float = 0.005

    def __post_init__(self):
        if not 0.0 < self.lower < 0.5:
            raise ValueError(f"propensity lower bound must lie in (0, 0.5), got {self.lower}")

    @property
    def upper(self) -> float:
        return 1.0 - self.lower

    def clip(self, g):
        return np.clip(g, self.lower, self.upper)


@dataclass(frozen=True)
class LogisticCoefficients:
    intercept: float
    beta: np.ndarray


@dataclass(frozen=True, eq=False)
class PenaltyGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True).ravel()
        if v.size < 1 or np.any(v <= 0) or np.any(np.diff(v) >= 0):
            raise ValueError("penalty grid must be positive and strictly decreasing")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def m(self) -> int:
        return self.values.size

    @property
    def h_min(self) -> float:
        return float(self.values[-1])

    def __len__(self):
        return self.m

    def __iter__(self):
        return iter(self.values.tolist())

    def index_of(self, h: float) -> int:
        hits = np.flatnonzero(np.isclose(self.values, h, rtol=1e-12, atol=0.0))
        if hits.size == 0:
            raise UnknownPenaltyError(f"h={h!r} is not on the penalty grid")
        return int(hits[0])


def _standardize(w: np.ndarray):
    center = w.mean(axis=0)
    scale = w.std(axis=0)
    penalised = scale > 0
    safe = np.where(penalised, scale, 1.0)
    xt = np.ascontiguousarray(((w - center) / safe).T)
    xt[~penalised] = 0.0
    return xt, center, safe, penalised


def h_max(dataset: Dataset) -> float:
    """Smallest penalty at which every slope is exactly zero."""
    dataset.require_both_arms()
    xt, _, _, _ = _standardize(dataset.w)
    a = dataset.a.astype(float)
    return float(np.max(np.abs(xt @ (a - a.mean()))) / dataset.n)


def default_grid(dataset: Dataset, m: int = 100, min_ratio: float = 0.01) -> PenaltyGrid:
    if m < 2:
        raise ValueError("grid needs at least two values")
    if not 0.0 < min_ratio < 1.0:
        raise ValueError("min_ratio must lie in (0, 1)")
    top = h_max(dataset)
    if top <= 0:
        raise LassoError("all covariates are constant or uncorrelated with treatment")
    return PenaltyGrid(top * np.logspace(0.0, np.log10(min_ratio), m))


@dataclass(frozen=True, eq=False)
class LassoPath:
    """Fitted path: one coefficient vector per grid value.

    ``intercepts``/``betas`` are on the original covariate scale;
    ``std_intercepts``/``std_betas`` on the internal standardised scale (the
    scale on which the penalty acts).
    """

    grid: PenaltyGrid
    intercepts: np.ndarray
    betas: np.ndarray
    std_intercepts: np.ndarray = field(repr=False)
    std_betas: np.ndarray = field(repr=False)
    center: np.ndarray = field(repr=False)
    scale: np.ndarray = field(repr=False)
    train_risk: np.ndarray = field(repr=False)
    penalised: np.ndarray = field(repr=False)
    trained_n: int = 0

    def fit_at(self, h: float) -> LogisticCoefficients:
        k = self.grid.index_of(h)
        return LogisticCoefficients(float(self.intercepts[k]), self.betas[k].copy())

    def linear_predictor(self, w: np.ndarray, k=None) -> np.ndarray:
        """``(n, m)`` logits for all grid values, or ``(n,)`` for index ``k``."""
        w = np.atleast_2d(np.asarray(w, dtype=float))
        if k is None:
            return w @ self.betas.T + self.intercepts
        return w @ self.betas[k] + self.intercepts[k]

    def predict(self, h: float, w: np.ndarray, bounds: PropensityBounds) -> np.ndarray:
        k = self.grid.index_of(h)
        return bounds.clip(expit(self.linear_predictor(w, k)))

    def predict_all(self, w: np.ndarray, bounds: PropensityBounds) -> np.ndarray:
        return bounds.clip(expit(self.linear_predictor(w)))

    def kkt_residuals(self, dataset: Dataset) -> np.ndarray:
        """Per-grid-point max violation of the lasso optimality conditions.

        Gradients are taken on the standardised scale, where the penalty is
        ``h * ||beta||_1``; the intercept gradient must vanish.
        """
        xt = (dataset.w - self.center) / self.scale
        xt = np.ascontiguousarray(xt.T)
        penalised = self.penalised
        xt[~penalised] = 0.0
        a = dataset.a.astype(float)
        out = np.empty(self.grid.m)
        for k, h in enumerate(self.grid.values):
            b = self.std_betas[k]
            g0, g = _cd.gradient(xt, a, self.std_intercepts[k], b)
            viol = np.where(b == 0.0, np.maximum(np.abs(g) - h, 0.0), np.abs(g + np.sign(b) * h))
            viol = viol[penalised]
            out[k] = max(abs(g0), viol.max() if viol.size else 0.0)
        return out

    def objective(self, dataset: Dataset, k: int) -> float:
        xt = np.ascontiguousarray(((dataset.w - self.center) / self.scale).T)
        xt[~self.penalised] = 0.0
        return float(
            _cd.objective(xt, dataset.a.astype(float), self.std_intercepts[k], self.std_betas[k], self.grid.values[k])
        )

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["h", "intercept"] + [f"beta_{j + 1}" for j in range(self.betas.shape[1])] + ["train_risk"])
            for k, h in enumerate(self.grid.values):
                out.writerow(
                    [f"{h:.17g}", f"{self.intercepts[k]:.17g}"]
                    + [f"{b:.17g}" for b in self.betas[k]]
                    + [f"{self.train_risk[k]:.17g}"]
                )


def fit_path(dataset: Dataset, grid: PenaltyGrid, tol: float = 1e-7, max_iter: int = 100_000) -> LassoPath:
    """Fit the L1-penalised logistic regression of A on W along ``grid``.

    Each grid point minimises
    ``mean(-a log g - (1 - a) log(1 - g)) + h * ||beta||_1`` over the
    standardised covariates with an unpenalised intercept, warm-started from
    the previous (larger) penalty. ``max_iter`` caps the total number of
    coordinate sweeps per grid point.
    """
    dataset.require_both_arms()
    xt, center, scale, penalised = _standardize(dataset.w)
    a = dataset.a.astype(float)
    b0s, sbetas, status, failed = _cd.fit_path(xt, a, penalised, grid.values, tol, max_iter)
    if status != _cd.OK:
        raise ConvergenceError(float(grid.values[failed]))
    abar = a.mean()
    # at or above h_max the null fit is exact; CD can leave rounding-level slopes there
    top = np.max(np.abs(xt @ (a - abar))) / dataset.n
    sbetas[grid.values >= top] = 0.0
    null = np.all(sbetas == 0.0, axis=1)
    b0s = np.where(null, logit(abar), b0s)
    betas = sbetas / scale
    betas[:, ~penalised] = 0.0
    intercepts = b0s - betas @ center
    eta = xt.T @ sbetas.T + b0s
    risk = np.mean(np.logaddexp(0.0, eta) - a[:, None] * eta, axis=0)
    return LassoPath(
        grid=grid,
        intercepts=intercepts,
        betas=betas,
        std_intercepts=b0s,
        std_betas=sbetas,
        center=center,
        scale=scale,
        train_risk=risk,
        trained_n=dataset.n,
        penalised=penalised,
    )


def predict_propensity(path: LassoPath, h: float, w, bounds: PropensityBounds) -> float:
    return float(path.predict(h, np.asarray(w, dtype=float)[None, :], bounds)[0])


def mean_l1_loss(g: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Column means of ``-a log g - (1 - a) log(1 - g)`` for ``g`` of shape (n,) or (n, m)."""
    a = np.asarray(a, dtype=float)
    if g.ndim == 2:
        a = a[:, None]
    return np.mean(-a * np.log(g) - (1.0 - a) * np.log1p(-g), axis=0)


def argmin_largest_h(risks) -> int:
    """Index of the minimal risk; on ties the earliest, i.e. the largest ``h`` of a decreasing grid."""
    risks = np.asarray(risks, dtype=float)
    return int(np.flatnonzero(risks <= risks.min())[0])


@dataclass(frozen=True)
class CvResult:
    h: float
    index: int
    risks: np.ndarray
    fold_paths: tuple


def cv_path(dataset: Dataset, grid: PenaltyGrid, folds: FoldScheme, bounds: PropensityBounds, **fit_kw) -> CvResult:
    """Fold-averaged validation L1-risk for every grid value, keeping the fold paths."""
    risks = np.zeros(grid.m)
    paths = []
    for k in range(1, folds.v + 1):
        train, valid = split(dataset, folds, k)
        if not train.has_both_arms():
            raise DegenerateTreatmentError(f"training fold {k} contains a single treatment arm")
        path = fit_path(train, grid, **fit_kw)
        paths.append(path)
        risks += mean_l1_loss(path.predict_all(valid.w, bounds), valid.a)
    risks /= folds.v
    idx = argmin_largest_h(risks)
    return CvResult(float(grid.values[idx]), idx, risks, tuple(paths))


def cv_select(dataset: Dataset, grid: PenaltyGrid, folds: FoldScheme, bounds: PropensityBounds) -> float:
    return cv_path(dataset, grid, folds, bounds).h


def neighbor_penalty(grid: PenaltyGrid, h: float) -> float:
    """Grid value nearest to ``h`` other than ``h`` itself; ties go to the larger."""
    if grid.m < 2:
        raise DerivativeUndefinedError("a single-point grid has no neighbour")
    k = grid.index_of(h)
    others = np.delete(grid.values, k)
    dist = np.abs(others - grid.values[k])
    best = np.flatnonzero(dist == dist.min())
    return float(others[best].max())


def path_derivative_values(path: LassoPath, h: float, w: np.ndarray, bounds: PropensityBounds) -> np.ndarray:
    h_plus = neighbor_penalty(path.grid, h)
    k, kp = path.grid.index_of(h), path.grid.index_of(h_plus)
    g = bounds.clip(expit(path.linear_predictor(w, k)))
    gp = bounds.clip(expit(path.linear_predictor(w, kp)))
    return (gp - g) / (path.grid.values[kp] - path.grid.values[k])


def path_derivative(path: LassoPath, h: float, w, bounds: PropensityBounds) -> float:
    return float(path_derivative_values(path, h, np.asarray(w, dtype=float)[None, :], bounds)[0])
