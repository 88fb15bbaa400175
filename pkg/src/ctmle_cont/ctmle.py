"""Collaborative TMLE over a LASSO path of propensity estimators.

Starting from the cross-validated penalty ``h_cv``, the sequence walks down
the penalty grid: at step ``k`` every smaller grid penalty is tried as the
propensity behind a fluctuation of the running outcome model, and the one
with the smallest empirical outcome risk (largest on ties) becomes ``h_k``.
Cross-validation of the outcome risk over the resulting step map then picks
the index ``kappa``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import lasso
from .data import Dataset, DegenerateTreatmentError, FoldScheme, RngSpec, make_folds, split
from .estimators import EstimateWithCI, wald_ci
from .lasso import LassoPath, PenaltyGrid, PropensityBounds
from .targeting import (
    OutcomeModel,
    TmleResult,
    clever_values,
    fluctuate_and_solve,
    mean_l2_from_logit,
    scalar_clever,
    solve_epsilon_many,
    two_dim_clever,
)

log = logging.getLogger(__name__)

MAX_FOLD_REDRAWS = 20


class CtmleError(RuntimeError):
    pass


class NoCandidateError(CtmleError):
    pass


class EstimationFailure(CtmleError):
    pass


@dataclass(frozen=True)
class StoppingPolicy:
    """When to stop walking down the grid.

    ``k_max=None`` means the grid size; ``h_floor=None`` means the smallest
    grid value. The plateau rule stops once ``plateau_m`` consecutive
    estimates lie within ``eta`` where ``eta**2 = Upsilon / (10 n)``.
    """

    k_max: int | None = None
    h_floor: float | None = None
    plateau_m: int = 3
    plateau_eta_rule: bool = False

    def __post_init__(self):
        if self.k_max is not None and self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if self.plateau_m < 1:
            raise ValueError("plateau_m must be at least 1")


def _clever_fn(path: LassoPath, k: int, bounds: PropensityBounds):
    def clever(a, w):
        return clever_values(a, bounds.clip(expit(path.linear_predictor(w, k))))

    return clever


@dataclass(frozen=True)
class CtmleStep:
    h: float
    index: int
    epsilon: float
    q: OutcomeModel = field(repr=False)
    risk: float
    psi: float
    score_residual: float
    upsilon: float


@dataclass(frozen=True)
class CtmleSequence:
    steps: tuple
    origin_h: float
    grid: PenaltyGrid = field(repr=False)
    start_risk: float = float("nan")
    stored: dict = field(default_factory=dict, repr=False)
    skipped: tuple = ()
    n: int = 0

    @property
    def k_count(self) -> int:
        return len(self.steps)

    @property
    def h_values(self) -> np.ndarray:
        return np.array([s.h for s in self.steps])

    def write_trace(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["k", "h_k", "epsilon_k", "train_l2_risk", "score_residual"])
            for k, s in enumerate(self.steps, start=1):
                out.writerow([k, f"{s.h:.17g}", f"{s.epsilon:.17g}", f"{s.risk:.17g}", f"{s.score_residual:.17g}"])


def nearest_member(h_values, h: float) -> int:
    """Index of the member closest to ``h``; the larger one on exact ties."""
    h_values = np.asarray(h_values, dtype=float)
    if h_values.size == 0:
        raise CtmleError("empty sequence")
    dist = np.abs(h_values - h)
    # decimal midpoints are rarely exact in binary; treat near-equal distances as ties
    tol = 1e-12 * max(abs(h), float(np.max(np.abs(h_values))))
    tied = np.flatnonzero(dist <= dist.min() + tol)
    return int(tied[np.argmax(h_values[tied])])


@dataclass(frozen=True)
class StepMap:
    sequence: CtmleSequence

    def lookup(self, h: float) -> tuple[float, OutcomeModel]:
        k = nearest_member(self.sequence.h_values, h)
        step = self.sequence.steps[k]
        return step.h, step.q


def step_lookup(step_map: StepMap, h: float) -> tuple[float, OutcomeModel]:
    return step_map.lookup(h)


def _window(grid: PenaltyGrid, upper: float, floor: float) -> np.ndarray:
    v = grid.values
    return np.flatnonzero((v < upper) & (v >= floor * (1 - 1e-12)))


def _build(
    w, a, y, q0: OutcomeModel, path: LassoPath, start_h: float, policy: StoppingPolicy, bounds: PropensityBounds,
    store: bool = True,
) -> CtmleSequence:
    grid = path.grid
    n = len(y)
    floor = grid.h_min if policy.h_floor is None else policy.h_floor
    k_max = grid.m if policy.k_max is None else policy.k_max
    g_all = path.predict_all(w, bounds)
    c_obs = clever_values(a[:, None], g_all)
    ones, zeros = np.ones(n, dtype=int), np.zeros(n, dtype=int)
    eta_obs = q0.logit(a, w)
    eta1 = q0.logit(ones, w)
    eta0 = q0.logit(zeros, w)
    q_run = q0
    risk = float(mean_l2_from_logit(eta_obs, y))
    start_risk = risk
    upper = start_h
    steps, skipped, stored = [], [], {}
    if _window(grid, upper, floor).size == 0:
        raise NoCandidateError(f"no grid penalty in [{floor:.4g}, {start_h:.4g})")
    while len(steps) < k_max:
        cand = _window(grid, upper, floor)
        if cand.size == 0:
            break
        eps, ok = solve_epsilon_many(eta_obs, c_obs[:, cand], y)
        if not ok.all():
            for j in cand[~ok]:
                skipped.append((len(steps) + 1, float(grid.values[j])))
                log.debug("fluctuation diverged at step %d, h=%.4g; skipped", len(steps) + 1, grid.values[j])
        if not ok.any():
            break
        risks = np.full(cand.size, np.inf)
        risks[ok] = mean_l2_from_logit(eta_obs[:, None] + c_obs[:, cand[ok]] * eps[ok], y)
        best = risks.min()
        if not best < risk:
            # no candidate strictly improves the running model (all eps = 0)
            break
        tied = np.flatnonzero(risks <= best + 1e-14 * abs(best))
        pick = tied[0]  # candidates are sorted by decreasing h
        j = int(cand[pick])
        e = float(eps[pick])
        if e == 0.0:
            log.info("zero fluctuation selected at h=%.4g", grid.values[j])
        g_j = g_all[:, j]
        eta_obs = eta_obs + e * c_obs[:, j]
        eta1 = eta1 + e / g_j
        eta0 = eta0 - e / (1.0 - g_j)
        if store:
            for i in np.flatnonzero(ok[: pick + 1]):
                stored[float(grid.values[cand[i]])] = q_run.extend(_clever_fn(path, int(cand[i]), bounds), float(eps[i]))
        q_run = q_run.extend(_clever_fn(path, j, bounds), e)
        q_obs = expit(eta_obs)
        blip = expit(eta1) - expit(eta0)
        psi = float(np.mean(blip))
        d = c_obs[:, j] * (y - q_obs) + blip - psi
        risk = float(risks[pick])
        steps.append(
            CtmleStep(
                h=float(grid.values[j]),
                index=j,
                epsilon=e,
                q=q_run,
                risk=risk,
                psi=psi,
                score_residual=float(np.mean(d)),
                upsilon=float(np.mean(d * d)),
            )
        )
        upper = float(grid.values[j])
        if upper <= floor * (1 + 1e-12):
            break
        if policy.plateau_eta_rule and len(steps) >= policy.plateau_m:
            last = [s.psi for s in steps[-policy.plateau_m:]]
            eta = np.sqrt(steps[-1].upsilon / (10.0 * n))
            if max(last) - min(last) < eta:
                break
    return CtmleSequence(
        steps=tuple(steps),
        origin_h=float(start_h),
        grid=grid,
        start_risk=start_risk,
        stored=stored,
        skipped=tuple(skipped),
        n=n,
    )


def build_sequence(
    dataset: Dataset,
    q0: OutcomeModel,
    path: LassoPath,
    start_h: float,
    policy: StoppingPolicy = StoppingPolicy(),
    bounds: PropensityBounds = PropensityBounds(),
) -> CtmleSequence:
    return _build(dataset.w, dataset.a, dataset.y, q0, path, start_h, policy, bounds)


def _member_logits(seq: CtmleSequence, path: LassoPath, q0: OutcomeModel, w, a, bounds) -> np.ndarray:
    """Logit of every step model at rows ``(a, w)``; shape (n, K)."""
    eta = q0.logit(a, w)
    out = np.empty((len(a), seq.k_count))
    for k, s in enumerate(seq.steps):
        g = bounds.clip(expit(path.linear_predictor(w, s.index)))
        eta = eta + s.epsilon * clever_values(a, g)
        out[:, k] = eta
    return out


@dataclass(frozen=True)
class KappaSelection:
    kappa: int
    h_star: float
    cv_risks: np.ndarray
    candidates: np.ndarray


def kappa_from_h_star(h_values, h_star: float) -> int:
    """Largest 1-based ``k`` with ``h_k >= h_star``; 1 if there is none."""
    hits = np.flatnonzero(np.asarray(h_values) >= h_star)
    return int(hits.max()) + 1 if hits.size else 1


def cross_validate_kappa(
    dataset: Dataset,
    q0: OutcomeModel,
    full_sequence: CtmleSequence,
    folds: FoldScheme,
    policy: StoppingPolicy = StoppingPolicy(),
    bounds: PropensityBounds = PropensityBounds(),
    fold_paths=None,
) -> KappaSelection:
    grid = full_sequence.grid
    floor = grid.h_min if policy.h_floor is None else policy.h_floor
    cand = _window(grid, full_sequence.origin_h, floor)
    h_cand = grid.values[cand]
    total = np.zeros(cand.size)
    for k in range(1, folds.v + 1):
        train, valid = split(dataset, folds, k)
        if fold_paths is not None:
            fpath = fold_paths[k - 1]
        else:
            if not train.has_both_arms():
                raise DegenerateTreatmentError(f"training fold {k} contains a single treatment arm")
            fpath = lasso.fit_path(train, grid)
        seq = _build(train.w, train.a, train.y, q0, fpath, full_sequence.origin_h, policy, bounds, store=False)
        if seq.k_count == 0:
            raise EstimationFailure(f"empty collaborative sequence on training fold {k}")
        logits = _member_logits(seq, fpath, q0, valid.w, valid.a, bounds)
        member_risk = mean_l2_from_logit(logits, valid.y)
        members = np.array([nearest_member(seq.h_values, h) for h in h_cand])
        total += member_risk[members]
    total /= folds.v
    i_star = lasso.argmin_largest_h(total)
    h_star = float(h_cand[i_star])
    return KappaSelection(kappa_from_h_star(full_sequence.h_values, h_star), h_star, total, h_cand)


def select_kappa(
    dataset: Dataset,
    q0: OutcomeModel,
    full_sequence: CtmleSequence,
    folds: FoldScheme,
    policy: StoppingPolicy = StoppingPolicy(),
    bounds: PropensityBounds = PropensityBounds(),
    fold_paths=None,
) -> int:
    return cross_validate_kappa(dataset, q0, full_sequence, folds, policy, bounds, fold_paths).kappa


@dataclass(frozen=True)
class PathFit:
    """Full-data path, folds and the likelihood-CV penalty, shared by all estimators."""

    path: LassoPath
    folds: FoldScheme
    cv: lasso.CvResult

    @property
    def h_cv(self) -> float:
        return self.cv.h

    def g(self, h: float, bounds: PropensityBounds):
        def g(w):
            return self.path.predict(h, w, bounds)

        return g


def fit_propensity_path(
    dataset: Dataset,
    rng: RngSpec,
    v: int = 10,
    bounds: PropensityBounds = PropensityBounds(),
    m: int = 100,
    min_ratio: float = 0.01,
) -> PathFit:
    """Grid, full-data path and ``h_cv``; folds are redrawn while a training fold is single-armed."""
    dataset.require_both_arms()
    grid = lasso.default_grid(dataset, m, min_ratio)
    path = lasso.fit_path(dataset, grid)
    for attempt in range(MAX_FOLD_REDRAWS):
        folds = make_folds(dataset, v, rng if attempt == 0 else rng.child(attempt))
        try:
            cv = lasso.cv_path(dataset, grid, folds, bounds)
        except DegenerateTreatmentError:
            continue
        return PathFit(path, folds, cv)
    raise EstimationFailure("could not draw folds with both arms in every training set")


@dataclass(frozen=True)
class CtmleFit:
    sequence: CtmleSequence
    kappa: int
    h_selected: float
    psi: float
    variance_estimate: float
    ci_low: float
    ci_high: float
    selection: KappaSelection = field(repr=False)
    path_fit: PathFit = field(repr=False)

    @property
    def step(self) -> CtmleStep:
        return self.sequence.steps[self.kappa - 1]

    @property
    def estimate(self) -> EstimateWithCI:
        return wald_ci(self.psi, self.step.upsilon, self.sequence.n, method="lctmle")


def ctmle_from_path(
    dataset: Dataset,
    q0: OutcomeModel,
    path_fit: PathFit,
    policy: StoppingPolicy = StoppingPolicy(),
    bounds: PropensityBounds = PropensityBounds(),
) -> CtmleFit:
    seq = build_sequence(dataset, q0, path_fit.path, path_fit.h_cv, policy, bounds)
    if seq.k_count == 0:
        raise EstimationFailure("every candidate fluctuation diverged")
    sel = cross_validate_kappa(dataset, q0, seq, path_fit.folds, policy, bounds, path_fit.cv.fold_paths)
    step = seq.steps[sel.kappa - 1]
    ci = wald_ci(step.psi, step.upsilon, dataset.n, method="lctmle")
    return CtmleFit(
        sequence=seq,
        kappa=sel.kappa,
        h_selected=step.h,
        psi=step.psi,
        variance_estimate=step.upsilon / dataset.n,
        ci_low=ci.ci_low,
        ci_high=ci.ci_high,
        selection=sel,
        path_fit=path_fit,
    )


def lasso_ctmle(
    dataset: Dataset,
    q0: OutcomeModel,
    policy: StoppingPolicy = StoppingPolicy(),
    bounds: PropensityBounds = PropensityBounds(),
    rng: RngSpec = RngSpec(0),
    v: int = 10,
) -> CtmleFit:
    return ctmle_from_path(dataset, q0, fit_propensity_path(dataset, rng, v, bounds), policy, bounds)


def pseudo_from_path(
    dataset: Dataset, q0: OutcomeModel, path: LassoPath, h: float, bounds: PropensityBounds = PropensityBounds()
) -> TmleResult:
    """Single 2-d fluctuation along ``C(G_h) * (1, dG_h/dh)`` with a one-sided difference quotient."""
    k = path.grid.index_of(h)

    def g(w):
        return bounds.clip(expit(path.linear_predictor(w, k)))

    def dg(w):
        return lasso.path_derivative_values(path, h, w, bounds)

    return fluctuate_and_solve(dataset, q0, two_dim_clever(g, dg), g)


def lasso_pseudo_ctmle(
    dataset: Dataset,
    q0: OutcomeModel,
    bounds: PropensityBounds = PropensityBounds(),
    rng: RngSpec = RngSpec(0),
    v: int = 10,
) -> TmleResult:
    pf = fit_propensity_path(dataset, rng, v, bounds)
    return pseudo_from_path(dataset, q0, pf.path, pf.h_cv, bounds)
