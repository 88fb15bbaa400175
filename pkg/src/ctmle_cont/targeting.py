"""Losses, efficient influence curve, clever covariates and logistic fluctuations.

An :class:`OutcomeModel` is a base regression ``(a, w) -> Qbar`` plus an
ordered tuple of logistic fluctuations ``logit Q <- logit Q + C(a, w) . eps``.
Models are immutable; :meth:`OutcomeModel.extend` returns a new model that
shares the prefix of the old one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, logit

from .data import Dataset, Observation

Q_MIN = 1e-6
EPS_CAP = 50.0
SCORE_TOL = 1e-10
_RISK_SLACK = 1e-13


class DomainError(ValueError):
    pass


class FluctuationDivergenceError(RuntimeError):
    """The fluctuation parameter ran past the cap: near-separation."""


def _check_open_unit(x, name):
    x = np.asarray(x, dtype=float)
    if np.any((x <= 0.0) | (x >= 1.0)):
        raise DomainError(f"{name} must lie in (0, 1)")
    return x


def ell_g(g, a):
    """Likelihood of ``a`` under Bernoulli(``g``)."""
    g = _check_open_unit(g, "propensity")
    a = np.asarray(a)
    out = a * g + (1 - a) * (1.0 - g)
    return float(out) if out.ndim == 0 else out


def loss_l1(g, a):
    g = _check_open_unit(g, "propensity")
    a = np.asarray(a)
    out = -a * np.log(g) - (1 - a) * np.log1p(-g)
    return float(out) if out.ndim == 0 else out


def loss_l2(qbar, y):
    qbar = _check_open_unit(qbar, "qbar")
    y = np.asarray(y, dtype=float)
    out = -y * np.log(qbar) - (1.0 - y) * np.log1p(-qbar)
    return float(out) if out.ndim == 0 else out


def l2_from_logit(eta, y):
    """Cross-entropy written on the logit scale; finite for any real ``eta``."""
    return y * np.logaddexp(0.0, -eta) + (1.0 - y) * np.logaddexp(0.0, eta)


def mean_l2_from_logit(eta, y):
    if eta.ndim == 2:
        y = y[:, None]
    return np.mean(l2_from_logit(eta, y), axis=0)


@dataclass(frozen=True)
class OutcomeModel:
    base: Callable
    fluctuations: tuple = ()
    q_min: float = Q_MIN

    def logit(self, a, w) -> np.ndarray:
        a = np.asarray(a)
        w = np.atleast_2d(np.asarray(w, dtype=float))
        if a.ndim == 0:
            a = np.full(w.shape[0], int(a))
        q = np.clip(np.asarray(self.base(a, w), dtype=float), self.q_min, 1.0 - self.q_min)
        eta = logit(q)
        for clever, eps in self.fluctuations:
            c = clever(a, w)
            eta = eta + (c @ eps if c.ndim == 2 else c * eps)
        return eta

    def __call__(self, a, w) -> np.ndarray:
        return expit(self.logit(a, w))

    def extend(self, clever: Callable, eps) -> "OutcomeModel":
        eps = np.asarray(eps, dtype=float)
        eps = float(eps) if eps.ndim == 0 else eps.copy()
        return OutcomeModel(self.base, self.fluctuations + ((clever, eps),), self.q_min)

    @classmethod
    def constant(cls, q1: float, q0: float) -> "OutcomeModel":
        return cls(lambda a, w: np.where(np.asarray(a) == 1, q1, q0) * np.ones(len(np.atleast_2d(w))))


@dataclass(frozen=True)
class CleverCovariate:
    """``C(G)(a, w) = (2a - 1) / l_G(a, w)``, optionally times ``(1, G'(w))``."""

    kind: str
    evaluator: Callable = field(repr=False)

    def __call__(self, a, w) -> np.ndarray:
        return self.evaluator(a, w)

    @property
    def dim(self) -> int:
        return 1 if self.kind == "scalar" else 2


def clever_values(a, g):
    a = np.asarray(a)
    return np.where(a == 1, 1.0 / g, -1.0 / (1.0 - g))


def scalar_clever(g: Callable) -> CleverCovariate:
    def evaluate(a, w):
        return clever_values(a, g(w))

    return CleverCovariate("scalar", evaluate)


def two_dim_clever(g: Callable, dg: Callable) -> CleverCovariate:
    def evaluate(a, w):
        c = clever_values(a, g(w))
        return np.column_stack([c, c * dg(w)])

    return CleverCovariate("two-dim", evaluate)


def eic_d2(q_model, g: Callable, o: Observation) -> float:
    w = np.asarray(o.w, dtype=float)[None, :]
    gw = float(np.asarray(g(w)).ravel()[0])
    return (2 * o.a - 1) / ell_g(gw, o.a) * (o.y - float(q_model(np.array([o.a]), w)[0]))


def eic(q_model, g: Callable, psi: float, o: Observation) -> float:
    w = np.asarray(o.w, dtype=float)[None, :]
    blip = q_model(np.array([1]), w) - q_model(np.array([0]), w)
    return eic_d2(q_model, g, o) + float(blip[0]) - psi


def eic_values(dataset: Dataset, q_model, g: Callable, psi: float) -> np.ndarray:
    """Vectorised ``D*(O_i)`` over the rows of ``dataset``."""
    gw = g(dataset.w)
    c = clever_values(dataset.a, gw)
    n = dataset.n
    q_obs = q_model(dataset.a, dataset.w)
    blip = q_model(np.ones(n, dtype=int), dataset.w) - q_model(np.zeros(n, dtype=int), dataset.w)
    return c * (dataset.y - q_obs) + blip - psi


def epsilon_score(offset, c, y, eps):
    """Gradient of ``eps -> -P_n L2`` (the fluctuation score); ``c`` is (n,) or (n, d)."""
    if c.ndim == 1:
        return float(np.mean(c * (y - expit(offset + c * eps))))
    return np.mean(c * (y - expit(offset + c @ eps))[:, None], axis=0)


def solve_epsilon_many(offset, c, y, cap=EPS_CAP, tol=SCORE_TOL, max_iter=100):
    """Independent 1-d fluctuations, one per column of ``c``.

    Damped Newton on the strictly convex risk ``P_n L2``: each accepted
    iterate decreases the risk. Columns where Newton does not settle fall
    back to bisection on ``[-cap, cap]``. Returns ``(eps, ok)``; ``ok`` is
    False where no root of the score lies within the cap.
    """
    c = np.asarray(c, dtype=float)
    m = c.shape[1]
    yy = y[:, None]
    off = offset[:, None]
    eps = np.zeros(m)
    risk = mean_l2_from_logit(off + c * eps, y)
    ok = np.zeros(m, dtype=bool)
    active = np.ones(m, dtype=bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ci = c[:, idx]
        q = expit(off + ci * eps[idx])
        score = np.mean(ci * (yy - q), axis=0)
        info = np.mean(ci * ci * q * (1.0 - q), axis=0)
        done = np.abs(score) <= tol
        ok[idx[done]] = True
        active[idx[done]] = False
        keep = ~done
        idx, score, info, ci = idx[keep], score[keep], info[keep], ci[:, keep]
        if idx.size == 0:
            break
        step = np.where(info > 0, score / np.where(info > 0, info, 1.0), np.sign(score) * cap)
        t = np.ones(idx.size)
        cand = eps[idx] + step
        new_risk = mean_l2_from_logit(off + ci * cand, y)
        # slack absorbs rounding once risk changes fall below float resolution
        slack = _RISK_SLACK * np.abs(risk[idx])
        for _ in range(40):
            bad = new_risk > risk[idx] + slack
            if not bad.any():
                break
            t[bad] *= 0.5
            cand[bad] = eps[idx[bad]] + t[bad] * step[bad]
            new_risk[bad] = mean_l2_from_logit(off + ci[:, bad] * cand[bad], y)
        eps[idx] = cand
        risk[idx] = new_risk
        blown = np.abs(cand) > cap
        active[idx[blown]] = False
    ok &= np.abs(eps) <= cap
    if not ok.all():
        rescue = np.flatnonzero(~ok)
        eps_b, ok_b = _bisect_scores(offset, c[:, rescue], y, cap, tol)
        eps[rescue[ok_b]] = eps_b[ok_b]
        ok[rescue[ok_b]] = True
    return eps, ok


def _bisect_scores(offset, c, y, cap, tol, max_iter=200):
    """Bisection on the (decreasing) score over ``[-cap, cap]``, column-wise."""
    off, yy = offset[:, None], y[:, None]

    def score(e):
        return np.mean(c * (yy - expit(off + c * e)), axis=0)

    lo, hi = np.full(c.shape[1], -cap), np.full(c.shape[1], cap)
    bracketed = (score(lo) >= 0) & (score(hi) <= 0)
    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        s = score(mid)
        up = s > 0
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
        if np.all(np.abs(s) <= tol) or np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(mid))):
            break
    return mid, bracketed & (np.abs(score(mid)) <= tol)


def solve_epsilon(offset, c, y, cap=EPS_CAP, tol=SCORE_TOL, max_iter=100):
    """Fluctuation parameter for a clever covariate of shape (n,) or (n, d)."""
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        eps, ok = solve_epsilon_many(offset, c[:, None], y, cap, tol, max_iter)
        if not ok[0]:
            raise FluctuationDivergenceError(f"no fluctuation minimiser with |eps| <= {cap}")
        return float(eps[0])
    d = c.shape[1]
    # directions that are identically zero carry no information; pin them at 0
    live = np.flatnonzero(np.any(c != 0.0, axis=0))
    eps = np.zeros(d)
    if live.size == 0:
        return eps
    cl = c[:, live]
    e = np.zeros(live.size)
    risk = float(np.mean(l2_from_logit(offset, y)))
    for _ in range(max_iter):
        q = expit(offset + cl @ e)
        score = np.mean(cl * (y - q)[:, None], axis=0)
        if np.max(np.abs(score)) <= tol:
            eps[live] = e
            return eps
        info = (cl * (q * (1.0 - q))[:, None]).T @ cl / len(y)
        step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        for _ in range(40):
            cand = e + t * step
            new_risk = float(np.mean(l2_from_logit(offset + cl @ cand, y)))
            if new_risk <= risk + _RISK_SLACK * abs(risk):
                break
            t *= 0.5
        e, risk = cand, new_risk
        if np.max(np.abs(e)) > cap:
            break
    raise FluctuationDivergenceError(f"2-d fluctuation failed to converge within |eps| <= {cap}")


@dataclass(frozen=True)
class TmleResult:
    psi: float
    epsilon: object
    q_star: OutcomeModel
    score_residual: float
    upsilon: float
    n: int
    second_score: float = 0.0

    @property
    def variance_estimate(self) -> float:
        return self.upsilon / self.n

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance_estimate))


def fluctuate_and_solve(dataset: Dataset, q0: OutcomeModel, clever: CleverCovariate, g: Callable) -> TmleResult:
    """Targeted update of ``q0`` along ``clever``, then the plug-in estimate."""
    n = dataset.n
    offset = q0.logit(dataset.a, dataset.w)
    c = clever(dataset.a, dataset.w)
    eps = solve_epsilon(offset, c, dataset.y)
    q_star = q0.extend(clever.evaluator, eps)
    ones, zeros = np.ones(n, dtype=int), np.zeros(n, dtype=int)
    blip = q_star(ones, dataset.w) - q_star(zeros, dataset.w)
    psi = float(np.mean(blip))
    d = eic_values(dataset, q_star, g, psi)
    second = 0.0
    if c.ndim == 2:
        resid = dataset.y - q_star(dataset.a, dataset.w)
        second = float(np.mean(c[:, 1] * resid))
    return TmleResult(
        psi=psi,
        epsilon=eps,
        q_star=q_star,
        score_residual=float(np.mean(d)),
        upsilon=float(np.mean(d * d)),
        n=n,
        second_score=second,
    )


def plain_tmle(dataset: Dataset, q0: OutcomeModel, path, h: float, bounds) -> TmleResult:
    def g(w):
        return path.predict(h, w, bounds)

    return fluctuate_and_solve(dataset, q0, scalar_clever(g), g)
