"""The simulation law indexed by covariate dimension and treatment offset.

``W`` is a centred Gaussian whose covariance is block diagonal: an identity
block for the first ten coordinates followed by copies of a 10x10 block made
of four small correlated groups. Treatment follows a logistic model with
offset ``delta``; the outcome is the expit of a Gaussian with mean ``f0`` and
variance 1/25.

The oracles evaluate the true regression by Gauss-Hermite quadrature and the
treatment effect by Monte-Carlo over ``W``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from numba import njit
from scipy.linalg import block_diag
from scipy.special import expit

from .data import Dataset, RngSpec

NOISE_SD = 0.2
GH_NODES = 64
SHARD_SIZE = 1 << 18
MIN_ORACLE_DRAWS = 10_000
# coordinates (0-based) entering the outcome mean
OUTCOME_COLUMNS = (0, 1, 4, 5, 7)

_GROUP_A = np.array([[1.0, 0.0, 0.25], [0.0, 1.0, 0.25], [0.25, 0.25, 1.0]])
_GROUP_B = np.array([[1.0, 0.5], [0.5, 1.0]])
_GROUP_D = np.array([[1.0, 0.5, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 1.0]])
CORRELATED_BLOCK = block_diag(_GROUP_A, _GROUP_B, _GROUP_B, _GROUP_D)


@dataclass(frozen=True)
class SyntheticConfig:
    p: int
    delta: float = 0.0

    def __post_init__(self):
        if self.p < 10:
            raise ValueError(f"the law needs p >= 10, got {self.p}")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")

    @property
    def latent_blocks(self) -> int:
        return math.ceil(self.p / 10)

    @property
    def beta(self) -> np.ndarray:
        b = np.full(self.p, 3.0 / (self.p - 2))
        b[:2] = 1.0
        return b

    @cached_property
    def block_factors(self) -> tuple:
        """Cholesky factors of the diagonal blocks of the latent covariance."""
        chol = np.linalg.cholesky(CORRELATED_BLOCK)
        return (np.eye(10),) + (chol,) * (self.latent_blocks - 1)

    def covariance(self) -> np.ndarray:
        """Covariance of the returned ``W`` (latent covariance truncated to ``p``)."""
        full = block_diag(np.eye(10), *([CORRELATED_BLOCK] * (self.latent_blocks - 1)))
        return full[: self.p, : self.p]


def _sample_w(config: SyntheticConfig, n: int, gen: np.random.Generator) -> np.ndarray:
    z = gen.standard_normal((n, 10 * config.latent_blocks))
    parts = [z[:, 10 * k : 10 * (k + 1)] @ f.T for k, f in enumerate(config.block_factors)]
    return np.hstack(parts)[:, : config.p]


def g0(config: SyntheticConfig, w) -> np.ndarray:
    w = np.atleast_2d(np.asarray(w, dtype=float))
    return expit(config.delta + w @ config.beta)


def f0(a, w) -> np.ndarray:
    w = np.atleast_2d(np.asarray(w, dtype=float))
    return 0.4 * (1.0 + w[:, list(OUTCOME_COLUMNS)].sum(axis=1) + np.asarray(a, dtype=float))


def sample(config: SyntheticConfig, n: int, rng: RngSpec) -> Dataset:
    gen = rng.generator()
    w = _sample_w(config, n, gen)
    a = (gen.random(n) < g0(config, w)).astype(np.int8)
    y_latent = f0(a, w) + NOISE_SD * gen.standard_normal(n)
    return Dataset(w, a, expit(y_latent))


@njit(cache=True, nogil=True)
def _smoothed_expit(mean, shifts, weights):
    out = np.empty(mean.shape[0])
    for i in range(mean.shape[0]):
        acc = 0.0
        for j in range(shifts.shape[0]):
            acc += weights[j] / (1.0 + math.exp(-(mean[i] + shifts[j])))
        out[i] = acc
    return out


def qbar0_from_mean(mean, nodes: int = GH_NODES, noise_sd: float = NOISE_SD) -> np.ndarray:
    """``E[expit(m + noise_sd * Z)]`` for each entry ``m``, by Gauss-Hermite quadrature."""
    x, wt = np.polynomial.hermite.hermgauss(nodes)
    mean = np.ascontiguousarray(np.atleast_1d(np.asarray(mean, dtype=float)))
    return _smoothed_expit(mean, x * (math.sqrt(2.0) * noise_sd), wt / math.sqrt(math.pi))


def oracle_qbar0(config: SyntheticConfig, a, w, nodes: int = GH_NODES):
    """True outcome regression; scalar for a single row, array otherwise."""
    w_arr = np.asarray(w, dtype=float)
    out = qbar0_from_mean(f0(np.atleast_1d(a), w_arr), nodes)
    return float(out[0]) if w_arr.ndim == 1 else out


@dataclass(frozen=True)
class OracleValues:
    psi0: float
    psi0_se: float
    config: SyntheticConfig = field(repr=False)

    def qbar0(self, a, w):
        return oracle_qbar0(self.config, a, w)

    def g0(self, w):
        return g0(self.config, w)


def _shard_sizes(draws: int) -> list[int]:
    full, rest = divmod(draws, SHARD_SIZE)
    return [SHARD_SIZE] * full + ([rest] if rest else [])


def _shard_moments(config, size, rng, contrast):
    w = _sample_w(config, size, rng.generator())
    v = contrast(w)
    return float(v.sum()), float(np.square(v).sum())


def _sharded_mean(config, draws, rng, contrast, workers):
    sizes = _shard_sizes(draws)
    jobs = [(config, s, rng.child(i), contrast) for i, s in enumerate(sizes)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda j: _shard_moments(*j), jobs))
    else:
        parts = [_shard_moments(*j) for j in jobs]
    # fixed shard order keeps the reduction independent of the worker count
    s1 = math.fsum(p[0] for p in parts)
    s2 = math.fsum(p[1] for p in parts)
    mean = s1 / draws
    var = max(s2 / draws - mean * mean, 0.0)
    return mean, math.sqrt(var / draws)


def oracle_psi0(
    config: SyntheticConfig, draws: int = 10_000_000, rng: RngSpec = RngSpec(0), workers: int = 1,
    noise_sd: float = NOISE_SD,
) -> tuple[float, float]:
    """Monte-Carlo estimate of the treatment effect and its standard error.

    ``noise_sd=0`` replaces the outcome noise by zero (a quadrature-free
    cross-check quantity).
    """
    if draws < MIN_ORACLE_DRAWS:
        raise ValueError(f"need at least {MIN_ORACLE_DRAWS} draws")

    def contrast(w):
        s = w[:, list(OUTCOME_COLUMNS)].sum(axis=1)
        m0 = 0.4 * (1.0 + s)
        if noise_sd == 0.0:
            return expit(m0 + 0.4) - expit(m0)
        return qbar0_from_mean(m0 + 0.4, noise_sd=noise_sd) - qbar0_from_mean(m0, noise_sd=noise_sd)

    return _sharded_mean(config, int(draws), rng, contrast, workers)


def oracle_values(config: SyntheticConfig, draws: int = 10_000_000, rng: RngSpec = RngSpec(0)) -> OracleValues:
    psi, se = oracle_psi0(config, draws, rng)
    return OracleValues(psi, se, config)


@dataclass(frozen=True)
class RemainderEstimate:
    """Second-order remainder and the two factors of its Cauchy-Schwarz bound.

    ``q_moment`` is ``E[(Q - Q0)(A, W)^2]`` and ``g_moment`` is
    ``E[((G - G0)(W) / l_G(A, W))^2]``; ``A`` is integrated out exactly.
    """

    rem: float
    rem_se: float
    q_moment: float
    g_moment: float
    q_moment_se: float
    g_moment_se: float

    @property
    def bound(self) -> float:
        return self.q_moment * self.g_moment


def oracle_rem20(
    config: SyntheticConfig, q: Callable, g: Callable, draws: int = 200_000, rng: RngSpec = RngSpec(0)
) -> RemainderEstimate:
    w = _sample_w(config, int(draws), rng.generator())
    n = w.shape[0]
    ones, zeros = np.ones(n, dtype=int), np.zeros(n, dtype=int)
    dq1 = q(ones, w) - oracle_qbar0(config, ones, w)
    dq0 = q(zeros, w) - oracle_qbar0(config, zeros, w)
    gt = g0(config, w)
    gw = np.asarray(g(w), dtype=float)
    dg = gw - gt
    rem_terms = dg * (gt / gw * dq1 + (1.0 - gt) / (1.0 - gw) * dq0)
    q_terms = gt * dq1**2 + (1.0 - gt) * dq0**2
    g_terms = dg**2 * (gt / gw**2 + (1.0 - gt) / (1.0 - gw) ** 2)

    def mean_se(v):
        return float(v.mean()), float(v.std() / math.sqrt(n))

    rem, rem_se = mean_se(rem_terms)
    qm, qse = mean_se(q_terms)
    gm, gse = mean_se(g_terms)
    return RemainderEstimate(rem, rem_se, qm, gm, qse, gse)


def _cache_key(config: SyntheticConfig, draws: int, seed: int) -> str:
    return f"p={config.p}|delta={config.delta!r}|draws={int(draws)}|seed={seed}"


def cached_psi0(config: SyntheticConfig, draws: int, seed: int, cache: Path | None) -> tuple[float, float]:
    """``oracle_psi0`` memoised in a JSON file keyed by ``(p, delta, draws, seed)``."""
    key = _cache_key(config, draws, seed)
    store = {}
    if cache is not None and Path(cache).exists():
        store = json.loads(Path(cache).read_text())
        if key in store:
            return tuple(store[key])
    value = oracle_psi0(config, draws, RngSpec(seed, stream_id=0))
    if cache is not None:
        store[key] = list(value)
        Path(cache).parent.mkdir(parents=True, exist_ok=True)
        Path(cache).write_text(json.dumps(store, indent=1, sort_keys=True))
    return value
