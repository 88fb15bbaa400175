"""Monte-Carlo scenario runner and report writer."""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .ctmle import StoppingPolicy, ctmle_from_path, fit_propensity_path, pseudo_from_path
from .data import Dataset, RngSpec
from .estimators import EstimateWithCI, aiptw_with_ci, fit_working_model, gcomp, iptw, unadjusted, wald_ci
from .lasso import PropensityBounds
from .synthetic import SyntheticConfig, cached_psi0, sample
from .targeting import TmleResult, plain_tmle

log = logging.getLogger(__name__)

BASE_ESTIMATORS = ("unadj", "gcomp", "iptw", "aiptw", "tmle", "lctmle", "lpctmle")
PRIMED_ESTIMATORS = ("iptw_prime", "aiptw_prime", "tmle_prime", "lpctmle_prime")
TRANSFER_ESTIMATORS = ("iptw", "aiptw", "tmle", "lctmle", "lpctmle") + PRIMED_ESTIMATORS
ALL_ESTIMATORS = BASE_ESTIMATORS + PRIMED_ESTIMATORS
# estimators that fit the collaborative sequence (shared within a repetition)
_NEEDS_SEQUENCE = {"lctmle"} | set(PRIMED_ESTIMATORS)

SUMMARY_COLUMNS = (
    "scenario", "n", "p", "delta", "estimator", "bias_x10", "se_x10", "mse_x100",
    "ratio", "coverage", "ci_width_rel", "completed_reps",
)
FIGURE_COLUMNS = ("scenario", "n", "p", "delta", "estimator", "metric", "value")
ORACLE_DRAWS = 10_000_000
ORACLE_SE_MAX = 5e-4

N_SCHEDULE = tuple(range(200, 2001, 200))


class ConfigurationError(ValueError):
    pass


def dimension_for(scenario, n: int) -> int:
    """Covariate dimension tied to ``n`` in scenarios 1-4."""
    rules = {
        1: lambda n: n // 5,
        2: lambda n: math.floor(2.83 * math.sqrt(n)),
        3: lambda n: math.floor(7.6 * math.log(n)),
        4: lambda n: 40,
    }
    if scenario not in rules:
        raise ConfigurationError(f"scenario {scenario!r} does not tie p to n")
    return rules[scenario](n)


def default_triplets(scenario, n_values=None) -> tuple:
    """``(n, p, delta)`` schedule of a scenario (1-6 or ``"transfer"``)."""
    if scenario in (1, 2, 3, 4):
        return tuple((n, dimension_for(scenario, n), 0.0) for n in (n_values or N_SCHEDULE))
    if scenario == 5:
        return tuple((n, p, 0.0) for n in (n_values or (1000,)) for p in (50, 75, 100, 150, 200))
    if scenario == 6:
        return tuple((n, 50, round(0.5 + k / 10, 10)) for n in (n_values or (500,)) for k in range(16))
    if scenario == "transfer":
        return tuple((n, p, 0.0) for n in (n_values or (1000,)) for p in (100, 200))
    raise ConfigurationError(f"unknown scenario {scenario!r}")


@dataclass(frozen=True)
class ScenarioSpec:
    id: object
    triplets: tuple = ()
    b: int = 200
    estimators: tuple = ()
    seed: int = 0
    policy: StoppingPolicy = StoppingPolicy()
    bounds: PropensityBounds = PropensityBounds()
    v: int = 10
    threads: int = 1
    oracle_draws: int = ORACLE_DRAWS
    oracle_cache: Path | None = None
    # per-arm intercepts in the probit working model; see README
    working_intercept: bool = True

    def __post_init__(self):
        if self.id not in (1, 2, 3, 4, 5, 6, "transfer"):
            raise ConfigurationError(f"unknown scenario {self.id!r}")
        if not self.triplets:
            object.__setattr__(self, "triplets", default_triplets(self.id))
        object.__setattr__(self, "triplets", tuple((int(n), int(p), float(d)) for n, p, d in self.triplets))
        if not self.estimators:
            default = TRANSFER_ESTIMATORS if self.id == "transfer" else BASE_ESTIMATORS
            object.__setattr__(self, "estimators", default)
        unknown = set(self.estimators) - set(ALL_ESTIMATORS)
        if unknown:
            raise ConfigurationError(f"unknown estimators {sorted(unknown)}")
        if self.id != "transfer" and set(self.estimators) & set(PRIMED_ESTIMATORS):
            raise ConfigurationError("primed estimators belong to the transfer experiment")
        if self.b < 1 or self.threads < 1:
            raise ConfigurationError("b and threads must be positive")
        for n, p, d in self.triplets:
            if p < 10 or n < 2 * self.v or d < 0:
                raise ConfigurationError(f"invalid triplet (n={n}, p={p}, delta={d})")

    def triplet_seed(self, triplet) -> int:
        n, p, d = triplet
        ss = np.random.SeedSequence([self.seed, n, p, int(round(d * 10_000))])
        return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class Failure:
    triplet: tuple
    rep: int
    estimator: str
    message: str


@dataclass(frozen=True)
class ReportCell:
    """Aggregates for one (triplet, estimator), on the natural scale."""

    scenario: str
    n: int
    p: int
    delta: float
    estimator: str
    bias: float
    se: float
    mse: float
    ratio: float
    coverage: float
    ci_width_rel: float
    completed_reps: int


@dataclass(frozen=True)
class ScenarioReport:
    scenario: str
    cells: tuple = ()
    failures: tuple = ()
    b: int = 0
    seed: int = 0
    psi0: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def cell(self, estimator: str, triplet=None) -> ReportCell:
        for c in self.cells:
            if c.estimator == estimator and (triplet is None or (c.n, c.p, c.delta) == tuple(triplet)):
                return c
        raise KeyError((estimator, triplet))

    @property
    def complete(self) -> bool:
        return not self.failures


def _from_tmle(res: TmleResult, method: str) -> EstimateWithCI:
    return wald_ci(res.psi, res.upsilon, res.n, method)


def estimate_repetition(
    dataset: Dataset,
    estimators,
    rng: RngSpec,
    policy: StoppingPolicy,
    bounds: PropensityBounds,
    v: int = 10,
    intercept: bool = True,
):
    """All requested estimates on one dataset.

    Returns ``(estimates, failures)`` where ``estimates`` maps an estimator
    name to an :class:`EstimateWithCI` (``se`` is NaN for estimators without
    an interval) and ``failures`` maps names to error messages. The working
    model and the propensity path are fitted once and shared. ``intercept``
    adds per-arm intercepts to the probit working model.
    """
    out, failed = {}, {}
    wanted = list(estimators)
    if "unadj" in wanted:
        try:
            out["unadj"] = _point(unadjusted(dataset), "unadj")
        except Exception as exc:  # noqa: BLE001 - recorded per estimator
            failed["unadj"] = repr(exc)
    rest = [e for e in wanted if e != "unadj"]
    if not rest:
        return out, failed
    try:
        q0 = fit_working_model(dataset, intercept=intercept).as_outcome_model()
        pf = fit_propensity_path(dataset, rng, v, bounds)
    except Exception as exc:  # noqa: BLE001
        return out, {**failed, **{e: repr(exc) for e in rest}}
    g_cv = pf.g(pf.h_cv, bounds)
    fit = None
    if _NEEDS_SEQUENCE & set(rest):
        try:
            fit = ctmle_from_path(dataset, q0, pf, policy, bounds)
        except Exception as exc:  # noqa: BLE001
            failed.update({e: repr(exc) for e in rest if e in _NEEDS_SEQUENCE})
    for name in rest:
        if name in failed:
            continue
        try:
            if name == "gcomp":
                out[name] = _point(gcomp(dataset, q0), name)
            elif name == "iptw":
                out[name] = _point(iptw(dataset, g_cv), name)
            elif name == "aiptw":
                out[name] = _relabel(aiptw_with_ci(dataset, q0, g_cv), name)
            elif name == "tmle":
                out[name] = _from_tmle(plain_tmle(dataset, q0, pf.path, pf.h_cv, bounds), name)
            elif name == "lctmle":
                out[name] = fit.estimate
            elif name == "lpctmle":
                out[name] = _from_tmle(pseudo_from_path(dataset, q0, pf.path, pf.h_cv, bounds), name)
            elif name == "iptw_prime":
                out[name] = _point(iptw(dataset, pf.g(fit.h_selected, bounds)), name)
            elif name == "aiptw_prime":
                out[name] = _relabel(aiptw_with_ci(dataset, q0, pf.g(fit.h_selected, bounds)), name)
            elif name == "tmle_prime":
                out[name] = _from_tmle(plain_tmle(dataset, q0, pf.path, fit.h_selected, bounds), name)
            elif name == "lpctmle_prime":
                out[name] = _from_tmle(pseudo_from_path(dataset, q0, pf.path, fit.h_selected, bounds), name)
        except Exception as exc:  # noqa: BLE001
            failed[name] = repr(exc)
    return out, failed


def _point(psi: float, method: str) -> EstimateWithCI:
    return EstimateWithCI(float(psi), math.nan, math.nan, math.nan, method)


def _relabel(est: EstimateWithCI, method: str) -> EstimateWithCI:
    return EstimateWithCI(est.psi, est.se, est.ci_low, est.ci_high, method)


def summarize(estimates, psi0: float, ses=None, widths=None, covers=None, reference_width=math.nan):
    """``(bias, se, mse, ratio, coverage, ci_width_rel)`` from per-repetition values.

    ``se`` uses the divisor ``B``; interval metrics are NaN when no
    intervals are given.
    """
    x = np.asarray(estimates, dtype=float)
    if x.size == 0:
        return (math.nan,) * 6
    bias = float(np.mean(x - psi0))
    se = float(np.sqrt(np.mean((x - x.mean()) ** 2)))
    mse = bias * bias + se * se
    ratio = coverage = width_rel = math.nan
    if ses is not None and len(ses):
        ratio = float(np.mean(ses)) / se if se > 0 else math.nan
        coverage = float(np.mean(covers))
        width_rel = float(np.mean(widths)) / reference_width
    return bias, se, mse, ratio, coverage, width_rel


def _one_rep(dataset_cfg, n, seed, rep, spec):
    rng = RngSpec(seed, rep)
    dataset = sample(dataset_cfg, n, rng.child(0))
    return estimate_repetition(
        dataset, spec.estimators, rng.child(1), spec.policy, spec.bounds, spec.v, spec.working_intercept
    )


def _oracle(spec: ScenarioSpec, cfg: SyntheticConfig) -> float:
    psi0, se = cached_psi0(cfg, spec.oracle_draws, spec.seed, spec.oracle_cache)
    if se >= ORACLE_SE_MAX:
        raise ConfigurationError(f"oracle standard error {se:.2g} too large; raise oracle_draws")
    return psi0


def run_scenario(spec: ScenarioSpec) -> ScenarioReport:
    start = time.perf_counter()
    cells, failures, psi0s = [], [], {}
    label = str(spec.id)
    for triplet in spec.triplets:
        n, p, delta = triplet
        cfg = SyntheticConfig(p, delta)
        psi0 = _oracle(spec, cfg)
        psi0s[f"{n},{p},{delta!r}"] = psi0
        seed = spec.triplet_seed(triplet)
        reps = range(spec.b)
        if spec.threads > 1:
            with ThreadPoolExecutor(spec.threads) as pool:
                results = list(pool.map(lambda r: _one_rep(cfg, n, seed, r, spec), reps))
        else:
            results = [_one_rep(cfg, n, seed, r, spec) for r in reps]
        for rep, (_, failed) in enumerate(results):
            for name, msg in sorted(failed.items()):
                log.warning("scenario %s %s rep %d: %s failed: %s", label, triplet, rep, name, msg)
                failures.append(Failure(triplet, rep, name, msg))
        per = {name: [r[0][name] for r in results if name in r[0]] for name in spec.estimators}
        ref = per.get("tmle", [])
        ref_width = float(np.mean([e.width for e in ref])) if ref else math.nan
        for name in spec.estimators:
            ests = per[name]
            with_ci = [e for e in ests if not math.isnan(e.se)]
            if with_ci:
                stats = summarize(
                    [e.psi for e in ests], psi0, [e.se for e in with_ci], [e.width for e in with_ci],
                    [e.covers(psi0) for e in with_ci], ref_width,
                )
            else:
                stats = summarize([e.psi for e in ests], psi0)
            cells.append(ReportCell(label, n, p, delta, name, *stats, completed_reps=len(ests)))
    return ScenarioReport(label, tuple(cells), tuple(failures), spec.b, spec.seed, psi0s, time.perf_counter() - start)


def run_transfer(spec: ScenarioSpec) -> ScenarioReport:
    if spec.id != "transfer":
        raise ConfigurationError("run_transfer needs a transfer spec")
    return run_scenario(spec)


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.17g}"


def emit_report(report: ScenarioReport, out_dir, extra_meta: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "summary.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SUMMARY_COLUMNS)
        for c in report.cells:
            wr.writerow([
                c.scenario, c.n, c.p, _fmt(c.delta), c.estimator, _fmt(10 * c.bias), _fmt(10 * c.se),
                _fmt(100 * c.mse), _fmt(c.ratio), _fmt(c.coverage), _fmt(c.ci_width_rel), c.completed_reps,
            ])
    with (out / "figure_data.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(FIGURE_COLUMNS)
        for c in report.cells:
            for metric, value in (
                ("bias_x10", 10 * c.bias), ("mse_x100", 100 * c.mse),
                ("coverage", c.coverage), ("ci_width_rel", c.ci_width_rel),
            ):
                wr.writerow([c.scenario, c.n, c.p, _fmt(c.delta), c.estimator, metric, _fmt(value)])
    meta = {
        "scenario": report.scenario,
        "seed": report.seed,
        "b": report.b,
        "wall_time_s": report.wall_time,
        "psi0": report.psi0,
        "failures": [asdict(f) for f in report.failures],
        "versions": {
            "ctmle_cont": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
    }
    meta.update(extra_meta or {})
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, default=str))


def read_summary(path) -> tuple:
    """Cells from a ``summary.csv``, rescaled to the natural scale."""
    cells = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            cells.append(ReportCell(
                scenario=row["scenario"],
                n=int(row["n"]),
                p=int(row["p"]),
                delta=float(row["delta"]),
                estimator=row["estimator"],
                bias=float(row["bias_x10"]) / 10,
                se=float(row["se_x10"]) / 10,
                mse=float(row["mse_x100"]) / 100,
                ratio=float(row["ratio"]),
                coverage=float(row["coverage"]),
                ci_width_rel=float(row["ci_width_rel"]),
                completed_reps=int(row["completed_reps"]),
            ))
    return tuple(cells)
