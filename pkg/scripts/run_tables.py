"""Full simulation study: every scenario at its default schedule.

Writes ``<out>/<scenario>/{summary.csv,figure_data.csv,run_meta.json}``.
B=200 for all scenarios takes days on one core; ``--b`` and
``--scenarios`` trim the run.
"""

import argparse
from dataclasses import dataclass, field
from pathlib import Path

from ctmle_cont.bench import ScenarioSpec, emit_report, run_scenario


@dataclass
class StudyConfig:
    out: Path = Path("results")
    scenarios: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6, "transfer"])
    b: int = 200
    seed: int = 1
    threads: int = 1
    oracle_cache: Path = Path("results/oracle.json")


def _scenario_id(text: str):
    return text if text == "transfer" else int(text)


def run_study(cfg: StudyConfig) -> None:
    for sid in cfg.scenarios:
        spec = ScenarioSpec(sid, b=cfg.b, seed=cfg.seed, threads=cfg.threads, oracle_cache=cfg.oracle_cache)
        report = run_scenario(spec)
        emit_report(report, cfg.out / f"scenario_{sid}", {"triplets": spec.triplets})
        print(f"scenario {sid}: {len(report.cells)} cells, {len(report.failures)} failures, {report.wall_time:.0f}s")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=StudyConfig.out)
    ap.add_argument("--scenarios", nargs="+", type=_scenario_id)
    ap.add_argument("--b", type=int, default=StudyConfig.b)
    ap.add_argument("--seed", type=int, default=StudyConfig.seed)
    ap.add_argument("--threads", type=int, default=StudyConfig.threads)
    args = ap.parse_args()
    cfg = StudyConfig(out=args.out, b=args.b, seed=args.seed, threads=args.threads,
                      oracle_cache=args.out / "oracle.json")
    if args.scenarios:
        cfg.scenarios = args.scenarios
    run_study(cfg)


if __name__ == "__main__":
    main()
