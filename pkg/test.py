from __future__ import annotations

from pathlib import Path

from nashrate.logging_setup import setup_logging
from nashrate.pipeline import run
from nashrate.scenario import ScenarioError, apply_overrides, load_scenario


SCENARIOS_DIR = Path(__file__).resolve().parent / "scenarios"
SCENARIOS = ["two_agents_one_link.json", "chain_three_agents.json", "random_four_agents.json"]
MECHANISMS = ["wbb", "sbb"]


def main() -> int:
    setup_logging()
    failures = 0
    for name in SCENARIOS:
        path = SCENARIOS_DIR / name
        try:
            base = load_scenario(path)
        except ScenarioError as e:
            print(f"Не удалось загрузить сценарий {path}: {e}")
            return 2

        for mechanism in MECHANISMS:
            scenario = apply_overrides(base, {"mechanism": mechanism})
            print(f"\n=== {scenario.name} / {mechanism} ===")
            report = run(scenario)
            row = report.summary_row()
            print(f"status: {report.status}")
            print(f"x*: {None if report.certificate is None else [round(v, 6) for v in report.certificate.x_star]}")
            print(f"|x_NE - x*|_inf: {row['x_gap_inf']}")
            print(f"budget: {row['budget_residual']}")
            print(f"max deviation gain: {row['max_deviation_gain']}")
            print(f"best-response rounds: {row['br_rounds']}")
            if report.error:
                print(f"error: {report.error}")
            if report.status == "failed":
                failures += 1

    if failures:
        print(f"\nПровалено прогонов: {failures}")
        return 1
    print("\nВсе прогоны прошли")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
