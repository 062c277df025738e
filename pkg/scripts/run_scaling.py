"""Repair budget x evolution steps sweep on the three-drift suite.

    python3 scripts/run_scaling.py [--config configs/scaling.json] [--out results]

Writes <out>/<name>/frontier.csv and summary.json and prints the TGC grid.
"""

import argparse
import json
from pathlib import Path

from evolvekit.harness import ScalingConfig, run_scaling_experiment, scaling_summary, write_frontier_csv, write_summary


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=None)
    ap.add_argument("--out", type=Path, default=Path("results"))
    args = ap.parse_args()

    doc = json.loads(args.config.read_text()) if args.config else {}
    name = doc.pop("name", "scaling")
    episodes = doc.pop("summary_episodes", 30)
    config = ScalingConfig.from_dict(doc)
    points = run_scaling_experiment(config)

    target = args.out / name
    write_frontier_csv(points, target / "frontier.csv")
    write_summary(scaling_summary(config, points, episodes), target / "summary.json")

    ks = sorted({p.steps_used for p in points})
    print("TGC (rows: " + config.budget_label + ", columns: evolution steps " + ", ".join(map(str, ks)) + ")")
    for b in config.budgets:
        row = {p.steps_used: p.TGC for p in points if p.budget_value == b}
        print(f"  {b:>3}: " + "  ".join(f"{row[k]:.3f}" for k in ks))
    print(f"wrote {target / 'frontier.csv'} and {target / 'summary.json'}")


if __name__ == "__main__":
    main()
