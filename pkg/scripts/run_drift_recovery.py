"""Canonical drift scenario: no_evolution, append_memory and agentic side by side.

    python3 scripts/run_drift_recovery.py [--seed 0] [--episodes 30]
"""

import argparse

from evolvekit.drift import canonical_drift_suite
from evolvekit.evolver import ScriptedEvolver
from evolvekit.harness import compute_metrics, drifted_scores, first_commit_episode, run_suite
from evolvekit.loop import KINDS


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--episodes", type=int, default=30)
    args = ap.parse_args()

    env = canonical_drift_suite(args.seed)
    print(f"drift at episode {env.drift_start()}: {env.drift_schedule[0][1].to_dict()}")
    print(f"{'kind':<15}{'TGC':>8}{'APT':>8}{'drifted TGC':>14}{'commits':>9}  per-episode")
    for kind in KINDS:
        run = run_suite(kind, env, args.episodes, args.seed,
                        evolver=ScriptedEvolver() if kind == "agentic" else None)
        drifted = drifted_scores(run, env)
        d_tgc = compute_metrics(drifted).TGC if drifted else float("nan")
        strip = "".join("#" if s == 1.0 else "." for s in run.result.scores)
        print(f"{kind:<15}{run.summary.TGC:>8.3f}{run.summary.APT:>8.3f}{d_tgc:>14.3f}"
              f"{run.result.committed():>9}  {strip}")
        if kind == "agentic":
            ep = first_commit_episode(run)
            if ep is not None:
                after = drifted_scores(run, env, ep)
                print(f"{'':<15}first commit after episode {ep}; "
                      f"TGC on the {len(after)} drifted episodes after it: {compute_metrics(after).TGC:.3f}")


if __name__ == "__main__":
    main()
