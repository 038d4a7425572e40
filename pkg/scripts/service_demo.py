"""Drive an in-process experiment service with simulated participants.

Participants arrive with a random Mood, receive an assignment, and about a
quarter of them rate it (1-5) from the scenario 3 reward model.  Posteriors
are refreshed every --refresh assignments and the final summary is printed.

    python3 scripts/service_demo.py --data-dir /tmp/demo --n 2000
"""

import argparse
import json
from pathlib import Path

import numpy as np

from mabtestbed.service import ExperimentService
from mabtestbed.simulation import builtin_scenario, discretize_reward


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data-dir", type=Path, required=True)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--refresh", type=int, default=100)
    ap.add_argument("--rate-prob", type=float, default=0.25)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    model = builtin_scenario(3)
    svc = ExperimentService(args.data_dir, seed=args.seed)
    exp_id = svc.create_experiment(
        {
            "factors": [{"name": "Rationale"}],
            "context": [{"name": "Mood", "values": [0, 1], "default": 0}],
            "mixture_p": 0.5,
        }
    )
    try:
        for i in range(args.n):
            mood = int(rng.integers(0, 2))
            rec = svc.get_assignment(exp_id, f"p{i % 400}", {"Mood": mood})
            if rng.random() < args.rate_prob:
                raw = rng.normal(model.mean(rec["arm"], {"Mood": mood}), model.noise_sd)
                svc.record_reward(exp_id, rec["assignment_id"], reward=discretize_reward(raw))
            if (i + 1) % args.refresh == 0:
                svc.refresh_posteriors(exp_id)
        print(json.dumps(svc.experiment_summary(exp_id), indent=2))
    finally:
        svc.close()


if __name__ == "__main__":
    main()
