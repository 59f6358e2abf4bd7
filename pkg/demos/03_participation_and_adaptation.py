"""Two ablations: how many clients join each round, and how much the base was tuned.

More clients per round means more classes seen per aggregate, so the global
model should improve no slower. Adapting the frozen base first removes the
shared bias the prompts exist to cancel, so their gain should shrink.

    python demos/03_participation_and_adaptation.py [--rounds 40] [--seeds 0,1]
"""
import argparse
import dataclasses

import numpy as np

from fedprompt.experiments import ExperimentConfig, build_benchmark, run_method, sweep_participation

parser = argparse.ArgumentParser()
parser.add_argument("--rounds", type=int, default=40)
parser.add_argument("--seeds", default="0,1")
args = parser.parse_args()
seeds = [int(s) for s in args.seeds.split(",")]

# %% participation sweep: K = 1, 2, 3 clients per round
cfg = ExperimentConfig(eval_every=10)
report = sweep_participation(cfg, [1, 2, 3], seeds, rounds=args.rounds)
print("round  " + "  ".join(f"K={k}  " for k in (1, 2, 3)))
for r in sorted(report["curves"]["1"], key=int):
    print(f"{r:>5}  " + "  ".join(f"{100 * report['curves'][str(k)][r]:6.2f}" for k in (1, 2, 3)))

# %% prompt gain against base adaptation steps
cfg = cfg.replace(eval_every=args.rounds,
                  federation=dataclasses.replace(cfg.federation, rounds=args.rounds))
print("\nadaptation steps   zero-prompt   vllfl    gain")
for steps in (0, 10, 50, 200):
    zero, learned = [], []
    for seed in seeds:
        c = cfg.replace(seed=seed, base_adaptation_steps=steps)
        bench = build_benchmark(c)
        zero.append(run_method(c, bench, "zero-prompt").global_map)
        learned.append(run_method(c, bench, "vllfl").global_map)
    z, v = 100 * np.mean(zero), 100 * np.mean(learned)
    print(f"{steps:>16}   {z:11.2f}   {v:6.2f}  {v - z:+6.2f}")
