"""Train a victim and every attack per seed, then print success and reward per attack.

    python scripts/attack_table.py --config configs/gridworld.yaml --out runs/attacks
"""
import argparse
from collections import defaultdict
from pathlib import Path

import numpy as np

from samdp_lab.harness import load_config, load_config_file, run_pipeline


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", default="runs/attacks")
    p.add_argument("--set", dest="overrides", action="append", default=[])
    args = p.parse_args()
    cfg = (load_config_file(args.config, args.overrides) if args.config
           else load_config(None, args.overrides))
    phases = ["train-victim", "gen-demos", "train-attack", "evaluate"]
    table = defaultdict(list)
    for res in run_pipeline(cfg, Path(args.out), phases):
        for row in res.get("rows", []):
            table[row["kind"]].append((row["success_rate"], row["attack_reward_mean"],
                                       row["clean_reward_mean"]))
    print(f"{'attack':16s} {'success':>8s} {'attack_rew':>11s} {'clean_rew':>10s}  seeds")
    for kind, vals in table.items():
        m = np.mean(vals, axis=0)
        print(f"{kind:16s} {m[0]:8.3f} {m[1]:11.3f} {m[2]:10.3f}  {len(vals)}")


if __name__ == "__main__":
    main()
