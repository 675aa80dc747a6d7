"""Compare an undefended victim, time-discounted robust training and uniform smoothing.

Each victim faces the exact adjacent-cell attack, targeted PGD and uniform
noise; the table reports the best attack reward and the clean reward.

    python scripts/defense_table.py --seeds 0 1 2 3 4 --out runs/defense
"""
import argparse
from pathlib import Path

import numpy as np

from samdp_lab.harness import load_config, load_config_file, run_pipeline, with_override

ATTACKS = "eval.attacks=[optimal_tabular, targeted_pgd, random]"


def one_seed(cfg, root: Path) -> dict:
    und = run_pipeline(cfg, root / "tdrt", ["train-victim", "gen-demos", "train-attack",
                                            "evaluate"])[-1]
    cfg_d = with_override(with_override(cfg, "attack.victim", "defended"), "eval.victim",
                          "defended")
    tdrt = run_pipeline(cfg_d, root / "tdrt", ["train-defense", "train-attack", "evaluate"])[-1]
    cfg_u = with_override(cfg_d, "defense.time_discounted", False)
    unif = run_pipeline(cfg_u, root / "unif", ["gen-demos", "train-defense", "train-attack",
                                               "evaluate"])[-1]
    return {"undefended": und, "time-discounted": tdrt, "uniform": unif}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", default="runs/defense")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--set", dest="overrides", action="append", default=[])
    args = p.parse_args()
    overrides = ["attack.kind=optimal_tabular", ATTACKS, *args.overrides]
    base = (load_config_file(args.config, overrides) if args.config
            else load_config(None, overrides))
    rows: dict = {}
    for seed in args.seeds:
        cfg = with_override(base, "seeds", [seed])
        for name, res in one_seed(cfg, Path(args.out) / f"s{seed}").items():
            rows.setdefault(name, []).append((res["best_attack_reward"], res["clean_reward"]))
            print(f"seed {seed} {name:16s} best attack {res['best_attack_reward']:7.3f} "
                  f"({res['best_attack']}), clean {res['clean_reward']:6.3f}", flush=True)
    print(f"\n{'victim':16s} {'best_attack':>12s} {'clean':>8s}")
    for name, vals in rows.items():
        m = np.mean(vals, axis=0)
        print(f"{name:16s} {m[0]:12.3f} {m[1]:8.3f}")


if __name__ == "__main__":
    main()
