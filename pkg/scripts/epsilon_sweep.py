"""Sweep one config key over values with paired seeds; write the CSV and plot data.

    python scripts/epsilon_sweep.py --config configs/gridworld.yaml \
        --axis attack.epsilon --values 0 0.0833 0.1667 --out runs/sweep
"""
import argparse
from pathlib import Path

import yaml

from samdp_lab.harness import emit_plotdata, load_config, load_config_file, run_sweep


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--axis", default="attack.epsilon")
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--metric", default="success_rate")
    p.add_argument("--out", default="runs/sweep")
    p.add_argument("--set", dest="overrides", action="append", default=[])
    args = p.parse_args()
    cfg = (load_config_file(args.config, args.overrides) if args.config
           else load_config(None, args.overrides))
    values = [yaml.safe_load(v) for v in args.values]
    text = run_sweep(cfg, Path(args.out), args.axis, values)
    plot = emit_plotdata(text, args.metric)
    (Path(args.out) / f"sweep_{args.axis}_{args.metric}_plot.csv").write_text(plot)
    print(plot, end="")


if __name__ == "__main__":
    main()
