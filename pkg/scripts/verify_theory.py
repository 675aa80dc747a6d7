"""Run the exact tabular checks of the attack-MDP equivalence and the gain bound.

    python scripts/verify_theory.py --n-lemma1 200 --n-theorem2 500
"""
import argparse
import time

from samdp_lab.harness import lemma1_suite, theorem2_suite


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n-lemma1", type=int, default=200)
    p.add_argument("--n-theorem2", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    t0 = time.time()
    l1 = lemma1_suite(args.n_lemma1, args.seed)
    print(f"equivalence: {l1.passed}/{l1.total} instances, "
          f"max residual {l1.extra['max_residual']:.2e} ({time.time() - t0:.1f}s)")
    t0 = time.time()
    t2 = theorem2_suite(args.n_theorem2, args.seed)
    print(f"gain bound: {t2.passed}/{t2.total - t2.skipped} hold, {t2.skipped} inapplicable, "
          f"tight-constant fraction {t2.extra['tight_fraction']:.3f} ({time.time() - t0:.1f}s)")
    raise SystemExit(0 if l1.ok and t2.ok else 1)


if __name__ == "__main__":
    main()
