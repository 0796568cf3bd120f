"""Run the full variant grid and print the paired comparisons.

    python scripts/run_grid.py [--config FILE] [--section.key VALUE ...]
"""
import logging
import sys

from bayesattack import harness as hn
from bayesattack.cli import parse_overrides
from bayesattack.config import VARIANTS, load_config


def main(argv):
    path = None
    if argv[:1] == ["--config"]:
        path, argv = argv[1], argv[2:]
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = load_config(path, parse_overrides(argv))
    out = hn.run_experiment(cfg)
    avg = hn.per_seed_average(hn.read_csv(out / "results.csv"))
    pairs = [("joint", "plain"), ("joint", "param"), ("joint", "input")]
    pairs += [(f"{v}-ft", v) for v in VARIANTS]
    for a, b in pairs:
        if a in avg and b in avg:
            gap, se = hn.paired_gap(avg, a, b)
            print(f"{a:10s} - {b:8s} {gap:+.4f} ± {se:.4f}")
    rows = hn.read_csv(out / "sampling.csv")
    for key in ("avg_success", "avg_victim_loss", "avg_attack_loss"):
        print(key)
        for (m, s), by_seed in sorted(hn.sampling_table(rows, key).items()):
            mean, se = hn.mean_se(by_seed.values())
            print(f"  M={m} S={s}  {mean:.4f} ± {se:.4f}")


if __name__ == "__main__":
    main(sys.argv[1:])
