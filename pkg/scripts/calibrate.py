"""Sweep the parameter and input noise scales on one seed.

Trains the zoo once, then attacks the same pool for every (sigma, sigma_e)
pair and prints the average transfer success of the joint attack next to the
plain baseline. Used to pick the default scales for the synthetic data.

    python scripts/calibrate.py [--seed 0] [--sigmas 0.05,0.1,0.2] [--sigma-es 0.1,0.2,0.4]
"""
import argparse
from dataclasses import replace

from bayesattack import harness as hn
from bayesattack.config import load_config
from bayesattack.numcore import RngStream


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--sigmas", default="0.05,0.1,0.2")
    ap.add_argument("--sigma-es", default="0.1,0.2,0.4")
    ap.add_argument("--iterations", type=int, default=50)
    args = ap.parse_args()
    cfg = load_config(None, {"attack.iterations": str(args.iterations)})
    train, test = hn.load_dataset(cfg, args.seed)
    models = hn.train_zoo(cfg, train, args.seed)
    substitute = models.pop("substitute")
    ids = hn.build_pool(substitute, list(models.values()), test, cfg.attack.pool_size,
                        RngStream(args.seed, "pool"))
    x, y = test.inputs[ids], test.labels[ids]

    def score(variant, sigma, sigma_e):
        cfg.posterior = replace(cfg.posterior, sigma=sigma, sigma_e=sigma_e)
        ps = hn.make_posteriors(cfg, substitute)
        res = hn.run_attack(cfg, ps, hn.bayes_spec(cfg, ps, variant), x, y, ids, args.seed, variant)
        return hn.evaluate_transfer(res.x_adv, models, y).average

    print(f"plain {score('plain', 0.0, 0.0):.4f}")
    for s in map(float, args.sigmas.split(",")):
        for se in map(float, args.sigma_es.split(",")):
            print(f"sigma={s:<6g} sigma_e={se:<6g} joint {score('joint', s, se):.4f}")


if __name__ == "__main__":
    main()
