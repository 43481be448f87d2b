"""Fed-SPA (p = 0.4) vs DP-Fed on an MNIST subset, both calibrated to the same epsilon.

Needs the IDX files; a non-gating trend check.
    python scripts/mnist_trend.py train-images-idx3-ubyte.gz train-labels-idx1-ubyte.gz
"""
import argparse

import numpy as np

from fedspa.accountant import calibrate_sigma
from fedspa.data import load_idx, partition
from fedspa.engine import RoundConfig, accountant_params, model_spec, run


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("images")
    ap.add_argument("labels")
    ap.add_argument("--target-epsilon", type=float, default=1.0)
    ap.add_argument("--T", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    full = load_idx(args.images, args.labels)
    rng = np.random.default_rng(args.seed)
    ds = full.subset(rng.choice(len(full), 6000, replace=False))
    part = partition(ds, 10, "iid", seed=args.seed)
    base = RoundConfig(n_agents=10, T=args.T, tau=5, B=10, eta_l=0.1, clip=0.01, server_update="average",
                       accounting="series", master_seed=args.seed)
    d = model_spec(base, ds).param_dim
    for scheme, p in (("fedspa", 0.4), ("dpfed", 1.0)):
        cfg = base.replace(scheme=scheme, p=p)
        sigma = calibrate_sigma(args.target_epsilon, accountant_params(cfg, d, min(part.sizes()), args.T),
                                method="series")
        res = run(cfg.replace(sigma=sigma), ds, part)
        best = max(r.acc_train for r in res.records)
        print(f"{scheme:>7} p={p:<4} sigma={sigma:.4f} best train acc {best:.4f}")


if __name__ == "__main__":
    main()
