"""Rounds needed to reach a noiseless-baseline accuracy threshold, adaptive vs averaging server.

Noise is calibrated with the series accountant to the target epsilon.
"""
import argparse
import math

import numpy as np

from fedspa.accountant import calibrate_sigma
from fedspa.data import gen_synthetic, partition
from fedspa.engine import RoundConfig, accountant_params, model_spec, run


def rounds_to(records, threshold):
    return next((r.t + 1 for r in records if r.acc_train >= threshold), math.inf)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--T", type=int, default=30)
    ap.add_argument("--target-epsilon", type=float, default=1.0)
    ap.add_argument("--margin", type=float, default=0.10, help="accuracy below the baseline best")
    args = ap.parse_args()

    ds = gen_synthetic(2000, 5, 2, 5.0, 1)
    part = partition(ds, 10, "iid", seed=1)
    model = dict(model="mlp1", hidden_dim=4, init_scale=0.1, n_agents=10, T=args.T, tau=5)
    noisy = RoundConfig(scheme="fedspa", B=2, p=0.5, clip=0.2, accounting="series", **model)
    d = model_spec(noisy, ds).param_dim
    sigma = calibrate_sigma(args.target_epsilon, accountant_params(noisy, d, min(part.sizes()), args.T),
                            method="series")
    noisy = noisy.replace(sigma=sigma)
    print(f"d = {d}, sigma = {sigma:.4f}")

    variants = {
        "adaptive": dict(server_update="adaptive", eta_l=0.03, eta_g=0.1, kappa=1e-3, beta1=0.9, beta2=0.99),
        "average eta_l=0.03": dict(server_update="average", eta_l=0.03),
        "average eta_l=0.1": dict(server_update="average", eta_l=0.1),
    }
    hits = {k: [] for k in variants}
    for seed in range(args.seeds):
        ref = run(RoundConfig(scheme="fedavg", B=10, eta_l=0.1, server_update="average", master_seed=seed, **model),
                  ds, part)
        threshold = max(r.acc_train for r in ref.records) - args.margin
        for name, kw in variants.items():
            hits[name].append(rounds_to(run(noisy.replace(master_seed=seed, **kw), ds, part).records, threshold))
        print(f"seed {seed}: threshold {threshold:.3f}, " + ", ".join(f"{k} {v[-1]}" for k, v in hits.items()))
    for name, v in hits.items():
        print(f"{name:>20}: median {np.median(v):g} rounds")


if __name__ == "__main__":
    main()
