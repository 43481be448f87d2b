"""Acceptance criteria, one test each.

Every test prints a single ``criterion N: PASS|FAIL`` line (visible even under output capture)
and asserts its own runtime budget.
"""
import itertools
import math
import time

import numpy as np
import pytest

from fedspa.accountant import (AccountantParams, Infeasible, calibrate_sigma, compose, epsilon_series,
                               epsilon_theorem1, min_epsilon, rdp_to_dp, subsampled_rdp_closed)
from fedspa.cli import main
from fedspa.data import gen_synthetic, partition
from fedspa.engine import RoundConfig, accountant_params, bits_to_mb, comm_cost_bits, model_spec, run
from fedspa.mechanism import l2_sensitivity_sq
from fedspa.models import ModelSpec, grad_per_sample, loss
from fedspa.sparsify import SparseMask, apply_scaled
from fedspa.theory import optimal_p, stepsize_cap, theorem2_bound, zeta_dp_sq

from oracles import BOUND, CAP, XI, XIP, ZDP, sym, theory_fixture


@pytest.fixture
def criterion(request, capsys):
    """Yield a dict the test may annotate; print the verdict line on teardown."""
    info = {"detail": ""}
    start = time.perf_counter()
    yield info
    elapsed = time.perf_counter() - start
    rep = getattr(request.node, "rep_call", None)
    verdict = "PASS" if rep is not None and rep.passed else "FAIL"
    number = int(request.node.name.split("_")[1])
    with capsys.disabled():
        print(f"\ncriterion {number}: {verdict} ({elapsed:.2f} s) {info['detail']}".rstrip())


def within(start, budget):
    elapsed = time.perf_counter() - start
    assert elapsed < budget, f"took {elapsed:.1f} s, budget {budget} s"


# -- 1 ------------------------------------------------------------------------------------------

def test_01_sparsifier_exactness(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_mean, worst_var = 0.0, 0.0
    for d in range(1, 7):
        masks = {k: [SparseMask(d, list(c)) for c in itertools.combinations(range(d), k)] for k in range(1, d + 1)}
        for _ in range(50):
            x = rng.standard_normal(d)
            for k, ms in masks.items():
                outs = np.array([apply_scaled(m, x) for m in ms])
                worst_mean = max(worst_mean, float(np.max(np.abs(outs.mean(axis=0) - x))))
                dev = float(np.mean(np.sum((outs - x) ** 2, axis=1)))
                worst_var = max(worst_var, abs(dev - (d / k - 1) * float(x @ x)))
    criterion["detail"] = f"max mean err {worst_mean:.1e}, max variance err {worst_var:.1e}"
    assert worst_mean <= 1e-12 and worst_var <= 1e-12
    within(start, 1)


# -- 2 ------------------------------------------------------------------------------------------

def test_02_sensitivity_brute_force(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    c = 0.5
    worst_ratio, worst_case = 0.0, None
    for d in range(1, 9):
        G = c * math.sqrt(d)
        boundary = c * np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
        for B in range(1, 5):
            # the B - 1 shared samples, also on the clipping boundary
            shared = boundary[rng.integers(len(boundary), size=B - 1)].sum(axis=0)
            means = (shared + boundary) / B
            diff_sq = (means[:, None, :] - means[None, :, :]) ** 2
            for k in range(1, d + 1):
                bound = l2_sensitivity_sq(k / d, G, B)
                for active in itertools.combinations(range(d), k):
                    emp = float(diff_sq[:, :, list(active)].sum(axis=2).max())
                    if emp > bound + 1e-12 and emp / bound > worst_ratio:
                        worst_ratio, worst_case = emp / bound, (d, B, k)
    criterion["detail"] = (f"empirical/bound up to {worst_ratio:.3f} at (d, B, k) = {worst_case}"
                           if worst_case else "bound holds everywhere")
    within(start, 10)
    assert worst_case is None, criterion["detail"]


# -- 3 ------------------------------------------------------------------------------------------

def feasible_grid(size=200):
    points = []
    for q, s, p, I, tau, alpha in itertools.product(
            (1e-4, 5e-4, 2e-3, 1e-2), (0.7, 1.5, 4.0, 12.0, 40.0), (0.05, 0.4, 1.0), (1, 7), (10, 300),
            (2, 5, 13, 32)):
        params = AccountantParams(B=10, q=q, sigma=1.0, p=p, G=1.0, tau=tau, participation=I)
        params = params.with_sigma(math.sqrt(s * params.phi_sq))
        if not isinstance(epsilon_theorem1(alpha, params), Infeasible):
            points.append((alpha, params))
    # an evenly spread subset of the feasible points
    picks = np.linspace(0, len(points) - 1, size).round().astype(int)
    assert len(set(picks.tolist())) == size
    return [points[i] for i in picks]


def test_03_accountant_path_equivalence(criterion):
    start = time.perf_counter()
    grid = feasible_grid()
    worst_gap, series_violations = 0.0, 0
    for alpha, params in grid:
        eps = epsilon_theorem1(alpha, params)
        piped = rdp_to_dp(alpha, compose(subsampled_rdp_closed(alpha, params), params.steps), params.delta)
        worst_gap = max(worst_gap, abs(eps - piped))
        series_violations += epsilon_series(alpha, params) > eps
    criterion["detail"] = f"{len(grid)} points, max gap {worst_gap:.1e}, series above closed: {series_violations}"
    assert worst_gap <= 1e-12 and series_violations == 0
    within(start, 5)


# -- 4 ------------------------------------------------------------------------------------------

def test_04_sparsification_amplifies_privacy(criterion):
    start = time.perf_counter()
    eps = []
    for p in (0.05, 0.1, 0.4, 1.0):
        params = AccountantParams(B=10, q=1e-3, sigma=math.sqrt(0.02), p=p, G=1.0, tau=300, participation=5,
                                  delta=1e-3)
        eps.append(min_epsilon(params)[1])
    criterion["detail"] = "eps = " + ", ".join(f"{e:.4f}" for e in eps)
    assert all(a < b for a, b in zip(eps, eps[1:]))
    within(start, 5)


# -- 5 ------------------------------------------------------------------------------------------

def fd_grad(spec, theta, x, y, h=1e-5):
    g = np.empty_like(theta)
    for j in range(theta.size):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (loss(spec, theta + e, (x, y)) - loss(spec, theta - e, (x, y))) / (2 * h)
    return g


def test_05_gradient_correctness(criterion):
    start = time.perf_counter()
    worst = 0.0
    for kind in ("logreg", "mlp1"):
        for seed in range(100):
            rng = np.random.default_rng(5000 + seed)
            i, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
            spec = ModelSpec(kind, i, c, int(rng.integers(1, 6)) if kind == "mlp1" else 0)
            theta = rng.standard_normal(spec.param_dim)
            x, y = rng.standard_normal(i), int(rng.integers(c))
            num = fd_grad(spec, theta, x, y)
            rel = np.linalg.norm(grad_per_sample(spec, theta, (x, y)) - num) / max(np.linalg.norm(num), 1e-8)
            worst = max(worst, float(rel))
    criterion["detail"] = f"max relative error {worst:.1e}"
    assert worst < 1e-5
    within(start, 10)


# -- 6 ------------------------------------------------------------------------------------------

def test_06_fedavg_degeneracy(criterion):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        ds = gen_synthetic(1000, 4, 3, 3.0, seed)
        part = partition(ds, 10, "iid", seed=seed)
        base = dict(n_agents=10, T=20, tau=5, B=10, eta_l=0.1, server_update="average", master_seed=seed)
        a = run(RoundConfig(scheme="fedspa", p=1.0, sigma=0.0, **base), ds, part)
        b = run(RoundConfig(scheme="fedavg", **base), ds, part)
        worst = max(worst, float(np.max(np.abs(a.theta - b.theta))))
    criterion["detail"] = f"max coordinate gap {worst:.1e}"
    assert worst <= 1e-12
    within(start, 30)


# -- 7 ------------------------------------------------------------------------------------------

def test_07_end_to_end_convergence(criterion):
    start = time.perf_counter()
    ds = gen_synthetic(2000, 2, 2, 5.0, 0)
    part = partition(ds, 10, "iid", seed=0)
    common = dict(n_agents=10, T=30, tau=5, server_update="average", master_seed=0)
    fedavg = run(RoundConfig(scheme="fedavg", B=10, **common), ds, part).records[-1].acc_train
    cfg = RoundConfig(scheme="fedspa", B=2, p=0.5, clip=0.5, delta=1e-3, **common)
    d = model_spec(cfg, ds).param_dim
    sigma = calibrate_sigma(2.0, accountant_params(cfg, d, min(part.sizes()), cfg.T))
    res = run(cfg.replace(sigma=sigma), ds, part)
    spa, eps = res.records[-1].acc_train, res.records[-1].eps_realized_max
    criterion["detail"] = f"FedAvg {fedavg:.3f}, Fed-SPA {spa:.3f} at sigma {sigma:.3f}, eps {eps:.3f}"
    assert fedavg >= 0.95
    assert eps <= 2.0
    assert spa >= fedavg - 0.10
    within(start, 120)


# -- 8 ------------------------------------------------------------------------------------------

def rounds_to(records, threshold):
    for r in records:
        if r.acc_train >= threshold:
            return r.t + 1
    return math.inf


def test_08_adaptive_acceleration(criterion):
    start = time.perf_counter()
    ds = gen_synthetic(2000, 5, 2, 5.0, 1)
    part = partition(ds, 10, "iid", seed=1)
    model = dict(model="mlp1", hidden_dim=4, init_scale=0.1, n_agents=10, T=30, tau=5)
    noisy = RoundConfig(scheme="fedspa", B=2, p=0.5, clip=0.2, accounting="series", **model)
    d = model_spec(noisy, ds).param_dim
    sigma = calibrate_sigma(1.0, accountant_params(noisy, d, min(part.sizes()), noisy.T), method="series")
    noisy = noisy.replace(sigma=sigma)
    adaptive = dict(server_update="adaptive", eta_l=0.03, eta_g=0.1, kappa=1e-3, beta1=0.9, beta2=0.99)
    hits = {"adaptive": [], "average eta_l=0.03": [], "average eta_l=0.1": []}
    for seed in range(5):
        ref = run(RoundConfig(scheme="fedavg", B=10, eta_l=0.1, server_update="average", master_seed=seed, **model),
                  ds, part)
        threshold = max(r.acc_train for r in ref.records) - 0.10
        runs = {"adaptive": noisy.replace(master_seed=seed, **adaptive),
                "average eta_l=0.03": noisy.replace(master_seed=seed, server_update="average", eta_l=0.03),
                "average eta_l=0.1": noisy.replace(master_seed=seed, server_update="average", eta_l=0.1)}
        for name, cfg in runs.items():
            res = run(cfg, ds, part)
            assert res.records[-1].eps_realized_max <= 1.0
            hits[name].append(rounds_to(res.records, threshold))
    medians = {k: float(np.median(v)) for k, v in hits.items()}
    criterion["detail"] = "median rounds " + ", ".join(f"{k} {v:g}" for k, v in medians.items())
    assert math.isfinite(medians["adaptive"])
    assert all(medians["adaptive"] <= v for k, v in medians.items() if k != "adaptive")
    within(start, 300)


# -- 9 ------------------------------------------------------------------------------------------

def test_09_cost_table(criterion):
    start = time.perf_counter()
    want = {0.05: "0.0197", 0.1: "0.0393", 0.4: "0.1572", 1.0: "0.3931"}
    got = {p: f"{bits_to_mb(comm_cost_bits(p, 21840, 45, 0.1)):.4f}" for p in want}
    criterion["detail"] = " / ".join(got.values()) + " MB"
    assert got == want
    within(start, 1)


# -- 10 -----------------------------------------------------------------------------------------

def test_10_theory_calculator(criterion):
    exprs = (ZDP, XI, XIP, BOUND, CAP)
    cases = []
    for i in range(20):
        c, subs = theory_fixture(i)
        cases.append((c, [sym(e, subs) for e in exprs]))
    # the budget covers the calculator, not the symbolic oracle
    start = time.perf_counter()
    worst = 0.0
    for c, wants in cases:
        res = theorem2_bound(c)
        for got, want in zip((zeta_dp_sq(c), res.xi, res.xi_prime, res.bound, stepsize_cap(c)), wants):
            worst = max(worst, abs(got - want) / abs(want))
    grid = np.linspace(1e-4, 1.0, 200_001)
    grid_gap = 0.0
    for G, zl, d, sigma in ((1.0, 0.0, 100, 0.5), (2.0, 1.0, 1000, 0.3), (1.0, 1.0, 50, 2.0)):
        vals = (G**2 + zl**2) / grid + grid * d * sigma**2
        grid_gap = max(grid_gap, abs(grid[np.argmin(vals)] - optimal_p(G, zl, d, sigma)))
    criterion["detail"] = f"max relative error {worst:.1e}, grid vs stationary point {grid_gap:.1e}"
    assert worst <= 1e-12
    assert grid_gap <= 1e-4  # grid spacing is 5e-6
    within(start, 1)


# -- 11 -----------------------------------------------------------------------------------------

PLAN = """
[plan]
output_dir = "out"
target_epsilon = 8.0

[data]
source = "synthetic"
n_samples = 1000
input_dim = 3
separation = 4.0
seed = 2

[round]
n_agents = 5
T = 10
tau = 3
B = 4
clip = 0.5
sample_rate = 0.6
master_seed = 7

[sweep]
scheme = ["fedspa", "dpfed", "fedavg"]
p = [0.25, 1.0]
"""


def test_11_determinism(criterion, tmp_path):
    start = time.perf_counter()
    plan = tmp_path / "plan.toml"
    plan.write_text(PLAN)
    for out in ("a", "b"):
        assert main(["run", str(plan), "--quiet", "--output-dir", str(tmp_path / out)]) == 0
    names = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    same = [n for n in names if (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()]
    criterion["detail"] = f"{len(same)}/{len(names)} CSV files identical"
    assert len(names) == 5 and same == names
    assert sorted(p.name for p in (tmp_path / "b").glob("*.csv")) == names
    within(start, 120)
