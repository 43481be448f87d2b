"""Convergence-bound calculator.

Evaluates the effective DP gradient variance, the two error terms of the
non-convex convergence bound and the four-term asymptotic rate. All
big-O constants are taken as 1, so the outputs are trend indicators for
comparing settings, not certified bounds.

The bound assumes full participation and ``beta1 = 0``.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from fedspa.errors import InvalidParameter
from fedspa.models import ModelSpec, per_sample_grads


@dataclass(frozen=True)
class TheoryConstants:
    L: float
    G: float
    zeta_l: float
    zeta_g: float
    f0_minus_fstar: float
    eta_l: float
    eta_g: float
    tau: int
    T: int
    n: int
    p: float
    d: int
    sigma: float
    kappa: float
    beta2: float = 0.99

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise InvalidParameter(f"{name} must be nonnegative, got {value}")

    @classmethod
    def from_dict(cls, data: dict) -> "TheoryConstants":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        missing = set(cls.__dataclass_fields__) - set(known) - {"beta2"}
        if missing:
            raise InvalidParameter(f"missing constants: {', '.join(sorted(missing))}")
        return cls(**known)


@dataclass(frozen=True)
class BoundResult:
    xi: float
    xi_prime: float
    bound: float
    stepsize_cap: float
    stepsize_ok: bool


def zeta_dp_sq(c: TheoryConstants) -> float:
    """``(G^2 + zeta_l^2)/p + p d sigma^2``."""
    if not 0 < c.p <= 1:
        raise InvalidParameter(f"p must be in (0, 1], got {c.p}")
    return (c.G**2 + c.zeta_l**2) / c.p + c.p * c.d * c.sigma**2


def optimal_p(G: float, zeta_l: float, d: int, sigma: float) -> float:
    """Minimiser of ``zeta_dp_sq`` over ``p``; returns 1 when the stationary point is outside (0, 1]."""
    if sigma == 0 or d == 0:
        return 1.0
    p_star = math.sqrt(G**2 + zeta_l**2) / (sigma * math.sqrt(d))
    return min(p_star, 1.0)


def stepsize_cap(c: TheoryConstants) -> float:
    """Largest local learning rate the bound admits."""
    if c.tau < 1:
        raise InvalidParameter("tau must be >= 1")
    inner = [math.inf, math.inf]
    if c.G > 0:
        inner[0] = c.kappa * math.sqrt(c.d) / c.G
        if c.eta_g > 0 and c.L > 0:
            inner[1] = math.sqrt(c.kappa**2 * math.sqrt(c.d) / (c.G * c.eta_g * c.L))
    first = 1.0 / (8 * c.L * c.tau) if c.L > 0 else math.inf
    return min(first, min(inner) / (8 * c.tau))


def theorem2_bound(c: TheoryConstants) -> BoundResult:
    if c.T < 1 or c.tau < 1:
        raise InvalidParameter("T and tau must be >= 1")
    if c.n < 1 or c.kappa <= 0 or c.eta_l <= 0 or c.eta_g <= 0 or c.d < 1:
        raise InvalidParameter("need n, d >= 1 and kappa, eta_l, eta_g > 0")
    zdp = zeta_dp_sq(c)
    drift = zdp + 6 * c.tau * c.zeta_g**2
    xi = (c.f0_minus_fstar / (c.eta_l * c.eta_g * c.tau * c.T)
          + 5 * c.eta_l**2 * c.tau * c.L**2 / (2 * c.kappa) * drift)
    xi_prime = (c.eta_g * c.L / 2 + c.G / math.sqrt(c.d)) * (
        4 * c.eta_l / (c.n * c.kappa**2) * zdp
        + 20 * c.eta_l**3 * c.tau**2 * c.L**2 / c.kappa**2 * drift
    )
    prefactor = math.sqrt(c.beta2) * c.eta_l * c.tau * c.G / math.sqrt(c.d) + c.kappa
    cap = stepsize_cap(c)
    return BoundResult(xi, xi_prime, prefactor * (xi + xi_prime), cap, c.eta_l <= cap)


def lemma1_rate(c: TheoryConstants) -> float:
    """Four-term rate under the prescribed learning rates and kappa (constants 1).

    Only ``f0_minus_fstar, L, G, zeta_l, zeta_g, n, tau, T, p, d, sigma`` are
    used; the learning rates and kappa are implied, see :func:`lemma1_choices`.
    """
    if c.T < 1 or c.tau < 1 or c.n < 1 or c.G <= 0:
        raise InvalidParameter("need T, tau, n >= 1 and G > 0")
    zdp = zeta_dp_sq(c)
    drift = zdp + 6 * c.tau * c.zeta_g**2
    root = math.sqrt(c.n * c.tau * c.T)
    return (c.f0_minus_fstar / root
            + 2 * zdp * c.L / (c.G**2 * root)
            + drift / (c.G * c.tau * c.T)
            + drift * c.L * math.sqrt(c.n) / (c.G**2 * math.sqrt(c.tau) * c.T**1.5))


def lemma1_terms(c: TheoryConstants) -> tuple[float, float, float, float]:
    zdp = zeta_dp_sq(c)
    drift = zdp + 6 * c.tau * c.zeta_g**2
    root = math.sqrt(c.n * c.tau * c.T)
    return (c.f0_minus_fstar / root,
            2 * zdp * c.L / (c.G**2 * root),
            drift / (c.G * c.tau * c.T),
            drift * c.L * math.sqrt(c.n) / (c.G**2 * math.sqrt(c.tau) * c.T**1.5))


def lemma1_choices(L: float, G: float, tau: int, T: int, n: int, d: int) -> dict:
    """Learning rates and kappa behind :func:`lemma1_rate`, with unit constants."""
    return {
        "eta_l": 1.0 / (L * tau * math.sqrt(T)),
        "eta_g": math.sqrt(n * tau),
        "kappa": G / (math.sqrt(d) * L),
    }


# -- heuristic estimators ---------------------------------------------------

def _full_grad(spec, theta, X, y):
    return per_sample_grads(spec, theta, X, y).mean(axis=0)


def estimate_smoothness(spec: ModelSpec, theta, X, y, iters: int = 50, eps: float = 1e-4, seed=0) -> float:
    """Heuristic ``L``: power iteration on finite-difference Hessian-vector products at ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(theta.size)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        hv = (_full_grad(spec, theta + eps * v, X, y) - _full_grad(spec, theta - eps * v, X, y)) / (2 * eps)
        lam = float(np.linalg.norm(hv))
        if lam == 0:
            return 0.0
        v = hv / lam
    return lam


def estimate_variances(spec: ModelSpec, theta, dataset, partition, B: int) -> tuple[float, float]:
    """Heuristic ``(zeta_l, zeta_g)`` at ``theta``.

    ``zeta_l^2``: largest over agents of the per-sample gradient variance
    (summed over coordinates) divided by ``B``. ``zeta_g^2``: mean squared
    distance of agent gradients from the global gradient.
    """
    local, agent_grads = [], []
    for idx in partition.agent_indices:
        g = per_sample_grads(spec, theta, dataset.features[idx], dataset.labels[idx])
        local.append(g.var(axis=0).sum() / B)
        agent_grads.append(g.mean(axis=0))
    agent_grads = np.array(agent_grads)
    glob = agent_grads.mean(axis=0)
    zeta_g_sq = float(np.mean(np.sum((agent_grads - glob) ** 2, axis=1)))
    return math.sqrt(max(local)), math.sqrt(zeta_g_sq)
