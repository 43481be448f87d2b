"""Renyi-DP accounting for the sparsified Gaussian mechanism.

Per local step an agent releases ``g_masked + noise_masked`` on a minibatch
sampled without replacement at rate ``q = B/m``. The masked gradient has
squared sensitivity ``phi^2 = 2 p G^2 / B^2``; subsampling amplifies the
Gaussian RDP either through the closed form ``3.5 q^2 phi^2 alpha / sigma^2``
(valid only in a restricted region of ``(alpha, sigma)``) or through the
general binomial-type series. RDP composes additively over the ``I * tau``
local steps and is converted to ``(eps, delta)``-DP at the end.

Only integer orders ``alpha >= 2`` are supported.

Infeasible combinations are reported with an :class:`Infeasible` value
rather than a number.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from fedspa.errors import CalibrationError, InfinitePrivacyLoss, InvalidParameter, NoFeasibleAlpha
from fedspa.mechanism import l2_sensitivity_sq

DEFAULT_ALPHA_MAX = 64
MIN_SIGMA_PRIME_SQ = 0.7

# How sigma enters the alpha constraint: "normalized" uses sigma'^2 = sigma^2/phi^2,
# "raw" uses the noise variance sigma^2 as printed.
CONSTRAINT_MODES = ("normalized", "raw")


@dataclass(frozen=True)
class Infeasible:
    """Marker for an (alpha, params) pair outside the closed-form bound's validity region."""

    reason: str

    def __bool__(self):
        return False


@dataclass(frozen=True)
class AccountantParams:
    B: int
    sigma: float
    m: int | None = None
    q: float | None = None
    p: float = 1.0
    G: float = 1.0
    tau: int = 1
    participation: int = 1
    delta: float = 1e-3
    constraint: str = "normalized"
    phi_sq: float = field(init=False)

    def __post_init__(self):
        if self.B < 1:
            raise InvalidParameter(f"B must be >= 1, got {self.B}")
        if self.q is None:
            if self.m is None:
                raise InvalidParameter("need either q or m")
            if self.m < self.B:
                raise InvalidParameter(f"m={self.m} must be >= B={self.B}")
            object.__setattr__(self, "q", self.B / self.m)
        elif self.m is not None and not math.isclose(self.q, self.B / self.m, rel_tol=1e-12):
            raise InvalidParameter(f"q={self.q} inconsistent with B/m={self.B / self.m}")
        if not 0 <= self.q <= 1:
            raise InvalidParameter(f"q must be in [0, 1], got {self.q}")
        if not 0 < self.delta < 1:
            raise InvalidParameter(f"delta must be in (0, 1), got {self.delta}")
        if self.sigma < 0 or self.tau < 0 or self.participation < 0:
            raise InvalidParameter("sigma, tau and participation must be nonnegative")
        if self.constraint not in CONSTRAINT_MODES:
            raise InvalidParameter(f"constraint must be one of {CONSTRAINT_MODES}")
        object.__setattr__(self, "phi_sq", l2_sensitivity_sq(self.p, self.G, self.B))

    @property
    def sigma_prime_sq(self) -> float:
        """Noise variance relative to sensitivity, ``sigma^2 B^2 / (2 p G^2)``."""
        if self.phi_sq == 0:
            return math.inf
        return self.sigma**2 / self.phi_sq

    @property
    def steps(self) -> int:
        return self.participation * self.tau

    def with_sigma(self, sigma: float) -> "AccountantParams":
        return replace(self, sigma=sigma)


def _check_alpha(alpha):
    if int(alpha) != alpha or alpha < 2:
        raise InvalidParameter(f"alpha must be an integer >= 2, got {alpha}")
    return int(alpha)


def gaussian_rdp(alpha, phi_sq: float, sigma: float) -> float:
    """RDP of the Gaussian mechanism, ``alpha * phi^2 / (2 sigma^2)``."""
    if sigma == 0:
        raise InfinitePrivacyLoss("sigma = 0: the Gaussian mechanism gives no privacy")
    if sigma < 0 or phi_sq < 0:
        raise InvalidParameter("sigma and phi_sq must be nonnegative")
    return alpha * phi_sq / (2.0 * sigma * sigma)


def constraint_rhs(alpha: int, params: AccountantParams) -> float:
    """Right-hand side of ``alpha <= (2/3) s log(1/(q alpha (1 + sigma'^2))) + 1``."""
    s = params.sigma_prime_sq
    scale = s if params.constraint == "normalized" else params.sigma**2
    x = params.q * alpha * (1.0 + s)
    if x == 0:
        return math.inf
    if math.isinf(x):
        return -math.inf
    return (2.0 / 3.0) * scale * math.log(1.0 / x) + 1.0


def feasibility(alpha, params: AccountantParams) -> Infeasible | None:
    """None if the closed-form bound applies at ``alpha``, else the reason it does not."""
    alpha = _check_alpha(alpha)
    s = params.sigma_prime_sq
    if not s >= MIN_SIGMA_PRIME_SQ:
        return Infeasible(f"sigma'^2 = {s:.6g} < {MIN_SIGMA_PRIME_SQ}")
    rhs = constraint_rhs(alpha, params)
    if not alpha <= rhs:
        return Infeasible(f"alpha = {alpha} exceeds constraint bound {rhs:.6g}")
    return None


def subsampled_rdp_closed(alpha, params: AccountantParams) -> float | Infeasible:
    alpha = _check_alpha(alpha)
    bad = feasibility(alpha, params)
    if bad is not None:
        return bad
    return 3.5 * params.q**2 * params.phi_sq * alpha / params.sigma**2


def _log_comb(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def subsampled_rdp_series(alpha, params: AccountantParams) -> float:
    """General subsampled-Gaussian RDP bound, summed in log space.

    Returns ``math.inf`` if the bound is not representable in floating point.
    """
    alpha = _check_alpha(alpha)
    q, phi_sq, sigma = params.q, params.phi_sq, params.sigma
    if q == 0:
        return 0.0
    rho2 = gaussian_rdp(2, phi_sq, sigma)
    log_q = math.log(q)
    log_terms = []
    if rho2 > 0:
        # min{4(e^rho - 1), 2 e^rho} in log space
        log_min = min(math.log(4.0) + math.log(math.expm1(rho2)) if rho2 < 700 else math.inf,
                      math.log(2.0) + rho2)
        log_terms.append(2 * log_q + _log_comb(alpha, 2) + log_min)
    for j in range(3, alpha + 1):
        rho_j = gaussian_rdp(j, phi_sq, sigma)
        log_terms.append(j * log_q + _log_comb(alpha, j) + math.log(2.0) + (j - 1) * rho_j)
    if not log_terms:
        return 0.0
    with np.errstate(over="ignore"):
        s = float(np.logaddexp.reduce(log_terms))
    if math.isinf(s):
        return math.inf
    # log(1 + e^s) without losing digits for tiny s
    log_total = math.log1p(math.exp(s)) if s < 0 else s + math.log1p(math.exp(-s))
    return log_total / (alpha - 1)


def compose(rho_per_step: float, steps: int) -> float:
    if steps < 0:
        raise InvalidParameter(f"steps must be >= 0, got {steps}")
    return rho_per_step * steps


def rdp_to_dp(alpha, rho: float, delta: float) -> float:
    if not 0 < delta < 1:
        raise InvalidParameter(f"delta must be in (0, 1), got {delta}")
    if alpha <= 1:
        raise InvalidParameter(f"alpha must be > 1, got {alpha}")
    return rho + math.log(1.0 / delta) / (alpha - 1)


def epsilon_theorem1(alpha, params: AccountantParams) -> float | Infeasible:
    """End-to-end epsilon after ``I * tau`` sparsified noisy steps (closed form)."""
    alpha = _check_alpha(alpha)
    bad = feasibility(alpha, params)
    if bad is not None:
        return bad
    q, p, G, B, sigma = params.q, params.p, params.G, params.B, params.sigma
    first = 7.0 * q**2 * params.participation * params.tau * alpha * p * G**2 / (B**2 * sigma**2)
    return first + math.log(1.0 / params.delta) / (alpha - 1)


def epsilon_series(alpha, params: AccountantParams) -> float:
    alpha = _check_alpha(alpha)
    rho = compose(subsampled_rdp_series(alpha, params), params.steps)
    return rdp_to_dp(alpha, rho, params.delta)


def feasible_alphas(params: AccountantParams, alpha_max: int = DEFAULT_ALPHA_MAX) -> list[int]:
    return [a for a in range(2, alpha_max + 1) if feasibility(a, params) is None]


def min_epsilon(params: AccountantParams, alpha_max: int = DEFAULT_ALPHA_MAX) -> tuple[int, float]:
    """Best feasible integer order in ``[2, alpha_max]`` and its epsilon; ties go to the smaller order."""
    if alpha_max < 2:
        raise InvalidParameter(f"alpha_max must be >= 2, got {alpha_max}")
    best = None
    for alpha in range(2, alpha_max + 1):
        eps = epsilon_theorem1(alpha, params)
        if isinstance(eps, Infeasible):
            continue
        if best is None or eps < best[1]:
            best = (alpha, eps)
    if best is None:
        raise NoFeasibleAlpha(
            f"no feasible alpha in [2, {alpha_max}] (sigma'^2 = {params.sigma_prime_sq:.4g}, q = {params.q:.4g}); "
            "raise sigma or lower q"
        )
    return best


def min_epsilon_series(params: AccountantParams, alpha_max: int = DEFAULT_ALPHA_MAX) -> tuple[int, float]:
    if alpha_max < 2:
        raise InvalidParameter(f"alpha_max must be >= 2, got {alpha_max}")
    best = None
    for alpha in range(2, alpha_max + 1):
        eps = epsilon_series(alpha, params)
        if best is None or eps < best[1]:
            best = (alpha, eps)
    return best


# -- sigma calibration ------------------------------------------------------

def _sigma_for(s: float, params: AccountantParams) -> float:
    """Noise std whose sigma'^2 equals ``s``."""
    return math.sqrt(s * params.phi_sq)


def _peak_s(alpha: int, q: float) -> float:
    """Maximiser over sigma'^2 of the constraint right-hand side (it is concave there)."""
    upper = 1.0 / (q * alpha) - 1.0
    lo, hi = 0.0, upper

    def slope(s):
        return -math.log(q * alpha * (1.0 + s)) - s / (1.0 + s)

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if slope(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _ok(alpha, params, target):
    eps = epsilon_theorem1(alpha, params)
    return not isinstance(eps, Infeasible) and eps <= target


def _alpha_upper_sigma(alpha: int, params: AccountantParams) -> float | None:
    """Largest noise at which ``alpha`` is most feasible, or None if never feasible."""
    if params.q * alpha >= 1:
        return None
    s_top = max(_peak_s(alpha, params.q), MIN_SIGMA_PRIME_SQ)
    sigma_top = _sigma_for(s_top, params)
    if feasibility(alpha, params.with_sigma(sigma_top)) is not None:
        return None
    return sigma_top


def _largest_feasible_sigma(alpha: int, params: AccountantParams, sigma_top: float) -> float:
    lo, hi = sigma_top, sigma_top * 2
    while feasibility(alpha, params.with_sigma(hi)) is None:
        lo, hi = hi, hi * 2
    for _ in range(100):
        mid = math.sqrt(lo * hi)
        if feasibility(alpha, params.with_sigma(mid)) is None:
            lo = mid
        else:
            hi = mid
    return lo


def min_achievable_epsilon(params: AccountantParams, alpha_max: int = DEFAULT_ALPHA_MAX) -> float:
    """Smallest closed-form epsilon reachable by any noise level (inf if none is feasible)."""
    best = math.inf
    for alpha in range(2, alpha_max + 1):
        sigma_top = _alpha_upper_sigma(alpha, params)
        if sigma_top is None:
            continue
        sigma = _largest_feasible_sigma(alpha, params, sigma_top)
        eps = epsilon_theorem1(alpha, params.with_sigma(sigma))
        if not isinstance(eps, Infeasible):
            best = min(best, eps)
    return best


def calibrate_sigma(
    target_epsilon: float,
    params: AccountantParams,
    alpha_max: int = DEFAULT_ALPHA_MAX,
    tolerance: float = 1e-3,
    method: str = "closed",
) -> float:
    """Smallest sigma (to within a factor ``1 + tolerance``) meeting ``target_epsilon``.

    ``params.sigma`` is ignored. With ``method="closed"`` the target is checked
    with :func:`min_epsilon`. For a fixed order, epsilon decreases in sigma
    while the order's validity region is an interval in sigma, so the set of
    admissible sigmas is an interval per order; each lower end is found by
    bisection and the smallest one is returned. With ``method="series"`` the
    target is checked with :func:`min_epsilon_series`, which is monotone in
    sigma, and a single bisection suffices.
    """
    if not target_epsilon > 0:
        raise InvalidParameter(f"target_epsilon must be > 0, got {target_epsilon}")
    if not 0 < tolerance < 1:
        raise InvalidParameter(f"tolerance must be in (0, 1), got {tolerance}")
    if method not in ("closed", "series"):
        raise InvalidParameter(f"method must be 'closed' or 'series', got {method!r}")
    if params.phi_sq == 0:
        raise CalibrationError("zero sensitivity: no noise is needed", 0.0)
    floor = math.log(1.0 / params.delta) / (alpha_max - 1)
    if target_epsilon <= floor:
        raise CalibrationError(
            f"target {target_epsilon} <= conversion floor log(1/delta)/(alpha_max-1) = {floor:.6g}",
            floor if method == "series" else min_achievable_epsilon(params, alpha_max),
        )
    if method == "series":
        return _calibrate_series(target_epsilon, params, alpha_max, tolerance)
    best = None
    for alpha in range(2, alpha_max + 1):
        if target_epsilon <= math.log(1.0 / params.delta) / (alpha - 1):
            continue
        sigma_top = _alpha_upper_sigma(alpha, params)
        if sigma_top is None:
            continue
        # noise at which this order alone meets the target, ignoring validity
        first_per_inv_var = 7.0 * params.q**2 * params.steps * alpha * params.p * params.G**2 / params.B**2
        need = math.sqrt(first_per_inv_var / (target_epsilon - math.log(1.0 / params.delta) / (alpha - 1)))
        hi = max(sigma_top, need)
        if not _ok(alpha, params.with_sigma(hi), target_epsilon):
            # past the validity interval, or numerically on its edge
            hi *= 1 + tolerance / 4
            if not _ok(alpha, params.with_sigma(hi), target_epsilon):
                continue
        lo = hi / 2
        while _ok(alpha, params.with_sigma(lo), target_epsilon):
            hi, lo = lo, lo / 2
        while hi / lo > 1 + tolerance:
            mid = math.sqrt(lo * hi)
            if _ok(alpha, params.with_sigma(mid), target_epsilon):
                hi = mid
            else:
                lo = mid
        if best is None or hi < best:
            best = hi
    if best is None:
        min_eps = min_achievable_epsilon(params, alpha_max)
        raise CalibrationError(
            f"target epsilon {target_epsilon} is unreachable; smallest achievable is {min_eps:.6g}",
            min_eps,
        )
    return best


def _calibrate_series(target, params, alpha_max, tolerance):
    def ok(sigma):
        return min_epsilon_series(params.with_sigma(sigma), alpha_max)[1] <= target

    # the series keeps a positive floor as sigma grows, so the target may be unreachable
    floor = min_epsilon_series(params.with_sigma(1e8 * math.sqrt(params.phi_sq)), alpha_max)[1]
    if floor > target:
        raise CalibrationError(
            f"target epsilon {target} is unreachable; smallest achievable is {floor:.6g}", floor
        )
    hi = math.sqrt(params.phi_sq)
    while not ok(hi):
        hi *= 2
    lo = hi / 2
    while ok(lo):
        hi, lo = lo, lo / 2
    while hi / lo > 1 + tolerance:
        mid = math.sqrt(lo * hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi
