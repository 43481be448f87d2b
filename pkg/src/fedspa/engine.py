"""Federated training loop: Fed-SPA, FedAvg and DP-Fed.

One round: the server samples agents, each selected agent runs ``tau`` local
steps from the broadcast model and uploads its model delta, and the server
folds the mean delta into the global model either by plain averaging or by
the Adam-style adaptive update.

Randomness follows the hierarchy in :mod:`fedspa.rng`: agent selection uses
the round stream, and each (round, agent) pair owns separate streams for
its mask, its noise and its minibatches. Deltas are reduced in ascending
agent order, so a run is a pure function of (config, data, master_seed).
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from fedspa import accountant, rng as rngs
from fedspa.data import Dataset, Partition, sample_minibatch
from fedspa.errors import InvalidParameter, NoFeasibleAlpha, ProtocolError
from fedspa.mechanism import ClipSpec, NoiseSpec, perturb_dense, perturb_on_mask
from fedspa.models import ModelSpec, accuracy, init_params, mean_loss, minibatch_grad, per_sample_grads
from fedspa.sparsify import SparseMask, apply_scaled, k_for_ratio, payload_bits, sample_mask

SCHEMES = ("fedspa", "fedavg", "dpfed")
SERVER_UPDATES = ("adaptive", "average")
LR_DECAYS = ("none", "inv_sqrt_t")
V_INITS = ("kappa", "tau")


@dataclass(frozen=True)
class RoundConfig:
    scheme: str = "fedspa"
    server_update: str = "adaptive"
    n_agents: int = 10
    sample_rate: float = 1.0
    tau: int = 5
    eta_l: float = 0.1
    eta_g: float = 1.0
    lr_decay: str = "none"
    beta1: float = 0.0
    beta2: float = 0.0
    kappa: float = 1e-3
    v_init: str = "kappa"  # v_{-1} = kappa^2, or tau^2
    p: float = 1.0
    sigma: float = 0.0
    clip: float | None = None  # per-coordinate bound; None disables clipping
    B: int = 10
    T: int = 10
    master_seed: int = 0
    model: str = "logreg"
    hidden_dim: int = 0
    init_scale: float = 0.1
    delta: float = 1e-3
    alpha_max: int = accountant.DEFAULT_ALPHA_MAX
    accounting: str = "closed"  # or "series"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InvalidParameter(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.server_update not in SERVER_UPDATES:
            raise InvalidParameter(f"server_update must be one of {SERVER_UPDATES}")
        if self.lr_decay not in LR_DECAYS:
            raise InvalidParameter(f"lr_decay must be one of {LR_DECAYS}")
        if self.accounting not in ("closed", "series"):
            raise InvalidParameter("accounting must be 'closed' or 'series'")
        if self.v_init not in V_INITS:
            raise InvalidParameter(f"v_init must be one of {V_INITS}")
        if self.scheme == "fedavg" and (self.sigma != 0 or self.p != 1):
            raise InvalidParameter("fedavg requires sigma = 0 and p = 1")
        if self.scheme == "dpfed" and self.p != 1:
            raise InvalidParameter("dpfed requires p = 1")
        if not 0 < self.sample_rate <= 1:
            raise InvalidParameter(f"sample_rate must be in (0, 1], got {self.sample_rate}")
        if not 0 < self.p <= 1:
            raise InvalidParameter(f"p must be in (0, 1], got {self.p}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidParameter("beta1 and beta2 must lie in [0, 1)")
        if not self.kappa > 0:
            raise InvalidParameter("kappa must be > 0")
        if self.sigma < 0 or self.tau < 0 or self.T < 0 or self.B < 1 or self.n_agents < 1:
            raise InvalidParameter("need sigma, tau, T >= 0 and B, n_agents >= 1")
        if self.sigma > 0 and self.clip is None:
            raise InvalidParameter("noisy schemes need a clipping bound")
        if self.clip is not None and not self.clip > 0:
            raise InvalidParameter("clip must be > 0")

    def replace(self, **changes) -> "RoundConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ServerState:
    theta: np.ndarray
    u: np.ndarray
    v: np.ndarray
    round: int = 0

    @classmethod
    def initial(cls, theta0, cfg: RoundConfig) -> "ServerState":
        theta0 = np.array(theta0, dtype=np.float64)
        v0 = cfg.kappa**2 if cfg.v_init == "kappa" else float(cfg.tau) ** 2
        # tau = 0 would give v = 0; keep v strictly positive
        v0 = max(v0, cfg.kappa**2)
        return cls(theta0, np.zeros_like(theta0), np.full_like(theta0, v0))


@dataclass(frozen=True)
class RoundRecord:
    t: int
    selected: tuple
    loss_train: float
    acc_train: float
    loss_test: float | None
    acc_test: float | None
    bits_uplink: int  # (index, value) encoding, summed over selected agents
    bits_uplink_cum: int
    bits_ideal: float  # p * d * 32 per selected agent, averaged over all n agents
    bits_ideal_cum: float
    participation: tuple  # I_i after this round
    eps_realized_max: float | None  # None: no noise; inf: no feasible order


@dataclass
class RunResult:
    records: list
    state: ServerState
    spec: ModelSpec

    @property
    def theta(self) -> np.ndarray:
        return self.state.theta


def model_spec(cfg: RoundConfig, dataset: Dataset) -> ModelSpec:
    return ModelSpec(cfg.model, dataset.input_dim, dataset.num_classes, cfg.hidden_dim)


def clip_spec(cfg: RoundConfig, dim: int) -> ClipSpec | None:
    return None if cfg.clip is None else ClipSpec(cfg.clip, dim)


def lr_scale(cfg: RoundConfig, t: int) -> float:
    return 1.0 / math.sqrt(t + 1) if cfg.lr_decay == "inv_sqrt_t" else 1.0


# -- local updates ----------------------------------------------------------

def _batch(agent_data: Dataset, B: int, batch_rng):
    idx = sample_minibatch(agent_data, B, batch_rng)
    return agent_data.features[idx], agent_data.labels[idx]


def local_update_fedspa(spec: ModelSpec, theta_start, agent_data: Dataset, cfg: RoundConfig,
                        mask: SparseMask, noise_rng, batch_rng, eta_l: float | None = None) -> np.ndarray:
    """Run ``tau`` steps of ``theta -= eta_l * S(g + b)`` with one mask, return the delta."""
    eta_l = cfg.eta_l if eta_l is None else eta_l
    clip = clip_spec(cfg, spec.param_dim)
    noise = NoiseSpec(cfg.sigma, noise_rng)
    theta = np.array(theta_start, dtype=np.float64)
    for _ in range(cfg.tau):
        g = minibatch_grad(spec, theta, _batch(agent_data, cfg.B, batch_rng), clip)
        theta = theta - eta_l * apply_scaled(mask, perturb_on_mask(g, mask, noise))
    return theta - theta_start


def local_update_fedavg(spec: ModelSpec, theta_start, agent_data: Dataset, cfg: RoundConfig,
                        noise_rng, batch_rng, eta_l: float | None = None) -> np.ndarray:
    """Plain local SGD; for ``dpfed`` dense Gaussian noise is added to each clipped minibatch gradient."""
    eta_l = cfg.eta_l if eta_l is None else eta_l
    clip = clip_spec(cfg, spec.param_dim)
    noise = NoiseSpec(cfg.sigma if cfg.scheme == "dpfed" else 0.0, noise_rng)
    theta = np.array(theta_start, dtype=np.float64)
    for _ in range(cfg.tau):
        g = minibatch_grad(spec, theta, _batch(agent_data, cfg.B, batch_rng), clip)
        theta = theta - eta_l * perturb_dense(g, noise)
    return theta - theta_start


# -- server -----------------------------------------------------------------

def _mean_delta(deltas) -> np.ndarray:
    if len(deltas) == 0:
        raise ProtocolError("no agent updates to aggregate")
    total = np.zeros_like(deltas[0])
    for d in deltas:  # fixed reduction order
        total = total + d
    return total / len(deltas)


def server_average(theta, deltas) -> np.ndarray:
    return np.asarray(theta, dtype=np.float64) + _mean_delta(deltas)


def server_adaptive(state: ServerState, deltas, cfg: RoundConfig, eta_g: float | None = None) -> ServerState:
    eta_g = cfg.eta_g if eta_g is None else eta_g
    mean = _mean_delta(deltas)
    u = cfg.beta1 * state.u + (1 - cfg.beta1) * mean
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * u * u
    theta = state.theta + eta_g * u / (np.sqrt(v) + cfg.kappa)
    return ServerState(theta, u, v, state.round + 1)


def select_agents(n: int, r: float, rng) -> np.ndarray:
    """Uniform subset of ``ceil(r * n)`` agents, sorted."""
    if not 0 < r <= 1:
        raise InvalidParameter(f"sample rate must be in (0, 1], got {r}")
    size = max(1, math.ceil(round(r * n, 9)))
    if size >= n:
        return np.arange(n)
    return np.sort(rngs.as_generator(rng).choice(n, size=size, replace=False))


def comm_cost_bits(p: float, d: int, T: int, r: float, bits_per_value: int = 32) -> float:
    """Idealized per-agent uplink volume ``p * d * bits * T * r``."""
    if p < 0 or d < 0 or T < 0 or r < 0:
        raise InvalidParameter("cost inputs must be nonnegative")
    return p * d * bits_per_value * T * r


def bits_to_mb(bits: float) -> float:
    return bits / 8 / 1e6


# -- privacy bookkeeping ----------------------------------------------------

def accountant_params(cfg: RoundConfig, dim: int, m: int, participation: int, sigma: float | None = None):
    G = ClipSpec(cfg.clip, dim).G
    # the ratio actually released, k / d, not the nominal one
    p = k_for_ratio(dim, cfg.p) / dim if cfg.scheme == "fedspa" else 1.0
    return accountant.AccountantParams(
        B=cfg.B, m=m, sigma=cfg.sigma if sigma is None else sigma, p=p, G=G,
        tau=cfg.tau, participation=participation, delta=cfg.delta,
    )


def realized_epsilon(cfg: RoundConfig, dim: int, sizes, counts, _cache=None) -> float | None:
    """Largest epsilon over agents given realized participation counts."""
    if cfg.sigma == 0:
        return None
    cache = {} if _cache is None else _cache
    worst = 0.0
    for m, count in zip(sizes, counts):
        key = (int(m), int(count))
        if key not in cache:
            params = accountant_params(cfg, dim, *key)
            if cfg.accounting == "series":
                cache[key] = accountant.min_epsilon_series(params, cfg.alpha_max)[1]
            else:
                try:
                    cache[key] = accountant.min_epsilon(params, cfg.alpha_max)[1]
                except NoFeasibleAlpha:
                    cache[key] = math.inf
        worst = max(worst, cache[key])
    return worst


# -- the protocol -----------------------------------------------------------

def run(cfg: RoundConfig, dataset: Dataset, partition: Partition, test_set: Dataset | None = None,
        theta0=None, on_round=None) -> RunResult:
    """Execute ``cfg.T`` rounds and return per-round records and the final server state.

    ``on_round(record)`` is called after every round, so callers can stream results.
    """
    if partition.n_agents != cfg.n_agents:
        raise InvalidParameter(f"partition has {partition.n_agents} agents, config says {cfg.n_agents}")
    spec = model_spec(cfg, dataset)
    d = spec.param_dim
    if theta0 is None:
        theta0 = init_params(spec, rngs.stream(cfg.master_seed, rngs.INIT), cfg.init_scale)
    state = ServerState.initial(theta0, cfg)
    agents = [dataset.subset(idx) for idx in partition.agent_indices]
    sizes = [len(a) for a in agents]
    if cfg.B > min(sizes):
        raise InvalidParameter(f"batch size {cfg.B} exceeds smallest local dataset ({min(sizes)})")
    train_idx = np.concatenate(partition.agent_indices)
    X_train, y_train = dataset.features[train_idx], dataset.labels[train_idx]
    p_nominal = cfg.p if cfg.scheme == "fedspa" else 1.0
    k = k_for_ratio(d, p_nominal)
    counts = np.zeros(cfg.n_agents, dtype=np.int64)
    eps_cache = {}
    records = []
    bits_cum, ideal_cum = 0, 0.0

    for t in range(cfg.T):
        try:
            scale = lr_scale(cfg, t)
            W = select_agents(cfg.n_agents, cfg.sample_rate, rngs.round_stream(cfg.master_seed, t, rngs.SELECT))
            deltas, bits = [], 0
            for i in W:
                noise_rng = rngs.agent_stream(cfg.master_seed, t, i, rngs.NOISE)
                batch_rng = rngs.agent_stream(cfg.master_seed, t, i, rngs.BATCH)
                if cfg.scheme == "fedspa":
                    mask = sample_mask(d, k, rngs.agent_stream(cfg.master_seed, t, i, rngs.MASK))
                    delta = local_update_fedspa(spec, state.theta, agents[i], cfg, mask, noise_rng, batch_rng,
                                                cfg.eta_l * scale)
                else:
                    mask = SparseMask.full(d)
                    delta = local_update_fedavg(spec, state.theta, agents[i], cfg, noise_rng, batch_rng,
                                                cfg.eta_l * scale)
                deltas.append(delta)
                bits += payload_bits(mask)
            if cfg.server_update == "adaptive":
                state = server_adaptive(state, deltas, cfg, cfg.eta_g * scale)
            else:
                state = ServerState(server_average(state.theta, deltas), state.u, state.v, state.round + 1)
            if not np.all(np.isfinite(state.theta)):
                raise ProtocolError("global model diverged to non-finite values")
        except Exception as exc:
            raise ProtocolError(f"round {t} failed: {exc}") from exc

        counts[W] += 1
        bits_cum += bits
        ideal = len(W) * p_nominal * d * 32 / cfg.n_agents
        ideal_cum += ideal
        test_loss = test_acc = None
        if test_set is not None:
            test_loss = mean_loss(spec, state.theta, test_set.features, test_set.labels)
            test_acc = accuracy(spec, state.theta, test_set.features, test_set.labels)
        records.append(RoundRecord(
            t=t,
            selected=tuple(int(i) for i in W),
            loss_train=mean_loss(spec, state.theta, X_train, y_train),
            acc_train=accuracy(spec, state.theta, X_train, y_train),
            loss_test=test_loss,
            acc_test=test_acc,
            bits_uplink=bits,
            bits_uplink_cum=bits_cum,
            bits_ideal=ideal,
            bits_ideal_cum=ideal_cum,
            participation=tuple(int(c) for c in counts),
            eps_realized_max=realized_epsilon(cfg, d, sizes, counts, eps_cache),
        ))
        if on_round is not None:
            on_round(records[-1])
    return RunResult(records, state, spec)


def calibrate_clip(spec: ModelSpec, theta0, dataset: Dataset, partition: Partition, n_samples: int,
                   seed=0, pooled: bool = True):
    """Per-coordinate clipping bound from the median absolute gradient coordinate at ``theta0``.

    Samples ``n_samples`` per-sample gradients from the agents' data. With
    ``pooled`` the median runs over all coordinates of all gradients and a
    scalar is returned; otherwise a per-coordinate median vector is returned.
    A median of 0 is replaced by the median of the nonzero values, so the
    bound is positive whenever any sampled coordinate is nonzero.
    """
    if n_samples < 1:
        raise InvalidParameter("n_samples must be >= 1")
    pool = np.concatenate(partition.agent_indices)
    rng = np.random.default_rng(seed)
    idx = rng.choice(pool, size=n_samples, replace=n_samples > pool.size)
    grads = np.abs(per_sample_grads(spec, theta0, dataset.features[idx], dataset.labels[idx]))
    return median_abs(grads, pooled)


def median_abs(grads, pooled: bool = True):
    grads = np.abs(np.atleast_2d(np.asarray(grads, dtype=np.float64)))
    if grads.size == 0:
        raise InvalidParameter("no gradients to take a median over")
    if pooled:
        c = float(np.median(grads))
        nonzero = grads[grads > 0]
        # mostly-zero gradients (e.g. inactive ReLUs) would give c = 0
        return float(np.median(nonzero)) if c == 0 and nonzero.size else c
    med = np.median(grads, axis=0)
    for j in np.flatnonzero(med == 0):
        col = grads[:, j][grads[:, j] > 0]
        if col.size:
            med[j] = np.median(col)
    return med
