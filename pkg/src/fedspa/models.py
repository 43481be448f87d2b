"""Softmax classifiers with analytic per-sample gradients.

Parameter layout (flattened, row-major), weight blocks first, then biases:

  logreg: W[input_dim, num_classes], b[num_classes]
  mlp1:   W1[input_dim, hidden], W2[hidden, num_classes], b1[hidden], b2[num_classes]

The MLP uses a ReLU hidden layer.
"""

from dataclasses import dataclass

import numpy as np

from fedspa.errors import InvalidParameter
from fedspa.mechanism import ClipSpec, clip_per_sample

KINDS = ("logreg", "mlp1")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameter(f"model kind must be one of {KINDS}, got {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise InvalidParameter("need input_dim >= 1 and num_classes >= 2")
        if self.kind == "logreg" and self.hidden_dim != 0:
            raise InvalidParameter("logreg has no hidden layer")
        if self.kind == "mlp1" and self.hidden_dim < 1:
            raise InvalidParameter("mlp1 needs hidden_dim >= 1")

    @property
    def param_dim(self) -> int:
        i, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if self.kind == "logreg":
            return i * c + c
        return i * h + h * c + h + c

    def unpack(self, theta):
        """Views of the weight/bias blocks of ``theta``."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.param_dim,):
            raise InvalidParameter(f"theta has shape {theta.shape}, expected ({self.param_dim},)")
        i, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if self.kind == "logreg":
            return theta[: i * c].reshape(i, c), theta[i * c :]
        o = 0
        W1 = theta[o : o + i * h].reshape(i, h); o += i * h
        W2 = theta[o : o + h * c].reshape(h, c); o += h * c
        b1 = theta[o : o + h]; o += h
        b2 = theta[o : o + c]
        return W1, W2, b1, b2


def init_params(spec: ModelSpec, rng=None, scale: float = 0.1) -> np.ndarray:
    """Zeros for logreg; small Gaussian weights (zero biases) for the MLP."""
    theta = np.zeros(spec.param_dim)
    if spec.kind == "mlp1":
        rng = np.random.default_rng(rng)
        n_w = spec.input_dim * spec.hidden_dim + spec.hidden_dim * spec.num_classes
        theta[:n_w] = scale * rng.standard_normal(n_w)
    return theta


def _as_batch(spec, X, y):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    if X.shape[1] != spec.input_dim:
        raise InvalidParameter(f"features have dim {X.shape[1]}, expected {spec.input_dim}")
    if X.shape[0] != y.shape[0]:
        raise InvalidParameter("features and labels differ in length")
    if np.any(y < 0) or np.any(y >= spec.num_classes):
        raise InvalidParameter(f"label outside [0, {spec.num_classes})")
    return X, y.astype(np.int64)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _forward(spec, theta, X):
    if spec.kind == "logreg":
        W, b = spec.unpack(theta)
        return X @ W + b, None
    W1, W2, b1, b2 = spec.unpack(theta)
    pre = X @ W1 + b1
    hid = np.maximum(pre, 0.0)
    return hid @ W2 + b2, (pre, hid)


def logits(spec: ModelSpec, theta, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return _forward(spec, theta, X)[0]


def losses(spec: ModelSpec, theta, X, y) -> np.ndarray:
    """Per-sample cross-entropy."""
    X, y = _as_batch(spec, X, y)
    z, _ = _forward(spec, theta, X)
    return -_log_softmax(z)[np.arange(len(y)), y]


def loss(spec: ModelSpec, theta, sample) -> float:
    x, label = sample
    return float(losses(spec, theta, x, label)[0])


def mean_loss(spec, theta, X, y) -> float:
    return float(losses(spec, theta, X, y).mean())


def accuracy(spec, theta, X, y) -> float:
    X, y = _as_batch(spec, X, y)
    return float(np.mean(np.argmax(logits(spec, theta, X), axis=1) == y))


def per_sample_grads(spec: ModelSpec, theta, X, y) -> np.ndarray:
    """Gradients of the per-sample losses, shape ``(B, param_dim)``."""
    X, y = _as_batch(spec, X, y)
    n = len(y)
    z, cache = _forward(spec, theta, X)
    dz = np.exp(_log_softmax(z))
    dz[np.arange(n), y] -= 1.0  # softmax - onehot
    if spec.kind == "logreg":
        gW = X[:, :, None] * dz[:, None, :]
        return np.concatenate([gW.reshape(n, -1), dz], axis=1)
    _, W2, _, _ = spec.unpack(theta)
    pre, hid = cache
    gW2 = hid[:, :, None] * dz[:, None, :]
    dh = (dz @ W2.T) * (pre > 0)
    gW1 = X[:, :, None] * dh[:, None, :]
    return np.concatenate([gW1.reshape(n, -1), gW2.reshape(n, -1), dh, dz], axis=1)


def grad_per_sample(spec: ModelSpec, theta, sample) -> np.ndarray:
    x, label = sample
    return per_sample_grads(spec, theta, x, label)[0]


def minibatch_grad(spec: ModelSpec, theta, batch, clip: ClipSpec | None = None) -> np.ndarray:
    """Mean of the per-sample gradients of ``batch = (X, y)``, each clipped first if ``clip`` is given."""
    X, y = batch
    if len(np.atleast_1d(y)) == 0:
        raise InvalidParameter("empty batch")
    g = per_sample_grads(spec, theta, X, y)
    if clip is not None:
        g = clip_per_sample(g, clip)
    return g.mean(axis=0)
