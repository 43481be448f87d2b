"""Datasets and federated partitions.

Loaders for MNIST IDX files and a simple CSV layout, a synthetic Gaussian
cluster generator, IID / label-shard partitioning and per-iteration
minibatch sampling.
"""

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedspa.errors import FormatError, InvalidParameter
from fedspa.rng import as_generator

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (N, input_dim) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise InvalidParameter(f"bad shapes: features {X.shape}, labels {y.shape}")
        if X.shape[0] < 1:
            raise InvalidParameter("dataset is empty")
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise InvalidParameter(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(X)):
            raise InvalidParameter("non-finite feature value")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)


@dataclass(frozen=True)
class Partition:
    agent_indices: tuple  # one sorted int64 array per agent

    def __post_init__(self):
        arrays = tuple(np.asarray(a, dtype=np.int64) for a in self.agent_indices)
        if any(a.size == 0 for a in arrays):
            raise InvalidParameter("every agent needs at least one sample")
        allidx = np.concatenate(arrays)
        if np.unique(allidx).size != allidx.size:
            raise InvalidParameter("agent index lists overlap")
        object.__setattr__(self, "agent_indices", arrays)

    @property
    def n_agents(self) -> int:
        return len(self.agent_indices)

    def sizes(self) -> list[int]:
        return [int(a.size) for a in self.agent_indices]


# -- generators and loaders -------------------------------------------------

def gen_synthetic(n_samples, input_dim, num_classes, separation, seed) -> Dataset:
    """Unit-variance Gaussian clusters whose means are ``separation`` apart.

    With ``input_dim >= num_classes`` the means sit on scaled basis vectors, so
    every pair is exactly ``separation`` apart; otherwise they are spaced along
    the first axis.
    """
    if n_samples < num_classes or num_classes < 2 or input_dim < 1:
        raise InvalidParameter("need n_samples >= num_classes >= 2 and input_dim >= 1")
    if separation < 0:
        raise InvalidParameter("separation must be nonnegative")
    rng = np.random.default_rng(seed)
    means = np.zeros((num_classes, input_dim))
    if input_dim >= num_classes:
        means[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
    else:
        means[:, 0] = separation * np.arange(num_classes)
    labels = rng.permutation(np.arange(n_samples) % num_classes)
    X = means[labels] + rng.standard_normal((n_samples, input_dim))
    return Dataset(X, labels, num_classes)


def _open_bytes(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data


def _idx_header(buf: bytes, magic: int, ndims: int, name: str):
    if len(buf) < 4 + 4 * ndims:
        raise FormatError(f"{name}: truncated header", offset=len(buf))
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise FormatError(f"{name}: bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    return struct.unpack_from(f">{ndims}I", buf, 4)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]. ``.gz`` files are decompressed."""
    img = _open_bytes(images_path)
    lab = _open_bytes(labels_path)
    n_img, rows, cols = _idx_header(img, IDX_IMAGES_MAGIC, 3, "images")
    (n_lab,) = _idx_header(lab, IDX_LABELS_MAGIC, 1, "labels")
    if n_img != n_lab:
        raise FormatError(f"image count {n_img} != label count {n_lab}", offset=4)
    need = 16 + n_img * rows * cols
    if len(img) < need:
        raise FormatError(f"images: truncated, expected {need} bytes, got {len(img)}", offset=len(img))
    if len(lab) < 8 + n_lab:
        raise FormatError(f"labels: truncated, expected {8 + n_lab} bytes, got {len(lab)}", offset=len(lab))
    pixels = np.frombuffer(img, dtype=np.uint8, count=n_img * rows * cols, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n_lab, offset=8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise FormatError(f"label {labels[bad]} >= num_classes {num_classes}", offset=8 + bad)
    X = pixels.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    return Dataset(X, labels, num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels ``(N,)`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """Header row, then one sample per row: label first, features after."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty CSV file", offset=1) from None
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"expected {len(header)} fields, got {len(row)}", offset=lineno)
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise FormatError(f"unparsable value: {exc}", offset=lineno) from None
    if not rows:
        raise FormatError("CSV has no samples", offset=2)
    y = np.array(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1
    return Dataset(np.array(rows, dtype=np.float64), y, max(num_classes, 2))


def write_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{j}" for j in range(dataset.input_dim)])
        for x, label in zip(dataset.features, dataset.labels):
            w.writerow([int(label)] + [repr(float(v)) for v in x])


# -- partitioning and sampling ----------------------------------------------

def partition(dataset: Dataset, n_agents: int, strategy: str = "iid", seed=0, shards_per_agent: int = 1) -> Partition:
    """Split sample indices among agents.

    ``iid``: shuffle and deal ``N // n_agents`` samples to each agent.
    ``label_shards``: sort by label, cut into ``n_agents * shards_per_agent``
    equal shards and deal ``shards_per_agent`` random shards to each agent.
    Leftover samples are dropped in both cases.
    """
    N = len(dataset)
    if not 1 <= n_agents <= N:
        raise InvalidParameter(f"need 1 <= n_agents <= N={N}, got {n_agents}")
    rng = np.random.default_rng(seed)
    if strategy == "iid":
        per = N // n_agents
        perm = rng.permutation(N)
        return Partition(tuple(np.sort(perm[i * per : (i + 1) * per]) for i in range(n_agents)))
    if strategy == "label_shards":
        n_shards = n_agents * shards_per_agent
        if shards_per_agent < 1 or n_shards > N:
            raise InvalidParameter(f"{n_shards} shards do not fit in {N} samples")
        order = np.argsort(dataset.labels, kind="stable")
        size = N // n_shards
        shards = [order[s * size : (s + 1) * size] for s in range(n_shards)]
        deal = rng.permutation(n_shards)
        return Partition(tuple(
            np.sort(np.concatenate([shards[s] for s in deal[a * shards_per_agent : (a + 1) * shards_per_agent]]))
            for a in range(n_agents)
        ))
    raise InvalidParameter(f"unknown partition strategy {strategy!r}")


def sample_minibatch(agent_data, B: int, rng) -> np.ndarray:
    """``B`` distinct local indices drawn uniformly without replacement.

    ``agent_data`` is the agent's :class:`Dataset` or just its size ``m``.
    """
    m = agent_data if isinstance(agent_data, (int, np.integer)) else len(agent_data)
    if not 1 <= B <= m:
        raise InvalidParameter(f"need 1 <= B <= m, got B={B}, m={m}")
    return as_generator(rng).choice(m, size=B, replace=False)
