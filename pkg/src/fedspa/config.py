"""Experiment plan files (TOML).

A plan has four tables::

    [plan]    output_dir, target_epsilon, participation_bound, calibration_method
    [data]    source = "synthetic" | "idx" | "csv" and its settings, partitioning
    [round]   any RoundConfig field; clip = "auto" picks the median-gradient bound
    [sweep]   parameter name -> list of values; cells are the cartesian product

``scripts/plan_synthetic.toml`` is a complete example.
"""

import hashlib
import itertools
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from fedspa import data as fdata
from fedspa.engine import RoundConfig


class ConfigError(ValueError):
    pass


ROUND_FIELDS = {f.name: f for f in fields(RoundConfig)}

DATA_DEFAULTS = {
    "source": "synthetic",
    "n_samples": 2000,
    "input_dim": 5,
    "num_classes": 2,
    "separation": 5.0,
    "seed": 1,
    "test_fraction": 0.0,
    "train_images": None,
    "train_labels": None,
    "test_images": None,
    "test_labels": None,
    "train_csv": None,
    "test_csv": None,
    "samples_per_agent": None,
    "partition": "iid",
    "shards_per_agent": 2,
    "partition_seed": 0,
}

PLAN_DEFAULTS = {
    "output_dir": "runs",
    "target_epsilon": None,
    "participation_bound": "expected",  # or "worst"
    "calibration_method": "closed",  # or "series"
    "clip_samples": 100,
    "name": "plan",
}


@dataclass
class ExperimentPlan:
    base: dict  # RoundConfig keyword arguments, clip may be "auto"
    data: dict
    sweep: list = field(default_factory=list)  # [(name, [values])]
    settings: dict = field(default_factory=dict)
    source_bytes: bytes = b""

    @property
    def plan_hash(self) -> str:
        return hashlib.sha256(self.source_bytes).hexdigest()[:16]

    @property
    def output_dir(self) -> Path:
        return Path(self.settings["output_dir"])

    @property
    def target_epsilon(self):
        return self.settings["target_epsilon"]

    def cells(self) -> list[tuple[str, dict]]:
        """Expand the sweep into (cell name, RoundConfig kwargs), deduplicated after scheme coercion."""
        names = [name for name, _ in self.sweep]
        combos = itertools.product(*(values for _, values in self.sweep)) if self.sweep else [()]
        out, seen = [], set()
        for combo in combos:
            kw = dict(self.base)
            kw.update(zip(names, combo))
            if kw.get("scheme") == "fedavg":
                kw["p"], kw["sigma"] = 1.0, 0.0
            elif kw.get("scheme") == "dpfed":
                kw["p"] = 1.0
            key = tuple(sorted((k, repr(v)) for k, v in kw.items()))
            if key in seen:
                continue
            seen.add(key)
            label = "_".join(f"{n}={kw[n]}" for n in names) or "base"
            if "scheme" not in names and self.sweep:
                label = f"{kw.get('scheme', 'fedspa')}_{label}"
            out.append((label, kw))
        return out


def _check_keys(table: dict, allowed, where: str):
    unknown = set(table) - set(allowed)
    if unknown:
        raise ConfigError(f"[{where}] unknown field(s): {', '.join(sorted(unknown))}")


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read plan {path}: {exc}") from None
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    _check_keys(doc, {"plan", "data", "round", "sweep"}, "top level")

    settings = dict(PLAN_DEFAULTS)
    _check_keys(doc.get("plan", {}), PLAN_DEFAULTS, "plan")
    settings.update(doc.get("plan", {}))
    if settings["participation_bound"] not in ("expected", "worst"):
        raise ConfigError("[plan] participation_bound must be 'expected' or 'worst'")
    if settings["calibration_method"] not in ("closed", "series"):
        raise ConfigError("[plan] calibration_method must be 'closed' or 'series'")
    if not Path(settings["output_dir"]).is_absolute():
        settings["output_dir"] = str(path.parent / settings["output_dir"])

    data = dict(DATA_DEFAULTS)
    _check_keys(doc.get("data", {}), DATA_DEFAULTS, "data")
    data.update(doc.get("data", {}))
    for key in ("train_images", "train_labels", "test_images", "test_labels", "train_csv", "test_csv"):
        if data[key] is not None and not Path(data[key]).is_absolute():
            data[key] = str(path.parent / data[key])

    base = dict(doc.get("round", {}))
    _check_keys(base, ROUND_FIELDS, "round")

    sweep = []
    for name, values in doc.get("sweep", {}).items():
        if name not in ROUND_FIELDS:
            raise ConfigError(f"[sweep] {name!r} is not a round parameter")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"[sweep] {name} must be a non-empty list")
        sweep.append((name, values))

    plan = ExperimentPlan(base, data, sweep, settings, raw)
    for label, kw in plan.cells():
        try:
            make_round_config(kw, clip=1.0 if kw.get("clip") == "auto" else None)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"cell {label}: {exc}") from None
    return plan


def make_round_config(kw: dict, clip=None, sigma=None) -> RoundConfig:
    kw = dict(kw)
    if clip is not None:
        kw["clip"] = clip
    if sigma is not None:
        kw["sigma"] = sigma
    return RoundConfig(**kw)


def load_datasets(data: dict):
    """Build (train, test or None) datasets from a plan's [data] table."""
    src = data["source"]
    if src == "synthetic":
        full = fdata.gen_synthetic(data["n_samples"], data["input_dim"], data["num_classes"],
                                   data["separation"], data["seed"])
        frac = data["test_fraction"]
        if frac <= 0:
            return full, None
        n_test = max(1, int(math.floor(frac * len(full))))
        return full.subset(np.arange(n_test, len(full))), full.subset(np.arange(n_test))
    if src == "idx":
        train = fdata.load_idx(data["train_images"], data["train_labels"])
        test = None
        if data["test_images"]:
            test = fdata.load_idx(data["test_images"], data["test_labels"])
        return train, test
    if src == "csv":
        train = fdata.load_csv(data["train_csv"])
        test = fdata.load_csv(data["test_csv"], train.num_classes) if data["test_csv"] else None
        return train, test
    raise ConfigError(f"[data] unknown source {src!r}")


def make_partition(train, data: dict, n_agents: int):
    if data["samples_per_agent"]:
        # desk-scale subset: keep only what the agents need
        keep = n_agents * data["samples_per_agent"]
        if keep > len(train):
            raise ConfigError(f"[data] need {keep} samples, dataset has {len(train)}")
        rng = np.random.default_rng(data["partition_seed"])
        train = train.subset(np.sort(rng.choice(len(train), keep, replace=False)))
    part = fdata.partition(train, n_agents, data["partition"], data["partition_seed"], data["shards_per_agent"])
    return train, part
