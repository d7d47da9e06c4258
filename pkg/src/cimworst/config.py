"""INI experiment configuration.

Every key has a default; a config file only lists what it changes. Sections
and keys (defaults in brackets)::

    [experiment]
    model       [lenet]      lenet | convnet
    dataset     [mnist]      mnist | cifar10 | digits (offline stand-in)
    data_dir    []           empty: $ARTIFACT_DATA_DIR/<dataset> or data/<dataset>
    checkpoint  []           trained weights for attack / mc / pgd / analyze
    checkpoints []           comma list, one per seed, for sweep (empty: train them)
    seeds       [0]          comma list
    out         [runs/out]
    th_g        []           empty: derived from [device]
    test_subset [0]          evaluate on the first N test samples (0: all)
    train_subset [0]         train on the first N training samples (0: all)
    figures     [true]       render PNG figures beside the CSV/JSON outputs

    [quant]     weight_bits [4], activation_bits [4], quantize_activations [true]
    [device]    M [4], K [2], th [0.06], weight_scale [0.1]
    [train]     optimizer [adam], lr [0.001], batch_size [64], epochs [20], momentum [0.9],
                weight_decay [0], val_size [5000], lr_decay [cosine]
    [search]    c [0.001], lr [1e-05], iters [500], surrogate [p2], c_lo [1e-08], c_hi [0.1],
                max_rounds [12], eval_subset_size [0 = all], batch_size [1000], init [zeros],
                init_scale [0.1]
    [mc]        n_runs [10000], distribution [uniform], n_jobs [1]
    [pgd]       steps [40], step_size [0 = th_g / 10]
    [hardening] th_gs [0.03,0.02,0.012,0.009,0.007,0.005,0.003,0.001], drop [0.05],
                inner_iters [5], inner_c [0.001], inner_lr [0 = th_g / 2], full_search [false]
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple

from .device import DeviceConfig, compute_thg
from .hardening import DEFAULT_SWEEP
from .models import ARCHITECTURES, QuantConfig, TrainConfig
from .search import SURROGATES, SearchConfig

DATASETS = ("mnist", "cifar10", "digits")
DATASET_ARCH = {"mnist": "lenet", "digits": "lenet", "cifar10": "convnet"}


class ConfigError(ValueError):
    pass


@dataclass
class SearchSection:
    c: float = 1e-3
    lr: float = 1e-5
    iters: int = 500
    surrogate: str = "p2"
    c_lo: float = 1e-8
    c_hi: float = 1e-1
    max_rounds: int = 12
    eval_subset_size: int = 0
    batch_size: int = 1000
    init: str = "zeros"
    init_scale: float = 0.1


@dataclass
class MCSection:
    n_runs: int = 10000
    distribution: str = "uniform"
    n_jobs: int = 1


@dataclass
class PGDSection:
    steps: int = 40
    step_size: float = 0.0


@dataclass
class HardeningSection:
    th_gs: Tuple[float, ...] = DEFAULT_SWEEP
    drop: float = 0.05
    inner_iters: int = 5
    inner_c: float = 1e-3
    inner_lr: float = 0.0
    full_search: bool = False


@dataclass
class ExperimentSection:
    model: str = "lenet"
    dataset: str = "mnist"
    data_dir: str = ""
    checkpoint: str = ""
    checkpoints: Tuple[str, ...] = ()
    seeds: Tuple[int, ...] = (0,)
    out: str = "runs/out"
    th_g: Optional[float] = None
    test_subset: int = 0
    train_subset: int = 0
    figures: bool = True


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    quant: QuantConfig = field(default_factory=QuantConfig)
    device: DeviceConfig = field(default_factory=DeviceConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchSection = field(default_factory=SearchSection)
    mc: MCSection = field(default_factory=MCSection)
    pgd: PGDSection = field(default_factory=PGDSection)
    hardening: HardeningSection = field(default_factory=HardeningSection)

    # -- derived ---------------------------------------------------------
    @property
    def th_g(self) -> float:
        e = self.experiment.th_g
        return compute_thg(self.device) if e is None else e

    @property
    def data_dir(self) -> str:
        if self.experiment.data_dir:
            return self.experiment.data_dir
        root = os.environ.get("ARTIFACT_DATA_DIR", "data")
        return str(Path(root) / self.experiment.dataset)

    def search_config(self, seed: int = 0, th_g: Optional[float] = None) -> SearchConfig:
        s = self.search
        return SearchConfig(c=s.c, lr=s.lr, iters=s.iters, surrogate=s.surrogate,
                            th_g=self.th_g if th_g is None else th_g, c_lo=s.c_lo, c_hi=s.c_hi,
                            max_rounds=s.max_rounds, eval_subset_size=s.eval_subset_size or None,
                            batch_size=s.batch_size, init=s.init, init_scale=s.init_scale, seed=seed)

    def train_config(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed)

    def validate(self, needs_checkpoint: bool = False) -> None:
        e = self.experiment
        if e.model not in ARCHITECTURES:
            raise ConfigError(f"[experiment] model: unknown {e.model!r}")
        if e.dataset not in DATASETS:
            raise ConfigError(f"[experiment] dataset: unknown {e.dataset!r}")
        if DATASET_ARCH[e.dataset] != e.model:
            raise ConfigError(f"[experiment] model {e.model!r} does not fit dataset {e.dataset!r}")
        if not e.seeds:
            raise ConfigError("[experiment] seeds: list is empty")
        if e.th_g is not None and e.th_g < 0:
            raise ConfigError("[experiment] th_g must be >= 0")
        if self.search.surrogate not in SURROGATES:
            raise ConfigError(f"[search] surrogate: unknown {self.search.surrogate!r}")
        if self.mc.distribution not in ("uniform", "truncated_gaussian"):
            raise ConfigError(f"[mc] distribution: unknown {self.mc.distribution!r}")
        if needs_checkpoint:
            if not e.checkpoint:
                raise ConfigError("[experiment] checkpoint is required for this pipeline")
            if not Path(e.checkpoint).is_file():
                raise ConfigError(f"[experiment] checkpoint {e.checkpoint!r} does not exist")
        for c in e.checkpoints:
            if not Path(c).is_file():
                raise ConfigError(f"[experiment] checkpoints: {c!r} does not exist")
        if e.checkpoints and len(e.checkpoints) != len(e.seeds):
            raise ConfigError("[experiment] checkpoints and seeds must have the same length")
        try:
            self.search_config()
        except ValueError as err:
            raise ConfigError(f"[search] {err}") from None

    # -- serialization ---------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for sec in fields(self):
            obj = getattr(self, sec.name)
            cp[sec.name] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
        from io import StringIO
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, default, name: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple) or name in ("seeds", "checkpoints", "th_gs"):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            conv = {"seeds": int, "th_gs": float}.get(name, str)
            return tuple(conv(i) for i in items)
        if default is None:          # optional float
            return float(raw) if raw else None
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def from_mapping(sections) -> ExperimentConfig:
    """Build a config from ``{section: {key: string}}``; unknown keys are errors."""
    base = ExperimentConfig()
    built = {}
    for sec in fields(base):
        obj = getattr(base, sec.name)
        given = {k.lower(): v for k, v in sections.get(sec.name, {}).items()}
        kw = {}
        for f in fields(obj):
            if f.name.lower() in given:
                kw[f.name] = _parse(given.pop(f.name.lower()), getattr(obj, f.name), f.name)
        if given:
            raise ConfigError(f"[{sec.name}] unknown keys: {', '.join(sorted(given))}")
        try:
            built[sec.name] = dataclasses.replace(obj, **kw)
        except (ValueError, TypeError) as err:
            raise ConfigError(f"[{sec.name}] {err}") from None
    unknown = set(sections) - {f.name for f in fields(base)} - {"DEFAULT"}
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")
    return ExperimentConfig(**built)


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Read an INI file (or defaults when ``path`` is None) and apply overrides.

    ``overrides`` is ``{"section.key": "value"}``.
    """
    cp = configparser.ConfigParser()
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path!r} does not exist")
        try:
            cp.read(path)
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from None
    sections = {s: dict(cp[s]) for s in cp.sections()}
    for key, val in (overrides or {}).items():
        sec, _, k = key.partition(".")
        sections.setdefault(sec, {})[k] = val
    return from_mapping(sections)
