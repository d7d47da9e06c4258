"""Countermeasures: noise-injection training, adversarial weight training, write-verify sweeps."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .device import sample_mc_perturbation
from .models import Network, TrainConfig, TrainHistory, train
from .search import SearchConfig, binary_search_c, optimize_perturbation

logger = logging.getLogger(__name__)

DEFAULT_SWEEP = (0.03, 0.02, 0.012, 0.009, 0.007, 0.005, 0.003, 0.001)

# noise draws use their own stream so they never disturb the shuffling RNG
_NOISE_STREAM = 1


def variation_aware_train(network: Network, x, y, config: TrainConfig, th_g: float,
                          on_epoch=None) -> Tuple[Network, TrainHistory]:
    """Train with a fresh uniform weight-noise instance in every forward pass.

    The noise is a constant in the graph, so gradients land on the clean
    weights. ``th_g = 0`` is exactly regular training.
    """
    if th_g < 0:
        raise ValueError("th_g must be >= 0")
    if th_g == 0:
        return train(network, x, y, config, on_epoch=on_epoch)
    rng = np.random.default_rng([config.seed, _NOISE_STREAM])

    def hook(net, xb, yb):
        return sample_mc_perturbation(net, th_g, rng).deltas

    return train(network, x, y, config, noise_hook=hook, on_epoch=on_epoch)


def inner_search_config(th_g: float, c: float = 1e-3, iters: int = 5, lr: Optional[float] = None) -> SearchConfig:
    """Truncated search used per mini-batch during adversarial training.

    Adam moves every coordinate by roughly ``lr`` per step, so ``th_g / 2``
    lets a handful of steps reach the edge of the box.
    """
    return SearchConfig(c=c, iters=iters, lr=th_g / 2 if lr is None else lr, th_g=th_g,
                        batch_size=10 ** 9)


def adversarial_train(network: Network, x, y, config: TrainConfig, th_g: float,
                      inner: Optional[SearchConfig] = None, full_search: bool = False,
                      on_epoch=None) -> Tuple[Network, TrainHistory]:
    """Train on worst-case-perturbed weights, one inner search per mini-batch.

    The inner search runs on the current mini-batch from dW = 0 with a fixed
    c and is clipped into the box. ``full_search`` runs the whole binary
    search instead, which is only practical for tiny problems. The returned
    network is the best clean-validation checkpoint.
    """
    if th_g < 0:
        raise ValueError("th_g must be >= 0")
    if th_g == 0:
        return train(network, x, y, config, on_epoch=on_epoch)
    inner = inner_search_config(th_g) if inner is None else replace(inner, th_g=th_g)

    def hook(net, xb, yb):
        if full_search:
            pert = binary_search_c(net, xb, yb, inner).perturbation
        else:
            pert, _ = optimize_perturbation(net, xb, yb, inner)
        return {k: np.clip(v, -th_g, th_g) for k, v in pert.deltas.items()}

    return train(network, x, y, config, noise_hook=hook, on_epoch=on_epoch)


@dataclass
class HardeningResult:
    method: str                          # regular | variation_aware | adversarial
    per_seed: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def std(self) -> float:
        return float(np.std(self.per_seed, ddof=1)) if len(self.per_seed) > 1 else float("nan")

    def to_json(self) -> dict:
        return {"method": self.method, "per_seed": list(self.per_seed), "mean": self.mean,
                "std": None if math.isnan(self.std) else self.std, "n_seeds": len(self.per_seed)}


def evaluate_hardening(method: str, networks: Sequence[Network], x, y, search: SearchConfig) -> HardeningResult:
    """Worst-case accuracy of each trained network under the full search."""
    return HardeningResult(method, [binary_search_c(n, x, y, search).worst_accuracy for n in networks])


@dataclass
class SweepSpec:
    th_gs: Tuple[float, ...] = DEFAULT_SWEEP
    seeds: int = 3
    drop: float = 0.05   # allowed accuracy degradation, as a fraction

    def __post_init__(self):
        self.th_gs = tuple(sorted((float(t) for t in self.th_gs), reverse=True))
        if not self.th_gs:
            raise ValueError("sweep needs at least one th_g")
        if len(set(self.th_gs)) != len(self.th_gs):
            raise ValueError("th_g values must be distinct")
        if min(self.th_gs) < 0:
            raise ValueError("th_g values must be >= 0")
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")


@dataclass
class SweepResult:
    rows: List[Tuple[float, int, float, float]] = field(default_factory=list)  # th_g, seed, clean, worst
    curve: List[Tuple[float, float, float]] = field(default_factory=list)      # th_g, mean, std
    clean_mean: float = 0.0
    star: Optional[float] = None
    drop: float = 0.05

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("th_g,seed,clean_acc,worst_acc\n")
            for t, s, c, w in self.rows:
                f.write(f"{t:.10g},{s},{c:.10g},{w:.10g}\n")

    def summary(self) -> dict:
        return {"star_th_g": self.star, "drop_threshold": self.drop, "clean_mean": self.clean_mean,
                "curve": [{"th_g": t, "mean": m, "std": None if math.isnan(s) else s} for t, m, s in self.curve]}


def write_verify_sweep(networks: Sequence[Network], x, y, sweep: SweepSpec, search: SearchConfig,
                       on_point: Optional[Callable[[float, int, float], None]] = None) -> SweepResult:
    """Worst-case accuracy versus th_g; the star is the loosest bound within ``drop`` of clean."""
    if len(networks) != sweep.seeds:
        raise ValueError(f"sweep expects {sweep.seeds} networks, got {len(networks)}")
    res = SweepResult(drop=sweep.drop)
    cleans = [n.accuracy(x, y) for n in networks]
    res.clean_mean = float(np.mean(cleans))
    for th in sweep.th_gs:
        worst = []
        for seed, (net, clean) in enumerate(zip(networks, cleans)):
            w = binary_search_c(net, x, y, replace(search, th_g=th)).worst_accuracy if th > 0 else clean
            worst.append(w)
            res.rows.append((th, seed, clean, w))
            if on_point is not None:
                on_point(th, seed, w)
        std = float(np.std(worst, ddof=1)) if len(worst) > 1 else float("nan")
        res.curve.append((th, float(np.mean(worst)), std))
    ok = [t for t, m, _ in res.curve if m >= res.clean_mean - sweep.drop - 1e-12]
    res.star = max(ok) if ok else None
    return res
