"""NVM bit-slicing and write-verify weight perturbation model.

An M-bit weight is split over M/K devices of K bits each. Write-verify
bounds every device's programming error by ``th``, so the weight error is
bounded by ``th_g = sum_i th * 2**(i*K)`` (times ``weight_scale`` to land in
the network's weight units).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional

import numpy as np

from .numerics import load_tensors, save_tensors

BOUND_EPS = 1e-12


class BoundViolation(ValueError):
    pass


@dataclass(frozen=True)
class DeviceConfig:
    M: int = 4
    K: int = 2
    th: float = 0.06
    # maps the integer-grid sum onto normalized weights; 0.1 gives th_g = 0.03
    # for the default M=4, K=2, th=0.06
    weight_scale: float = 0.1

    def __post_init__(self):
        if self.M < 1 or self.K < 1 or self.M % self.K:
            raise ValueError(f"M ({self.M}) must be a positive multiple of K ({self.K})")
        if self.th < 0:
            raise ValueError("th must be >= 0")
        if self.weight_scale <= 0:
            raise ValueError("weight_scale must be > 0")

    @property
    def devices_per_weight(self) -> int:
        return self.M // self.K


def slice_weight(w_int: int, config: DeviceConfig) -> List[int]:
    """Split an unsigned M-bit integer into per-device K-bit levels, low slice first."""
    if not 0 <= w_int < 2 ** config.M:
        raise ValueError(f"weight {w_int} outside [0, {2 ** config.M - 1}]")
    mask = 2 ** config.K - 1
    return [(w_int >> (i * config.K)) & mask for i in range(config.devices_per_weight)]


def reconstruct_weight(levels: Iterable[float], config: DeviceConfig) -> float:
    return sum(g * 2 ** (i * config.K) for i, g in enumerate(levels))


def device_error_to_weight_error(errors: Iterable[float], config: DeviceConfig) -> float:
    """Weight deviation caused by per-device conductance errors, in integer-grid units."""
    return sum(n * 2 ** (i * config.K) for i, n in enumerate(errors))


def compute_thg(config: DeviceConfig) -> float:
    raw = sum(config.th * 2 ** (i * config.K) for i in range(config.devices_per_weight))
    return raw * config.weight_scale


def extreme_weight_errors(config: DeviceConfig) -> List[float]:
    """Weight error for every +/-th sign pattern over the devices of one weight."""
    out = []
    for signs in itertools.product((-1.0, 1.0), repeat=config.devices_per_weight):
        out.append(device_error_to_weight_error([s * config.th for s in signs], config) * config.weight_scale)
    return out


class WeightPerturbation:
    """Per-layer additive weight deltas together with the bound they obey."""

    def __init__(self, deltas: Mapping[str, np.ndarray], bound: float):
        self.deltas: Dict[str, np.ndarray] = {k: np.asarray(v, dtype=np.float64) for k, v in deltas.items()}
        self.bound = float(bound)

    @classmethod
    def zeros(cls, shapes: Mapping[str, tuple], bound: float) -> "WeightPerturbation":
        return cls({k: np.zeros(s) for k, s in shapes.items()}, bound)

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(v))) for v in self.deltas.values() if v.size), default=0.0)

    def satisfies_bound(self) -> bool:
        return self.max_abs() <= self.bound + BOUND_EPS

    def check(self, shapes: Optional[Mapping[str, tuple]] = None) -> None:
        if shapes is not None:
            if set(shapes) != set(self.deltas):
                raise ValueError(f"perturbation layers {sorted(self.deltas)} != network layers {sorted(shapes)}")
            for k, s in shapes.items():
                if tuple(self.deltas[k].shape) != tuple(s):
                    raise ValueError(f"perturbation {k} has shape {self.deltas[k].shape}, expected {tuple(s)}")
        if not self.satisfies_bound():
            raise BoundViolation(f"max |delta| = {self.max_abs():.6g} exceeds bound {self.bound:.6g}")

    def negated(self) -> "WeightPerturbation":
        return WeightPerturbation({k: -v for k, v in self.deltas.items()}, self.bound)

    def save(self, path, **meta) -> None:
        save_tensors(path, self.deltas, kind="perturbation", th_g=self.bound, **meta)

    @classmethod
    def load(cls, path) -> "WeightPerturbation":
        tensors, header = load_tensors(path)
        if header.get("kind") != "perturbation":
            raise ValueError(f"{path}: expected a perturbation checkpoint, got kind={header.get('kind')!r}")
        return cls(tensors, header["th_g"])


class PerturbedView:
    """Read-only view of a network whose crossbar weights carry ``W + dW``.

    Forward passes go through the wrapped network with the perturbation
    added to the quantized weights; the network itself is never modified.
    """

    def __init__(self, network, perturbation: WeightPerturbation):
        self.network = network
        self.perturbation = perturbation

    def forward(self, x):
        return self.network.forward(x, perturbation=self.perturbation.deltas)

    def predict_logits(self, x, batch_size: int = 1000):
        return self.network.predict_logits(x, self.perturbation.deltas, batch_size)

    def accuracy(self, x, y, batch_size: int = 1000) -> float:
        return self.network.accuracy(x, y, self.perturbation.deltas, batch_size)

    def effective_weights(self) -> Dict[str, np.ndarray]:
        q = self.network.quantized_weights()
        return {k: q[k] + self.perturbation.deltas[k] for k in q}


def apply_perturbation(network, perturbation: WeightPerturbation) -> PerturbedView:
    perturbation.check(network.weight_shapes())
    return PerturbedView(network, perturbation)


def sample_mc_perturbation(network_or_shapes, th_g: float, rng_seed, distribution: str = "uniform") -> WeightPerturbation:
    """One i.i.d. device-variation instance inside the write-verify bound.

    ``uniform`` draws U[-th_g, th_g]; ``truncated_gaussian`` draws
    N(0, (th_g/3)^2) resampled until inside [-th_g, th_g].
    """
    if th_g < 0:
        raise ValueError("th_g must be >= 0")
    shapes = network_or_shapes.weight_shapes() if hasattr(network_or_shapes, "weight_shapes") else network_or_shapes
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    deltas = {}
    for name, shape in shapes.items():
        if th_g == 0:
            deltas[name] = np.zeros(shape)
        elif distribution == "uniform":
            deltas[name] = rng.uniform(-th_g, th_g, size=shape)
        elif distribution == "truncated_gaussian":
            d = rng.normal(0.0, th_g / 3.0, size=shape)
            bad = np.abs(d) > th_g
            while bad.any():
                d[bad] = rng.normal(0.0, th_g / 3.0, size=int(bad.sum()))
                bad = np.abs(d) > th_g
            deltas[name] = d
        else:
            raise ValueError(f"unknown distribution {distribution!r}")
    return WeightPerturbation(deltas, th_g)
