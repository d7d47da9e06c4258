"""Quantized LeNet / ConvNet definitions and quantization-aware training."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from .numerics import Adam, Graph, SGD, Tensor, backward, load_tensors, save_tensors
from .numerics import ops as F

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class QuantConfig:
    """Symmetric uniform per-tensor weight quantization (+ post-ReLU activations)."""

    weight_bits: int = 4
    activation_bits: int = 4
    quantize_activations: bool = True

    def __post_init__(self):
        if self.weight_bits < 2 or self.activation_bits < 2:
            raise ValueError("weight_bits and activation_bits must be >= 2")

    @property
    def weight_qmax(self) -> int:
        return 2 ** (self.weight_bits - 1) - 1

    @property
    def activation_levels(self) -> int:
        return 2 ** self.activation_bits - 1


@dataclass(frozen=True)
class Layer:
    kind: str                  # conv | linear | relu | maxpool | flatten
    name: str
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0


def conv(name, cin, cout, k, padding=0):
    return Layer("conv", name, cin, cout, k, 1, padding)


def fc(name, fin, fout):
    return Layer("linear", name, fin, fout)


def relu(name):
    return Layer("relu", name)


def pool(name, k=2):
    return Layer("maxpool", name, kernel=k)


LENET_LAYERS = [
    conv("conv1", 1, 6, 5, padding=2), relu("relu1"), pool("pool1"),
    conv("conv2", 6, 16, 5), relu("relu2"), pool("pool2"),
    Layer("flatten", "flatten"),
    fc("fc1", 400, 120), relu("relu3"),
    fc("fc2", 120, 84), relu("relu4"),
    fc("fc3", 84, 10),
]

# VGG-style 8-layer network from the DNN+NeuroSim benchmark line of work;
# channel widths are a repo constant.
CONVNET_LAYERS = [
    conv("conv1", 3, 64, 3, 1), relu("relu1"), conv("conv2", 64, 64, 3, 1), relu("relu2"), pool("pool1"),
    conv("conv3", 64, 128, 3, 1), relu("relu3"), conv("conv4", 128, 128, 3, 1), relu("relu4"), pool("pool2"),
    conv("conv5", 128, 256, 3, 1), relu("relu5"), conv("conv6", 256, 256, 3, 1), relu("relu6"), pool("pool3"),
    Layer("flatten", "flatten"),
    fc("fc1", 4096, 1024), relu("relu7"),
    fc("fc2", 1024, 10),
]

ARCHITECTURES = {
    "lenet": (LENET_LAYERS, (1, 28, 28)),
    "convnet": (CONVNET_LAYERS, (3, 32, 32)),
}


def quantize_array(w: np.ndarray, bits: int) -> Tuple[np.ndarray, float]:
    """Symmetric per-tensor fake quantization; returns (values, step)."""
    qmax = 2 ** (bits - 1) - 1
    m = float(np.max(np.abs(w))) if w.size else 0.0
    step = m / qmax if m > 0 else 1.0
    return step * np.round(np.clip(w / step, -qmax, qmax)), step


def integer_levels(w: np.ndarray, bits: int) -> np.ndarray:
    _, step = quantize_array(w, bits)
    return np.round(w / step).astype(np.int64)


class Network:
    """An ordered layer list plus named parameter arrays.

    ``params`` holds ``<layer>.weight`` (crossbar-mapped) and
    ``<layer>.bias`` (kept digital: never quantized nor perturbed);
    ``buffers`` holds the calibrated activation ranges ``<relu>.range``.
    """

    def __init__(self, arch: str, layers: List[Layer], input_shape, quant: Optional[QuantConfig] = None,
                 params: Optional[Dict[str, np.ndarray]] = None, buffers: Optional[Dict[str, np.ndarray]] = None):
        self.arch = arch
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.quant = quant or QuantConfig()
        self.params: Dict[str, np.ndarray] = params or {}
        self.buffers: Dict[str, np.ndarray] = buffers or {}
        self._qcache: Optional[Dict[str, np.ndarray]] = None
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")

    # -- structure -------------------------------------------------------
    @property
    def weight_names(self) -> List[str]:
        return [f"{l.name}.weight" for l in self.layers if l.kind in ("conv", "linear")]

    @property
    def num_classes(self) -> int:
        return [l for l in self.layers if l.kind in ("conv", "linear")][-1].out_dim

    def weight_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {n: self.params[n].shape for n in self.weight_names}

    def init_params(self, seed: int) -> "Network":
        rng = np.random.default_rng(seed)
        for l in self.layers:
            if l.kind == "conv":
                shape, fan_in = (l.out_dim, l.in_dim, l.kernel, l.kernel), l.in_dim * l.kernel ** 2
            elif l.kind == "linear":
                shape, fan_in = (l.out_dim, l.in_dim), l.in_dim
            else:
                if l.kind == "relu":
                    self.buffers[f"{l.name}.range"] = np.zeros(())
                continue
            self.params[f"{l.name}.weight"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
            self.params[f"{l.name}.bias"] = np.zeros(l.out_dim)
        self.invalidate()
        return self

    def copy(self) -> "Network":
        return Network(self.arch, self.layers, self.input_shape, copy.deepcopy(self.quant),
                       {k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.buffers.items()})

    def invalidate(self) -> None:
        self._qcache = None

    def quantized_weights(self) -> Dict[str, np.ndarray]:
        """Fake-quantized crossbar weights (cached until ``invalidate``)."""
        if self._qcache is None:
            self._qcache = {n: quantize_array(self.params[n], self.quant.weight_bits)[0]
                            for n in self.weight_names}
        return self._qcache

    # -- forward ---------------------------------------------------------
    def forward(self, x, perturbation: Optional[Mapping[str, object]] = None,
                params: Optional[Mapping[str, Tensor]] = None, train: bool = False) -> Tensor:
        """Logits for a batch ``x`` (N, C, H, W).

        With ``params`` (trainable leaf tensors) weights are fake-quantized
        on the fly with a straight-through gradient; otherwise the cached
        quantized weights are used as constants. ``perturbation`` entries
        are added to the quantized weights and are not re-quantized.
        ``train`` updates the activation-range calibration.
        """
        h = x if isinstance(x, Tensor) else Tensor(x)
        q = None if params is not None else self.quantized_weights()
        for l in self.layers:
            if l.kind in ("conv", "linear"):
                wname, bname = f"{l.name}.weight", f"{l.name}.bias"
                if params is not None:
                    wt = params[wname]
                    _, step = quantize_array(wt.data, self.quant.weight_bits)
                    qm = self.quant.weight_qmax
                    w = F.fake_quant(wt, step, -qm, qm)
                    b = params[bname]
                else:
                    w = Tensor(q[wname])
                    b = Tensor(self.params[bname])
                if perturbation is not None and wname in perturbation:
                    d = perturbation[wname]
                    w = F.add(w, d if isinstance(d, Tensor) else Tensor(d))
                if l.kind == "conv":
                    h = F.add(F.conv2d(h, w, l.stride, l.padding), b)
                else:
                    h = F.linear(h, w, b)
            elif l.kind == "relu":
                h = F.relu(h)
                if self.quant.quantize_activations:
                    h = self._act_quant(h, l.name, train)
            elif l.kind == "maxpool":
                h = F.maxpool2d(h, l.kernel)
            elif l.kind == "flatten":
                h = F.flatten(h)
            else:
                raise ValueError(f"unknown layer kind {l.kind!r}")
        return h

    def _act_quant(self, h: Tensor, name: str, train: bool) -> Tensor:
        key = f"{name}.range"
        r = float(self.buffers.get(key, np.zeros(())))
        if train:
            bmax = float(h.data.max()) if h.data.size else 0.0
            r = bmax if r == 0.0 else 0.9 * r + 0.1 * bmax
            self.buffers[key] = np.asarray(r)
        if r <= 0.0:
            return h  # uncalibrated
        levels = self.quant.activation_levels
        return F.fake_quant(h, r / levels, 0, levels)

    def predict_logits(self, x: np.ndarray, perturbation=None, batch_size: int = 1000) -> np.ndarray:
        outs = []
        for i in range(0, len(x), batch_size):
            outs.append(self.forward(x[i:i + batch_size], perturbation).data)
        if not outs:
            return np.zeros((0, self.num_classes))
        return np.concatenate(outs)

    def accuracy(self, x: np.ndarray, y: np.ndarray, perturbation=None, batch_size: int = 1000) -> float:
        if len(y) == 0:
            return float("nan")
        pred = self.predict_logits(x, perturbation, batch_size).argmax(axis=1)
        return float((pred == y).mean())

    # -- persistence -----------------------------------------------------
    def state(self) -> Dict[str, np.ndarray]:
        out = dict(self.params)
        out.update(self.buffers)
        return out

    def save(self, path, **meta) -> None:
        save_tensors(path, self.state(), kind="weights", arch=self.arch, quant=asdict(self.quant), **meta)

    @classmethod
    def load(cls, path) -> "Network":
        tensors, header = load_tensors(path)
        if header.get("kind") != "weights":
            raise ValueError(f"{path}: expected a weights checkpoint, got kind={header.get('kind')!r}")
        net = build(header["arch"], QuantConfig(**header["quant"]))
        for k, v in tensors.items():
            if k.endswith(".range"):
                net.buffers[k] = v.reshape(())
            else:
                if k not in net.params:
                    raise ValueError(f"{path}: unexpected tensor {k!r}")
                if net.params[k].shape != v.shape:
                    raise ValueError(f"{path}: {k} has shape {v.shape}, expected {net.params[k].shape}")
                net.params[k] = v
        net.invalidate()
        return net


def build(arch: str, quant: Optional[QuantConfig] = None, seed: int = 0) -> Network:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    layers, shape = ARCHITECTURES[arch]
    return Network(arch, layers, shape, quant).init_params(seed)


def build_lenet(quant: Optional[QuantConfig] = None, seed: int = 0) -> Network:
    return build("lenet", quant, seed)


def build_convnet(quant: Optional[QuantConfig] = None, seed: int = 0) -> Network:
    return build("convnet", quant, seed)


def quantize_weights(network: Network) -> Network:
    """Copy of ``network`` whose crossbar weights sit exactly on the M-bit grid."""
    out = network.copy()
    for n in out.weight_names:
        out.params[n] = quantize_array(out.params[n], out.quant.weight_bits)[0]
    out.invalidate()
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    optimizer: str = "adam"      # adam | sgd
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    val_size: int = 5000
    lr_decay: str = "cosine"     # cosine | none

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainHistory:
    rows: List[Tuple[int, float, float]] = field(default_factory=list)  # epoch, train_loss, val_acc
    best_epoch: int = 0
    best_val_acc: float = 0.0

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("epoch,train_loss,val_acc\n")
            for e, loss, acc in self.rows:
                f.write(f"{e},{loss:.10g},{acc:.10g}\n")


# hook(network, x_batch, y_batch) -> {weight name: constant perturbation array} or None
WeightNoiseHook = Callable[[Network, np.ndarray, np.ndarray], Optional[Dict[str, np.ndarray]]]


def split_validation(x: np.ndarray, y: np.ndarray, val_size: int):
    val_size = max(0, min(val_size, len(x) // 5))
    if val_size == 0:
        return x, y, x[:0], y[:0]
    return x[:-val_size], y[:-val_size], x[-val_size:], y[-val_size:]


def train(network: Network, x: np.ndarray, y: np.ndarray, config: TrainConfig,
          noise_hook: Optional[WeightNoiseHook] = None,
          on_epoch: Optional[Callable[[int, float, float], None]] = None) -> Tuple[Network, TrainHistory]:
    """Quantization-aware training; returns the best-validation checkpoint.

    The last ``config.val_size`` training samples are held out for
    validation. ``noise_hook`` supplies a perturbation that is added to the
    quantized weights for the forward pass of one step; it is treated as a
    constant, so gradients flow to the clean weights only.
    """
    if len(x) == 0:
        raise ValueError("empty training set")
    if network.num_classes <= int(np.max(y)):
        raise ValueError("network output dimension does not cover the labels")
    xt, yt, xv, yv = split_validation(x, y, config.val_size)
    net = network.copy()
    opt = Adam(config.lr) if config.optimizer == "adam" else SGD(config.lr, config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(xt) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    hist = TrainHistory()
    best_state, best_acc = None, -1.0
    trainable = [n for n in net.params]
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(xt))
        loss_sum = 0.0
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            xb, yb = xt[idx], yt[idx]
            noise = noise_hook(net, xb, yb) if noise_hook is not None else None
            if config.lr_decay == "cosine":
                opt.lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            with Graph() as g:
                leaves = {n: Tensor(net.params[n], requires_grad=True) for n in trainable}
                logits = net.forward(xb, perturbation=noise, params=leaves, train=True)
                loss = F.cross_entropy(logits, yb)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDiverged(f"loss became {lv} at epoch {epoch}, step {s}")
            backward(g, loss)
            opt.step(net.params, {n: t.grad for n, t in leaves.items() if t.grad is not None})
            net.invalidate()
            loss_sum += lv * len(idx)
            step += 1
        train_loss = loss_sum / len(xt)
        val_acc = net.accuracy(xv, yv) if len(xv) else net.accuracy(xt, yt)
        hist.rows.append((epoch, train_loss, val_acc))
        logger.info("epoch %d loss %.4f val_acc %.4f", epoch, train_loss, val_acc)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_acc)
        if val_acc > best_acc:
            best_acc, best_state = val_acc, net.copy()
            hist.best_epoch, hist.best_val_acc = epoch, val_acc
    return best_state, hist
