"""Worst-case weight perturbation search under an L-infinity bound.

The count of correctly classified samples is replaced by a sum of a
per-sample surrogate ``p`` (positive while the sample is still correct), and
the bound ``max|dW| <= th_g`` is moved into the objective with a constant
``c``::

    minimize  c * sum_x p(x; W + dW) + (max|dW| - th_g)

The objective is minimized over ``dW`` with Adam, and ``c`` is chosen by a
log-scale bisection for the largest value whose solution still respects the
bound. Monte-Carlo sampling and weight-PGD are provided as baselines.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .analysis import analyze_confidence, analyze_confusion, analyze_perturbation
from .device import BOUND_EPS, BoundViolation, WeightPerturbation, sample_mc_perturbation
from .numerics import Adam, Graph, Tensor, backward
from .numerics import ops as F

logger = logging.getLogger(__name__)

SURROGATES = ("p1", "p2", "p3", "p4", "p5", "p6", "p7")
LOG2 = math.log(2.0)
P5_EPS = 1e-12


class NumericalFailure(RuntimeError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class InfeasibleBound(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# surrogates
# ---------------------------------------------------------------------------

def surrogate(kind: str, logits: Tensor, labels) -> Tuple[Tensor, int]:
    """Per-sample surrogate values (N,) and the number of p5 clamps.

    Every variant is oriented so that it is large while the sample is
    classified correctly and minimizing it pushes towards a
    misclassification. With O the logits, Z = softmax(O), t the label and
    m(V) = V_t - max_{i != t} V_i:

    - p1 = 1 - CE(O, t)                 (printed: -loss(O, t) + 1)
    - p2 = max{m(O), 0}                 (printed: max{max_{i!=t} O_i - O_t, 0})
    - p3 = softplus(m(O)) - log 2       (printed: softplus(max_{i!=t} O_i - O_t) - log 2)
    - p4 = max{O_t - 0.5, 0}            (printed: max{0.5 - O_t, 0})
    - p5 = -log(max(2 - 2 O_t, 1e-12))  (printed: -log(2 O_t - 2))
    - p6 = max{m(Z), 0}                 (printed: max{max_{i!=t} Z_i - Z_t, 0})
    - p7 = softplus(m(Z)) - log 2       (printed: softplus(max_{i!=t} Z_i - Z_t) - log 2)
    """
    labels = np.asarray(labels, dtype=np.int64)
    clamped = 0
    if kind == "p1":
        out = F.shift(F.scale(F.cross_entropy(logits, labels, reduction="none"), -1.0), 1.0)
    elif kind in ("p2", "p3", "p6", "p7"):
        v = F.softmax(logits) if kind in ("p6", "p7") else logits
        margin = F.sub(F.gather(v, labels), F.reduce_max_excluding_index(v, labels))
        if kind in ("p2", "p6"):
            out = F.hinge(margin)
        else:
            out = F.shift(F.softplus(margin), -LOG2)
    elif kind == "p4":
        out = F.hinge(F.shift(F.gather(logits, labels), -0.5))
    elif kind == "p5":
        arg = F.shift(F.scale(F.gather(logits, labels), -2.0), 2.0)
        clamped = int(np.count_nonzero(arg.data <= P5_EPS))
        out = F.scale(F.log(F.clamp_min(arg, P5_EPS)), -1.0)
    else:
        raise ValueError(f"unknown surrogate {kind!r}; choose from {SURROGATES}")
    return out, clamped


def surrogate_value(kind: str, logits, label: int) -> float:
    """Surrogate of a single sample given its logit vector."""
    o = Tensor(np.asarray(logits, dtype=np.float64).reshape(1, -1))
    if o.shape[1] < 2:
        raise ValueError("need at least 2 classes")
    val, _ = surrogate(kind, o, [label])
    return float(val.data[0])


# ---------------------------------------------------------------------------
# configuration and reports
# ---------------------------------------------------------------------------

@dataclass
class SearchConfig:
    c: float = 1e-3
    lr: float = 1e-5
    iters: int = 500
    surrogate: str = "p2"
    th_g: float = 0.03
    c_lo: float = 1e-8
    c_hi: float = 1e-1
    max_rounds: int = 12
    eval_subset_size: Optional[int] = None   # None: optimize on all given samples
    batch_size: int = 1000                   # forward chunk; gradients are summed over chunks
    init: str = "zeros"                      # zeros | uniform
    init_scale: float = 0.1                  # uniform init half-width, as a fraction of th_g
    seed: int = 0

    def __post_init__(self):
        if not self.c_lo < self.c_hi:
            raise ValueError("c_lo must be < c_hi")
        if self.c_lo <= 0:
            raise ValueError("c_lo must be > 0 for a log-scale search")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.th_g < 0:
            raise ValueError("th_g must be >= 0")
        if self.surrogate not in SURROGATES:
            raise ValueError(f"unknown surrogate {self.surrogate!r}")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass
class EvalRecords:
    predicted: np.ndarray
    true: np.ndarray
    confidence: np.ndarray

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.true

    @property
    def accuracy(self) -> float:
        return float(self.correct.mean()) if len(self.true) else float("nan")


def evaluate_accuracy(network, perturbation: Optional[WeightPerturbation], x, y,
                      batch_size: int = 1000) -> Tuple[float, EvalRecords]:
    """Top-1 accuracy (argmax ties -> lowest class) and per-sample records."""
    deltas = perturbation.deltas if perturbation is not None else None
    logits = network.predict_logits(x, deltas, batch_size)
    pred = logits.argmax(axis=1)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    conf = (e / e.sum(axis=1, keepdims=True)).max(axis=1)
    rec = EvalRecords(pred, np.asarray(y, dtype=np.int64), conf)
    return rec.accuracy, rec


@dataclass
class WorstCaseReport:
    method: str
    perturbation: WeightPerturbation
    clean_accuracy: float
    worst_accuracy: float
    th_g: float
    achieved_L: float
    records: EvalRecords
    num_classes: int = 10
    chosen_c: Optional[float] = None
    seed: Optional[int] = None
    runtime_seconds: float = 0.0
    search_log: List[dict] = field(default_factory=list)
    trace: List[Tuple[int, float, float, float]] = field(default_factory=list)
    notes: Dict[str, object] = field(default_factory=dict)

    def confusion(self) -> np.ndarray:
        return analyze_confusion(self.records.true, self.records.predicted, self.num_classes).counts

    def per_layer(self) -> List[dict]:
        return analyze_perturbation(self.perturbation.deltas, self.th_g).per_layer

    def magnitude_histogram(self) -> List[int]:
        return analyze_perturbation(self.perturbation.deltas, self.th_g).histogram

    def confidence_stats(self) -> dict:
        a = analyze_confidence(self.records.confidence, self.records.correct)
        return {"mean_correct": a.mean_correct, "mean_wrong": a.mean_wrong,
                "n_correct": int(sum(a.hist_correct)), "n_wrong": int(sum(a.hist_wrong))}

    def validate(self) -> None:
        if self.achieved_L > self.th_g + BOUND_EPS:
            raise BoundViolation(f"{self.method}: achieved L={self.achieved_L!r} exceeds th_g={self.th_g!r}")
        if self.worst_accuracy > self.clean_accuracy:
            raise ValueError(f"{self.method}: worst accuracy {self.worst_accuracy} above clean {self.clean_accuracy}")

    def to_json(self) -> dict:
        self.validate()
        return {
            "method": self.method,
            "clean_accuracy": self.clean_accuracy,
            "worst_accuracy": self.worst_accuracy,
            "th_g": self.th_g,
            "chosen_c": self.chosen_c,
            "achieved_L": self.achieved_L,
            "confusion": self.confusion().tolist(),
            "confidence_stats": self.confidence_stats(),
            "per_layer": self.per_layer(),
            "magnitude_histogram": self.magnitude_histogram(),
            "runtime_seconds": self.runtime_seconds,
            "seed": self.seed,
            "search_log": self.search_log,
            "notes": self.notes,
        }


def build_report(method: str, network, perturbation: WeightPerturbation, x, y, th_g: float,
                 clean: Optional[Tuple[float, EvalRecords]] = None, **kw) -> WorstCaseReport:
    """Evaluate ``perturbation`` on (x, y) and wrap it in a validated report.

    ``dW = 0`` is always feasible, so if the found perturbation scores above
    the clean network the zero perturbation is reported instead.
    """
    clean_acc, clean_rec = clean if clean is not None else evaluate_accuracy(network, None, x, y)
    acc, rec = evaluate_accuracy(network, perturbation, x, y)
    notes = kw.pop("notes", {})
    if acc > clean_acc:
        notes["fell_back_to_zero"] = True
        perturbation = WeightPerturbation.zeros(network.weight_shapes(), th_g)
        acc, rec = clean_acc, clean_rec
    rep = WorstCaseReport(method, perturbation, clean_acc, acc, th_g, perturbation.max_abs(), rec,
                          num_classes=network.num_classes, notes=notes, **kw)
    rep.validate()
    return rep


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def _as_leaves(deltas: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in deltas.items()}


def relaxed_objective(network, perturbation, x, y, config: SearchConfig, c: Optional[float] = None) -> Tensor:
    """``c * sum(p) + (max|dW| - th_g)`` as a differentiable scalar.

    ``perturbation`` maps weight names to tensors (leaves requiring grad
    when called under a :class:`Graph`) or is a :class:`WeightPerturbation`.
    """
    c = config.c if c is None else c
    if isinstance(perturbation, WeightPerturbation):
        perturbation = {k: Tensor(v) for k, v in perturbation.deltas.items()}
    if len(y) == 0:
        raise ValueError("empty batch")
    logits = network.forward(x, perturbation=perturbation)
    p, _ = surrogate(config.surrogate, logits, y)
    bound = F.shift(F.max_abs(list(perturbation.values())), -config.th_g)
    return F.add(F.scale(F.total(p), c), bound)


def objective_and_grad(network, deltas: Dict[str, np.ndarray], x, y, config: SearchConfig, c: float):
    """Objective value, its gradient w.r.t. dW, accuracy and L, chunked over the batch."""
    names = list(deltas)
    grads = {k: np.zeros_like(v) for k, v in deltas.items()}
    psum, correct, clamps = 0.0, 0, 0
    for i in range(0, len(x), config.batch_size):
        xb, yb = x[i:i + config.batch_size], y[i:i + config.batch_size]
        with Graph() as g:
            leaves = _as_leaves(deltas)
            logits = network.forward(xb, perturbation=leaves)
            p, nclamp = surrogate(config.surrogate, logits, yb)
            loss = F.scale(F.total(p), c)
        clamps += nclamp
        if not np.isfinite(logits.data).all():
            return float("nan"), grads, float("nan"), float("nan"), clamps
        psum += float(p.data.sum())
        correct += int((logits.data.argmax(axis=1) == yb).sum())
        if c != 0.0:
            backward(g, loss)
            for k in names:
                grads[k] += leaves[k].grad
    with Graph() as g:
        leaves = _as_leaves(deltas)
        L = F.max_abs([leaves[k] for k in names])
    backward(g, L)
    for k in names:
        grads[k] += leaves[k].grad
    obj = c * psum + L.item() - config.th_g
    return obj, grads, correct / len(y), L.item(), clamps


def _subset(x, y, size: Optional[int], seed: int):
    if size is None or size >= len(x):
        return x, y
    idx = np.sort(np.random.default_rng(seed).choice(len(x), size=size, replace=False))
    return x[idx], y[idx]


def optimize_perturbation(network, x, y, config: SearchConfig, c: Optional[float] = None
                          ) -> Tuple[WeightPerturbation, List[Tuple[int, float, float, float]]]:
    """Adam on dW (weights frozen) for ``config.iters`` full-batch steps.

    Returns the final dW and a trace of (iteration, objective, accuracy, L)
    measured before each step.
    """
    c = config.c if c is None else c
    shapes = network.weight_shapes()
    if config.init == "zeros":
        deltas = {k: np.zeros(s) for k, s in shapes.items()}
    elif config.init == "uniform":
        rng = np.random.default_rng(config.seed)
        a = config.init_scale * config.th_g
        deltas = {k: rng.uniform(-a, a, size=s) for k, s in shapes.items()}
    else:
        raise ValueError(f"unknown init {config.init!r}")
    opt = Adam(config.lr)
    trace = []
    for it in range(config.iters):
        obj, grads, acc, L, _ = objective_and_grad(network, deltas, x, y, config, c)
        trace.append((it, obj, acc, L))
        if not math.isfinite(obj):
            raise NumericalFailure(f"objective became {obj} at iteration {it} (c={c:g})", trace)
        opt.step(deltas, grads)
    return WeightPerturbation(deltas, config.th_g), trace


def c_sweep(network, x, y, config: SearchConfig, cs: Sequence[float]) -> List[dict]:
    """Final L(dW) and search-set accuracy for each constant in ``cs``."""
    xs, ys = _subset(x, y, config.eval_subset_size, config.seed)
    rows = []
    for c in cs:
        pert, _ = optimize_perturbation(network, xs, ys, config, c)
        acc = network.accuracy(xs, ys, pert.deltas)
        rows.append({"c": float(c), "L": pert.max_abs(), "accuracy": acc})
    return rows


def binary_search_c(network, x, y, config: SearchConfig) -> WorstCaseReport:
    """Largest c (log-scale bisection) whose optimized dW satisfies the bound.

    The optimization runs on a fixed random subset of (x, y) when
    ``eval_subset_size`` is set; the reported accuracy is always on all of
    (x, y). At most ``max_rounds`` optimizations are run.
    """
    t0 = time.perf_counter()
    clean = evaluate_accuracy(network, None, x, y)
    if config.th_g == 0:
        zero = WeightPerturbation.zeros(network.weight_shapes(), 0.0)
        return build_report("proposed", network, zero, x, y, 0.0, clean, chosen_c=0.0, seed=config.seed,
                            runtime_seconds=time.perf_counter() - t0)
    xs, ys = _subset(x, y, config.eval_subset_size, config.seed)
    log = []

    def run(c):
        pert, trace = optimize_perturbation(network, xs, ys, config, c)
        L = pert.max_abs()
        acc = network.accuracy(xs, ys, pert.deltas)
        log.append({"c": c, "L": L, "search_accuracy": acc, "feasible": L <= config.th_g})
        logger.info("c=%.3g L=%.5f acc=%.4f", c, L, acc)
        return pert, trace, L

    pert, trace, L_lo = run(config.c_lo)
    if L_lo > config.th_g:
        raise InfeasibleBound(f"even c_lo={config.c_lo:g} gives L={L_lo:.6g} > th_g={config.th_g:g}")
    best = (config.c_lo, pert, trace)
    monotone = None
    if config.max_rounds >= 2:
        pert, trace, L_hi = run(config.c_hi)
        monotone = L_hi >= L_lo
        if L_hi <= config.th_g:
            best = (config.c_hi, pert, trace)
        else:
            lo, hi = math.log10(config.c_lo), math.log10(config.c_hi)
            for _ in range(config.max_rounds - 2):
                mid = 0.5 * (lo + hi)
                c = 10.0 ** mid
                pert, trace, L = run(c)
                if L <= config.th_g:
                    lo, best = mid, (c, pert, trace)
                else:
                    hi = mid
    c, pert, trace = best
    return build_report("proposed", network, pert, x, y, config.th_g, clean, chosen_c=c, seed=config.seed,
                        search_log=log, trace=trace, runtime_seconds=time.perf_counter() - t0,
                        notes={"monotone_c_check": monotone})


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

@dataclass
class MCResult:
    min_accuracy: float
    perturbation: WeightPerturbation
    run_index: int
    accuracies: np.ndarray

    def running_min(self) -> np.ndarray:
        return np.minimum.accumulate(self.accuracies)


def _mc_chunk(args):
    network, x, y, th_g, seed, distribution, runs = args
    out = []
    for i in runs:
        pert = sample_mc_perturbation(network, th_g, np.random.default_rng([seed, i]), distribution)
        out.append(network.accuracy(x, y, pert.deltas))
    return out


def mc_worstcase(network, x, y, th_g: float, n_runs: int, distribution: str = "uniform", seed: int = 0,
                 n_jobs: int = 1) -> MCResult:
    """Lowest accuracy over ``n_runs`` sampled variation instances.

    Run ``i`` draws from ``default_rng([seed, i])``, so results do not depend
    on ``n_jobs``.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    runs = list(range(n_runs))
    if n_jobs > 1:
        chunks = [runs[j::n_jobs] for j in range(n_jobs)]
        with ProcessPoolExecutor(n_jobs) as ex:
            parts = list(ex.map(_mc_chunk, [(network, x, y, th_g, seed, distribution, c) for c in chunks]))
        accs = np.empty(n_runs)
        for c, p in zip(chunks, parts):
            accs[c] = p
    else:
        accs = np.asarray(_mc_chunk((network, x, y, th_g, seed, distribution, runs)))
    best = int(np.argmin(accs))
    pert = sample_mc_perturbation(network, th_g, np.random.default_rng([seed, best]), distribution)
    return MCResult(float(accs[best]), pert, best, accs)


def weight_pgd(network, x, y, th_g: float, steps: int = 40, step_size: Optional[float] = None,
               batch_size: int = 1000) -> Tuple[WeightPerturbation, float]:
    """Sign-gradient ascent on cross entropy w.r.t. dW, projected onto the box."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if step_size is not None and step_size <= 0:
        raise ValueError("step_size must be > 0")
    step_size = th_g / 10.0 if step_size is None else step_size
    shapes = network.weight_shapes()
    deltas = {k: np.zeros(s) for k, s in shapes.items()}
    if th_g == 0:
        pert = WeightPerturbation(deltas, 0.0)
        return pert, network.accuracy(x, y, deltas)
    n = len(x)
    for _ in range(steps):
        grads = {k: np.zeros(s) for k, s in shapes.items()}
        for i in range(0, n, batch_size):
            xb, yb = x[i:i + batch_size], y[i:i + batch_size]
            with Graph() as g:
                leaves = _as_leaves(deltas)
                loss = F.scale(F.cross_entropy(network.forward(xb, perturbation=leaves), yb, reduction="sum"), 1.0 / n)
            backward(g, loss)
            for k in grads:
                grads[k] += leaves[k].grad
        for k in deltas:
            deltas[k] = np.clip(deltas[k] + step_size * np.sign(grads[k]), -th_g, th_g)
    pert = WeightPerturbation(deltas, th_g)
    return pert, network.accuracy(x, y, deltas)


def weight_pgd_report(network, x, y, th_g: float, steps: int = 40, step_size: Optional[float] = None,
                      eval_subset_size: Optional[int] = None, seed: int = 0) -> WorstCaseReport:
    t0 = time.perf_counter()
    xs, ys = _subset(x, y, eval_subset_size, seed)
    pert, _ = weight_pgd(network, xs, ys, th_g, steps, step_size)
    return build_report("pgd", network, pert, x, y, th_g, seed=seed, runtime_seconds=time.perf_counter() - t0)


def mc_report(network, x, y, th_g: float, n_runs: int, distribution: str = "uniform", seed: int = 0,
              n_jobs: int = 1) -> Tuple[WorstCaseReport, MCResult]:
    t0 = time.perf_counter()
    res = mc_worstcase(network, x, y, th_g, n_runs, distribution, seed, n_jobs)
    rep = build_report("mc", network, res.perturbation, x, y, th_g, seed=seed,
                       runtime_seconds=time.perf_counter() - t0,
                       notes={"n_runs": n_runs, "distribution": distribution, "run_index": res.run_index})
    return rep, res
