"""Config-driven pipelines that write reports, CSVs, checkpoints and figures."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from .analysis import analyze_confidence, analyze_confusion, analyze_perturbation
from .config import ExperimentConfig
from .data import DatasetHandle, load_dataset
from .device import WeightPerturbation
from .hardening import (HardeningResult, SweepSpec, adversarial_train, inner_search_config,
                        variation_aware_train, write_verify_sweep)
from .models import Network, build, train
from .search import binary_search_c, evaluate_accuracy, mc_report, weight_pgd_report

logger = logging.getLogger(__name__)

PIPELINES = ("train", "attack", "mc", "pgd", "va-train", "adv-train", "sweep", "analyze")
NEEDS_CHECKPOINT = {"attack", "mc", "pgd", "analyze"}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class Run:
    """Output directory plus the shared inputs of one pipeline invocation."""

    def __init__(self, config: ExperimentConfig, pipeline: str):
        self.config = config
        self.pipeline = pipeline
        self.out = Path(config.experiment.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self._data = None

    @property
    def data(self) -> DatasetHandle:
        if self._data is None:
            e = self.config.experiment
            ds = load_dataset(e.dataset, self.config.data_dir)
            if e.train_subset:
                ds = replace(ds, x_train=ds.x_train[:e.train_subset], y_train=ds.y_train[:e.train_subset])
            if e.test_subset:
                ds = replace(ds, x_test=ds.x_test[:e.test_subset], y_test=ds.y_test[:e.test_subset])
            self._data = ds
        return self._data

    def seed_dir(self, seed: int) -> Path:
        if len(self.config.experiment.seeds) == 1:
            return self.out
        d = self.out / f"seed{seed}"
        d.mkdir(exist_ok=True)
        return d

    def write_json(self, path: Path, obj) -> None:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def figure(self, fn: Callable, *args) -> None:
        if not self.config.experiment.figures:
            return
        try:
            fn(*args)
        except Exception as err:  # a broken figure must not lose the numeric results
            logger.warning("figure %s failed: %s", args[-1], err)


def _plots():
    from . import plotting
    return plotting


def _load_network(path) -> Network:
    return Network.load(path)


# -- pipelines -----------------------------------------------------------------

def _train_networks(run: Run, trainer: Callable, tag: str) -> List[Network]:
    cfg = run.config
    nets = []
    for seed in cfg.experiment.seeds:
        d = run.seed_dir(seed)
        net0 = build(cfg.experiment.model, cfg.quant, seed)
        t0 = time.perf_counter()
        net, hist = trainer(net0, run.data.x_train, run.data.y_train, cfg.train_config(seed))
        hist.to_csv(d / "training.csv")
        net.save(d / "model.ckpt", seed=seed, method=tag)
        acc = net.accuracy(run.data.x_test, run.data.y_test)
        run.write_json(d / "train.json", {"method": tag, "seed": seed, "test_accuracy": acc,
                                          "best_epoch": hist.best_epoch, "best_val_acc": hist.best_val_acc,
                                          "epochs": cfg.train.epochs,
                                          "runtime_seconds": time.perf_counter() - t0})
        run.figure(_plots().plot_training, hist, d / "training.png")
        nets.append(net)
    return nets


def _emit_report(run: Run, d: Path, rep, network: Network) -> dict:
    out = rep.to_json()  # validates the bound before anything is written
    rep.perturbation.save(d / "perturbation.ckpt", method=rep.method)
    run.write_json(d / "report.json", out)
    with open(d / "predictions.csv", "w") as f:
        f.write("index,true,predicted,confidence\n")
        r = rep.records
        for i, (t, p, c) in enumerate(zip(r.true, r.predicted, r.confidence)):
            f.write(f"{i},{t},{p},{c:.10g}\n")
    pa = analyze_perturbation(rep.perturbation.deltas, rep.th_g)
    run.figure(_plots().plot_confidence, analyze_confidence(r.confidence, r.correct), d / "confidence.png")
    run.figure(_plots().plot_perturbation, pa, d / "perturbation.png")
    return out


def _attack(run: Run) -> dict:
    cfg = run.config
    net = _load_network(cfg.experiment.checkpoint)
    x, y = run.data.x_test, run.data.y_test
    summary = []
    for seed in cfg.experiment.seeds:
        d = run.seed_dir(seed)
        rep = binary_search_c(net, x, y, cfg.search_config(seed))
        with open(d / "trace.csv", "w") as f:
            f.write("iter,objective,accuracy,L\n")
            for it, obj, acc, L in rep.trace:
                f.write(f"{it},{obj:.10g},{acc:.10g},{L:.10g}\n")
        with open(d / "c_search.csv", "w") as f:
            f.write("c,L,search_accuracy,feasible\n")
            for r in rep.search_log:
                f.write(f"{r['c']:.10g},{r['L']:.10g},{r['search_accuracy']:.10g},{int(r['feasible'])}\n")
        summary.append(_emit_report(run, d, rep, net))
        if rep.trace:
            run.figure(_plots().plot_trace, rep.trace, d / "trace.png")
        if rep.search_log:
            rows = sorted(({"c": r["c"], "L": r["L"], "accuracy": r["search_accuracy"]} for r in rep.search_log),
                          key=lambda r: r["c"])
            run.figure(_plots().plot_c_sweep, rows, rep.th_g, d / "c_search.png")
    return {"reports": summary}


def _mc(run: Run) -> dict:
    cfg = run.config
    net = _load_network(cfg.experiment.checkpoint)
    out = []
    for seed in cfg.experiment.seeds:
        d = run.seed_dir(seed)
        rep, res = mc_report(net, run.data.x_test, run.data.y_test, cfg.th_g, cfg.mc.n_runs,
                             cfg.mc.distribution, seed, cfg.mc.n_jobs)
        with open(d / "mc_runs.csv", "w") as f:
            f.write("run,accuracy,running_min\n")
            for i, (a, m) in enumerate(zip(res.accuracies, res.running_min())):
                f.write(f"{i},{a:.10g},{m:.10g}\n")
        out.append(_emit_report(run, d, rep, net))
        run.figure(_plots().plot_mc, res.accuracies, d / "mc.png")
    return {"reports": out}


def _pgd(run: Run) -> dict:
    cfg = run.config
    net = _load_network(cfg.experiment.checkpoint)
    out = []
    for seed in cfg.experiment.seeds:
        d = run.seed_dir(seed)
        rep = weight_pgd_report(net, run.data.x_test, run.data.y_test, cfg.th_g, cfg.pgd.steps,
                                cfg.pgd.step_size or None, cfg.search.eval_subset_size or None, seed)
        out.append(_emit_report(run, d, rep, net))
    return {"reports": out}


def _hardening_eval(run: Run, tag: str, nets: List[Network]) -> dict:
    cfg = run.config
    res = HardeningResult(tag, [])
    for seed, net in zip(cfg.experiment.seeds, nets):
        rep = binary_search_c(net, run.data.x_test, run.data.y_test, cfg.search_config(seed))
        res.per_seed.append(rep.worst_accuracy)
        _emit_report(run, run.seed_dir(seed), rep, net)
    run.write_json(run.out / "hardening.json", res.to_json())
    return res.to_json()


def _va_train(run: Run) -> dict:
    th = run.config.th_g
    nets = _train_networks(run, lambda n, x, y, c: variation_aware_train(n, x, y, c, th), "variation_aware")
    return _hardening_eval(run, "variation_aware", nets)


def _adv_train(run: Run) -> dict:
    cfg = run.config
    th = cfg.th_g
    h = cfg.hardening
    inner = inner_search_config(th, c=h.inner_c, iters=h.inner_iters, lr=h.inner_lr or None)

    def trainer(n, x, y, c):
        return adversarial_train(n, x, y, c, th, inner, full_search=h.full_search)

    nets = _train_networks(run, trainer, "adversarial")
    return _hardening_eval(run, "adversarial", nets)


def _train(run: Run) -> dict:
    nets = _train_networks(run, train, "regular")
    return {"test_accuracy": [n.accuracy(run.data.x_test, run.data.y_test) for n in nets]}


def _sweep(run: Run) -> dict:
    cfg = run.config
    e = cfg.experiment
    if e.checkpoints:
        nets = [_load_network(p) for p in e.checkpoints]
    else:
        nets = _train_networks(run, train, "regular")
    spec = SweepSpec(cfg.hardening.th_gs, len(nets), cfg.hardening.drop)
    res = write_verify_sweep(nets, run.data.x_test, run.data.y_test, spec, cfg.search_config(e.seeds[0]))
    res.to_csv(run.out / "sweep.csv")
    summary = res.summary()
    run.write_json(run.out / "sweep.json", summary)
    run.figure(_plots().plot_sweep, res, run.out / "sweep.png")
    return summary


def _analyze(run: Run) -> dict:
    cfg = run.config
    net = _load_network(cfg.experiment.checkpoint)
    x, y = run.data.x_test, run.data.y_test
    ppath = run.out / "perturbation.ckpt"
    if ppath.is_file():
        pert = WeightPerturbation.load(ppath)
    else:
        pert = binary_search_c(net, x, y, cfg.search_config(cfg.experiment.seeds[0])).perturbation
        pert.save(ppath, method="proposed")
    pert.check(net.weight_shapes())
    acc, rec = evaluate_accuracy(net, pert, x, y)
    conf = analyze_confidence(rec.confidence, rec.correct)
    cm = analyze_confusion(rec.true, rec.predicted, net.num_classes)
    pa = analyze_perturbation(pert.deltas, pert.bound)
    clean_acc, clean_rec = evaluate_accuracy(net, None, x, y)
    clean_conf = analyze_confidence(clean_rec.confidence, clean_rec.correct)
    out = {
        "accuracy": acc,
        "clean_accuracy": clean_acc,
        "th_g": pert.bound,
        "confidence": {"mean_correct": conf.mean_correct, "mean_wrong": conf.mean_wrong,
                       "hist_correct": conf.hist_correct, "hist_wrong": conf.hist_wrong},
        "clean_confidence": {"mean_correct": clean_conf.mean_correct, "mean_wrong": clean_conf.mean_wrong},
        "confusion_normalized": cm.normalized.tolist(),
        "sink_class": cm.sink_class,
        "sink_share": cm.sink_share,
        "magnitude_histogram": pa.histogram,
        "extreme_fraction": pa.extreme_fraction,
        "degenerate_histogram": pa.degenerate,
        "per_layer": pa.per_layer,
    }
    run.write_json(run.out / "analysis.json", out)
    run.figure(_plots().plot_confidence, conf, run.out / "confidence.png")
    run.figure(_plots().plot_perturbation, pa, run.out / "perturbation.png")
    return out


_DISPATCH: Dict[str, Callable[[Run], dict]] = {
    "train": _train, "attack": _attack, "mc": _mc, "pgd": _pgd,
    "va-train": _va_train, "adv-train": _adv_train, "sweep": _sweep, "analyze": _analyze,
}


def run_experiment(config: ExperimentConfig, pipeline: str) -> Path:
    """Run one pipeline; returns the output directory.

    The resolved configuration is written first as ``config.ini`` so that a
    run can be repeated exactly from its own directory.
    """
    if pipeline not in _DISPATCH:
        raise ValueError(f"unknown pipeline {pipeline!r}; choose from {PIPELINES}")
    config.validate(needs_checkpoint=pipeline in NEEDS_CHECKPOINT)
    run = Run(config, pipeline)
    (run.out / "config.ini").write_text(config.to_ini())
    logger.info("%s -> %s", pipeline, run.out)
    try:
        result = _DISPATCH[pipeline](run)
    except Exception as err:
        (run.out / "error.txt").write_text(f"stage: {pipeline}\n{type(err).__name__}: {err}\n")
        raise StageError(pipeline, err) from err
    run.write_json(run.out / "summary.json", {"pipeline": pipeline, "th_g": config.th_g,
                                              "seeds": list(config.experiment.seeds), "result": result})
    return run.out
