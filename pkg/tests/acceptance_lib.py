"""Acceptance criteria as plain functions returning (passed, detail).

Each function takes already-loaded data and runs the full procedure, so the
same code can be smoke-run on small inputs. Trained networks are cached on
disk under ``ARTIFACT_CACHE`` (default ``.acceptance_cache``).
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from cimworst.analysis import analyze_confidence, analyze_confusion, analyze_perturbation
from cimworst.config import load_config
from cimworst.data import DataError, load_cifar10, load_digits28, load_mnist
from cimworst.device import WeightPerturbation
from cimworst.experiment import run_experiment
from cimworst.hardening import (HardeningResult, SweepSpec, adversarial_train, inner_search_config,
                                variation_aware_train, write_verify_sweep)
from cimworst.models import Network, TrainConfig, build, train
from cimworst.numerics import load_tensors
from cimworst.search import SearchConfig, binary_search_c, c_sweep, mc_worstcase, weight_pgd

BOUND_TOL = 1e-12
TH_G = 0.03

RESULTS = []  # one line per criterion, echoed in the pytest terminal summary


def data_root() -> Path:
    return Path(os.environ.get("ARTIFACT_DATA_DIR", "data"))


def cache_dir() -> Path:
    d = Path(os.environ.get("ARTIFACT_CACHE", ".acceptance_cache"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def try_mnist():
    try:
        return load_mnist(data_root() / "mnist")
    except DataError as err:
        return err


def try_cifar():
    try:
        return load_cifar10(data_root() / "cifar10")
    except DataError as err:
        return err


def mnist_or_standin():
    ds = try_mnist()
    return (ds, "mnist") if not isinstance(ds, Exception) else (load_digits28(), "digits stand-in")


LENET_TRAIN = TrainConfig(epochs=8, batch_size=64, lr=1e-3, val_size=5000)
CONVNET_TRAIN = TrainConfig(epochs=30, batch_size=128, lr=1e-3, val_size=5000)


def trained(ds, arch: str, seed: int, config: TrainConfig, tag: str = "regular", trainer=None) -> Network:
    """Train (or reload from the cache) one network."""
    path = cache_dir() / f"{ds.name}_{arch}_{tag}_e{config.epochs}_s{seed}.ckpt"
    if path.is_file():
        return Network.load(path)
    cfg = replace(config, seed=seed, val_size=min(config.val_size, len(ds.x_train) // 5))
    trainer = trainer or train
    t0 = time.perf_counter()
    net, _ = trainer(build(arch, seed=seed), ds.x_train, ds.y_train, cfg)
    net.save(path, seed=seed, method=tag, train_minutes=(time.perf_counter() - t0) / 60)
    return net


def train_minutes(ds, arch: str, seed: int, config: TrainConfig, tag: str = "regular") -> float:
    _, header = load_tensors(cache_dir() / f"{ds.name}_{arch}_{tag}_e{config.epochs}_s{seed}.ckpt")
    return header["train_minutes"]


# -- 1 --------------------------------------------------------------------------

def criterion_clean_training(mnist, cifar, extended: bool):
    net = trained(mnist, "lenet", 0, LENET_TRAIN)
    minutes = train_minutes(mnist, "lenet", 0, LENET_TRAIN)
    acc = net.accuracy(mnist.x_test, mnist.y_test)
    ok = acc >= 0.985 and minutes <= 30
    detail = f"LeNet MNIST acc={acc:.4f} (>=0.985) in {minutes:.1f} min (<=30)"
    if cifar is None:
        return False, detail + "; ConvNet: CIFAR-10 unavailable"
    if not extended:
        return False, detail + "; ConvNet: extended job not enabled (ARTIFACT_EXTENDED=1)"
    cn = trained(cifar, "convnet", 0, CONVNET_TRAIN)
    cacc = cn.accuracy(cifar.x_test, cifar.y_test)
    return ok and cacc >= 0.80, detail + f"; ConvNet CIFAR-10 acc={cacc:.4f} (>=0.80, {CONVNET_TRAIN.epochs} epochs)"


# -- 2 --------------------------------------------------------------------------

def criterion_worst_case_gap(ds, seeds=(0,), mc_runs=10_000, n_jobs=None, search=None):
    search = search or SearchConfig(th_g=TH_G)
    n_jobs = n_jobs or os.cpu_count() or 1
    rows, ok = [], True
    for s in seeds:
        net = trained(ds, "lenet", s, LENET_TRAIN)
        x, y = ds.x_test, ds.y_test
        prop = binary_search_c(net, x, y, replace(search, seed=s)).worst_accuracy
        _, pgd = weight_pgd(net, x, y, TH_G)
        mc = mc_worstcase(net, x, y, TH_G, mc_runs, seed=s, n_jobs=n_jobs).min_accuracy
        good = prop <= 0.15 and prop <= pgd <= 0.30 and mc >= 0.90 and prop <= pgd <= mc
        ok &= good
        rows.append(f"seed {s}: proposed={prop:.4f} pgd={pgd:.4f} mc{mc_runs}={mc:.4f}")
    return ok, "; ".join(rows)


# -- 3 --------------------------------------------------------------------------

def criterion_bound_satisfaction(workdir: Path, dataset: str, checkpoint: Path, th_gs=(0.005, 0.03),
                                 search_overrides=None, mc_runs=100):
    """Run the attack, PGD and MC pipelines and check every emitted report."""
    base = {"experiment.dataset": dataset, "experiment.checkpoint": str(checkpoint),
            "experiment.figures": "false", "mc.n_runs": str(mc_runs)}
    base.update(search_overrides or {})
    for th in th_gs:
        for pipe in ("attack", "pgd", "mc"):
            over = dict(base, **{"experiment.th_g": repr(th), "experiment.out": str(workdir / f"{pipe}_{th}")})
            run_experiment(load_config(None, over), pipe)
    return check_reports(workdir)


def check_reports(root: Path):
    reports = sorted(root.rglob("report.json"))
    bad = []
    for r in reports:
        rep = json.loads(r.read_text())
        pert = WeightPerturbation.load(r.parent / "perturbation.ckpt")
        if not (rep["achieved_L"] <= rep["th_g"] + BOUND_TOL and pert.max_abs() <= rep["th_g"] + BOUND_TOL
                and pert.max_abs() == rep["achieved_L"]):
            bad.append(str(r))
    return bool(reports) and not bad, f"{len(reports) - len(bad)}/{len(reports)} reports within bound" + (
        f"; violations: {bad}" if bad else "")


# -- 4 --------------------------------------------------------------------------

TH_GRID = (0.005, 0.01, 0.02, 0.03)
C_GRID = tuple(np.logspace(-7, -1, 5))


def criterion_monotonicity(net: Network, ds, search: SearchConfig, slack=0.005):
    """Returns (passed, detail, reports by th_g)."""
    x, y = ds.x_test, ds.y_test
    reports = {t: binary_search_c(net, x, y, replace(search, th_g=t)) for t in TH_GRID}
    worst = [reports[t].worst_accuracy for t in TH_GRID]
    a_ok = all(b <= a + slack for a, b in zip(worst, worst[1:]))
    rows = c_sweep(net, x, y, replace(search, th_g=TH_G), C_GRID)
    Ls = [r["L"] for r in rows]
    b_ok = all(b >= a for a, b in zip(Ls, Ls[1:]))
    detail = ("(a) worst acc over th_g " + ", ".join(f"{t:g}:{w:.4f}" for t, w in zip(TH_GRID, worst))
              + f" -> {'ok' if a_ok else 'violated'}; (b) L over c "
              + ", ".join(f"{r['c']:.1e}:{r['L']:.5f}" for r in rows) + f" -> {'ok' if b_ok else 'violated'}")
    return a_ok and b_ok, detail, reports


# -- 5 --------------------------------------------------------------------------

def diagnostics(rep):
    """Confidence, sink-class and bimodality checks on one worst-case report."""
    conf = analyze_confidence(rep.records.confidence, rep.records.correct)
    cm = analyze_confusion(rep.records.true, rep.records.predicted, rep.num_classes)
    pa = analyze_perturbation(rep.perturbation.deltas, rep.th_g)
    ok = (conf.mean_wrong is not None and conf.mean_correct is not None and conf.mean_wrong > conf.mean_correct
          and cm.sink_share >= 0.5 and pa.extreme_fraction >= 0.6)
    fmt = lambda v: "absent" if v is None else f"{v:.3f}"
    detail = (f"worst acc={rep.worst_accuracy:.4f}; confidence wrong={fmt(conf.mean_wrong)} vs "
              f"correct={fmt(conf.mean_correct)}; sink class {cm.sink_class} share={cm.sink_share:.3f} (>=0.5); "
              f"extreme-bin fraction={pa.extreme_fraction:.3f} (>=0.6)")
    return ok, detail


# -- 6 --------------------------------------------------------------------------

def criterion_hardening(ds, seeds=(0, 1, 2), search=None, config=LENET_TRAIN):
    search = search or SearchConfig(th_g=TH_G)
    res = {}
    trainers = {
        "regular": None,
        "variation_aware": lambda n, x, y, c: variation_aware_train(n, x, y, c, TH_G),
        "adversarial": lambda n, x, y, c: adversarial_train(n, x, y, c, TH_G, inner_search_config(TH_G)),
    }
    for tag, fn in trainers.items():
        nets = [trained(ds, "lenet", s, config, tag, fn) for s in seeds]
        res[tag] = HardeningResult(tag, [binary_search_c(n, ds.x_test, ds.y_test, replace(search, seed=s)).worst_accuracy
                                         for s, n in zip(seeds, nets)])
    ok = res["adversarial"].mean >= 0.90 and res["variation_aware"].mean > res["regular"].mean
    detail = "; ".join(f"{k} {v.mean:.4f}±{0 if np.isnan(v.std) else v.std:.4f}" for k, v in res.items())
    return ok, detail


# -- 7 --------------------------------------------------------------------------

def criterion_sweep(mnist, cifar, extended: bool, seeds=(0, 1, 2), search=None):
    search = search or SearchConfig()
    nets = [trained(mnist, "lenet", s, LENET_TRAIN) for s in seeds]
    spec = SweepSpec(seeds=len(seeds))
    res = write_verify_sweep(nets, mnist.x_test, mnist.y_test, spec, search)
    lenet_ok = res.star is not None and 0.005 <= res.star <= 0.012
    detail = f"LeNet star th_g={res.star} (in [0.005, 0.012])"
    if cifar is None:
        return False, detail + "; ConvNet: CIFAR-10 unavailable"
    if not extended:
        return False, detail + "; ConvNet: extended job not enabled (ARTIFACT_EXTENDED=1)"
    cs = replace(search, iters=100, eval_subset_size=2000)
    reg = [trained(cifar, "convnet", s, CONVNET_TRAIN) for s in seeds]
    adv_fn = lambda n, x, y, c: adversarial_train(n, x, y, c, TH_G, inner_search_config(TH_G))
    adv = [trained(cifar, "convnet", s, CONVNET_TRAIN, "adversarial", adv_fn) for s in seeds]
    r_reg = write_verify_sweep(reg, cifar.x_test, cifar.y_test, spec, cs)
    r_adv = write_verify_sweep(adv, cifar.x_test, cifar.y_test, spec, cs)
    ratio = (r_adv.star or 0.0) / r_reg.star if r_reg.star else float("nan")
    return lenet_ok and ratio >= 1.3, detail + f"; ConvNet star regular={r_reg.star} adversarial={r_adv.star} ratio={ratio:.2f} (>=1.3)"
