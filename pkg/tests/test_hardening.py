import math

import numpy as np
import pytest

from cimworst.hardening import (HardeningResult, SweepSpec, adversarial_train, inner_search_config,
                                variation_aware_train, write_verify_sweep)
from cimworst.models import TrainConfig, train
from cimworst.search import SearchConfig

from conftest import blobs, tiny_network

CFG = TrainConfig(epochs=3, batch_size=32, val_size=60, lr=0.01, seed=5)


@pytest.mark.parametrize("trainer", [variation_aware_train, adversarial_train])
def test_zero_noise_reduces_to_regular_training(trainer):
    x, y = blobs()
    _, ref = train(tiny_network(1), x, y, CFG)
    net, hist = trainer(tiny_network(1), x, y, CFG, 0.0)
    assert [r[2] for r in hist.rows] == [r[2] for r in ref.rows]
    assert [r[1] for r in hist.rows] == [r[1] for r in ref.rows]


def test_variation_aware_changes_trajectory():
    x, y = blobs()
    _, ref = train(tiny_network(1), x, y, CFG)
    _, hist = variation_aware_train(tiny_network(1), x, y, CFG, 0.2)
    assert [r[1] for r in hist.rows] != [r[1] for r in ref.rows]


def test_adversarial_training_runs_and_keeps_best():
    x, y = blobs()
    net, hist = adversarial_train(tiny_network(1), x, y, CFG, 0.2, inner_search_config(0.2, iters=2))
    assert hist.best_val_acc == max(r[2] for r in hist.rows)
    assert net.accuracy(x[-60:], y[-60:]) == pytest.approx(hist.best_val_acc)


def test_negative_bound_rejected():
    x, y = blobs()
    with pytest.raises(ValueError):
        variation_aware_train(tiny_network(), x, y, CFG, -0.1)


def test_hardening_result_stats():
    r = HardeningResult("regular", [0.1, 0.2, 0.3])
    assert r.mean == pytest.approx(0.2)
    assert r.std == pytest.approx(0.1)
    assert r.to_json()["n_seeds"] == 3
    assert math.isnan(HardeningResult("regular", [0.5]).std)


def test_sweep_spec_validation():
    assert SweepSpec((0.001, 0.03, 0.01)).th_gs == (0.03, 0.01, 0.001)
    with pytest.raises(ValueError):
        SweepSpec((0.01, 0.01))
    with pytest.raises(ValueError):
        SweepSpec((-0.1,))
    with pytest.raises(ValueError):
        SweepSpec((0.1,), seeds=0)


def test_write_verify_sweep(trained_tiny):
    net, x, y = trained_tiny
    spec = SweepSpec((0.0, 0.1, 0.6), seeds=1, drop=0.05)
    res = write_verify_sweep([net], x, y, spec, SearchConfig(lr=0.003, iters=30, max_rounds=3))
    curve = {t: m for t, m, _ in res.curve}
    assert curve[0.0] == res.clean_mean == net.accuracy(x, y)
    assert curve[0.6] <= curve[0.1] + 0.005
    assert res.star is not None and curve[res.star] >= res.clean_mean - 0.05
    assert len(res.rows) == 3
    with pytest.raises(ValueError):
        write_verify_sweep([net, net], x, y, spec, SearchConfig())
