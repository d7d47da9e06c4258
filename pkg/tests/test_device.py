import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cimworst.device import (BoundViolation, DeviceConfig, WeightPerturbation, apply_perturbation, compute_thg,
                             device_error_to_weight_error, extreme_weight_errors, reconstruct_weight,
                             sample_mc_perturbation, slice_weight)
from cimworst.models import Network, QuantConfig, build_lenet


def test_slice_example():
    assert slice_weight(13, DeviceConfig(M=4, K=2)) == [1, 3]


def test_slice_bijection_exhaustive():
    cfg = DeviceConfig(M=8, K=2)
    seen = set()
    for w in range(256):
        levels = slice_weight(w, cfg)
        assert all(0 <= g <= 3 for g in levels)
        assert reconstruct_weight(levels, cfg) == w
        seen.add(tuple(levels))
    assert len(seen) == 256


def test_thg_examples():
    assert compute_thg(DeviceConfig(M=4, K=2, th=0.06)) == pytest.approx(0.03)
    assert compute_thg(DeviceConfig(M=4, K=2, th=0.0)) == 0.0
    # raw integer-grid value: th * (1 + 4)
    assert compute_thg(DeviceConfig(M=4, K=2, th=0.06, weight_scale=1.0)) == pytest.approx(0.3)


def test_thg_is_max_over_sign_patterns():
    for M, K in [(4, 2), (6, 2), (8, 4), (4, 1)]:
        cfg = DeviceConfig(M=M, K=K, th=0.05)
        errs = extreme_weight_errors(cfg)
        assert len(errs) == 2 ** (M // K)
        assert max(np.abs(errs)) == pytest.approx(compute_thg(cfg))


@settings(max_examples=100, deadline=None)
@given(errors=st.lists(st.floats(-0.06, 0.06), min_size=2, max_size=2))
def test_device_errors_within_thg(errors):
    cfg = DeviceConfig(M=4, K=2, th=0.06)
    assert abs(device_error_to_weight_error(errors, cfg) * cfg.weight_scale) <= compute_thg(cfg) + 1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        DeviceConfig(M=5, K=2)
    with pytest.raises(ValueError):
        DeviceConfig(th=-1)


@pytest.mark.parametrize("dist", ["uniform", "truncated_gaussian"])
def test_mc_sampler_bounds_and_mean(dist):
    th = 0.03
    p = sample_mc_perturbation({"w": (1_000_000,)}, th, 0, dist)
    d = p.deltas["w"]
    assert np.max(np.abs(d)) <= th
    assert abs(d.mean()) <= 0.001 * th * 3  # ~3 standard errors for the uniform draw
    if dist == "uniform":
        assert d.std() == pytest.approx(th / np.sqrt(3), rel=0.01)


def test_mc_sampler_seeded():
    a = sample_mc_perturbation({"w": (5, 5)}, 0.03, 7).deltas["w"]
    b = sample_mc_perturbation({"w": (5, 5)}, 0.03, 7).deltas["w"]
    c = sample_mc_perturbation({"w": (5, 5)}, 0.03, 8).deltas["w"]
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()
    assert not sample_mc_perturbation({"w": (3,)}, 0.0, 0).deltas["w"].any()


def test_perturbation_bound_check():
    p = WeightPerturbation({"w": np.array([0.0, 0.031])}, 0.03)
    with pytest.raises(BoundViolation):
        p.check()
    WeightPerturbation({"w": np.array([0.03])}, 0.03).check()


def test_perturbed_view_leaves_network_untouched():
    net = build_lenet(seed=0)
    x = np.random.default_rng(0).normal(size=(4, 1, 28, 28))
    base = net.forward(x).data
    p = sample_mc_perturbation(net, 0.03, 1)
    view = apply_perturbation(net, p)
    assert not np.array_equal(view.forward(x).data, base)
    np.testing.assert_array_equal(apply_perturbation(net, p.negated()).effective_weights()["fc3.weight"],
                                  net.quantized_weights()["fc3.weight"] - p.deltas["fc3.weight"])
    assert net.forward(x).data.tobytes() == base.tobytes()


def test_single_weight_shift_moves_logit_exactly():
    net = build_lenet(seed=3, quant=QuantConfig(quantize_activations=False))
    x = np.random.default_rng(2).normal(size=(1, 1, 28, 28))
    trunk = Network(net.arch, net.layers[:-1], net.input_shape, net.quant, net.params, net.buffers)
    feat = trunk.forward(x).data[0]  # input of the last fully connected layer
    j = int(np.argmax(feat))
    deltas = {k: np.zeros(s) for k, s in net.weight_shapes().items()}
    deltas["fc3.weight"][4, j] = 0.03
    diff = net.forward(x, deltas).data[0] - net.forward(x).data[0]
    assert diff[4] == pytest.approx(0.03 * feat[j], rel=1e-10)
    assert np.allclose(np.delete(diff, 4), 0.0)


def test_apply_checks_shapes():
    net = build_lenet(seed=0)
    with pytest.raises(ValueError, match="layers"):
        apply_perturbation(net, WeightPerturbation({"x": np.zeros(1)}, 0.1))


def test_perturbation_save_load(tmp_path):
    p = sample_mc_perturbation({"a": (2, 3), "b": (4,)}, 0.02, 0)
    p.save(tmp_path / "p.ckpt")
    q = WeightPerturbation.load(tmp_path / "p.ckpt")
    assert q.bound == 0.02
    for k in p.deltas:
        assert p.deltas[k].tobytes() == q.deltas[k].tobytes()
