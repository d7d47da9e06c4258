import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cimworst.numerics import (AutodiffError, Graph, ShapeError, Tensor, UnsupportedOperation, backward,
                               finite_difference_check, forward_primitive, load_tensors, save_tensors)
from cimworst.numerics import ops as F
from cimworst.numerics.checkpoint import CheckpointError


def test_linear_identity():
    out = F.linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_relu_definition():
    np.testing.assert_array_equal(F.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_conv_scalar_kernel():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)), stride=1)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def _conv_reference(x, w, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, wd = xp.shape
    o, _, kh, kw = w.shape
    oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for k in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, k, i, j] = (patch * w[k]).sum()
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv_matches_loops(stride, pad):
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3))
    out = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, _conv_reference(x, w, stride, pad), atol=1e-12)


def test_shape_errors_name_the_op():
    with pytest.raises(ShapeError, match="conv2d"):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="linear.*3.*2"):
        F.linear(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))))
    with pytest.raises(ShapeError, match="maxpool2d"):
        F.maxpool2d(Tensor(np.ones((1, 1, 5, 4))), 2)


def test_unsupported_kind():
    with pytest.raises(UnsupportedOperation):
        forward_primitive("tanh", Tensor([1.0]))
    assert forward_primitive("relu", [-1.0, 3.0]).data.tolist() == [0.0, 3.0]


def test_backward_linear_scalar():
    w = Tensor(3.0, requires_grad=True)
    with Graph() as g:
        loss = F.scale(w, 2.0)
    backward(g, loss)
    assert w.grad == 2.0


def test_backward_inactive_relu():
    w = Tensor(-1.0, requires_grad=True)
    with Graph() as g:
        loss = F.relu(w)
    backward(g, loss)
    assert w.grad == 0.0


def test_backward_errors():
    w = Tensor(np.ones(3), requires_grad=True)
    g = Graph()
    with pytest.raises(AutodiffError, match="before"):
        backward(g, Tensor(1.0, requires_grad=True))
    with g:
        y = F.relu(w)
    with pytest.raises(AutodiffError, match="scalar"):
        backward(g, y)


def test_tape_does_not_keep_dropped_outputs_alive():
    import weakref
    w = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        side = F.relu(w)
        ref = weakref.ref(side)
        del side
        loss = F.total(F.scale(w, 2.0))
    assert ref() is None
    # a fresh leaf may reuse the dropped tensor's id; it must not pick up gradient
    fresh = [Tensor(np.ones(3), requires_grad=True) for _ in range(50)]
    backward(g, loss)
    assert np.allclose(w.grad, 2.0) and all(t.grad is None for t in fresh)


def test_no_graph_means_no_recording():
    w = Tensor(np.ones(3), requires_grad=True)
    y = F.relu(w)
    assert y.is_leaf and not y.requires_grad


def test_quadratic_fd_exact():
    w = Tensor(np.array([3.0]))

    def loss():
        x = F.reshape(w, (1, 1))
        return F.total(F.linear(x, x))  # w^2

    assert loss().item() == 9.0
    assert finite_difference_check(loss, w, epsilon=1e-4) <= 1e-6


def _mlp_loss(x, labels, params, layers):
    h = Tensor(x)
    for i in range(layers):
        h = F.linear(h, params[f"w{i}"], params[f"b{i}"])
        if i < layers - 1:
            h = F.relu(h)
    return F.cross_entropy(h, labels)


def _make_mlp(seed, layers, width=6, n_in=5, n_out=4):
    rng = np.random.default_rng(seed)
    dims = [n_in] + [width] * (layers - 1) + [n_out]
    params = {}
    for i in range(layers):
        params[f"w{i}"] = Tensor(rng.normal(size=(dims[i + 1], dims[i])) / np.sqrt(dims[i]), requires_grad=True)
        params[f"b{i}"] = Tensor(rng.normal(size=dims[i + 1]) * 0.1, requires_grad=True)
    x = rng.normal(size=(8, n_in))
    labels = rng.integers(0, n_out, size=8)
    return params, x, labels


def test_three_layer_mlp_fd():
    params, x, labels = _make_mlp(0, 3)
    for name, p in params.items():
        err = finite_difference_check(lambda: _mlp_loss(x, labels, params, 3), p, epsilon=1e-4, n_coords=None)
        assert err <= 1e-4, name


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), layers=st.integers(1, 3))
def test_random_mlp_fd_property(seed, layers):
    params, x, labels = _make_mlp(seed, layers)
    err = finite_difference_check(lambda: _mlp_loss(x, labels, params, layers), params["w0"],
                                  epsilon=1e-4, n_coords=None)
    assert err <= 1e-4


def test_cnn_primitives_fd():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 2, 8, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)
    b = Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
    fw = Tensor(rng.normal(size=(5, 12)) * 0.3, requires_grad=True)
    labels = np.array([1, 4])

    def loss():
        h = F.add(F.conv2d(x, w, stride=1, padding=1), b)
        h = F.maxpool2d(F.relu(h), 2)
        h = F.avgpool2d(h, 2)
        o = F.linear(F.flatten(h), fw)
        ce = F.cross_entropy(o, labels, reduction="sum")
        margin = F.sub(F.gather(o, labels), F.reduce_max_excluding_index(o, labels))
        s = F.softmax(o)
        extra = F.total(F.softplus(F.hinge(margin)))
        return F.add(F.add(ce, extra), F.total(F.scale(F.gather(s, labels), 3.0)))

    for t in (x, w, b, fw):
        assert finite_difference_check(loss, t, epsilon=1e-5, n_coords=60) <= 1e-4


def test_backward_linearity():
    params, x, labels = _make_mlp(5, 3)

    def grads(a, b):
        with Graph() as g:
            l1 = _mlp_loss(x, labels, params, 3)
            l2 = F.cross_entropy(F.linear(F.relu(F.linear(Tensor(x), params["w0"], params["b0"])),
                                          Tensor(np.ones((4, 6)))), labels)
            loss = F.add(F.scale(l1, a), F.scale(l2, b))
        backward(g, loss)
        return params["w0"].grad.copy()

    def single(which):
        with Graph() as g:
            if which == 1:
                loss = _mlp_loss(x, labels, params, 3)
            else:
                loss = F.cross_entropy(F.linear(F.relu(F.linear(Tensor(x), params["w0"], params["b0"])),
                                                Tensor(np.ones((4, 6)))), labels)
        backward(g, loss)
        return params["w0"].grad.copy()

    a, b = 2.5, -0.75
    np.testing.assert_allclose(grads(a, b), a * single(1) + b * single(2), atol=1e-10, rtol=0)


def test_forward_determinism():
    params, x, labels = _make_mlp(7, 3)
    a = _mlp_loss(x, labels, params, 3).data
    b = _mlp_loss(x, labels, params, 3).data
    assert a.tobytes() == b.tobytes()


def test_maxpool_tie_goes_to_lowest_index():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Graph() as g:
        loss = F.total(F.maxpool2d(x, 2))
    backward(g, loss)
    np.testing.assert_array_equal(x.grad.ravel(), [1, 0, 0, 0])


def test_reduce_max_excluding_index():
    o = Tensor(np.array([[5.0, 1.0, 3.0, 3.0], [0.0, 2.0, 2.0, -1.0]]), requires_grad=True)
    with Graph() as g:
        m = F.reduce_max_excluding_index(o, [0, 3])
        loss = F.total(m)
    assert m.data.tolist() == [3.0, 2.0]
    backward(g, loss)
    np.testing.assert_array_equal(o.grad, [[0, 0, 1, 0], [0, 1, 0, 0]])


def test_max_abs_subgradient():
    a = Tensor(np.array([0.1, -0.4]), requires_grad=True)
    b = Tensor(np.array([[0.4, 0.2]]), requires_grad=True)
    with Graph() as g:
        m = F.max_abs([a, b])
    assert m.item() == pytest.approx(0.4)
    backward(g, m)
    np.testing.assert_array_equal(a.grad, [0.0, -1.0])
    np.testing.assert_array_equal(b.grad, [[0.0, 0.0]])


def test_hinge_kink_excluded_from_fd():
    w = Tensor(np.array([0.0, 1.0, -2.0]))
    err = finite_difference_check(lambda: F.total(F.hinge(w)), w, epsilon=1e-4, n_coords=None)
    assert err <= 1e-6


def test_fake_quant_ste():
    x = Tensor(np.array([0.26, -0.9, 0.04]), requires_grad=True)
    with Graph() as g:
        q = F.fake_quant(x, 0.1, -7, 7)
        loss = F.total(q)
    np.testing.assert_allclose(q.data, [0.3, -0.7, 0.0])
    backward(g, loss)
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 1.0])


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    t = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}
    save_tensors(tmp_path / "c.ckpt", t, kind="weights", arch="x")
    back, header = load_tensors(tmp_path / "c.ckpt")
    assert header["kind"] == "weights" and header["arch"] == "x"
    assert list(back) == ["a", "b"]
    for k in t:
        assert back[k].tobytes() == t[k].tobytes()
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_tensors(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_tensors(tmp_path / "short.ckpt")
