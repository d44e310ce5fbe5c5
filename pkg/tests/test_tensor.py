import numpy as np
import pytest

from armar import nn


def test_sum_grad_is_ones():
    x = nn.Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    nn.sum_(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3), dtype=np.float32))


def test_sum_of_squares_grad():
    x = nn.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    nn.sum_(nn.square(x)).backward()
    assert np.allclose(x.grad, [2.0, 4.0])


def test_trace_single_use():
    x = nn.Tensor(np.ones(3), requires_grad=True)
    loss = nn.sum_(nn.square(x))
    loss.backward()
    with pytest.raises(RuntimeError, match="consumed"):
        loss.backward()


def test_shared_subgraph_reuse_rejected():
    x = nn.Tensor(np.ones(3), requires_grad=True)
    mid = nn.square(x)
    nn.sum_(mid).backward()
    with pytest.raises(RuntimeError):
        nn.sum_(mid * 2.0).backward()


def test_backward_requires_grads_for_nonscalar():
    x = nn.Tensor(np.ones((2, 2)), requires_grad=True)
    y = nn.square(x)
    with pytest.raises(ValueError):
        nn.backward([y])
    x2 = nn.Tensor(np.ones((2, 2)), requires_grad=True)
    y2 = nn.square(x2)
    nn.backward([y2], [np.full((2, 2), 3.0, dtype=np.float32)])
    assert np.allclose(x2.grad, 6.0)


def test_broadcast_add_unbroadcasts_grad():
    a = nn.Tensor(np.ones((2, 3)), requires_grad=True)
    b = nn.Tensor(np.ones((1, 3)), requires_grad=True)
    nn.sum_(a + b).backward()
    assert a.grad.shape == (2, 3)
    assert b.grad.shape == (1, 3)
    assert np.allclose(b.grad, 2.0)


def test_matmul_batched_grad_shapes():
    a = nn.Tensor(np.random.default_rng(0).normal(size=(4, 5, 3)), requires_grad=True)
    w = nn.Tensor(np.random.default_rng(1).normal(size=(3, 2)), requires_grad=True)
    nn.sum_(nn.matmul(a, w)).backward()
    assert a.grad.shape == (4, 5, 3)
    assert w.grad.shape == (3, 2)


def test_softmax_rows_sum_to_one():
    x = nn.Tensor(np.random.default_rng(2).normal(size=(5, 7)) * 10.0)
    s = nn.softmax(x, axis=-1)
    assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_single_token_is_one():
    x = nn.Tensor(np.array([[3.7]]))
    assert np.allclose(nn.softmax(x, axis=-1).data, 1.0)


def test_concat_and_narrow_roundtrip():
    a = nn.Tensor(np.ones((2, 3)), requires_grad=True)
    b = nn.Tensor(np.zeros((2, 2)), requires_grad=True)
    cat = nn.concat([a, b], axis=1)
    back = nn.narrow(cat, 1, 0, 3)
    nn.sum_(back).backward()
    assert np.allclose(a.grad, 1.0)
    assert np.allclose(b.grad, 0.0)


def test_clip_gradient_mask():
    x = nn.Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
    nn.sum_(nn.clip(x, -1.0, 1.0)).backward()
    assert np.allclose(x.grad, [0.0, 1.0, 0.0])


def test_determinism_bit_identical():
    def run():
        r = np.random.default_rng(99)
        x = nn.Tensor(r.normal(size=(3, 4)).astype(np.float32), requires_grad=True)
        y = nn.sum_(nn.tanh(x) * nn.sigmoid(x))
        y.backward()
        return y.data.copy(), x.grad.copy()

    (y1, g1), (y2, g2) = run(), run()
    assert np.array_equal(y1, y2)
    assert np.array_equal(g1, g2)


def test_dtype_context():
    with nn.use_dtype(np.float64):
        t = nn.Tensor(np.ones(2))
        assert t.data.dtype == np.float64
    assert nn.Tensor(np.ones(2)).data.dtype == np.float32


def test_two_layer_perceptron_hand_oracle():
    # hand evaluation: x=[1,2], W1=[[1,0],[1,1]] (in x out), b1=[0.5,-0.5],
    # h=silu-free identity via no activation, W2=[[2],[1]], b2=[0.25]
    rng = np.random.default_rng(0)
    l1 = nn.Linear(2, 2, rng)
    l2 = nn.Linear(2, 1, rng)
    l1.weight.data = np.array([[1.0, 0.0], [1.0, 1.0]], dtype=np.float32)
    l1.bias.data = np.array([0.5, -0.5], dtype=np.float32)
    l2.weight.data = np.array([[2.0], [1.0]], dtype=np.float32)
    l2.bias.data = np.array([0.25], dtype=np.float32)
    x = nn.Tensor(np.array([[1.0, 2.0]], dtype=np.float32))
    out = l2(l1(x))
    # scalar arithmetic: h = [1*1+2*1+0.5, 2*1-0.5] = [3.5, 1.5]
    # y = 2*3.5 + 1*1.5 + 0.25 = 8.75
    assert np.allclose(out.data, [[8.75]])


def test_nearest_upsample_grad_pools():
    x = nn.Tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2), requires_grad=True)
    y = nn.nearest_upsample2(x)
    assert y.shape == (1, 1, 4, 4)
    nn.sum_(y).backward()
    assert np.allclose(x.grad, 4.0)
