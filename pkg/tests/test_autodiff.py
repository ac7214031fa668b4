import numpy as np
import pytest

from carml import autodiff as ad


def check_grad(build, arrays, rtol=1e-6, atol=1e-8, h=1e-6):
    """Compare backprop gradients of scalar ``build(*tensors)`` with central differences."""
    tensors = [ad.parameter(a) for a in arrays]
    out = build(*tensors)
    out.backward()
    for t in tensors:
        num = ad.numerical_grad(lambda: float(build(*tensors).data), t.data, h)
        np.testing.assert_allclose(t.grad, num, rtol=rtol, atol=atol)


rng = np.random.default_rng(0)


def r(*shape):
    return rng.normal(size=shape)


W34 = r(3, 4)


@pytest.mark.parametrize("name,build,arrays", [
    ("add_broadcast", lambda a, b: ((a + b) * (a + b)).sum(), [r(3, 4), r(4)]),
    ("sub", lambda a, b: ad.square(a - b).sum(), [r(2, 3), r(1, 3)]),
    ("mul", lambda a, b: (a * b).sum(), [r(3, 2), r(3, 1)]),
    ("div", lambda a, b: (a / b).sum(), [r(4), np.abs(r(4)) + 1.0]),
    ("neg", lambda a: (-a * a).sum(), [r(5)]),
    ("exp", lambda a: ad.exp(a).sum(), [r(3, 3)]),
    ("log", lambda a: ad.log(a).sum(), [np.abs(r(6)) + 0.5]),
    ("tanh", lambda a: ad.tanh(a).sum(), [r(4, 2)]),
    ("sigmoid", lambda a: (ad.sigmoid(a) * np.arange(3.0)).sum(), [r(2, 3)]),
    ("relu", lambda a: (ad.relu(a) * a).sum(), [r(7) + 0.05]),
    ("minimum", lambda a, b: ad.minimum(a, b).sum(), [r(8), r(8)]),
    ("clip", lambda a: (ad.clip(a, -0.5, 0.5) * a).sum(), [r(10) * 2]),
    ("sum_axis", lambda a: ad.square(a.sum(axis=1)).sum(), [r(3, 4)]),
    ("mean_keepdims", lambda a: ad.square(a - a.mean(axis=0, keepdims=True)).sum(), [r(5, 2)]),
    ("reshape", lambda a: (a.reshape(6, 2) * np.arange(12.0).reshape(6, 2)).sum(), [r(3, 4)]),
    ("getitem_basic", lambda a: ad.square(a[1:, ::2]).sum(), [r(4, 5)]),
    ("getitem_fancy", lambda a: ad.square(a[np.array([0, 2, 0])]).sum(), [r(3, 2)]),
    ("concat", lambda a, b: ad.square(ad.concat([a, b], axis=1)).sum(), [r(2, 3), r(2, 1)]),
    ("stack", lambda a, b: (ad.stack([a, b], axis=1) * np.arange(8.0).reshape(2, 2, 2)).sum(), [r(2, 2), r(2, 2)]),
    ("matmul_batched", lambda a, b: ad.tanh(ad.matmul(a, b)).sum(), [r(2, 3, 4), r(4, 5)]),
    ("log_softmax", lambda a: (ad.log_softmax(a, axis=-1) * W34).sum(), [r(3, 4)]),
    ("logsumexp", lambda a: ad.logsumexp(a, axis=0).sum(), [r(4, 3)]),
])
def test_op_gradients(name, build, arrays):
    check_grad(build, arrays)


@pytest.mark.parametrize("seed", range(5))
def test_gru_cell_gradient(seed):
    g = np.random.default_rng(seed)
    H = 4
    weights = g.normal(size=(2, H))
    check_grad(lambda x, h, w, b: (ad.gru_cell(x, h, w, b) * weights).sum(),
               [g.normal(size=(2, 3 * H)), g.normal(size=(2, H)), g.normal(size=(H, 3 * H)) * 0.5,
                g.normal(size=3 * H) * 0.1])


def test_gru_cell_matches_reference_equations():
    g = np.random.default_rng(3)
    H = 3
    x, h, w, b = g.normal(size=(1, 3 * H)), g.normal(size=(1, H)), g.normal(size=(H, 3 * H)), g.normal(size=3 * H)
    out = ad.gru_cell(ad.Tensor(x), ad.Tensor(h), ad.Tensor(w), ad.Tensor(b)).data
    hp = h @ w + b
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))  # noqa: E731
    z = sig(x[:, :H] + hp[:, :H])
    rr = sig(x[:, H:2 * H] + hp[:, H:2 * H])
    n = np.tanh(x[:, 2 * H:] + rr * hp[:, 2 * H:])
    np.testing.assert_allclose(out, (1 - z) * n + z * h, rtol=1e-13)


def test_shared_subgraph_accumulates():
    x = ad.parameter(np.array([1.5, -2.0]))
    y = x * x
    (y + y * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, 8.0 * x.data)


def test_backward_requires_scalar():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_constants_get_no_grad():
    c = ad.Tensor(np.ones(3))
    x = ad.parameter(np.ones(3))
    (c * x).sum().backward()
    assert c.grad is None


def test_adam_minimizes_quadratic_and_clips():
    x = ad.parameter(np.array([5.0, -3.0]))
    opt = ad.Adam([x], lr=0.1, max_grad_norm=1.0)
    first = None
    for _ in range(500):
        ad.zero_grad([x])
        ad.square(x).sum().backward()
        n = opt.step()
        first = n if first is None else first
    assert first == pytest.approx(2 * np.hypot(5.0, 3.0))
    assert np.abs(x.data).max() < 1e-2


def test_adam_state_round_trip():
    x = ad.parameter(np.array([1.0, 2.0]))
    opt = ad.Adam([x], lr=0.01)
    for _ in range(3):
        ad.zero_grad([x])
        ad.square(x).sum().backward()
        opt.step()
    st = opt.state_dict()
    y = ad.parameter(x.data)
    opt2 = ad.Adam([y], lr=0.01)
    opt2.load_state_dict(st)
    for o, p in ((opt, x), (opt2, y)):
        ad.zero_grad([p])
        ad.square(p).sum().backward()
        o.step()
    assert np.array_equal(x.data, y.data)
