"""Unit tests for the reverse-mode autodiff engine.

Forward results are checked against deliberately naive loop-based
reference implementations written here; gradients are checked against
central finite differences in float64.
"""

import numpy as np
import pytest

from gprinv import autodiff as ad
from gprinv.errors import (NonFinite, OddSpatialDim, OutOfRange,
                           ShapeMismatch, UnsupportedKernel)


def rng(seed=0):
    return np.random.default_rng(seed)


def t4(arr, requires_grad=False):
    return ad.Tensor4(np.asarray(arr, dtype=np.float64), requires_grad)


# ---------------------------------------------------------------------------
# Reference implementations (straightforward loops, independent of the
# vectorized code under test)
# ---------------------------------------------------------------------------

def ref_conv2d(x, w, b=None):
    bsz, _, h, wd = x.shape
    out_c, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((bsz, out_c, h, wd), dtype=x.dtype)
    for n in range(bsz):
        for o in range(out_c):
            for i in range(h):
                for j in range(wd):
                    out[n, o, i, j] = np.sum(xp[n, :, i:i + k, j:j + k] * w[o])
    if b is not None:
        out += b
    return out


def ref_upconv2(x, w, b=None):
    up = x.repeat(2, axis=2).repeat(2, axis=3)
    up = np.pad(up, ((0, 0), (0, 0), (0, 1), (0, 1)))
    bsz, _, hp, wp = up.shape
    out_c = w.shape[0]
    out = np.zeros((bsz, out_c, hp - 1, wp - 1), dtype=x.dtype)
    for n in range(bsz):
        for o in range(out_c):
            for i in range(hp - 1):
                for j in range(wp - 1):
                    out[n, o, i, j] = np.sum(up[n, :, i:i + 2, j:j + 2] * w[o])
    if b is not None:
        out += b
    return out


def ref_maxpool2(x):
    bsz, c, h, w = x.shape
    out = np.zeros((bsz, c, h // 2, w // 2), dtype=x.dtype)
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, :, i, j] = x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max(axis=(2, 3))
    return out


# ---------------------------------------------------------------------------
# Tensor basics
# ---------------------------------------------------------------------------

def test_tensor_requires_4d():
    with pytest.raises(ShapeMismatch):
        ad.Tensor4(np.zeros((3, 3)))


def test_tensor_rejects_nan():
    bad = np.zeros((1, 1, 2, 2))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFinite):
        ad.Tensor4(bad)


def test_finite_check_toggle():
    with np.errstate(over="ignore"):
        prev = ad.set_finite_checks(False)
        try:
            big = ad.Tensor4(np.full((1, 1, 1, 1), 1e308))
            out = ad.scale(big, 10.0)  # overflow to inf allowed while disabled
            assert np.isinf(out.data).all()
        finally:
            ad.set_finite_checks(prev)
        with pytest.raises(NonFinite):
            ad.scale(ad.Tensor4(np.full((1, 1, 1, 1), 1e308)), 10.0)


def test_backward_requires_scalar():
    x = t4(rng().normal(size=(1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ShapeMismatch):
        ad.relu(x).backward()


def test_gradient_accumulates_on_reuse():
    x = t4(np.ones((1, 1, 1, 1)), requires_grad=True)
    y = ad.add(x, x)
    ad.mse(y, t4(np.zeros((1, 1, 1, 1)))).backward()
    # d/dx mean((2x)^2) = 8x = 8
    assert x.grad == pytest.approx(np.full((1, 1, 1, 1), 8.0))


def test_diamond_graph_grads():
    vals = np.array([[[[1.5, -2.0]]]])
    x = t4(vals, requires_grad=True)
    y = ad.add(ad.relu(x), ad.scale(x, 2.0))
    loss = ad.mse(y, t4(np.zeros_like(vals)))
    loss.backward()
    # y = 3x for x>0, 2x for x<=0; dloss/dx = 2*y*dy/dx / N
    expect = np.array([[[[2 * 4.5 * 3 / 2, 2 * -4.0 * 2 / 2]]]])
    np.testing.assert_allclose(x.grad, expect)


# ---------------------------------------------------------------------------
# Forward oracles
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv2d_matches_loop_reference(k):
    g = rng(k)
    x = g.normal(size=(2, 3, 5, 6))
    w = g.normal(size=(4, 3, k, k))
    b = g.normal(size=(1, 4, 1, 1))
    out = ad.conv2d(t4(x), t4(w), t4(b))
    np.testing.assert_allclose(out.data, ref_conv2d(x, w, b), rtol=1e-12)


def test_conv2d_rejects_even_kernel():
    with pytest.raises(UnsupportedKernel):
        ad.conv2d(t4(np.zeros((1, 1, 4, 4))), t4(np.zeros((1, 1, 2, 2))))


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.conv2d(t4(np.zeros((1, 2, 4, 4))), t4(np.zeros((1, 3, 3, 3))))


def test_conv2d_rejects_bad_bias_shape():
    with pytest.raises(ShapeMismatch):
        ad.conv2d(t4(np.zeros((1, 1, 4, 4))), t4(np.zeros((2, 1, 3, 3))),
                  t4(np.zeros((2, 1, 1, 1))))


def test_upconv2_matches_loop_reference():
    g = rng(7)
    x = g.normal(size=(2, 3, 4, 5))
    w = g.normal(size=(2, 3, 2, 2))
    b = g.normal(size=(1, 2, 1, 1))
    out = ad.upconv2(t4(x), t4(w), t4(b))
    assert out.shape == (2, 2, 8, 10)
    np.testing.assert_allclose(out.data, ref_upconv2(x, w, b), rtol=1e-12)


def test_upconv2_rejects_wrong_kernel():
    with pytest.raises(UnsupportedKernel):
        ad.upconv2(t4(np.zeros((1, 1, 4, 4))), t4(np.zeros((1, 1, 3, 3))))


def test_maxpool2_matches_loop_reference():
    g = rng(3)
    x = g.normal(size=(2, 3, 6, 8))
    out = ad.maxpool2(t4(x))
    np.testing.assert_array_equal(out.data, ref_maxpool2(x))


def test_maxpool2_rejects_odd_dims():
    with pytest.raises(OddSpatialDim):
        ad.maxpool2(t4(np.zeros((1, 1, 5, 4))))


def test_maxpool2_tie_routes_gradient_to_first():
    # all four window entries equal: the whole gradient goes to the first
    # element in row-major window order
    x = t4(np.ones((1, 1, 2, 2)), requires_grad=True)
    y = ad.maxpool2(x)
    ad.scale(y, 3.0).backward()
    np.testing.assert_array_equal(
        x.grad, np.array([[[[3.0, 0.0], [0.0, 0.0]]]]))


def test_concat_channels_and_split_gradient():
    a = t4(rng(1).normal(size=(1, 2, 3, 3)), requires_grad=True)
    b = t4(rng(2).normal(size=(1, 3, 3, 3)), requires_grad=True)
    y = ad.concat_channels([a, b])
    assert y.shape == (1, 5, 3, 3)
    np.testing.assert_array_equal(y.data[:, :2], a.data)
    np.testing.assert_array_equal(y.data[:, 2:], b.data)
    ad.mse(y, t4(np.zeros((1, 5, 3, 3)))).backward()
    np.testing.assert_allclose(a.grad, 2.0 * a.data / y.data.size)
    np.testing.assert_allclose(b.grad, 2.0 * b.data / y.data.size)


def test_concat_channels_rejects_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.concat_channels([t4(np.zeros((1, 1, 2, 2))),
                            t4(np.zeros((1, 1, 3, 2)))])
    with pytest.raises(ShapeMismatch):
        ad.concat_channels([])


def test_relu_and_elu_values():
    x = t4(np.array([[[[-1.0, 0.0, 2.0]]]]))
    np.testing.assert_array_equal(ad.relu(x).data,
                                  np.array([[[[0.0, 0.0, 2.0]]]]))
    e = ad.elu(x).data
    np.testing.assert_allclose(
        e, np.array([[[[np.expm1(-1.0), 0.0, 2.0]]]]), atol=1e-15)


def test_relu_subgradient_zero_at_zero_and_elu_slope_one():
    x = t4(np.zeros((1, 1, 1, 1)), requires_grad=True)
    ad.scale(ad.relu(x), 5.0).backward()
    assert x.grad == pytest.approx(np.zeros((1, 1, 1, 1)))
    x2 = t4(np.zeros((1, 1, 1, 1)), requires_grad=True)
    ad.scale(ad.elu(x2), 5.0).backward()
    assert x2.grad == pytest.approx(np.full((1, 1, 1, 1), 5.0))


def test_mse_value_and_shape():
    p = t4(np.array([[[[1.0, 3.0]]]]))
    q = t4(np.array([[[[0.0, 1.0]]]]))
    out = ad.mse(p, q)
    assert out.shape == (1, 1, 1, 1)
    assert float(out.data.reshape(())) == pytest.approx((1.0 + 4.0) / 2.0)
    with pytest.raises(ShapeMismatch):
        ad.mse(p, t4(np.zeros((1, 1, 1, 3))))


# ---------------------------------------------------------------------------
# Gradient checks, op by op and chained
# ---------------------------------------------------------------------------

def check(loss_fn, store, extra=None, tol=1e-7, **kw):
    report = ad.grad_check(loss_fn, store, extra, **kw)
    assert report.n_checked > 0
    assert report.max_rel_error < tol, report.per_tensor
    return report


@pytest.mark.parametrize("k", [1, 3])
def test_grad_conv2d(k):
    g = rng(10 + k)
    store = ad.ParamStore(dtype=np.float64)
    w = store.add("w", g.normal(size=(3, 2, k, k)))
    b = store.add("b", g.normal(size=(1, 3, 1, 1)))
    x = t4(g.normal(size=(2, 2, 4, 4)), requires_grad=True)
    target = t4(g.normal(size=(2, 3, 4, 4)))
    check(lambda: ad.mse(ad.conv2d(x, w, b), target), store, {"x": x})


def test_grad_upconv2():
    g = rng(20)
    store = ad.ParamStore(dtype=np.float64)
    w = store.add("w", g.normal(size=(2, 3, 2, 2)))
    b = store.add("b", g.normal(size=(1, 2, 1, 1)))
    x = t4(g.normal(size=(1, 3, 3, 4)), requires_grad=True)
    target = t4(g.normal(size=(1, 2, 6, 8)))
    check(lambda: ad.mse(ad.upconv2(x, w, b), target), store, {"x": x})


def test_grad_maxpool2():
    g = rng(30)
    store = ad.ParamStore(dtype=np.float64)
    x = t4(g.normal(size=(2, 2, 4, 4)), requires_grad=True)
    target = t4(g.normal(size=(2, 2, 2, 2)))
    check(lambda: ad.mse(ad.maxpool2(x), target), store, {"x": x})


def test_grad_activations_and_arith():
    g = rng(40)
    store = ad.ParamStore(dtype=np.float64)
    x = t4(g.normal(size=(2, 3, 4, 4)), requires_grad=True)
    y = t4(g.normal(size=(2, 3, 4, 4)), requires_grad=True)
    target = t4(g.normal(size=(2, 3, 4, 4)))

    def loss():
        z = ad.add(ad.scale(ad.relu(x), 0.7), ad.elu(y))
        return ad.mse(z, target)

    check(loss, store, {"x": x, "y": y})


def test_grad_concat_and_chain():
    g = rng(50)
    store = ad.ParamStore(dtype=np.float64)
    w1 = store.add("w1", g.normal(size=(2, 1, 3, 3)) * 0.5)
    w2 = store.add("w2", g.normal(size=(2, 1, 1, 1)) * 0.5)
    wf = store.add("wf", g.normal(size=(1, 4, 3, 3)) * 0.5)
    x = t4(g.normal(size=(1, 1, 4, 4)), requires_grad=True)
    target = t4(g.normal(size=(1, 1, 4, 4)))

    def loss():
        a = ad.relu(ad.conv2d(x, w1))
        b = ad.relu(ad.conv2d(x, w2))
        merged = ad.concat_channels([a, b])
        return ad.mse(ad.conv2d(merged, wf), target)

    check(loss, store, {"x": x})


def test_grad_small_unet_like_chain():
    g = rng(60)
    store = ad.ParamStore(dtype=np.float64)
    we = store.add("we", g.normal(size=(2, 1, 3, 3)) * 0.4)
    wu = store.add("wu", g.normal(size=(2, 2, 2, 2)) * 0.4)
    wo = store.add("wo", g.normal(size=(1, 2, 1, 1)) * 0.4)
    x = t4(g.normal(size=(1, 1, 4, 4)), requires_grad=True)
    target = t4(g.normal(size=(1, 1, 4, 4)))

    def loss():
        enc = ad.relu(ad.conv2d(x, we))
        down = ad.maxpool2(enc)
        up = ad.upconv2(down, wu)
        return ad.mse(ad.conv2d(up, wo), target)

    check(loss, store, {"x": x})


def test_grad_check_detects_corrupted_backward():
    g = rng(70)
    store = ad.ParamStore(dtype=np.float64)
    w = store.add("w", g.normal(size=(2, 2, 3, 3)))
    x = t4(g.normal(size=(1, 2, 4, 4)))
    target = t4(g.normal(size=(1, 2, 4, 4)))

    def bad_relu(v):
        out = ad.relu(v)
        orig = out._backprop
        out._backprop = lambda grad: orig(grad * 1.01)  # 1% corrupted
        return out

    def loss():
        return ad.mse(bad_relu(ad.conv2d(x, w)), target)

    report = ad.grad_check(loss, store)
    assert report.max_rel_error > 1e-4


def test_grad_check_subset_and_sampling_deterministic():
    g = rng(80)
    store = ad.ParamStore(dtype=np.float64)
    w = store.add("w", g.normal(size=(2, 2, 3, 3)))
    store.add("b", g.normal(size=(1, 2, 1, 1)))
    x = t4(g.normal(size=(1, 2, 4, 4)))
    target = t4(g.normal(size=(1, 2, 4, 4)))

    def loss():
        return ad.mse(ad.conv2d(x, w, store.params["b"]), target)

    r1 = ad.grad_check(loss, store, tensor_subset=["w"],
                       elems_per_tensor=5, seed=123)
    r2 = ad.grad_check(loss, store, tensor_subset=["w"],
                       elems_per_tensor=5, seed=123)
    assert r1.n_checked == 5
    assert list(r1.per_tensor) == ["w"]
    assert r1.max_rel_error == r2.max_rel_error
    with pytest.raises(OutOfRange):
        ad.grad_check(loss, store, tensor_subset=["nope"])


def test_grad_check_rejects_float32():
    store = ad.ParamStore(dtype=np.float32)
    w = store.add("w", np.ones((1, 1, 1, 1)))
    x = ad.Tensor4(np.ones((1, 1, 2, 2), dtype=np.float32))

    def loss():
        return ad.mse(ad.conv2d(x, w), ad.Tensor4(np.zeros((1, 1, 2, 2),
                                                           dtype=np.float32)))

    with pytest.raises(OutOfRange):
        ad.grad_check(loss, store)


# ---------------------------------------------------------------------------
# Parameter store and Adam
# ---------------------------------------------------------------------------

def test_param_store_rejects_duplicates_and_counts():
    store = ad.ParamStore()
    store.add("a", np.zeros((2, 1, 3, 3)))
    with pytest.raises(OutOfRange):
        store.add("a", np.zeros((1, 1, 1, 1)))
    store.add("b", np.zeros((1, 2, 1, 1)))
    assert store.n_parameters() == 18 + 2


def test_adam_single_step_matches_hand_computation():
    store = ad.ParamStore(dtype=np.float64)
    p = store.add("p", np.array([[[[1.0]]]]))
    p.grad = np.array([[[[0.5]]]])
    ad.adam_step(store, lr=0.1, t=1)
    # m=0.05, v=2.5e-5*10=2.5e-4; mhat=0.5, vhat=0.25
    expect = 1.0 - 0.1 * 0.5 / (np.sqrt(0.25) + 1e-8)
    assert float(p.data.reshape(())) == pytest.approx(expect, rel=1e-12)


def test_adam_two_steps_bias_correction():
    store = ad.ParamStore(dtype=np.float64)
    p = store.add("p", np.array([[[[0.0]]]]))
    m = v = 0.0
    x = 0.0
    for t in (1, 2):
        g = 1.0 if t == 1 else -2.0
        p.grad = np.full((1, 1, 1, 1), g)
        ad.adam_step(store, lr=0.01, t=t)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert float(p.data.reshape(())) == pytest.approx(x, rel=1e-12)


def test_adam_skips_frozen_and_ungraded_params():
    store = ad.ParamStore(dtype=np.float64)
    frozen = store.add("s1.w", np.ones((1, 1, 1, 1)))
    live = store.add("s2.w", np.ones((1, 1, 1, 1)))
    nograd = store.add("s2.b", np.ones((1, 1, 1, 1)))
    store.set_trainable("s1.", False)
    frozen.grad = np.ones((1, 1, 1, 1))
    live.grad = np.ones((1, 1, 1, 1))
    ad.adam_step(store, lr=0.1, t=1)
    assert float(frozen.data.reshape(())) == 1.0
    assert float(nograd.data.reshape(())) == 1.0
    assert float(live.data.reshape(())) < 1.0


def test_adam_validates_args():
    store = ad.ParamStore(dtype=np.float64)
    p = store.add("p", np.ones((1, 1, 1, 1)))
    p.grad = np.ones((1, 1, 1, 1))
    with pytest.raises(OutOfRange):
        ad.adam_step(store, lr=0.1, t=0)
    with pytest.raises(OutOfRange):
        ad.adam_step(store, lr=-1.0, t=1)
    with pytest.raises(ShapeMismatch):
        ad.adam_step(store, lr=0.1, t=1, grads={"p": np.ones((1, 1, 1, 2))})


def test_zero_grad_clears():
    store = ad.ParamStore(dtype=np.float64)
    p = store.add("p", np.ones((1, 1, 1, 1)))
    p.grad = np.ones((1, 1, 1, 1))
    store.zero_grad()
    assert p.grad is None
