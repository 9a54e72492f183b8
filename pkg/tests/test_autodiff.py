import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctcgan import autodiff as ad
from ctcgan import gradcheck
from ctcgan.errors import ShapeMismatchError


@pytest.fixture(autouse=True)
def f64():
    with ad.precision("f64"):
        yield


def _conv_loop(x, w, b, stride, pad):
    """Direct seven-fold loop definition of a strided, zero-padded 3D convolution."""
    n, cin, d, h, wd = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    od, oh, ow = ((s + 2 * pad - k) // stride + 1 for s in (d, h, wd))
    out = np.zeros((n, cout, od, oh, ow))
    for i in range(n):
        for o in range(cout):
            for z in range(od):
                for y in range(oh):
                    for xx in range(ow):
                        patch = xp[i, :, z * stride:z * stride + k, y * stride:y * stride + k, xx * stride:xx * stride + k]
                        out[i, o, z, y, xx] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


def _conv_transpose_loop(x, w, b, stride, pad):
    """Scatter definition: every input voxel deposits a weighted kernel copy."""
    n, cin, d, h, wd = x.shape
    _, cout, k, _, _ = w.shape
    full = [(s - 1) * stride + k for s in (d, h, wd)]
    out = np.zeros((n, cout, *full))
    for i in range(n):
        for c in range(cin):
            for z in range(d):
                for y in range(h):
                    for xx in range(wd):
                        out[i, :, z * stride:z * stride + k, y * stride:y * stride + k, xx * stride:xx * stride + k] += (
                            x[i, c, z, y, xx] * w[c])
    out = out[:, :, pad:full[0] - pad, pad:full[1] - pad, pad:full[2] - pad]
    return out + (b[None, :, None, None, None] if b is not None else 0.0)


@pytest.mark.parametrize("stride,pad,size", [(1, 0, 4), (1, 1, 5), (2, 1, 6), (2, 1, 5), (2, 0, 7)])
def test_conv3d_matches_loop(stride, pad, size):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 2, size, size - 1, size))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    b = rng.normal(size=3)
    out = ad.conv3d(ad.tensor(x), ad.tensor(w), ad.tensor(b), stride, pad).value
    assert np.allclose(out, _conv_loop(x, w, b, stride, pad), atol=1e-12)


@pytest.mark.parametrize("stride,pad,k", [(2, 1, 4), (1, 0, 3), (2, 0, 2)])
def test_conv_transpose_matches_loop(stride, pad, k):
    rng = np.random.default_rng(k)
    x = rng.normal(size=(2, 3, 3, 2, 3))
    w = rng.normal(size=(3, 2, k, k, k))
    b = rng.normal(size=2)
    out = ad.conv_transpose3d(ad.tensor(x), ad.tensor(w), ad.tensor(b), stride, pad).value
    assert np.allclose(out, _conv_transpose_loop(x, w, b, stride, pad), atol=1e-12)


def test_conv_transpose_doubles_extent():
    x = ad.tensor(np.zeros((1, 4, 4, 4, 4)))
    w = ad.tensor(np.zeros((4, 2, 4, 4, 4)))
    assert ad.conv_transpose3d(x, w, None, 2, 1).shape == (1, 2, 8, 8, 8)


def test_conv_transpose_is_adjoint_of_conv():
    # <conv(x), y> == <x, convT(y)> with the shared weight [Cout, Cin] vs [Cin, Cout] layout
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 6, 6, 6))
    w = rng.normal(size=(4, 3, 4, 4, 4))
    y = rng.normal(size=(2, 4, 3, 3, 3))
    lhs = np.sum(ad.conv3d(ad.tensor(x), ad.tensor(w), None, 2, 1).value * y)
    rhs = np.sum(x * ad.conv_transpose3d(ad.tensor(y), ad.tensor(w), None, 2, 1).value)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_pointwise_conv_transpose_is_dense_matrix():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 3, 2, 2, 2))
    w = rng.normal(size=(3, 5, 1, 1, 1))
    out = ad.conv_transpose3d(ad.tensor(x), ad.tensor(w), None, 1, 0).value
    dense = np.einsum("io,nizyx->nozyx", w[:, :, 0, 0, 0], x)
    assert np.allclose(out, dense, atol=1e-13)


def test_conv_shape_errors():
    x = ad.tensor(np.zeros((1, 2, 4, 4, 4)))
    with pytest.raises(ShapeMismatchError):
        ad.conv3d(x, ad.tensor(np.zeros((3, 5, 3, 3, 3))))


def test_activations():
    x = np.array([-2.0, -0.5, 0.5, 3.0])
    assert np.allclose(ad.leaky_relu(ad.tensor(x), 0.2).value, [-0.4, -0.1, 0.5, 3.0])
    assert np.allclose(ad.relu(ad.tensor(x)).value, [0, 0, 0.5, 3.0])
    assert np.allclose(ad.tanh(ad.tensor(x)).value, np.tanh(x))
    assert np.allclose(ad.sigmoid(ad.tensor(x)).value, 1 / (1 + np.exp(-x)), atol=1e-15)


def test_bce_and_l1_values():
    p = ad.tensor(np.array([0.9, 0.2]))
    t = np.array([1.0, 0.0])
    expected = -(np.log(0.9) + np.log(0.8)) / 2
    assert ad.bce_loss(p, t).item() == pytest.approx(expected, rel=1e-12)
    a = ad.tensor(np.array([1.0, -2.0, 0.5]))
    assert ad.l1_loss(a, np.zeros(3)).item() == pytest.approx(3.5 / 3, rel=1e-12)


def test_gradients_accumulate_on_reuse():
    x = ad.tensor(np.array([1.0, 2.0]), True)
    y = ad.sum_all(x + x)
    y.backward()
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_no_grad_blocks_graph():
    x = ad.tensor(np.ones(3), True)
    with ad.no_grad():
        y = ad.sum_all(ad.tanh(x))
    assert not y.requires_grad


def test_precision_controls_dtype():
    with ad.precision("f32"):
        assert ad.tensor(np.ones(2)).value.dtype == np.float32
    assert ad.tensor(np.ones(2)).value.dtype == np.float64


@pytest.mark.parametrize("name", [n for n, (_, base, _) in gradcheck.CASES.items() if base == gradcheck.OP_THRESHOLD])
def test_op_gradients(name):
    res = gradcheck.run_suite(ops=[name])[0]
    assert res.error < 1e-6, (name, res.error)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1, 2]), st.sampled_from([0, 1]))
def test_conv_gradient_property(seed, stride, pad):
    rng = np.random.default_rng(seed)
    x = ad.tensor(rng.normal(size=(1, 2, 4, 3, 4)), True)
    w = ad.Parameter(rng.normal(size=(2, 2, 2, 2, 2)), "w")
    b = ad.Parameter(rng.normal(size=2), "b")
    out_shape = ad.conv3d(x, w, b, stride, pad).shape
    r = rng.normal(size=out_shape)
    assert ad.grad_check(lambda: ad.weighted_sum(ad.conv3d(x, w, b, stride, pad), r), [x, w, b]) < 1e-6


def test_corrupted_backward_detected():
    with ad.corrupt_backward("tanh"):
        res = gradcheck.run_suite(ops=["tanh"])[0]
    assert not res.passed and res.error > 0.1


def test_coarse_step_relaxes_threshold():
    assert gradcheck.threshold_for(1e-6, 1e-2) == pytest.approx(1e-2)
    assert gradcheck.threshold_for(1e-6, 1e-5) == 1e-6


def test_kink_crossings_reported():
    x = ad.tensor(np.array([1e-6, -1e-6, 0.5]), True)
    rep = ad.grad_check_report(lambda: ad.sum_all(ad.relu(x)), [x], h=1e-4, skip_kinks=True)
    assert rep.skipped_kinks == 2 and rep.checked == 1 and rep.max_rel_error < 1e-9


def test_adam_first_step_closed_form():
    p = ad.Parameter(np.array([1.0, -1.0, 2.0]), "p")
    g = np.array([0.3, -5.0, 1e-3])
    ad.adam_step([p], [g], {}, 1, lr=0.01, beta1=0.5, beta2=0.999, eps=1e-8)
    # bias correction makes the first update lr * g / (|g| + eps) ≈ lr * sign(g)
    assert np.allclose(p.value, [1.0 - 0.01, -1.0 + 0.01, 2.0 - 0.01], atol=1e-6)


def test_adam_matches_reference_sequence():
    rng = np.random.default_rng(2)
    p = ad.Parameter(rng.normal(size=4), "p")
    ref = p.value.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    state = {}
    for t in range(1, 6):
        g = rng.normal(size=4)
        ad.adam_step([p], [g], state, t, lr=1e-3)
        m = 0.5 * m + 0.5 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-3 * (m / (1 - 0.5 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p.value, ref, atol=1e-14)


def test_adam_rejects_t0():
    with pytest.raises(ValueError):
        ad.adam_step([], [], {}, 0)
