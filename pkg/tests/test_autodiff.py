import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from xrecon import autodiff as ad
from xrecon.tensor import ComplexPair


def _grad(f, **point):
    tape = ad.Tape()
    leaves = {k: tape.leaf(k, v) for k, v in point.items()}
    return ad.gradient(tape, f(**leaves), list(point))


def test_eager_without_tape():
    out = ad.mul(np.array([2.0]), 3.0)
    assert isinstance(out, np.ndarray)
    np.testing.assert_allclose(out, [6.0])


def test_product_rule():
    g = _grad(lambda x, y: ad.sum_(x * y), x=np.array([1.0, 2.0]), y=np.array([3.0, 4.0]))
    np.testing.assert_allclose(g["x"], [3.0, 4.0])
    np.testing.assert_allclose(g["y"], [1.0, 2.0])


def test_fanout_accumulates():
    g = _grad(lambda x: ad.sum_(x * x + x), x=np.array([1.0, -2.0]))
    np.testing.assert_allclose(g["x"], [3.0, -3.0])


def test_unused_leaf_has_zero_gradient():
    g = _grad(lambda x, y: ad.sum_(x), x=np.ones(2), y=np.ones(3))
    np.testing.assert_array_equal(g["y"], np.zeros(3))


def test_abs_subgradient_zero_at_zero():
    g = _grad(lambda x: ad.sum_(ad.abs_(x)), x=np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(g["x"], [-1.0, 0.0, 1.0])


def test_shape_mismatch_is_error():
    tape = ad.Tape()
    with pytest.raises(ad.ShapeError):
        ad.add(tape.leaf("a", np.ones(3)), np.ones(4))


def test_nonscalar_loss_rejected():
    tape = ad.Tape()
    x = tape.leaf("x", np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.gradient(tape, x * 2.0, ["x"])


def test_duplicate_and_unknown_leaf():
    tape = ad.Tape()
    x = tape.leaf("x", 1.0)
    with pytest.raises(ad.TapeError):
        tape.leaf("x", 2.0)
    with pytest.raises(ad.TapeError):
        ad.gradient(tape, x * 1.0, ["nope"])


def test_mixed_tapes_rejected():
    a = ad.Tape().leaf("a", 1.0)
    b = ad.Tape().leaf("b", 1.0)
    with pytest.raises(ad.TapeError):
        ad.add(a, b)


ELEMENTWISE = [
    lambda x: ad.exp(x),
    lambda x: ad.log(x * x + 1.0),
    lambda x: ad.sqrt(x * x + 0.5),
    lambda x: ad.pow_(x * x + 1.0, 1.5),
    lambda x: ad.sin(x) * ad.cos(x),
    lambda x: ad.atan2(x, x * x + 1.0),
    lambda x: ad.div(1.0, x * x + 2.0),
]


@pytest.mark.parametrize("fn", ELEMENTWISE)
def test_elementwise_grad_check(fn, rng):
    x = rng.normal(size=(3, 4))
    assert ad.grad_check(lambda p: ad.sum_(fn(p["x"]) * np.arange(12.0).reshape(3, 4)), {"x": x}) < 1e-6


def test_structural_ops_grad_check(rng):
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(5, 4))

    def f(p):
        v = p["x"]
        t = ad.transpose(v, (1, 0))
        r = ad.reshape(t, (20,))
        r = ad.reshape(r, (5, 4))
        s = ad.slice_(r, (slice(1, 4), slice(None)))
        c = ad.concat([s, ad.slice_(r, (slice(0, 2),))], axis=0)
        st_ = ad.stack([c, c * 2.0], axis=0)
        m = ad.max_reduce(ad.sum_(st_, axis=0), axis=1)
        return ad.sum_(ad.mul(c, w)) + ad.sum_(m) + ad.mean(v)

    assert ad.grad_check(f, {"x": x}) < 1e-6


@pytest.mark.parametrize("mode", ["constant", "edge"])
def test_pad_crop_grad_check(mode, rng):
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(7, 6))

    def f(p):
        padded = ad.pad(p["x"], [(2, 2), (1, 1)], mode)
        return ad.sum_(ad.mul(padded, w)) + ad.sum_(ad.crop(padded, [(1, 1), (1, 0)]))

    assert ad.grad_check(f, {"x": x}) < 1e-6


def test_pad_edge_matches_numpy(rng):
    x = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(ad.pad(x, [(1, 2), (2, 0)], "edge"), np.pad(x, [(1, 2), (2, 0)], "edge"))


def test_fft_adjoints_by_dot_product(rng):
    # <F x, y> = <x, F^T y> for the real-pair representation
    shape = (4, 6)
    x = ComplexPair(rng.normal(size=shape), rng.normal(size=shape))
    y = ComplexPair(rng.normal(size=shape), rng.normal(size=shape))
    for op in (ad.fft2, ad.ifft2):
        fx = op(x)
        lhs = np.vdot(fx.re, y.re) + np.vdot(fx.im, y.im)
        tape = ad.Tape()
        a = tape.leaf("re", x.re)
        b = tape.leaf("im", x.im)
        out = op(ComplexPair(a, b))
        loss = ad.sum_(out.re * y.re) + ad.sum_(out.im * y.im)
        g = ad.gradient(tape, loss, ["re", "im"])
        rhs = np.vdot(x.re, g["re"]) + np.vdot(x.im, g["im"])
        assert abs(lhs - rhs) < 1e-10 * abs(lhs)


def test_fft_grad_check(rng):
    w = rng.normal(size=(4, 4))

    def f(p):
        out = ad.fft2(ComplexPair(p["re"], p["im"]))
        return ad.sum_(ad.mul(out.abs2(), w))

    assert ad.grad_check(f, {"re": rng.normal(size=(4, 4)), "im": rng.normal(size=(4, 4))}) < 1e-6


def test_bilinear_integer_coords_are_indexing(rng):
    img = rng.normal(size=(5, 6))
    cy, cx = np.meshgrid(np.arange(5.0), np.arange(6.0), indexing="ij")
    np.testing.assert_array_equal(ad.bilinear_sample(img, cy, cx), img)


def test_bilinear_fill_outside(rng):
    img = rng.normal(size=(2, 3, 3))
    cy = np.array([[-5.0, 1.0]])
    cx = np.array([[1.0, 10.0]])
    out = ad.bilinear_sample(img, cy, cx, np.array([7.0, -1.0]))
    np.testing.assert_array_equal(out[0], [[7.0, 7.0]])
    np.testing.assert_array_equal(out[1], [[-1.0, -1.0]])


def test_bilinear_grad_check(rng):
    img = rng.normal(size=(5, 5))
    cy = rng.uniform(-0.5, 4.5, size=(3, 4))
    cx = rng.uniform(-0.5, 4.5, size=(3, 4))
    w = rng.normal(size=(3, 4))
    f = lambda p: ad.sum_(ad.mul(ad.bilinear_sample(p["img"], p["cy"], p["cx"], 0.3), w))
    assert ad.grad_check(f, {"img": img, "cy": cy, "cx": cx}) < 1e-4


@given(arrays(float, (6,), elements=st.floats(-3, 3)))
def test_linear_combination_gradient_is_weights(w):
    g = _grad(lambda x: ad.sum_(ad.mul(x, w)), x=np.ones(6))
    np.testing.assert_allclose(g["x"], w)


def test_where_mask_routes_gradient():
    mask = np.array([True, False, True])
    g = _grad(lambda a, b: ad.sum_(ad.where_mask(mask, a, b)), a=np.ones(3), b=np.ones(3))
    np.testing.assert_array_equal(g["a"], [1, 0, 1])
    np.testing.assert_array_equal(g["b"], [0, 1, 0])
