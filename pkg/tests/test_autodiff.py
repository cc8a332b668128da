import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapnet import autodiff as ad
from gapnet.autodiff import DomainError, ShapeError, Tape, Tensor
from gapnet.gradcheck import relative_error


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def fd_check(fn, *arrays, step=1e-5):
    """Max relative error of backward() vs central differences for sum(w * fn(x))."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
        w = np.random.default_rng(99).uniform(-1, 1, size=out.shape)
        loss = ad.sum(ad.mul(out, w))
        ad.backward(loss, tape)
    worst = 0.0
    for t in tensors:
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float((fn(*tensors).data * w).sum())
            flat[i] = orig - step
            down = float((fn(*tensors).data * w).sum())
            flat[i] = orig
            num = (up - down) / (2 * step)
            worst = max(worst, float(relative_error(t.grad.reshape(-1)[i], num)))
    return worst


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(np.eye(2), np.array([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_scalar_case(self):
        assert ad.matmul(np.array([[2.0]]), np.array([[3.0]])).data.tolist() == [[6.0]]

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(ad.matmul(a, b).data, naive_matmul(a, b), rtol=1e-13, atol=1e-14)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_leading_axes_share_weight(self):
        rng = np.random.default_rng(1)
        x, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        out = ad.matmul(x, w).data
        for i in range(2):
            np.testing.assert_allclose(out[i], naive_matmul(x[i], w), rtol=1e-13)


class TestElementwise:
    def test_sigmoid_symmetry_point(self):
        assert ad.sigmoid(np.array(0.0)).item() == 0.5

    def test_swish_zero(self):
        assert ad.swish(np.array(0.0)).item() == 0.0

    def test_sigmoid_two_matches_high_precision(self):
        with mpmath.workdps(50):
            ref = float(1 / (1 + mpmath.exp(-2)))
        assert ad.sigmoid(np.array(2.0)).item() == pytest.approx(ref, rel=1e-15)
        assert ref == pytest.approx(0.880797, abs=1e-6)

    def test_sigmoid_extremes_are_finite(self):
        out = ad.sigmoid(np.array([-1e9, 1e9])).data
        assert out.tolist() == [0.0, 1.0]

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            ad.log(np.array([1.0, 0.0]))

    def test_binary_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(np.zeros(3), np.zeros(4))
        with pytest.raises(ShapeError):
            ad.mul(np.zeros((2, 3)), np.zeros((3, 2)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax(np.zeros(3)).data, [1 / 3] * 3, rtol=1e-15)

    def test_no_overflow(self):
        out = ad.softmax(np.array([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0) and out[1] < 1e-300

    def test_matches_extended_precision(self):
        with mpmath.workdps(40):
            e = [mpmath.exp(v) for v in (1, 2, 3)]
            ref = [float(x / sum(e)) for x in e]
        np.testing.assert_allclose(ad.softmax(np.array([1.0, 2.0, 3.0])).data, ref, rtol=1e-15)

    @given(st.integers(0, 10_000), st.integers(1, 6), st.floats(1e-3, 1e3))
    @settings(max_examples=60, deadline=None)
    def test_slices_sum_to_one(self, seed, n, magnitude):
        x = np.random.default_rng(seed).uniform(-magnitude, magnitude, size=(4, n))
        p = ad.softmax(x).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


class TestConcat:
    def test_shape(self):
        assert ad.concat([np.ones(2), np.ones(3)]).shape == (5,)

    def test_single_part_identity(self):
        x = np.arange(4.0)
        np.testing.assert_array_equal(ad.concat([x]).data, x)

    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(3)
        parts = [rng.normal(size=(2, n)) for n in (1, 4, 2)]
        pieces = ad.split(ad.concat(parts), [1, 4, 2])
        for p, q in zip(parts, pieces):
            assert np.array_equal(p, q.data)

    def test_dim_disagreement(self):
        with pytest.raises(ShapeError):
            ad.concat([np.zeros((2, 2)), np.zeros((3, 2))])


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.arange(5.0), requires_grad=True)
        with Tape() as tape:
            ad.backward(ad.sum(w), tape)
        np.testing.assert_array_equal(w.grad, np.ones(5))

    def test_square_gives_twice(self):
        w = Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
        with Tape() as tape:
            ad.backward(ad.sum(ad.mul(w, w)), tape)
        np.testing.assert_array_equal(w.grad, 2 * w.data)

    def test_non_scalar_loss(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = ad.scale(w, 2.0)
            with pytest.raises(ShapeError):
                ad.backward(y, tape)

    def test_tape_is_topologically_ordered(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            ad.sum(ad.sigmoid(ad.matmul(w, w)))
        for i, node in enumerate(tape.nodes):
            assert all(inp.node is None or inp.node < i for inp in node.inputs)

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))

        def run():
            ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
            with Tape() as tape:
                h = ad.softmax(ad.matmul(ta, tb))
                ad.backward(ad.sum(ad.log(ad.add(h, 1.0))), tape)
            return ta.grad, tb.grad

        g1, g2 = run(), run()
        assert all(np.array_equal(x, y) for x, y in zip(g1, g2))

    def test_composite_graph_matches_finite_differences(self):
        rng = np.random.default_rng(7)

        def fn(x, w):
            h = ad.swish(ad.matmul(x, w))
            return ad.concat([ad.softmax(h), ad.sigmoid(h)])

        assert fd_check(fn, rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 5))) < 1e-4


OPS = {
    "add": (lambda a, b: ad.add(a, b), 2),
    "sub": (lambda a, b: ad.sub(a, b), 2),
    "mul": (lambda a, b: ad.mul(a, b), 2),
    "scale": (lambda a: ad.scale(a, -1.7), 1),
    "sigmoid": (ad.sigmoid, 1),
    "swish": (ad.swish, 1),
    "exp": (ad.exp, 1),
    "log": (lambda a: ad.log(ad.add(ad.mul(a, a), 0.5)), 1),
    "softmax": (ad.softmax, 1),
    "concat": (lambda a, b: ad.concat([a, b]), 2),
    "split": (lambda a: ad.split(a, [1, a.shape[-1] - 1])[1], 1),
    "reshape": (lambda a: ad.reshape(a, (-1,)), 1),
    "transpose": (lambda a: ad.transpose(a, (1, 0)), 1),
    "sum_axis": (lambda a: ad.sum(a, axis=0), 1),
    "mean": (lambda a: ad.mean(a, axis=1), 1),
    "matmul": (lambda a, b: ad.matmul(a, ad.transpose(b, (1, 0))), 2),
    "gather_rows": (lambda a: ad.gather_rows(a, np.array([[0, 1], [1, 1]])), 1),
}


@pytest.mark.parametrize("name", sorted(OPS))
@given(seed=st.integers(0, 2**31 - 1), rows=st.integers(2, 5), cols=st.integers(2, 5))
@settings(max_examples=8, deadline=None)
def test_every_op_passes_finite_difference_check(name, seed, rows, cols):
    fn, arity = OPS[name]
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(-1, 1, size=(rows, cols)) for _ in range(arity)]
    assert fd_check(fn, *arrays) < 1e-4


def test_matmul_batched_gradients():
    rng = np.random.default_rng(11)
    assert fd_check(lambda a, b: ad.matmul(a, b), rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (2, 4, 2))) < 1e-4
    assert fd_check(lambda a, b: ad.matmul(a, b), rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (4, 2))) < 1e-4


def test_clip_zeroes_gradient_outside():
    x = Tensor(np.array([-2.0, 0.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        ad.backward(ad.sum(ad.clip(x, -1, 1)), tape)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_no_tape_records_nothing():
    w = Tensor(np.ones(3), requires_grad=True)
    y = ad.sigmoid(w)
    assert y.node is None
