import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapnet.autodiff import ShapeError
from gapnet.cgdf import CgdfParams, anchor_width, cgdf_fuse


def swish(x):
    return x / (1.0 + np.exp(-x))


def fuse_oracle(p, e_t, e_c, H):
    """Straight-line numpy: purify, gate MLP, softmax, weight and concatenate."""
    f = p.purifier
    z_raw = np.concatenate([e_t, e_c, *H], axis=-1)
    z = (swish(z_raw @ f.W_g.data + f.b_g.data) * (z_raw @ f.W_u.data + f.b_u.data)) @ f.W_d.data + f.b_d.data
    l0, l1 = p.gate_mlp.layers
    h = swish(z @ l0.W.data + l0.b.data) @ l1.W.data + l1.b.data
    logits = h @ p.W_logit.data
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    alpha = e / e.sum(axis=-1, keepdims=True)
    return np.concatenate([alpha[:, [k]] * H[k] for k in range(3)], axis=-1), alpha


def gate(d, rng, **kw):
    """Parameters with a random logit projection (the default starts at zero)."""
    p = CgdfParams.init(d, rng, **kw)
    p.W_logit.data = rng.normal(size=p.W_logit.shape)
    return p


def inputs(rng, B=4, d=8):
    return rng.normal(size=(B, d)), rng.normal(size=(B, d)), [rng.normal(size=(B, d)) for _ in range(3)]


class TestFusion:
    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        p = gate(8, rng)
        e_t, e_c, H = inputs(rng)
        out = cgdf_fuse(p, e_t, e_c, *H)
        want_v, want_a = fuse_oracle(p, e_t, e_c, H)
        np.testing.assert_allclose(out.alpha, want_a, rtol=1e-12)
        np.testing.assert_allclose(out.v_final.data, want_v, rtol=1e-12, atol=1e-15)

    def test_single_vector_input(self):
        rng = np.random.default_rng(1)
        p = gate(8, rng)
        e_t, e_c, H = inputs(rng, B=1)
        single = cgdf_fuse(p, e_t[0], e_c[0], *(h[0] for h in H))
        assert single.v_final.shape == (24,) and single.alpha.shape == (3,)
        np.testing.assert_allclose(single.v_final.data, cgdf_fuse(p, e_t, e_c, *H).v_final.data[0], rtol=1e-15)

    @pytest.mark.parametrize("context, width", [("minimalist", 32), ("full", 48), ("purified", 40)])
    def test_anchor_widths(self, context, width):
        assert anchor_width(context, 8) == width
        rng = np.random.default_rng(2)
        p = gate(8, rng, context=context)
        assert p.gate_mlp.layers[0].d_in == (width if context != "purified" else p.purifier.d_out)
        e_t, e_c, H = inputs(rng)
        out = cgdf_fuse(p, e_t, e_c, *H, e_u=rng.normal(size=(4, 8)))
        np.testing.assert_allclose(out.alpha.sum(axis=1), 1.0, atol=1e-12)

    def test_full_context_needs_user(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError, match="e_u"):
            cgdf_fuse(CgdfParams.init(8, rng, context="full"), *inputs(rng)[:2], *inputs(rng)[2])

    def test_unknown_context(self):
        with pytest.raises(ValueError, match="context"):
            CgdfParams.init(8, np.random.default_rng(0), context="wide")

    def test_shape_mismatch(self):
        rng = np.random.default_rng(4)
        e_t, e_c, H = inputs(rng)
        H[1] = np.zeros((4, 7))
        with pytest.raises(ShapeError):
            cgdf_fuse(CgdfParams.init(8, rng), e_t, e_c, *H)


class TestHooks:
    def test_equal_logits_give_uniform_weights(self):
        rng = np.random.default_rng(5)
        e_t, e_c, H = inputs(rng)
        out = cgdf_fuse(CgdfParams.init(8, rng), e_t, e_c, *H, view_logits=(0.0, 0.0, 0.0))
        np.testing.assert_allclose(out.alpha, 1 / 3, rtol=1e-15)
        np.testing.assert_allclose(out.v_final.data, np.concatenate(H, axis=1) / 3, rtol=1e-15)

    def test_saturated_logits_select_one_view(self):
        rng = np.random.default_rng(6)
        e_t, e_c, H = inputs(rng)
        out = cgdf_fuse(CgdfParams.init(8, rng), e_t, e_c, *H, view_logits=(50.0, 0.0, 0.0))
        v = out.v_final.data
        np.testing.assert_allclose(v[:, :8], H[0], rtol=1e-15)
        assert np.abs(v[:, 8:]).max() < 1e-6

    def test_fixed_weights_are_used_verbatim(self):
        rng = np.random.default_rng(7)
        e_t, e_c, H = inputs(rng)
        out = cgdf_fuse(CgdfParams.init(8, rng), e_t, e_c, *H, alpha=(1.0, 1.0, 1.0))
        assert np.array_equal(out.v_final.data, np.concatenate(H, axis=1))


def test_default_start_is_uniform():
    rng = np.random.default_rng(7)
    e_t, e_c, H = inputs(rng)
    out = cgdf_fuse(CgdfParams.init(8, rng), e_t, e_c, *H)
    np.testing.assert_array_equal(out.alpha, np.full((4, 3), 1 / 3))
    np.testing.assert_allclose(out.v_final.data, np.concatenate(H, axis=1) / 3, rtol=1e-15)


class TestProperties:
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 50.0))
    @settings(max_examples=100, deadline=None)
    def test_weights_form_a_distribution(self, seed, scale):
        rng = np.random.default_rng(seed)
        p = gate(8, rng)
        e_t, e_c, *H = (rng.normal(scale=scale, size=(3, 8)) for _ in range(5))
        alpha = cgdf_fuse(p, e_t, e_c, *H).alpha
        assert np.all(alpha >= 0)
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)

    @given(st.integers(0, 2**31 - 1), st.floats(-10.0, 10.0).filter(lambda c: abs(c) > 1e-3))
    @settings(max_examples=50, deadline=None)
    def test_fixed_weights_make_fusion_linear_in_views(self, seed, c):
        rng = np.random.default_rng(seed)
        p = gate(8, rng)
        e_t, e_c, H = inputs(rng)
        a = rng.dirichlet(np.ones(3))
        base = cgdf_fuse(p, e_t, e_c, *H, alpha=a).v_final.data
        scaled = cgdf_fuse(p, e_t, e_c, *(c * h for h in H), alpha=a).v_final.data
        np.testing.assert_allclose(scaled, c * base, rtol=1e-13, atol=1e-14)
