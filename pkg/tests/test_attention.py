import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groundtraj.attention import (AttentionWeights, BlendConfig, attend, attend_backward, blend,
                                  cross_attention, grad_check, laca, relative_error)
from groundtraj.grounding import GLOBAL, AssignmentField, GroundingParams, build_assignment
from groundtraj.trajectory import LatentTrajectory, LocalText


def softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def naive_token_attention(z_i, src, w: AttentionWeights):
    """Single-token reference: loop over heads explicitly."""
    d = w.dim
    dh = d // w.heads
    heads = []
    for m in range(w.heads):
        sl = slice(m * dh, (m + 1) * dh)
        q = z_i @ w.wq[:, sl]
        k = src @ w.wk[:, sl]
        v = src @ w.wv[:, sl]
        heads.append(softmax(k @ q / np.sqrt(dh)) @ v)
    return np.concatenate(heads) @ w.wo


def naive_laca(z, field, locals_, g, w):
    T, H, W = field.grid
    out = np.zeros_like(z)
    for i in range(z.shape[0]):
        t, rem = divmod(i, H * W)
        r, c = divmod(rem, W)
        k = field.owner[t, r, c]
        src = g if k == GLOBAL else field.weight[t, r, c] * locals_[k].feature
        out[i] = naive_token_attention(z[i], src, w)
    return out


def test_zero_queries_average_values():
    d = 4
    w = AttentionWeights(np.eye(d), np.eye(d), np.eye(d), np.eye(d), heads=1)
    f = np.array([[1.0, 2, 3, 4], [3, 2, 1, 0]])
    out = cross_attention(np.zeros((3, d)), f, w)
    assert np.allclose(out, [[2.0, 2, 2, 2]] * 3)


def test_cross_attention_matches_reference():
    rng = np.random.default_rng(0)
    w = AttentionWeights.random(8, 2, rng)
    z = rng.standard_normal((5, 8))
    f = rng.standard_normal((3, 8))
    ref = np.stack([naive_token_attention(zi, f, w) for zi in z])
    assert np.allclose(cross_attention(z, f, w), ref, atol=1e-12)


def test_cross_attention_rejects_width_mismatch():
    rng = np.random.default_rng(0)
    w = AttentionWeights.random(4, 2, rng)
    with pytest.raises(ValueError):
        cross_attention(np.zeros((2, 4)), np.zeros((2, 5)), w)
    with pytest.raises(ValueError):
        AttentionWeights.random(6, 4, rng)


def test_half_weight_token_sees_scaled_feature():
    rng = np.random.default_rng(1)
    w = AttentionWeights.random(4, 1, rng)
    owner = np.array([[[0, GLOBAL]]])
    weight = np.array([[[0.5, 1.0]]])
    field = AssignmentField(owner, weight)
    loc = LocalText("m0", "red circle", rng.standard_normal((2, 4)))
    g = rng.standard_normal((3, 4))
    z = rng.standard_normal((2, 4))
    out = laca(z, field, [loc], g, w)
    assert np.allclose(out[0], naive_token_attention(z[0], 0.5 * loc.feature, w), atol=1e-12)
    assert np.allclose(out[1], naive_token_attention(z[1], g, w), atol=1e-12)


def test_all_global_field_equals_cross_attention():
    rng = np.random.default_rng(2)
    w = AttentionWeights.random(8, 2, rng)
    z = rng.standard_normal((12, 8))
    g = rng.standard_normal((4, 8))
    out = laca(z, AssignmentField.all_global((3, 2, 2)), [], g, w)
    assert np.allclose(out, cross_attention(z, g, w), atol=1e-12)


@st.composite
def laca_cases(draw):
    seed = draw(st.integers(0, 10_000))
    rng = np.random.default_rng(seed)
    T, H, W = draw(st.integers(1, 2)), draw(st.integers(1, 4)), draw(st.integers(1, 4))
    heads = draw(st.sampled_from([1, 2]))
    d = 4
    n = draw(st.integers(0, 3))
    trajs, locs = [], []
    for k in range(n):
        xy = np.column_stack([rng.uniform(0, W, T), rng.uniform(0, H, T)])
        vis = rng.random(T) < 0.8
        xy[~vis] = np.nan
        trajs.append(LatentTrajectory(xy, vis, f"m{k}"))
        locs.append(LocalText(f"m{k}", "x", rng.standard_normal((rng.integers(1, 4), d))))
    params = GroundingParams(sigma=float(rng.uniform(0.5, 2)), radius=float(rng.uniform(0, 2)))
    field = build_assignment(trajs, (T, H, W), params)
    w = AttentionWeights.random(d, heads, rng)
    z = rng.standard_normal((T * H * W, d))
    g = rng.standard_normal((int(rng.integers(1, 4)), d))
    return z, field, locs, g, w


@settings(max_examples=80, deadline=None)
@given(laca_cases())
def test_laca_matches_per_token_reference(case):
    z, field, locs, g, w = case
    assert np.allclose(laca(z, field, locs, g, w), naive_laca(z, field, locs, g, w), atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(laca_cases(), st.floats(0, 1))
def test_blend_endpoints_and_linearity(case, lam):
    z, field, locs, g, w = case
    c = cross_attention(z, g, w)
    l = laca(z, field, locs, g, w)
    assert np.array_equal(blend(c, l, 0.0), c)
    assert np.array_equal(blend(c, l, BlendConfig(1.0)), l)
    assert np.allclose(blend(c, l, lam), c + lam * (l - c), atol=1e-12)


def test_blend_rejects_bad_lambda():
    with pytest.raises(ValueError):
        blend(np.zeros(2), np.zeros(2), 1.5)
    with pytest.raises(ValueError):
        BlendConfig(-0.1)


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0]), np.array([0.0, 1])) == pytest.approx(np.sqrt(2))


def test_grad_check_linear_map():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((3, 4))
    x = rng.standard_normal(4)
    c = rng.standard_normal(3)
    params = {"W": W, "x": x}

    def op():
        y = params["W"] @ params["x"]
        return float(c @ y), {"W": np.outer(c, params["x"]), "x": params["W"].T @ c}

    assert grad_check(op, params) < 1e-6


def test_grad_check_softmax():
    x = np.array([0.3, -1.2, 2.0])
    c = np.array([1.0, -2.0, 0.5])
    params = {"x": x}

    def op():
        p = softmax(params["x"])
        return float(c @ p), {"x": p * (c - c @ p)}

    assert grad_check(op, params) < 1e-6


def test_grad_check_detects_wrong_gradient():
    params = {"x": np.array([1.0, 2.0])}
    err = grad_check(lambda: (float((params["x"] ** 2).sum()), {"x": params["x"]}), params)
    assert err > 0.3


def test_laca_backward_on_tiny_grid():
    rng = np.random.default_rng(5)
    d, heads = 4, 2
    w = AttentionWeights.random(d, heads, rng)
    trajs = [LatentTrajectory(np.array([[0.2, 0.9]]), np.array([True]), "m0")]
    field = build_assignment(trajs, (1, 2, 2), GroundingParams(sigma=1, radius=1))
    locs = [LocalText("m0", "x", rng.standard_normal((2, d)))]
    g = rng.standard_normal((3, d))
    z = rng.standard_normal((4, d))
    c = rng.standard_normal((4, d))
    from groundtraj.attention import pack_laca
    params = {"z": z, **{k: v.copy() for k, v in w.as_dict().items()}}

    def op():
        packed = pack_laca([field], [locs], [g])
        out, cache = attend(params["z"][None], packed.src, params, heads,
                            mask=packed.mask, scale=packed.scale)
        dz, _, grads = attend_backward(c[None], cache, params)
        return float((out[0] * c).sum()), {"z": dz[0], **grads}

    assert grad_check(op, params) < 1e-6


def test_attend_backward_wrt_sources():
    rng = np.random.default_rng(6)
    d = 4
    w = AttentionWeights.random(d, 2, rng).as_dict()
    zq = rng.standard_normal((2, 3, d))
    src = rng.standard_normal((2, 5, d))
    mask = rng.random((2, 3, 5)) < 0.7
    mask[..., 0] = True
    scale = rng.uniform(0.2, 1, (2, 3))
    c = rng.standard_normal((2, 3, d))
    params = {"src": src}

    def op():
        out, cache = attend(zq, params["src"], w, 2, mask=mask, scale=scale)
        _, dsrc, _ = attend_backward(c, cache, w)
        return float((out * c).sum()), {"src": dsrc}

    assert grad_check(op, params) < 1e-6
