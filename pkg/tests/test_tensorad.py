import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffscale import tensorad as ad
from diffscale.errors import DimensionError, FormatError, TruncationError, UsageError
from diffscale.tensorad.io import decode_checkpoint, encode_checkpoint

from oracles import LAYER_NAMES, layer_cases, leaf, tiny_conditions, tiny_network, weighted_sum

TOL = 1e-4


# ------------------------------------------------------------------ backprop basics
def test_square_gradient():
    x = ad.Tensor(np.array([3.0]), requires_grad=True)
    ad.backprop(ad.total(ad.square(x)))
    assert x.grad.tolist() == [6.0]


def test_linear_gradient_is_constant(rng):
    c = rng.normal(size=(4, 5))
    x = leaf(rng, 4, 5)
    ad.backprop(ad.total(ad.mul(ad.Tensor(c), x)))
    np.testing.assert_array_equal(x.grad, c)


def test_backprop_usage_errors(rng):
    x = leaf(rng, 3)
    with pytest.raises(UsageError):
        ad.backprop(ad.square(x))
    with pytest.raises(UsageError):
        ad.backprop(ad.total(ad.Tensor(np.ones(3))))


def test_shared_subexpression_visited_once(rng):
    x = leaf(rng, 3)
    y = ad.square(x)
    loss = ad.total(ad.add(y, y))
    order = ad.topological_order(loss)
    assert len(order) == len({id(n) for n in order})
    ad.backprop(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_shape_mismatch_raises(rng):
    with pytest.raises(DimensionError):
        ad.add(leaf(rng, 2, 3), leaf(rng, 3, 2))
    with pytest.raises(DimensionError):
        ad.conv2d(leaf(rng, 2, 1, 5, 5), leaf(rng, 3, 3, 3, 3))


# ------------------------------------------------------------------ forward oracles
def naive_conv(x, w, b):
    c, n, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((o, n, h, wd))
    for oc in range(o):
        for s in range(n):
            for i in range(h):
                for j in range(wd):
                    acc = b[oc]
                    for ic in range(c):
                        for a in range(k):
                            for bb in range(k):
                                y, xx = i + a - p, j + bb - p
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += w[oc, ic, a, bb] * x[ic, s, y, xx]
                    out[oc, s, i, j] = acc
    return out


def test_conv_matches_naive_loops(rng):
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    np.testing.assert_allclose(ad.conv2d(x, w, b).data, naive_conv(x, w, b), atol=1e-6)


def test_identity_conv(rng):
    x = rng.normal(size=(3, 2, 4, 4))
    out = ad.conv2d(x, np.eye(3)[:, :, None, None], np.zeros(3))
    np.testing.assert_array_equal(out.data, x)


def test_attention_single_position_returns_value_projection(rng):
    c = 4
    x = rng.normal(size=(c, 2, 1, 1))
    wq, wk, wv, wo = (rng.normal(size=(c, c)) for _ in range(4))
    out = ad.self_attention(x, wq, wk, wv, wo).data
    seq = x[:, :, 0, 0].T
    np.testing.assert_allclose(out[:, :, 0, 0], (seq @ wv @ wo).T, atol=1e-12)


def test_group_norm_statistics(rng):
    x = rng.normal(loc=3.0, scale=2.0, size=(8, 3, 4, 4))
    y = ad.group_norm(x, 4).data.reshape(4, 2, 3, 16)
    np.testing.assert_allclose(y.mean(axis=(1, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(1, 3)), 1, atol=1e-5)


def test_pool_and_upsample(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    pooled = ad.avg_pool2(x).data
    assert pooled[0, 0, 1, 0] == pytest.approx(x[0, 0, 2:4, 0:2].mean())
    up = ad.upsample2(pooled).data
    assert up.shape == x.shape and up[0, 0, 3, 1] == pooled[0, 0, 1, 0]


def test_forward_deterministic(rng):
    x = rng.normal(size=(2, 3, 6, 6)).astype(np.float32)
    w = rng.normal(size=(4, 2, 3, 3)).astype(np.float32)
    assert ad.conv2d(x, w).data.tobytes() == ad.conv2d(x.copy(), w.copy()).data.tobytes()


# ------------------------------------------------------------------ gradient checks
@pytest.mark.parametrize("name", LAYER_NAMES)
def test_layer_gradients(name):
    rng = np.random.default_rng(7)
    cases = {n: (p, f) for n, p, f in layer_cases(rng)}
    params, fn = cases[name]
    err = ad.finite_diff_check(lambda: weighted_sum(fn()), params)
    assert err < TOL, f"{name}: {err}"


def test_quadratic_form_is_exact(rng):
    a = rng.normal(size=(4, 4))
    x = leaf(rng, 4, 1)
    err = ad.finite_diff_check(lambda: ad.total(ad.square(ad.dense(ad.reshape(x, (1, 4)), ad.Tensor(a)))), [x])
    assert err < 1e-8


def test_dead_parameter_contributes_zero(rng):
    x, dead = leaf(rng, 3), leaf(rng, 3)
    err = ad.finite_diff_check(lambda: ad.total(ad.square(x)), [x, dead])
    assert err < 1e-8 and np.isfinite(err)


def test_full_network_gradient():
    rng = np.random.default_rng(3)
    net = tiny_network()
    conds = tiny_conditions(rng, 3)
    x = rng.normal(size=(3, 12, 12))
    t = np.array([0.2, 0.5, 0.9])
    target = ad.Tensor(rng.normal(size=(1, 3, 12, 12)))

    def loss():
        return ad.mean(ad.square(ad.sub(net.noise_prediction(x, t, conds), target)))

    err = ad.finite_diff_check(loss, list(net.params.values()), max_coords=3, seed=5)
    assert err < TOL


# ------------------------------------------------------------------ optimizer
def test_adam_minimizes_quadratic():
    x = ad.Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = ad.Adam([x], lr=0.1, clip_norm=None)
    for _ in range(300):
        opt.zero_grad()
        ad.backprop(ad.total(ad.square(x)))
        opt.step()
    assert np.all(np.abs(x.data) < 1e-2)


def test_adam_clips_global_norm():
    x = ad.Tensor(np.zeros(2), requires_grad=True)
    x.grad = np.array([300.0, 400.0])
    opt = ad.Adam([x], lr=1.0, clip_norm=1.0)
    assert opt.step() == pytest.approx(500.0)
    # first Adam step moves each coordinate by ~lr regardless of scale
    np.testing.assert_allclose(np.abs(x.data), 1.0, rtol=1e-6)


# ------------------------------------------------------------------ checkpoint format
names = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FF), min_size=1, max_size=12)


@given(st.dictionaries(names, st.lists(st.integers(1, 4), min_size=0, max_size=3), min_size=1, max_size=4),
       st.integers(0, 2 ** 32 - 1))
def test_checkpoint_round_trip_bit_exact(shapes, seed):
    rng = np.random.default_rng(seed)
    tensors = {k: rng.normal(size=tuple(s)).astype(np.float32) for k, s in shapes.items()}
    meta = {"config_id": "lr-ws+sf", "note": "a=b"}
    back, m = decode_checkpoint(encode_checkpoint(tensors, meta))
    assert m == meta
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_errors():
    buf = encode_checkpoint({"w": np.ones((2, 2), np.float32)})
    assert decode_checkpoint(buf)[1] is None
    for cut in (3, 10, len(buf) - 1):
        with pytest.raises(TruncationError):
            decode_checkpoint(buf[:cut])
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(buf[:4] + (99).to_bytes(4, "little") + buf[8:])
    with pytest.raises(FormatError):
        decode_checkpoint(buf + b"junk")


def test_checkpoint_file_round_trip(tmp_path):
    net = tiny_network()
    ad.save_checkpoint(tmp_path / "n.dspt", net.state_dict(), {"k": "v"})
    first = (tmp_path / "n.dspt").read_bytes()
    tensors, meta = ad.load_checkpoint(tmp_path / "n.dspt")
    ad.save_checkpoint(tmp_path / "m.dspt", tensors, meta)
    assert (tmp_path / "m.dspt").read_bytes() == first
