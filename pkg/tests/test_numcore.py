import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pansharp import numcore as nc

SEEDS = range(20)


def _reflect(i, n):
    if i < 0:
        return -i
    if i >= n:
        return 2 * n - 2 - i
    return i


def conv2d_oracle(x, w, b, padding="zero"):
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for y in range(h):
            for xx in range(wd):
                acc = b[o]
                for c in range(cin):
                    for dy in range(kh):
                        for dx in range(kw):
                            sy, sx = y + dy - kh // 2, xx + dx - kw // 2
                            if padding == "zero":
                                if 0 <= sy < h and 0 <= sx < wd:
                                    acc += w[o, c, dy, dx] * x[c, sy, sx]
                            else:
                                acc += w[o, c, dy, dx] * x[c, _reflect(sy, h), _reflect(sx, wd)]
                out[o, y, xx] = acc
    return out


def conv3d_oracle(x, w, b):
    cin, d, h, wd = x.shape
    cout, _, kd, kh, kw = w.shape
    out = np.zeros((cout, d, h, wd))
    for o in range(cout):
        for z in range(d):
            for y in range(h):
                for xx in range(wd):
                    acc = b[o]
                    for c in range(cin):
                        for dz in range(kd):
                            for dy in range(kh):
                                for dx in range(kw):
                                    sz, sy, sx = z + dz - kd // 2, y + dy - kh // 2, xx + dx - kw // 2
                                    if 0 <= sz < d and 0 <= sy < h and 0 <= sx < wd:
                                        acc += w[o, c, dz, dy, dx] * x[c, sz, sy, sx]
                    out[o, z, y, xx] = acc
    return out


def _probe_loss(node, rng):
    """Weighted sum with fixed random weights, so every output element matters."""
    weights = rng.standard_normal(node.shape)
    return nc.sum_all(nc.mul(node, nc.constant(weights)))


def _params(**arrays):
    return {k: nc.parameter(np.asarray(v, np.float64), k) for k, v in arrays.items()}


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


# ---------------------------------------------------------------- tensors


def test_rank_and_extent_limits():
    with pytest.raises(nc.ShapeError):
        nc.constant(np.zeros((1,) * 6))
    with pytest.raises(nc.ShapeError):
        nc.constant(np.zeros((2, 0)))


def test_float32_default_and_float64_shadow():
    assert nc.constant(np.arange(4)).dtype == np.float32
    assert nc.parameter(np.zeros(3, np.float64)).dtype == np.float64


# ---------------------------------------------------------------- elementwise


def test_relu_values():
    np.testing.assert_array_equal(nc.relu(np.array([-1.0, 0.0, 2.0])).value, [0, 0, 2])


def test_mul_by_ones_is_identity():
    a = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
    np.testing.assert_array_equal(nc.mul(a, np.ones_like(a)).value, a)


def test_mul_rejects_general_broadcast():
    with pytest.raises(nc.ShapeError):
        nc.mul(np.zeros((2, 3, 4, 4)), np.zeros((2, 3, 2, 4)))


def test_broadcast_gradient_is_channel_sum():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((4, 5, 5))
    s = nc.parameter(rng.standard_normal((1, 5, 5)))
    nc.backward(nc.sum_all(nc.mul(s, f)))
    np.testing.assert_allclose(s.grad, f.sum(axis=0, keepdims=True), rtol=1e-6)
    # and against finite differences
    p = _params(s=rng.standard_normal((1, 5, 5)))
    fc = nc.constant(f)
    rep = nc.grad_check(lambda: nc.sum_all(nc.mul(p["s"], fc)), p)
    assert rep.passed


def test_l1_loss_examples():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((3, 4))
    assert nc.l1_loss(a, a).value == 0
    assert nc.l1_loss(a + 0.5, a).value == pytest.approx(0.5, abs=1e-6)
    b = rng.standard_normal((3, 4))
    oracle = sum(abs(a[i, j] - b[i, j]) for i in range(3) for j in range(4)) / 12
    a64 = nc.parameter(a)
    assert nc.l1_loss(a64, b).value == pytest.approx(oracle, abs=1e-7)


def test_l1_zero_difference_subgradient_is_zero():
    p = nc.parameter(np.array([1.0, 2.0]))
    nc.backward(nc.l1_loss(p, np.array([1.0, 3.0])))
    np.testing.assert_array_equal(p.grad, [0.0, -0.5])


def test_shape_mismatch_names_axes():
    with pytest.raises(nc.ShapeError, match="add"):
        nc.add(np.zeros((2, 3)), np.zeros((3, 2)))


# ---------------------------------------------------------------- backward contract


def test_backward_sum_gives_ones():
    p = nc.parameter(np.random.default_rng(3).standard_normal((2, 3)))
    nc.backward(nc.sum_all(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_square_gives_2p():
    v = np.random.default_rng(4).standard_normal((3, 3))
    p = nc.parameter(v)
    nc.backward(nc.sum_all(nc.mul(p, p)))
    np.testing.assert_allclose(p.grad, 2 * v)


def test_backward_twice_doubles():
    p = nc.parameter(np.array([1.0, -2.0]))
    loss = nc.sum_all(nc.scalar_mul(p, 3.0))
    nc.backward(loss)
    nc.backward(loss)
    np.testing.assert_array_equal(p.grad, [6.0, 6.0])


def test_non_scalar_loss_is_contract_error():
    with pytest.raises(nc.ContractError):
        nc.backward(nc.parameter(np.zeros(3)))


def test_shared_node_accumulates_both_consumers():
    rng = np.random.default_rng(5)
    p = _params(x=rng.standard_normal((2, 3)))
    c = nc.constant(rng.standard_normal((2, 3)))

    def loss():
        y = nc.mul(p["x"], c)  # y feeds two consumers
        return nc.sum_all(nc.add(nc.mul(y, y), nc.scalar_mul(y, 2.0)))

    assert nc.grad_check(loss, p).passed


def test_deep_chain_does_not_recurse():
    p = nc.parameter(np.ones(2))
    y = p
    for _ in range(5000):
        y = nc.scalar_mul(y, 1.0)
    nc.backward(nc.sum_all(y))
    np.testing.assert_array_equal(p.grad, [1.0, 1.0])


# ---------------------------------------------------------------- convolution


def test_conv2d_identity_and_constant():
    x = np.random.default_rng(6).standard_normal((3, 5, 5)).astype(np.float32)
    eye = np.eye(3, dtype=np.float32)[:, :, None, None]
    np.testing.assert_array_equal(nc.conv2d(x, eye, np.zeros(3, np.float32)).value, x)
    out = nc.conv2d(x, np.zeros((2, 3, 3, 3), np.float32), np.array([0.5, -1.0], np.float32)).value
    np.testing.assert_array_equal(out[0], 0.5)
    np.testing.assert_array_equal(out[1], -1.0)


@pytest.mark.parametrize("padding", ["zero", "reflect"])
def test_conv2d_matches_loop_oracle(padding):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 5, 5))
    w = rng.standard_normal((2, 3, 3, 3))
    b = rng.standard_normal(2)
    got = nc.conv2d(nc.parameter(x), nc.parameter(w), nc.parameter(b), padding).value
    np.testing.assert_allclose(got, conv2d_oracle(x, w, b, padding), atol=1e-6)


def test_conv2d_batched_matches_unbatched():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 6, 5)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    batched = nc.conv2d(x, w).value
    for i in range(2):
        np.testing.assert_allclose(batched[i], nc.conv2d(x[i], w).value, atol=1e-6)


def test_conv3d_matches_loop_oracle():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    got = nc.conv3d(nc.parameter(x), nc.parameter(w), nc.parameter(b)).value
    np.testing.assert_allclose(got, conv3d_oracle(x, w, b), atol=1e-6)


def test_conv3d_identity_and_constant_interior():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
    one = np.ones((1, 1, 1, 1, 1), np.float32)
    np.testing.assert_array_equal(nc.conv3d(x, one).value, x)
    w = rng.standard_normal((1, 1, 3, 3, 3))
    out = nc.conv3d(nc.constant(np.full((1, 5, 5, 5), 2.0)), nc.parameter(w)).value
    assert out[0, 2, 2, 2] == pytest.approx(2.0 * w.sum(), rel=1e-6)


def test_conv_errors():
    with pytest.raises(nc.ShapeError, match="odd"):
        nc.conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)))
    with pytest.raises(nc.ShapeError, match="channel"):
        nc.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ValueError):
        nc.conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 3, 3)), padding="wrap")


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_conv_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    f = lambda v: nc.conv2d(nc.parameter(v), nc.parameter(w)).value  # noqa: E731
    np.testing.assert_allclose(f(a * x + b * y), a * f(x) + b * f(y), atol=1e-5)
    x3, y3 = rng.standard_normal((2, 1, 3, 4, 4))
    w3 = rng.standard_normal((2, 1, 3, 3, 3))
    g = lambda v: nc.conv3d(nc.parameter(v), nc.parameter(w3)).value  # noqa: E731
    np.testing.assert_allclose(g(a * x3 + b * y3), a * g(x3) + b * g(y3), atol=1e-5)


# ---------------------------------------------------------------- patch ops


def unfold_oracle(x, p):
    bsz, c, h, w = x.shape
    r = p // 2
    out = np.zeros((bsz, h * w, c * p * p))
    for n in range(bsz):
        for y in range(h):
            for xx in range(w):
                k = 0
                for ch in range(c):
                    for dy in range(-r, r + 1):
                        for dx in range(-r, r + 1):
                            out[n, y * w + xx, k] = x[n, ch, _reflect(y + dy, h), _reflect(xx + dx, w)]
                            k += 1
    return out


def fold_oracle(patches, c, h, w, p):
    bsz = patches.shape[0]
    r = p // 2
    acc = np.zeros((bsz, c, h, w))
    cnt = np.zeros((bsz, c, h, w))
    for n in range(bsz):
        for y in range(h):
            for xx in range(w):
                k = 0
                for ch in range(c):
                    for dy in range(-r, r + 1):
                        for dx in range(-r, r + 1):
                            ty, tx = y + dy, xx + dx
                            if 0 <= ty < h and 0 <= tx < w:
                                acc[n, ch, ty, tx] += patches[n, y * w + xx, k]
                                cnt[n, ch, ty, tx] += 1
                            k += 1
    return acc / cnt


def test_unfold_matches_loop_oracle():
    x = np.random.default_rng(11).standard_normal((1, 2, 4, 4))
    np.testing.assert_allclose(nc.unfold2d(nc.parameter(x), 3).value, unfold_oracle(x, 3), atol=0)


def test_fold_matches_loop_oracle():
    pt = np.random.default_rng(12).standard_normal((2, 20, 18))
    got = nc.fold2d(nc.parameter(pt), 2, 4, 5, 3).value
    np.testing.assert_allclose(got, fold_oracle(pt, 2, 4, 5, 3), atol=1e-12)


def test_fold_of_unfold_is_identity():
    x = np.random.default_rng(13).standard_normal((1, 3, 6, 5))
    back = nc.fold2d(nc.unfold2d(nc.parameter(x), 3), 3, 6, 5, 3).value
    np.testing.assert_allclose(back, x, atol=1e-12)


def test_normalize_rows_unit_and_zero():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    np.testing.assert_allclose(nc.normalize_rows(nc.parameter(x)).value, [[0.6, 0.8], [0, 0]])


def test_matmul_nt_matches_loops():
    rng = np.random.default_rng(14)
    a, b = rng.standard_normal((5, 8)), rng.standard_normal((7, 8))
    oracle = np.array([[sum(a[i, k] * b[j, k] for k in range(8)) for j in range(7)] for i in range(5)])
    np.testing.assert_allclose(nc.matmul_nt(nc.parameter(a), nc.parameter(b)).value, oracle, atol=1e-12)


def test_max_last_and_rowmax_agree():
    rng = np.random.default_rng(15)
    a, b = rng.standard_normal((2, 6, 4)), rng.standard_normal((9, 4))
    prod = nc.matmul_nt(nc.parameter(a), nc.parameter(b))
    vals, idx = nc.max_last(prod)
    fvals, fidx, fprod = nc.rowmax_nt(nc.parameter(a), nc.parameter(b))
    np.testing.assert_array_equal(idx, fidx)
    np.testing.assert_array_equal(fvals.value, np.take_along_axis(fprod, fidx[..., None], -1)[..., 0])
    np.testing.assert_allclose(vals.value, fvals.value, atol=1e-12)


def test_max_last_first_occurrence_on_ties():
    vals, idx = nc.max_last(np.array([[1.0, 3.0, 3.0]]))
    assert idx[0] == 1


def test_gather_rows_and_range_check():
    x = np.arange(12.0).reshape(4, 3)
    np.testing.assert_array_equal(nc.gather_rows(x, np.array([3, 0, 3])).value, x[[3, 0, 3]])
    with pytest.raises(IndexError):
        nc.gather_rows(x, np.array([4]))


# ---------------------------------------------------------------- gradients per op, 20 seeds


def _check(loss_fn, params):
    rep = nc.grad_check(loss_fn, params)
    assert rep.passed, rep.lines()
    assert not rep.silent, rep.silent


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_elementwise_ops(seed):
    rng = np.random.default_rng(seed)
    p = _params(a=_away_from_zero(rng, (2, 3, 3)), b=rng.standard_normal((2, 3, 3)), s=rng.standard_normal((1, 3, 3)))

    def loss():
        y = nc.add(nc.relu(p["a"]), nc.scalar_mul(p["b"], 0.7))
        y = nc.mul(y, p["s"])
        y = nc.concat_channels([y, p["a"]], axis=0)
        return _probe_loss(nc.reshape(y, (4, 9)), np.random.default_rng(seed + 100))

    _check(loss, p)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_l1(seed):
    rng = np.random.default_rng(seed)
    target = rng.standard_normal((3, 4))
    p = _params(x=target + _away_from_zero(rng, (3, 4)))
    _check(lambda: nc.l1_loss(p["x"], target), p)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("padding", ["zero", "reflect"])
def test_grad_conv2d(seed, padding):
    rng = np.random.default_rng(seed)
    p = _params(x=rng.standard_normal((2, 2, 4, 4)), w=rng.standard_normal((3, 2, 3, 3)), b=rng.standard_normal(3))
    _check(lambda: _probe_loss(nc.conv2d(p["x"], p["w"], p["b"], padding), np.random.default_rng(seed)), p)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv3d(seed):
    rng = np.random.default_rng(seed)
    p = _params(x=rng.standard_normal((1, 2, 3, 3, 3)), w=rng.standard_normal((2, 2, 3, 3, 3)), b=rng.standard_normal(2))
    _check(lambda: _probe_loss(nc.conv3d(p["x"], p["w"], p["b"]), np.random.default_rng(seed)), p)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_patch_ops(seed):
    rng = np.random.default_rng(seed)
    p = _params(x=rng.standard_normal((1, 2, 4, 4)))

    def loss():
        u = nc.unfold2d(p["x"], 3)
        f = nc.fold2d(nc.normalize_rows(u), 2, 4, 4, 3)
        return _probe_loss(f, np.random.default_rng(seed + 1))

    _check(loss, p)


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_attention_ops(seed):
    rng = np.random.default_rng(seed)
    p = _params(q=rng.standard_normal((2, 5, 4)), k=rng.standard_normal((7, 4)), v=rng.standard_normal((7, 3)))

    def loss():
        r = nc.matmul_nt(nc.normalize_rows(p["q"]), nc.normalize_rows(p["k"]))
        vals, idx = nc.max_last(r)
        fused, fidx, _ = nc.rowmax_nt(nc.normalize_rows(p["q"]), nc.normalize_rows(p["k"]))
        t = nc.gather_rows(p["v"], idx)
        probe = np.random.default_rng(seed + 2)
        return nc.add(nc.add(_probe_loss(vals, probe), _probe_loss(fused, probe)), _probe_loss(t, probe))

    _check(loss, p)


def test_grad_check_requires_float64():
    p = {"x": nc.parameter(np.zeros(2, np.float32))}
    with pytest.raises(nc.ContractError):
        nc.grad_check(lambda: nc.sum_all(p["x"]), p)


@pytest.mark.parametrize("fault", ["relu", "max_last"])
def test_injected_fault_is_detected(fault):
    rng = np.random.default_rng(0)
    p = _params(a=_away_from_zero(rng, (2, 5, 4)), k=rng.standard_normal((6, 4)))

    def loss():
        r = nc.matmul_nt(nc.relu(p["a"]), p["k"])
        vals, _ = nc.max_last(r)
        return nc.sum_all(vals)

    nc.inject_gradient_fault(fault)
    try:
        rep = nc.grad_check(loss, p)
    finally:
        nc.inject_gradient_fault(None)
    assert not rep.passed


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_params():
    params = {"x": np.array([1.0, -2.0])}
    state = nc.AdamState()
    new = nc.adam_step(params, {"x": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(new["x"], params["x"])


def test_adam_first_step_is_lr_sign():
    state = nc.AdamState()
    new = nc.adam_step({"x": np.array([0.0])}, {"x": np.array([-3.0])}, state, lr=0.01)
    assert new["x"][0] == pytest.approx(0.01, rel=1e-6)


def test_adam_descends_quadratic():
    x = nc.parameter(np.array([1.0]))
    opt = nc.Adam({"x": x}, lr=0.1)
    prev = abs(x.value[0])
    for _ in range(10):
        opt.zero_grad()
        nc.backward(nc.sum_all(nc.mul(x, x)))
        opt.step()
        assert abs(x.value[0]) < prev
        prev = abs(x.value[0])


def test_adam_state_shape_mismatch():
    state = nc.AdamState()
    nc.adam_step({"x": np.zeros(2)}, {"x": np.ones(2)}, state, lr=0.1)
    with pytest.raises(nc.ShapeError):
        nc.adam_step({"x": np.zeros(3)}, {"x": np.ones(3)}, state, lr=0.1)
