"""Tensor-engine unit tests: forward examples, gradient oracle, Adam."""

import numpy as np
import pytest

import spritediff.engine as eng
from spritediff.engine import Adam, Parameter, ShapeError, Tensor

from gradcheck import check_gradients

SEEDS = list(range(20))


def rng_for(seed):
    return np.random.default_rng(1000 + seed)


def test_softmax_symmetry():
    out = eng.softmax(Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5])


def test_matmul_identity():
    m = np.arange(9.0).reshape(3, 3)
    out = Tensor(np.eye(3)) @ Tensor(m)
    assert np.array_equal(out.data, m.astype(np.float32))


def test_conv2d_all_ones_valid():
    # direct-summation oracle: every 3x3 window of a 5x5 ones image sums to 9
    x = Tensor(np.ones((1, 1, 5, 5)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = eng.conv2d(x, w, padding="valid")
    assert out.shape == (1, 1, 3, 3)
    assert np.allclose(out.data, 9.0)


def test_conv2d_matches_direct_summation():
    rng = rng_for(0)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    out = eng.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), padding="valid")
    expect = np.zeros((2, 4, 4, 4))
    for n in range(2):
        for k in range(4):
            for i in range(4):
                for j in range(4):
                    expect[n, k, i, j] = np.sum(x[n, :, i:i + 3, j:j + 3] * w[k])
    assert np.allclose(out.data, expect, atol=1e-12)


def test_shape_mismatch_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
    assert exc.value.op == "matmul"
    assert exc.value.shape_a == (2, 3) and exc.value.shape_b == (2, 3)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True, dtype=np.float64)
    (x * x).backward()
    assert np.allclose(x.grad, 6.0)


def test_constant_gradient_is_none():
    x = Tensor(2.0, requires_grad=True)
    loss = Tensor(5.0) * Tensor(1.0)
    loss.backward()
    assert x.grad is None


def test_fanout_accumulates():
    x = Tensor(2.0, requires_grad=True, dtype=np.float64)
    y = x * x + x * 3.0
    y.backward()
    assert np.allclose(x.grad, 2 * 2.0 + 3.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_elementwise_and_reductions(seed):
    rng = rng_for(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))

    check_gradients(lambda x, y: ((x * y + x - y) * 0.5).sum(), [a, b])
    check_gradients(lambda x: eng.silu(x).sum(), [a])
    check_gradients(lambda x: eng.sigmoid(x).mean(), [a])
    check_gradients(lambda x: eng.tanh(x).sum(), [a])
    check_gradients(lambda x: eng.exp(x * 0.3).sum(), [a])
    check_gradients(lambda x: eng.log(eng.exp(x) + 1.0).sum(), [a])
    check_gradients(lambda x: eng.sqrt(eng.exp(x)).sum(), [a])
    check_gradients(lambda x: (x ** 3.0).mean(), [a])
    check_gradients(lambda x: eng.softmax(x, axis=-1).sum(axis=0).sum(), [a])
    check_gradients(lambda x: eng.logsumexp(x, axis=-1).sum(), [a])
    check_gradients(lambda x: x.mean(axis=1).sum(), [a])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_matmul_conv_pool_resize(seed):
    rng = rng_for(seed)
    a = rng.normal(size=(3, 5))
    b = rng.normal(size=(5, 2))
    check_gradients(lambda x, y: (x @ y).sum(), [a, b])

    x = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=(3,))
    check_gradients(lambda xx, ww, bb: eng.conv2d(xx, ww, bb, padding="same").sum(), [x, w, bias])
    check_gradients(lambda xx, ww: eng.conv2d(xx, ww, padding="valid").sum(), [x, w])
    check_gradients(lambda xx: eng.avg_pool2d(xx, 2).sum(), [x])
    check_gradients(lambda xx: eng.upsample_nearest2d(xx, 2).sum(), [x])
    check_gradients(lambda xx: eng.upsample_bicubic2d(xx, 8, 8).sum(), [x])


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_norms_attention_losses(seed):
    rng = rng_for(seed)
    x = rng.normal(size=(2, 4, 3, 3))
    gamma = rng.normal(size=(4,)) + 1.5
    beta = rng.normal(size=(4,))
    check_gradients(
        lambda xx, gg, bb: eng.group_norm(xx, gg, bb, groups=2).sum(), [x, gamma, beta]
    )

    seq = rng.normal(size=(2, 3, 4))
    check_gradients(
        lambda xx, gg, bb: eng.layer_norm(xx, gg, bb).sum(), [seq, gamma, beta]
    )

    q = rng.normal(size=(1, 2, 3, 4))
    k = rng.normal(size=(1, 2, 5, 4))
    v = rng.normal(size=(1, 2, 5, 4))
    check_gradients(
        lambda qq, kk, vv: eng.scaled_dot_product_attention(qq, kk, vv).sum(), [q, k, v]
    )

    pred = rng.normal(size=(3, 4))
    target = rng.normal(size=(3, 4))
    check_gradients(lambda p, t: eng.mse_loss(p, t), [pred, target])

    logits = rng.normal(size=(4, 5))
    labels = rng.integers(0, 5, size=4)
    check_gradients(lambda ll: eng.cross_entropy(ll, labels), [logits])

    mu_q = rng.normal(size=(3,))
    lv_q = rng.normal(size=(3,)) * 0.3
    mu_p = rng.normal(size=(3,))
    lv_p = rng.normal(size=(3,)) * 0.3
    check_gradients(
        lambda a_, b_, c_, d_: eng.gaussian_kl(a_, b_, c_, d_).sum(), [mu_q, lv_q, mu_p, lv_p]
    )


@pytest.mark.parametrize("seed", SEEDS[:5])
def test_gradcheck_embedding_concat_slice(seed):
    rng = rng_for(seed)
    table = rng.normal(size=(7, 4))
    ids = rng.integers(0, 7, size=(2, 3))
    check_gradients(lambda tt: eng.embedding(tt, ids).sum(axis=-1).mean(), [table])

    a = rng.normal(size=(2, 3, 2, 2))
    b = rng.normal(size=(2, 2, 2, 2))
    check_gradients(lambda x, y: eng.concat([x, y], axis=1).sum(), [a, b])
    check_gradients(lambda x: x[:, 1:, :, :].sum(), [a])
    check_gradients(lambda x: eng.clip(x, -0.5, 0.8).sum(), [a])


@pytest.mark.parametrize("seed", SEEDS[:8])
def test_gradcheck_max_reduction(seed):
    # keep the top-2 gap well clear of the FD step so the kink is not straddled
    rng = rng_for(seed)
    while True:
        a = rng.normal(size=(3, 4, 5))
        s = np.sort(a, axis=2)
        if (s[:, :, -1] - s[:, :, -2]).min() > 1e-3:
            break
    check_gradients(lambda x: eng.max_(x, axis=2).sum(), [a])
    check_gradients(lambda x: eng.max_(x, axis=2, keepdims=True).mean(), [a])


def test_max_tie_splits_gradient():
    x = Tensor(np.array([[1.0, 3.0, 3.0]]), requires_grad=True, dtype=np.float64)
    eng.max_(x, axis=1).sum().backward()
    assert np.allclose(x.grad, [[0.0, 0.5, 0.5]])


def test_attention_mask_excludes_keys_exactly():
    rng = rng_for(3)
    q = Tensor(rng.normal(size=(1, 1, 2, 4)))
    k = rng.normal(size=(1, 1, 5, 4))
    v = rng.normal(size=(1, 1, 5, 4))
    mask = np.zeros((1, 1, 1, 5), dtype=np.float32)
    mask[..., 3:] = -1e9
    out1 = eng.scaled_dot_product_attention(q, Tensor(k), Tensor(v), mask=mask)
    k2, v2 = k.copy(), v.copy()
    k2[:, :, 3:], v2[:, :, 3:] = 7.7, -4.2  # garbage in masked keys
    out2 = eng.scaled_dot_product_attention(q, Tensor(k2), Tensor(v2), mask=mask)
    assert np.array_equal(out1.data, out2.data)


def test_forward_bit_reproducible():
    rng = rng_for(7)
    x = rng.normal(size=(4, 8)).astype(np.float32)
    w = rng.normal(size=(8, 8)).astype(np.float32)

    def run():
        return eng.softmax(Tensor(x) @ Tensor(w), axis=-1).data.tobytes()

    assert run() == run()


def test_no_nan_inf_on_finite_inputs():
    rng = rng_for(11)
    x = Tensor(rng.normal(size=(2, 4, 4, 4)).astype(np.float32) * 10)
    w = Tensor(rng.normal(size=(4, 4, 3, 3)).astype(np.float32))
    outs = [
        eng.conv2d(x, w).data,
        eng.softmax(x.reshape(2, -1)).data,
        eng.group_norm(x, Tensor(np.ones(4, np.float32)), Tensor(np.zeros(4, np.float32)), 2).data,
        eng.silu(x).data,
    ]
    for arr in outs:
        assert np.isfinite(arr).all()


def test_batch_split_gradient_equivalence():
    # mean-reduced loss: two half batches averaged == full batch (64-bit)
    rng = rng_for(13)
    x = rng.normal(size=(8, 6))
    w = rng.normal(size=(6, 3))
    t = rng.normal(size=(8, 3))

    def grad_of(xs, ts):
        wt = Tensor(w, requires_grad=True, dtype=np.float64)
        eng.mse_loss(Tensor(xs, dtype=np.float64) @ wt, Tensor(ts, dtype=np.float64)).backward()
        return wt.grad

    full = grad_of(x, t)
    halves = 0.5 * (grad_of(x[:4], t[:4]) + grad_of(x[4:], t[4:]))
    assert np.abs(full - halves).max() / np.abs(full).max() < 1e-6


def test_adam_zero_grad_leaves_param():
    p = Parameter(np.ones(3))
    opt = Adam([p])
    p.grad = np.zeros(3)
    before = p.data.copy()
    opt.step()
    assert np.array_equal(p.data, before)


def test_adam_first_step_magnitude():
    p = Parameter(np.zeros(4), dtype=np.float64)
    opt = Adam([p], lr=1e-3)
    p.grad = np.array([0.5, -2.0, 1e-3, 10.0])
    opt.step()
    # bias-corrected first step is lr * g/|g| up to eps
    assert np.allclose(np.abs(p.data), 1e-3, rtol=1e-4)


def test_adam_converges_on_quadratic():
    # scalar simulation oracle: 100 steps on f(x) = x^2 from x = 1
    p = Parameter(np.array([1.0]), dtype=np.float64)
    opt = Adam([p], lr=1e-1)
    for _ in range(100):
        opt.zero_grad()
        x = Tensor(p.data, requires_grad=True, dtype=np.float64)
        p.grad = 2.0 * p.data
        opt.step()
    assert abs(p.data[0]) < 0.5


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = Parameter(rng.normal(size=(3, 3)).astype(np.float32))
        opt = Adam([p], lr=1e-2)
        for i in range(10):
            p.grad = (p.data * 0.3 + i).astype(np.float32)
            opt.step()
        return p.data.tobytes()

    assert run() == run()


def test_detach_blocks_gradient():
    x = Tensor(2.0, requires_grad=True, dtype=np.float64)
    y = x * 3.0
    (y.detach() * x).backward()
    assert np.allclose(x.grad, 6.0)  # only the direct factor, not through y
