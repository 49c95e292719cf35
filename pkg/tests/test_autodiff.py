"""Gradient checks for the autodiff core against central finite differences."""

import numpy as np
import pytest

from dressim import autodiff as ad


def finite_difference(fn, arrays, which, eps=1e-6):
    """Central-difference gradient of scalar fn w.r.t. arrays[which]."""
    arrays = [a.astype(np.float64).copy() for a in arrays]
    grad = np.zeros_like(arrays[which])
    flat = arrays[which].reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(*arrays)
        flat[i] = orig - eps
        lo = fn(*arrays)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def check_op(build_loss, arrays, rtol=1e-5, atol=1e-8, eps=1e-6):
    """Compare backward grads of build_loss against finite differences.

    build_loss maps raw arrays to a scalar Tensor when given Tensors, and
    to a float when given numpy arrays wrapped on the fly.
    """
    tensors = [ad.Tensor(a) for a in arrays]
    loss = build_loss(*tensors)
    ad.backward(loss)

    def scalar_fn(*raw):
        return float(build_loss(*[ad.Tensor(r) for r in raw]).values)

    for which, t in enumerate(tensors):
        fd = finite_difference(scalar_fn, arrays, which, eps=eps)
        np.testing.assert_allclose(t.grad, fd, rtol=rtol, atol=atol)


def project(out, seed):
    """Fixed random projection to a scalar so every output entry matters.

    Regenerated from the seed on each call so repeated evaluations inside
    the finite-difference loop see the same projection.
    """
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ad.reduce_sum(ad.mul(out, ad.Tensor(w)))


N_INSTANCES = 20


# ------------------------------------------------------- per-primitive FD

def test_matmul_fd():
    rng = np.random.default_rng(0)
    for i in range(N_INSTANCES):
        m, k, n = rng.integers(1, 6, size=3)
        a = rng.normal(size=(m, k))
        b = rng.normal(size=(k, n))
        check_op(lambda x, y: project(ad.matmul(x, y), i), [a, b])


def test_matmul_fd_fixed_shape_tight():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3, 2))
    check_op(lambda x, y: project(ad.matmul(x, y), 7), [a, b],
             rtol=1e-6, atol=1e-9)


def test_add_same_shape_fd():
    rng = np.random.default_rng(2)
    for i in range(N_INSTANCES):
        shape = tuple(rng.integers(1, 5, size=2))
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        check_op(lambda x, y: project(ad.add(x, y), i), [a, b])


def test_add_bias_row_fd():
    rng = np.random.default_rng(3)
    for i in range(N_INSTANCES):
        m, n = rng.integers(1, 6, size=2)
        a = rng.normal(size=(m, n))
        b = rng.normal(size=(n,))
        check_op(lambda x, y: project(ad.add(x, y), i), [a, b])


def test_sub_fd():
    rng = np.random.default_rng(4)
    for i in range(N_INSTANCES):
        shape = tuple(rng.integers(1, 5, size=2))
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        check_op(lambda x, y: project(ad.sub(x, y), i), [a, b])


def test_mul_elementwise_fd():
    rng = np.random.default_rng(5)
    for i in range(N_INSTANCES):
        shape = tuple(rng.integers(1, 5, size=2))
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        check_op(lambda x, y: project(ad.mul(x, y), i), [a, b])


def test_mul_scalar_constant_fd():
    rng = np.random.default_rng(6)
    for i in range(N_INSTANCES):
        a = rng.normal(size=(3, 4))
        c = float(rng.normal())
        check_op(lambda x: project(ad.mul(x, c), i), [a])


def test_div_fd():
    rng = np.random.default_rng(7)
    for i in range(N_INSTANCES):
        shape = tuple(rng.integers(1, 5, size=2))
        a = rng.normal(size=shape)
        b = rng.uniform(0.5, 2.0, size=shape) * rng.choice([-1.0, 1.0])
        check_op(lambda x, y: project(ad.div(x, y), i), [a, b])


def test_relu_fd():
    rng = np.random.default_rng(8)
    done = 0
    while done < N_INSTANCES:
        a = rng.normal(size=(4, 3))
        if np.abs(a).min() < 1e-3:  # stay off the kink
            continue
        check_op(lambda x: project(ad.relu(x), done), [a])
        done += 1


def test_tanh_fd():
    rng = np.random.default_rng(9)
    for i in range(N_INSTANCES):
        a = rng.normal(size=(4, 3))
        check_op(lambda x: project(ad.tanh(x), i), [a])


def test_exp_fd():
    rng = np.random.default_rng(10)
    for i in range(N_INSTANCES):
        a = rng.normal(size=(4, 3))
        check_op(lambda x: project(ad.exp(x), i), [a])


def test_log_fd():
    rng = np.random.default_rng(11)
    for i in range(N_INSTANCES):
        a = rng.uniform(0.2, 3.0, size=(4, 3))
        check_op(lambda x: project(ad.log(x), i), [a])


def test_sqrt_fd():
    rng = np.random.default_rng(12)
    for i in range(N_INSTANCES):
        a = rng.uniform(0.2, 3.0, size=(4, 3))
        check_op(lambda x: project(ad.sqrt(x), i), [a])


def test_softplus_fd():
    rng = np.random.default_rng(13)
    for i in range(N_INSTANCES):
        a = rng.normal(size=(4, 3)) * 3.0
        check_op(lambda x: project(ad.softplus(x), i), [a])


def test_clip_fd():
    rng = np.random.default_rng(14)
    done = 0
    while done < N_INSTANCES:
        a = rng.normal(size=(4, 3))
        if min(np.abs(a - 1.0).min(), np.abs(a + 1.0).min()) < 1e-3:
            continue
        check_op(lambda x: project(ad.clip(x, -1.0, 1.0), done), [a])
        done += 1


def test_max_over_set_fd():
    rng = np.random.default_rng(15)
    for i in range(N_INSTANCES):
        m, f = int(rng.integers(4, 10)), int(rng.integers(1, 5))
        a = rng.normal(size=(m, f))
        split = sorted(rng.choice(np.arange(1, m), size=2, replace=False))
        groups = [np.arange(0, split[0]),
                  np.arange(split[0], split[1]),
                  np.arange(split[1], m)]
        check_op(lambda x: project(ad.max_over_set(x, groups), i), [a])


def test_max_over_set_overlapping_groups_fd():
    rng = np.random.default_rng(16)
    for i in range(N_INSTANCES):
        a = rng.normal(size=(6, 3))
        groups = [np.array([0, 1, 2, 3]), np.array([2, 3, 4, 5]),
                  np.array([5, 0])]
        check_op(lambda x: project(ad.max_over_set(x, groups), i), [a])


def test_gather_fd():
    rng = np.random.default_rng(17)
    for i in range(N_INSTANCES):
        a = rng.normal(size=(5, 3))
        idx = rng.integers(0, 5, size=7)  # duplicates exercise accumulation
        check_op(lambda x: project(ad.gather(x, idx), i), [a])


def test_scatter_add_fd():
    rng = np.random.default_rng(18)
    for i in range(N_INSTANCES):
        a = rng.normal(size=(6, 3))
        idx = rng.integers(0, 4, size=6)
        check_op(lambda x: project(ad.scatter_add(x, idx, 4), i), [a])


def test_slice_cols_fd():
    rng = np.random.default_rng(19)
    for i in range(N_INSTANCES):
        a = rng.normal(size=(4, 6))
        lo = int(rng.integers(0, 5))
        hi = int(rng.integers(lo + 1, 7))
        check_op(lambda x: project(ad.slice_cols(x, lo, hi), i), [a])


def test_concat_rows_fd():
    rng = np.random.default_rng(20)
    for i in range(N_INSTANCES):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(4, 3))
        check_op(lambda x, y: project(ad.concat([x, y], axis=0), i),
                 [a, b])


def test_concat_cols_fd():
    rng = np.random.default_rng(21)
    for i in range(N_INSTANCES):
        a = rng.normal(size=(3, 2))
        b = rng.normal(size=(3, 4))
        check_op(lambda x, y: project(ad.concat([x, y], axis=1), i),
                 [a, b])


def test_reduce_sum_fd():
    rng = np.random.default_rng(22)
    for i in range(N_INSTANCES):
        a = rng.normal(size=(3, 4))
        check_op(lambda x: ad.reduce_sum(ad.mul(x, x)), [a])


def test_reduce_mean_fd():
    rng = np.random.default_rng(23)
    for i in range(N_INSTANCES):
        a = rng.normal(size=(3, 4))
        check_op(lambda x: ad.reduce_mean(ad.mul(x, x)), [a])


def test_mean_rows_fd():
    rng = np.random.default_rng(24)
    for i in range(N_INSTANCES):
        a = rng.normal(size=(5, 3))
        check_op(lambda x: project(ad.mean_rows(x), i), [a])


# -------------------------------------------------------- pinned examples

def test_tanh_gradient_at_zero_is_one():
    x = ad.Tensor(np.zeros((1,)))
    ad.backward(ad.reduce_sum(ad.tanh(x)))
    assert x.grad[0] == 1.0


def test_sum_gradient_is_ones():
    x = ad.Tensor(np.arange(12.0).reshape(3, 4))
    ad.backward(ad.reduce_sum(x))
    assert (x.grad == 1.0).all()


def test_fanout_accumulates():
    x = ad.Tensor(np.array([1.5]))
    ad.backward(ad.reduce_sum(ad.add(x, x)))
    assert x.grad[0] == 2.0


def test_max_over_set_first_index_tie():
    x = ad.Tensor(np.array([[3.0], [3.0], [1.0]]))
    out = ad.max_over_set(x, [np.array([0, 1, 2])])
    assert out.values[0, 0] == 3.0
    ad.backward(ad.reduce_sum(out))
    assert x.grad[:, 0].tolist() == [1.0, 0.0, 0.0]


def test_backward_rejects_non_scalar():
    x = ad.Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.tanh(x))


def test_shape_errors_name_the_primitive():
    a, b = ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError, match="matmul"):
        ad.matmul(a, b)
    with pytest.raises(ValueError, match="add"):
        ad.add(a, b)
    with pytest.raises(ValueError, match="mul"):
        ad.mul(a, b)
    with pytest.raises(ValueError, match="scatter_add"):
        ad.scatter_add(a, [0], 3)
    with pytest.raises(ValueError, match="slice_cols"):
        ad.slice_cols(a, 2, 2)


def test_gradients_accumulate_until_zeroed():
    x = ad.Tensor(np.array([2.0]))
    loss_a = ad.reduce_sum(ad.mul(x, 3.0))
    ad.backward(loss_a)
    assert x.grad[0] == 3.0
    loss_b = ad.reduce_sum(ad.mul(x, 3.0))
    ad.backward(loss_b)
    assert x.grad[0] == 6.0
    x.zero_grad()
    ad.backward(ad.reduce_sum(ad.mul(x, 3.0)))
    assert x.grad[0] == 3.0


def test_detach_blocks_gradient():
    x = ad.Tensor(np.array([2.0]))
    y = ad.mul(x, 4.0)
    ad.backward(ad.reduce_sum(ad.mul(y.detach(), y)))
    # only the live branch contributes: d/dx (c * 4x) with c = 8
    assert x.grad[0] == pytest.approx(32.0)


def test_backward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(99)
        x = ad.Tensor(rng.normal(size=(6, 4)))
        w = ad.Tensor(rng.normal(size=(4, 4)))
        h = ad.tanh(ad.matmul(x, w))
        h2 = ad.add(ad.matmul(h, w), h)  # w and h fan out
        loss = ad.reduce_mean(ad.mul(h2, h2))
        ad.backward(loss)
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert (gx1 == gx2).all() and (gw1 == gw2).all()


def test_float32_flows_through():
    x = ad.Tensor(np.ones((2, 2), dtype=np.float32))
    w = ad.Tensor(np.ones((2, 2), dtype=np.float32))
    y = ad.tanh(ad.matmul(x, w))
    assert y.values.dtype == np.float32
    ad.backward(ad.reduce_sum(y))
    assert x.grad.dtype == np.float32


# ------------------------------------------------------------------- MLP

def _mlp_loss(x, w1, b1, w2, b2, w3, b3, proj):
    h1 = ad.tanh(ad.add(ad.matmul(x, w1), b1))
    h2 = ad.relu(ad.add(ad.matmul(h1, w2), b2))
    out = ad.add(ad.matmul(h2, w3), b3)
    return ad.reduce_sum(ad.mul(out, proj))


def test_three_layer_mlp_full_jacobian_fd():
    rng = np.random.default_rng(42)
    arrays = [
        rng.normal(size=(5, 4)),          # x
        rng.normal(size=(4, 8)) * 0.5,    # w1
        rng.normal(size=(8,)) * 0.1,      # b1
        rng.normal(size=(8, 8)) * 0.5,    # w2
        rng.normal(size=(8,)) * 0.1,      # b2
        rng.normal(size=(8, 2)) * 0.5,    # w3
        rng.normal(size=(2,)) * 0.1,      # b3
        rng.normal(size=(5, 2)),          # projection
    ]
    check_op(_mlp_loss, arrays, rtol=1e-5, atol=1e-8)


# ------------------------------------------------------------------ Adam

def _reference_adam(values, grads, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook bias-corrected Adam trajectory, independent of the module."""
    p = values.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


def test_adam_first_step_magnitude_and_sign():
    rng = np.random.default_rng(50)
    p = ad.Tensor(rng.normal(size=(3, 3)))
    before = p.values.copy()
    g = rng.uniform(0.5, 2.0, size=(3, 3)) * rng.choice([-1, 1], size=(3, 3))
    p.grad[...] = g
    opt = ad.Adam([p], lr=1e-4)
    opt.step()
    delta = p.values - before
    np.testing.assert_allclose(delta, -1e-4 * np.sign(g), rtol=1e-6)


def test_adam_zero_grad_leaves_params():
    p = ad.Tensor(np.array([1.0, -2.0, 3.0]))
    before = p.values.copy()
    opt = ad.Adam([p])
    opt.step()
    assert (p.values == before).all()


def test_adam_matches_reference_trajectory():
    rng = np.random.default_rng(51)
    init = rng.normal(size=(4, 2))
    grads = [rng.normal(size=(4, 2)) for _ in range(7)]
    p = ad.Tensor(init.copy())  # leaf tensors share storage with the caller
    opt = ad.Adam([p], lr=1e-3)
    for g in grads:
        p.grad[...] = g
        opt.step()
    expected = _reference_adam(init, grads, lr=1e-3)
    np.testing.assert_allclose(p.values, expected, rtol=1e-12, atol=1e-15)


def test_adam_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(52)
        p = ad.Tensor(rng.normal(size=(5,)))
        opt = ad.Adam([p])
        for _ in range(25):
            p.grad[...] = rng.normal(size=(5,))
            opt.step()
        return p.values.copy()

    a, b = run(), run()
    assert (a == b).all()


def test_adam_zero_grad_helper_clears():
    p = ad.Tensor(np.ones(3))
    p.grad[...] = 5.0
    opt = ad.Adam([p])
    opt.zero_grad()
    assert (p.grad == 0.0).all()


def test_contiguous_groups_match_index_lists():
    rng = np.random.default_rng(60)
    for _ in range(N_INSTANCES):
        sizes = rng.integers(1, 5, size=4)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        x_arr = rng.normal(size=(int(offsets[-1]), 3))
        lists = [np.arange(offsets[i], offsets[i + 1]) for i in range(4)]

        a = ad.Tensor(x_arr)
        out_a = ad.max_over_set(a, lists)
        ad.backward(ad.reduce_sum(ad.mul(out_a, out_a)))

        b = ad.Tensor(x_arr)
        out_b = ad.max_over_set(b, ad.ContiguousGroups(offsets))
        ad.backward(ad.reduce_sum(ad.mul(out_b, out_b)))

        assert (out_a.values == out_b.values).all()
        assert (a.grad == b.grad).all()


def test_contiguous_groups_tie_breaks_first():
    x = ad.Tensor(np.array([[3.0], [3.0], [1.0]]))
    out = ad.max_over_set(x, ad.ContiguousGroups([0, 3]))
    ad.backward(ad.reduce_sum(out))
    assert x.grad[:, 0].tolist() == [1.0, 0.0, 0.0]


def test_contiguous_groups_rejects_empty():
    with pytest.raises(ValueError, match="empty group"):
        ad.ContiguousGroups([0, 2, 2, 5])
