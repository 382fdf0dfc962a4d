import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gaitfuse import diffcore as dc
from gaitfuse import gradsuite
from gaitfuse.errors import ContractViolation


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = sum(a[i, t] * b[t, j] for t in range(k))
    return out


def naive_conv2d(x, w, b, stride, pad):
    C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho, Wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o]
                for c in range(C):
                    for u in range(k):
                        for v in range(k):
                            acc += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = acc
    return out


def naive_conv3d(x, w, b, pad):
    C, T, H, W = x.shape
    O, _, kt, k, _ = w.shape
    xp = np.zeros((C, T + 2 * pad, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + T, pad:pad + H, pad:pad + W] = x
    To, Ho, Wo = T + 2 * pad - kt + 1, H + 2 * pad - k + 1, W + 2 * pad - k + 1
    out = np.zeros((O, To, Ho, Wo))
    for o in range(O):
        for s in range(To):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for r in range(kt):
                            for u in range(k):
                                for v in range(k):
                                    acc += w[o, c, r, u, v] * xp[c, s + r, i + u, j + v]
                    out[o, s, i, j] = acc
    return out


# --- forward semantics --------------------------------------------------------


def test_linear_identity_and_bias(rng):
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(dc.linear(x, np.eye(4), np.zeros(4)).data, x)
    b = rng.standard_normal(2)
    np.testing.assert_array_equal(dc.linear(np.zeros((3, 4)), rng.standard_normal((4, 2)), b).data,
                                  np.tile(b, (3, 1)))


def test_linear_matches_triple_loop(rng):
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    np.testing.assert_allclose(dc.linear(x, w, b).data, naive_matmul(x, w) + b, rtol=0, atol=1e-12)


def test_linear_dim_mismatch():
    with pytest.raises(ValueError):
        dc.linear(np.zeros((2, 3)), np.zeros((4, 2)))


def test_matmul_identity_and_oracle(rng):
    a = rng.standard_normal((5, 3))
    np.testing.assert_array_equal(dc.matmul(a, np.eye(3)).data, a)
    b = rng.standard_normal((3, 4))
    np.testing.assert_allclose(dc.matmul(a, b).data, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_conv2d_unit_kernel_is_identity(rng):
    x = rng.standard_normal((1, 5, 4))
    np.testing.assert_array_equal(dc.conv2d(x, np.ones((1, 1, 1, 1))).data, x)


def test_conv2d_zero_input_gives_bias():
    out = dc.conv2d(np.zeros((2, 4, 4)), np.ones((3, 2, 3, 3)), np.array([1.0, -2.0, 0.5]), pad=1)
    np.testing.assert_array_equal(out.data, np.broadcast_to(np.array([1.0, -2.0, 0.5])[:, None, None], (3, 4, 4)))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_six_loop_oracle(rng, stride, pad):
    x, w, b = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = dc.conv2d(x, w, b, stride=stride, pad=pad).data
    np.testing.assert_allclose(out, naive_conv2d(x, w, b, stride, pad), rtol=0, atol=1e-10)


def test_conv2d_batched_equals_unbatched(rng):
    x, w = rng.standard_normal((3, 2, 6, 5)), rng.standard_normal((4, 2, 3, 3))
    batched = dc.conv2d(x, w, pad=1).data
    for n in range(3):
        np.testing.assert_allclose(batched[n], dc.conv2d(x[n], w, pad=1).data, rtol=0, atol=1e-13)


def test_conv_rejects_even_kernel_and_bad_extent():
    with pytest.raises(ValueError):
        dc.conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        dc.conv2d(np.zeros((1, 6, 6)), np.zeros((1, 1, 3, 3)), stride=2)


def test_conv3d_matches_eight_loop_oracle(rng):
    x, w, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 2, 3, 3, 3)), rng.standard_normal(2)
    np.testing.assert_allclose(dc.conv3d(x, w, b, pad=1).data, naive_conv3d(x, w, b, 1), rtol=0, atol=1e-10)


def test_conv3d_unit_temporal_kernel_is_per_frame_conv2d(rng):
    x, w = rng.standard_normal((2, 4, 5, 5)), rng.standard_normal((3, 2, 1, 3, 3))
    out = dc.conv3d(x, w).data
    for t in range(4):
        np.testing.assert_allclose(out[:, t], dc.conv2d(x[:, t], w[:, :, 0]).data, rtol=0, atol=1e-12)


def test_conv3d_unit_kernel_is_identity(rng):
    x = rng.standard_normal((1, 3, 4, 5))
    np.testing.assert_array_equal(dc.conv3d(x, np.ones((1, 1, 1, 1, 1))).data, x)


def test_relu_sigmoid_values(rng):
    np.testing.assert_array_equal(dc.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])
    assert dc.sigmoid(np.array([0.0])).data[0] == 0.5
    s = dc.sigmoid(rng.standard_normal(200) * 50).data
    assert np.all((s >= 0) & (s <= 1))
    z = np.sort(rng.standard_normal(50))
    assert np.all(np.diff(dc.sigmoid(z).data) >= 0)


def test_softmax_examples():
    np.testing.assert_array_equal(dc.softmax_rows(np.zeros((1, 4))).data, [[0.25] * 4])
    out = dc.softmax_rows(np.log([[1.0, 2.0, 3.0]])).data
    np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], rtol=0, atol=1e-15)


@given(st.integers(0, 2**31 - 1), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalised(seed, c):
    x = np.random.default_rng(seed).standard_normal((3, 6)) * 10
    a, b = dc.softmax_rows(x).data, dc.softmax_rows(x + c).data
    assert np.max(np.abs(a - b)) <= 1e-12
    assert np.all(a >= 0) and np.max(np.abs(a.sum(1) - 1)) <= 1e-9


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.standard_normal((4, 7))
    np.testing.assert_allclose(dc.log_softmax(x).data, np.log(dc.softmax_rows(x).data), rtol=0, atol=1e-12)


def test_layer_norm_examples(rng):
    out = dc.layer_norm(np.full((1, 5), 3.0), np.ones(5), np.zeros(5)).data
    np.testing.assert_array_equal(out, np.zeros((1, 5)))
    out = dc.layer_norm(np.array([[-1.0, 1.0]]), np.ones(2), np.zeros(2), eps=1e-300).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], rtol=0, atol=1e-15)
    x = rng.standard_normal((6, 8)) * 4 + 2
    g, s = rng.uniform(0.5, 2, 8), rng.standard_normal(8)
    y = dc.layer_norm(x, np.full(8, 2.0), np.full(8, 0.5)).data
    np.testing.assert_allclose(y.mean(1), 0.5, atol=1e-12)
    np.testing.assert_allclose(y.var(1), 4.0 * x.var(1) / (x.var(1) + 1e-5), rtol=1e-12)
    z = dc.layer_norm(x, g, s).data
    ref = (x - x.mean(1, keepdims=True)) / np.sqrt(x.var(1, keepdims=True) + 1e-5) * g + s
    np.testing.assert_allclose(z, ref, rtol=0, atol=1e-12)


def test_pool_semantics(rng):
    const = np.full((2, 4, 6), 1.5)
    np.testing.assert_array_equal(dc.pool(const, "max", (1, 2), (2, 2)).data, np.full((2, 2, 3), 1.5))
    assert dc.reduce_mean(np.array([1.0, 2.0, 3.0, 4.0]), 0).data == 2.5
    x = rng.standard_normal((1, 3, 2))
    np.testing.assert_array_equal(dc.reduce_max(x, 0).data, x[0])


def test_pool_truncates_remainder(rng):
    x = rng.standard_normal((5, 7))
    out = dc.pool(x, "max", (0, 1), (2, 2)).data
    assert out.shape == (2, 3)
    assert out[1, 2] == x[2:4, 4:6].max()


def test_pool_rejects_empty_window():
    with pytest.raises(ValueError):
        dc.pool(np.zeros((1, 3)), "max", (1,), (4,))


def test_split_inverts_concat(rng):
    xs = [rng.standard_normal((2, n)) for n in (1, 3, 2)]
    parts = dc.split(dc.concat(xs, axis=1), [1, 3, 2], axis=1)
    for a, b in zip(xs, parts):
        np.testing.assert_array_equal(a, b.data)


def test_concat_dim_mismatch():
    with pytest.raises(ValueError):
        dc.concat([np.zeros((2, 3)), np.zeros((3, 3))], axis=1)


def test_pairwise_euclidean_zero_distance_has_zero_gradient():
    a = dc.Tensor(np.array([[1.0, 2.0], [1.0, 2.0]]), requires_grad=True)
    dc.pairwise_euclidean(a, a).sum().backward()
    assert np.all(np.isfinite(a.grad))


def test_non_finite_is_a_contract_violation():
    with pytest.raises(ContractViolation):
        dc.check_finite(dc.Tensor(np.array([1.0, np.nan])))


def test_float32_stays_float32(rng):
    x = dc.Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    y = (dc.relu(x) * 0.5 + 1.0) / 2.0 - x
    assert y.dtype == np.float32
    y.sum().backward()
    assert x.grad.dtype == np.float32


def test_no_grad_records_nothing(rng):
    x = dc.Tensor(rng.standard_normal(3), requires_grad=True)
    with dc.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_deterministic_in_float64(rng):
    x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
    a = dc.conv2d(x, w, pad=1).data
    b = dc.conv2d(x.copy(), w.copy(), pad=1).data
    assert a.tobytes() == b.tobytes()


def test_gradient_accumulates_over_reuse():
    x = dc.Tensor(np.array([2.0]), requires_grad=True)
    (x * x + x * 3.0).sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


# --- gradient contract ----------------------------------------------------------


@pytest.mark.parametrize("name", [n for n in gradsuite.CASES if n != "full_model"])
def test_gradient_contract(name):
    (result,) = gradsuite.run_suite(seed=3, names=[name])
    bad = [p for p in result.probes if not p.passed]
    assert not bad, f"{name}: worst {max(bad, key=lambda p: p.rel_error)}"


def test_gradcheck_flags_a_wrong_gradient():
    x = dc.Tensor(np.array([0.3, -1.2]), requires_grad=True)

    def wrong():
        out = dc.tensor.make(x.data ** 3, (x,), lambda g: (g * x.data ** 2,))  # true derivative is 3x^2
        return out.sum()

    probes = dc.check_gradients(wrong, {"x": x})
    assert not dc.all_passed(probes)


def test_gradcheck_requires_float64():
    x = dc.Tensor(np.ones(2, np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        dc.check_gradients(lambda: (x * x).sum(), {"x": x})


def test_probe_tolerance_rule():
    assert dc.Probe("w", (0,), 1e-8, 5e-8).passed  # tiny analytic value: absolute rule
    assert not dc.Probe("w", (0,), 1.0, 1.001).passed
    assert dc.Probe("w", (0,), 1.0, 1.0 + 1e-6).passed
    assert math.isclose(dc.Probe("w", (0,), 2.0, 1.0).rel_error, 0.5)


def test_relu_propagates_nan():
    out = dc.relu(np.array([np.nan, -1.0, 2.0])).data
    assert np.isnan(out[0]) and out[1] == 0.0 and out[2] == 2.0
