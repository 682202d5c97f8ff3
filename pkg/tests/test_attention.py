import math

import numpy as np
import numpy.testing as npt
import pytest

from gsaformer.attention import (
    AttentionMask,
    OpCounter,
    multi_head_attention,
    row_softmax,
    scaled_dot_attention,
)
from gsaformer.tensor import (
    ComputationTape,
    DimensionError,
    Tensor,
    backward,
    multiply,
    sum_all,
)

from helpers import naive_attention


class TestRowSoftmax:
    def test_uniform_row(self):
        out = row_softmax(Tensor([[0.0, 0.0, 0.0, 0.0]]), AttentionMask.none())
        npt.assert_allclose(out.data, [[0.25, 0.25, 0.25, 0.25]], atol=1e-15)

    def test_log_two_forces_two_thirds(self):
        out = row_softmax(Tensor([[math.log(2.0), 0.0]]), AttentionMask.none())
        npt.assert_allclose(out.data, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-15)

    def test_single_survivor(self):
        allow = np.array([[True, False]])
        out = row_softmax(Tensor([[5.0, 3.0]]), AttentionMask.custom(allow))
        npt.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_masked_entries_exactly_zero(self):
        rng = np.random.default_rng(0)
        allow = rng.uniform(size=(6, 8)) > 0.4
        out = row_softmax(Tensor(rng.normal(size=(6, 8))),
                          AttentionMask.custom(allow))
        assert np.all(out.data[~allow] == 0.0)

    def test_fully_masked_row_is_all_zero(self):
        allow = np.array([[False, False], [True, True]])
        out = row_softmax(Tensor([[1.0, 2.0], [1.0, 2.0]]),
                          AttentionMask.custom(allow))
        npt.assert_array_equal(out.data[0], [0.0, 0.0])
        npt.assert_allclose(out.data[1].sum(), 1.0, atol=1e-12)

    def test_unmasked_rows_sum_to_one_randomized(self):
        # the property suite: >= 1000 rows across random shapes and masks
        rng = np.random.default_rng(1)
        rows_checked = 0
        while rows_checked < 1000:
            r = int(rng.integers(1, 40))
            c = int(rng.integers(2, 30))
            scores = rng.normal(scale=rng.uniform(0.5, 30.0), size=(r, c))
            if rng.uniform() < 0.5:
                mask = AttentionMask.none()
                allow = np.ones((r, c), dtype=bool)
            else:
                allow = rng.uniform(size=(r, c)) > 0.3
                mask = AttentionMask.custom(allow)
            out = row_softmax(Tensor(scores), mask)
            for i in range(r):
                if allow[i].any():
                    assert abs(out.data[i].sum() - 1.0) <= 1e-12
                    rows_checked += 1

    def test_gradient_through_mask(self):
        rng = np.random.default_rng(2)
        s = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        allow = np.array([[True, True, False, True]] * 3)
        w = Tensor(rng.normal(size=(3, 4)))
        with ComputationTape() as tape:
            loss = sum_all(multiply(row_softmax(s, AttentionMask.custom(allow)), w))
            backward(loss, tape)
        eps = 1e-6
        flat = s.data.reshape(-1)
        for c in range(flat.size):
            keep = flat[c]
            flat[c] = keep + eps
            f_plus = float((row_softmax(s, AttentionMask.custom(allow)).data * w.data).sum())
            flat[c] = keep - eps
            f_minus = float((row_softmax(s, AttentionMask.custom(allow)).data * w.data).sum())
            flat[c] = keep
            numeric = (f_plus - f_minus) / (2 * eps)
            analytic = s.grad.reshape(-1)[c]
            assert abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8) < 1e-5


class TestScaledDotAttention:
    def test_single_key_returns_value_row(self):
        rng = np.random.default_rng(3)
        v = rng.normal(size=(1, 6))
        out = scaled_dot_attention(Tensor(rng.normal(size=(1, 6))),
                                   Tensor(rng.normal(size=(1, 6))),
                                   Tensor(v), AttentionMask.none(), OpCounter())
        npt.assert_allclose(out.data, v, atol=1e-15)

    def test_uniform_weights_average_values(self):
        out = scaled_dot_attention(Tensor([[0.0]]), Tensor([[0.0], [0.0]]),
                                   Tensor([[1.0], [3.0]]), AttentionMask.none(),
                                   OpCounter())
        npt.assert_allclose(out.data, [[2.0]], atol=1e-15)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(4)
        q, k, v = (rng.normal(size=(4, 8)) for _ in range(3))
        out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v),
                                   AttentionMask.none(), OpCounter())
        npt.assert_allclose(out.data, naive_attention(q, k, v), atol=1e-12)

    def test_divides_by_sqrt_d(self):
        rng = np.random.default_rng(5)
        q, k, v = (rng.normal(size=(3, 16)) for _ in range(3))
        out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v),
                                   AttentionMask.none(), OpCounter())
        scaled = naive_attention(q, k, v, scale=True)
        unscaled = naive_attention(q, k, v, scale=False)
        npt.assert_allclose(out.data, scaled, atol=1e-12)
        assert np.abs(out.data - unscaled).max() > 1e-3

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        q, k, v = (rng.normal(size=(5, 8)) for _ in range(3))
        base = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v),
                                    AttentionMask.none(), OpCounter())
        perm = rng.permutation(5)
        permuted = scaled_dot_attention(Tensor(q), Tensor(k[perm]), Tensor(v[perm]),
                                        AttentionMask.none(), OpCounter())
        npt.assert_allclose(base.data, permuted.data, atol=1e-12)

    def test_counter_counts_l_squared(self):
        rng = np.random.default_rng(7)
        for l in (3, 9, 17):
            counter = OpCounter()
            x = rng.normal(size=(l, 4))
            scaled_dot_attention(Tensor(x), Tensor(x), Tensor(x),
                                 AttentionMask.none(), counter)
            assert counter.score_elements == l * l
            assert counter.peak_score_buffer == l * l

    def test_counter_accumulates_and_resets(self):
        rng = np.random.default_rng(8)
        counter = OpCounter()
        x = Tensor(rng.normal(size=(4, 4)))
        scaled_dot_attention(x, x, x, AttentionMask.none(), counter)
        scaled_dot_attention(x, x, x, AttentionMask.none(), counter)
        assert counter.score_elements == 32
        assert counter.peak_score_buffer == 16
        counter.reset()
        assert counter.score_elements == 0

    def test_dimension_errors(self):
        rng = np.random.default_rng(9)
        q = Tensor(rng.normal(size=(2, 4)))
        with pytest.raises(DimensionError):
            scaled_dot_attention(q, Tensor(rng.normal(size=(3, 5))),
                                 Tensor(rng.normal(size=(3, 5))),
                                 AttentionMask.none(), OpCounter())
        with pytest.raises(DimensionError):
            scaled_dot_attention(q, Tensor(rng.normal(size=(3, 4))),
                                 Tensor(rng.normal(size=(2, 4))),
                                 AttentionMask.none(), OpCounter())


class TestMasks:
    def test_causal_matrix(self):
        m = AttentionMask.causal().matrix(3, 3)
        npt.assert_array_equal(m, np.array([[1, 0, 0], [1, 1, 0], [1, 1, 1]],
                                           dtype=bool))

    def test_key_padding_matrix(self):
        m = AttentionMask.key_padding(2).matrix(2, 4)
        npt.assert_array_equal(m, np.array([[1, 1, 0, 0], [1, 1, 0, 0]],
                                           dtype=bool))

    def test_combined(self):
        combined = AttentionMask.causal().combined_with(
            AttentionMask.key_padding(2), 3, 3)
        npt.assert_array_equal(combined.matrix(3, 3),
                               np.array([[1, 0, 0], [1, 1, 0], [1, 1, 0]],
                                        dtype=bool))


class TestMultiHead:
    def test_heads_partition_feature_dim(self):
        rng = np.random.default_rng(10)
        q, k, v = (rng.normal(size=(6, 8)) for _ in range(3))
        counter = OpCounter()
        out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), 2,
                                   AttentionMask.none(), counter)
        left = naive_attention(q[:, :4], k[:, :4], v[:, :4])
        right = naive_attention(q[:, 4:], k[:, 4:], v[:, 4:])
        npt.assert_allclose(out.data, np.concatenate([left, right], axis=1),
                            atol=1e-12)
        assert counter.score_elements == 2 * 36

    def test_indivisible_heads_rejected(self):
        x = Tensor(np.zeros((2, 6)))
        with pytest.raises(DimensionError):
            multi_head_attention(x, x, x, 4, AttentionMask.none(), OpCounter())


class TestExtremeMagnitudes:
    def test_softmax_stays_finite_at_1e6_scores(self):
        rng = np.random.default_rng(11)
        scores = rng.uniform(-1e6, 1e6, size=(8, 12))
        out = row_softmax(Tensor(scores), AttentionMask.none())
        assert np.all(np.isfinite(out.data))
        npt.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_attention_stays_finite_at_large_inputs(self):
        rng = np.random.default_rng(12)
        q, k, v = (Tensor(rng.uniform(-1e3, 1e3, size=(6, 8))) for _ in range(3))
        out = scaled_dot_attention(q, k, v, AttentionMask.none(), OpCounter())
        assert np.all(np.isfinite(out.data))

    def test_masked_softmax_stays_finite_at_1e6(self):
        rng = np.random.default_rng(13)
        scores = rng.uniform(-1e6, 1e6, size=(8, 12))
        allow = rng.uniform(size=(8, 12)) > 0.4
        out = row_softmax(Tensor(scores), AttentionMask.custom(allow))
        assert np.all(np.isfinite(out.data))
        assert np.all(out.data[~allow] == 0.0)
