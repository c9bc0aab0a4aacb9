"""Span probability math: constrained joints, sampling, KL, F1, tagging."""

import math

import numpy as np
import pytest
import scipy.stats
import torch

from spangen.spans import (
    Span,
    candidate_windows,
    clamp_joint_to_spans,
    constrained_end_distribution,
    joint_posterior,
    joint_prior,
    kl_joint,
    pseudo_span_tag,
    sample_span,
    softmax_distribution,
    unigram_f1,
)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax_distribution([0.0, 0.0]).numpy(), [0.5, 0.5])

    def test_shift_invariance(self):
        for c in (-3.0, 0.0, 17.5):
            np.testing.assert_allclose(softmax_distribution([c] * 4).numpy(), [0.25] * 4)

    def test_hand_computed(self):
        out = softmax_distribution([math.log(1.0), math.log(3.0)])
        np.testing.assert_allclose(out.numpy(), [0.25, 0.75], atol=1e-12)

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            scores = rng.normal(0, 10, size=int(rng.integers(1, 40)))
            assert abs(float(softmax_distribution(scores).sum()) - 1.0) < 1e-12

    def test_errors(self):
        with pytest.raises(ValueError):
            softmax_distribution([])
        with pytest.raises(ValueError):
            softmax_distribution([1.0, float("nan")])
        with pytest.raises(ValueError):
            softmax_distribution([1.0, float("inf")])


class TestConstrainedEnd:
    def test_single_valid_position(self):
        np.testing.assert_allclose(
            constrained_end_distribution([0.5, 0.5], 1).numpy(), [0.0, 1.0]
        )

    def test_constraint_inactive(self):
        np.testing.assert_allclose(
            constrained_end_distribution([0.5, 0.5], 0).numpy(), [0.5, 0.5]
        )

    def test_hand_renormalized_tail(self):
        out = constrained_end_distribution([0.2, 0.3, 0.5], 1)
        np.testing.assert_allclose(out.numpy(), [0.0, 0.375, 0.625], atol=1e-12)

    def test_zero_tail_falls_back_to_uniform(self):
        out = constrained_end_distribution([1.0, 0.0, 0.0], 1)
        np.testing.assert_allclose(out.numpy(), [0.0, 0.5, 0.5])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            constrained_end_distribution([1.0], 1)


class TestJointPrior:
    def test_uniform_two_positions(self):
        joint = joint_prior([0.5, 0.5], [0.5, 0.5])
        np.testing.assert_allclose(joint.numpy(), [[0.25, 0.25], [0.0, 0.5]], atol=1e-12)

    def test_one_hot_start_row(self):
        joint = joint_prior([0.0, 1.0, 0.0], [0.2, 0.3, 0.5])
        assert float(joint[1].sum()) == pytest.approx(1.0, abs=1e-12)
        assert float(joint[0].sum()) == 0.0 and float(joint[2].sum()) == 0.0

    def test_random_logits_properties(self):
        # sums to 1, zero lower triangle, row marginals recover start_probs
        rng = np.random.default_rng(1)
        for _ in range(1000):
            l_k = int(rng.integers(1, 33))
            start = softmax_distribution(rng.normal(0, 3, l_k))
            end = softmax_distribution(rng.normal(0, 3, l_k))
            joint = joint_prior(start, end)
            assert abs(float(joint.sum()) - 1.0) < 1e-9
            assert float(torch.tril(joint, diagonal=-1).abs().sum()) == 0.0
            np.testing.assert_allclose(joint.sum(dim=1).numpy(), start.numpy(), atol=1e-12)

    def test_mismatched_lengths(self):
        with pytest.raises(ValueError):
            joint_prior([1.0], [0.5, 0.5])


class TestJointPosterior:
    def test_uniform_outer_product(self):
        np.testing.assert_allclose(
            joint_posterior([0.5, 0.5], [0.5, 0.5]).numpy(), [[0.25, 0.25], [0.25, 0.25]]
        )

    def test_one_hot(self):
        joint = joint_posterior([0.0, 1.0], [1.0, 0.0])
        np.testing.assert_allclose(joint.numpy(), [[0.0, 0.0], [1.0, 0.0]])

    def test_hand_multiplied_cell(self):
        joint = joint_posterior([0.3, 0.7], [0.6, 0.4])
        assert float(joint[1, 0]) == pytest.approx(0.42, abs=1e-12)

    def test_not_triangular(self):
        joint = joint_posterior([0.5, 0.5], [0.5, 0.5])
        assert float(joint[1, 0]) > 0


class TestClampJoint:
    def test_folds_lower_triangle_onto_diagonal(self):
        joint = joint_posterior([0.3, 0.7], [0.6, 0.4])
        tri = clamp_joint_to_spans(joint)
        np.testing.assert_allclose(tri.numpy(), [[0.18, 0.12], [0.0, 0.7]], atol=1e-12)
        assert abs(float(tri.sum()) - 1.0) < 1e-12

    def test_triangular_input_unchanged(self):
        joint = joint_prior([0.5, 0.5], [0.5, 0.5])
        np.testing.assert_allclose(clamp_joint_to_spans(joint).numpy(), joint.numpy())


class TestSampleSpan:
    def test_one_hot_cell(self):
        joint = torch.zeros((6, 6), dtype=torch.float64)
        joint[2, 5] = 1.0
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert sample_span(joint, rng) == Span(2, 5)

    def test_uniform_prior_frequencies_within_3_sigma(self):
        joint = joint_prior([0.5, 0.5], [0.5, 0.5])
        rng = np.random.default_rng(7)
        n = 100_000
        counts = {(0, 0): 0, (0, 1): 0, (1, 1): 0}
        for _ in range(n):
            s = sample_span(joint, rng)
            counts[(s.start, s.end)] += 1
        for cell, p in {(0, 0): 0.25, (0, 1): 0.25, (1, 1): 0.5}.items():
            sigma = math.sqrt(p * (1 - p) / n)
            assert abs(counts[cell] / n - p) < 3 * sigma

    def test_deterministic_under_fixed_seed(self):
        joint = joint_prior([0.4, 0.6], [0.3, 0.7])
        draws1 = [sample_span(joint, np.random.default_rng(3)) for _ in range(1)]
        seq1 = [sample_span(joint, rng) for rng in [np.random.default_rng(3)] for _ in range(50)]
        rng = np.random.default_rng(3)
        seq2 = [sample_span(joint, rng) for _ in range(50)]
        rng = np.random.default_rng(3)
        seq3 = [sample_span(joint, rng) for _ in range(50)]
        assert seq2 == seq3
        assert draws1[0] == seq1[0]

    def test_posterior_draws_are_clamped(self):
        joint = joint_posterior([0.0, 1.0], [1.0, 0.0])  # all mass at (1, 0)
        assert sample_span(joint, np.random.default_rng(0)) == Span(1, 1)

    def test_chi_square_goodness_of_fit(self):
        rng = np.random.default_rng(11)
        start = softmax_distribution(rng.normal(0, 1, 4))
        end = softmax_distribution(rng.normal(0, 1, 4))
        joint = joint_prior(start, end)
        n = 100_000
        counts = np.zeros((4, 4))
        for _ in range(n):
            s = sample_span(joint, rng)
            counts[s.start, s.end] += 1
        expected = joint.numpy() * n
        mask = expected > 0
        _, pvalue = scipy.stats.chisquare(counts[mask], expected[mask])
        assert pvalue > 0.001

    def test_all_zero_joint_errors(self):
        with pytest.raises(ValueError):
            sample_span(torch.zeros((3, 3), dtype=torch.float64), np.random.default_rng(0))


class TestKlJoint:
    def test_identity(self):
        joint = joint_prior([0.4, 0.6], [0.3, 0.7])
        assert float(kl_joint(joint, joint)) == 0.0

    def test_hand_summed(self):
        q = torch.tensor([[1 / 3, 1 / 3], [0.0, 1 / 3]], dtype=torch.float64)
        p = torch.tensor([[0.25, 0.25], [0.0, 0.5]], dtype=torch.float64)
        expected = (math.log(4 / 3) + math.log(4 / 3) + math.log(2 / 3)) / 3
        assert float(kl_joint(q, p)) == pytest.approx(expected, abs=1e-12)
        assert float(kl_joint(q, p)) == pytest.approx(0.0566, abs=1e-4)

    def test_absolute_continuity_failure(self):
        q = torch.tensor([[0.5, 0.5], [0.0, 0.0]], dtype=torch.float64)
        p = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        assert math.isinf(float(kl_joint(q, p)))

    def test_non_negative_on_random_pairs(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            l_k = int(rng.integers(2, 9))
            q = rng.dirichlet(np.ones(l_k * l_k)).reshape(l_k, l_k)
            p = rng.dirichlet(np.ones(l_k * l_k)).reshape(l_k, l_k)
            assert float(kl_joint(q, p)) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kl_joint(torch.ones(2, 2) / 4, torch.ones(3, 3) / 9)


class TestUnigramF1:
    def test_identical(self):
        assert unigram_f1(["a", "b"], ["a", "b"]) == 1.0

    def test_disjoint(self):
        assert unigram_f1(["a"], ["b"]) == 0.0

    def test_hand_counted(self):
        assert unigram_f1(["a", "b"], ["b", "c"]) == 0.5

    def test_empty(self):
        assert unigram_f1([], ["a"]) == 0.0
        assert unigram_f1([], []) == 0.0

    def test_multiset_clipping(self):
        # "a" appears twice in both: overlap 2; ["a","a","b"] vs ["a","a","c"]
        assert unigram_f1(["a", "a", "b"], ["a", "a", "c"]) == pytest.approx(2 / 3)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(9)
        toks = [f"t{i}" for i in range(8)]
        for _ in range(500):
            a = [toks[int(i)] for i in rng.integers(0, 8, int(rng.integers(0, 10)))]
            b = [toks[int(i)] for i in rng.integers(0, 8, int(rng.integers(0, 10)))]
            f_ab, f_ba = unigram_f1(a, b), unigram_f1(b, a)
            assert f_ab == f_ba
            assert 0.0 <= f_ab <= 1.0


class TestPseudoSpanTag:
    def test_verbatim_window_recovered(self):
        k = [f"k{i}" for i in range(20)]
        response = k[4:9]  # an exact window of size 5
        assert pseudo_span_tag(response, k, {5}) == Span(4, 8)

    def test_disjoint_response_tie_breaks_to_earliest_shortest(self):
        k = [f"k{i}" for i in range(20)]
        assert pseudo_span_tag(["zzz"], k, {5, 10}) == Span(0, 4)

    def test_hand_enumerated_windows(self):
        assert pseudo_span_tag(["a", "b"], ["x", "a", "b", "x"], {2}) == Span(1, 2)

    def test_window_clipping(self):
        assert candidate_windows(4, {3}) == [Span(0, 2), Span(1, 3)]
        assert candidate_windows(4, {6}) == [Span(0, 3)]

    def test_agrees_with_bruteforce_argmax(self):
        rng = np.random.default_rng(13)
        toks = [f"t{i}" for i in range(10)]
        for trial in range(40):
            l_k = int(rng.integers(4, 41))
            k = [toks[int(i)] for i in rng.integers(0, 10, l_k)]
            resp = [toks[int(i)] for i in rng.integers(0, 10, int(rng.integers(2, 8)))]
            windows = {3, 6} if trial % 2 else {2, 5, 9}
            got = pseudo_span_tag(resp, k, windows)
            # brute force over an explicitly materialized candidate set
            omega = set()
            for w in sorted(windows):
                if w >= l_k:
                    omega.add((0, l_k - 1))
                    continue
                for start in range(l_k - w + 1):
                    omega.add((start, start + w - 1))
            best = max(
                sorted(omega),
                key=lambda se: (unigram_f1(k[se[0] : se[1] + 1], resp), -(se[1] - se[0]), -se[0]),
            )
            assert (got.start, got.end) == best

    def test_empty_knowledge_errors(self):
        with pytest.raises(ValueError):
            pseudo_span_tag(["a"], [], {2})
