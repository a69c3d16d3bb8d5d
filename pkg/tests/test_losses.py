import math
from itertools import permutations

import numpy as np
import pytest

from diarkit.losses import (
    bce,
    permutation_invariant_bce,
    permutation_invariant_powerset_ce,
)
from diarkit.powerset import build_codec, multilabel_to_powerset, one_hot


def brute_force_pi_bce(prediction, reference):
    """Oracle: evaluate every column permutation directly with bce()."""
    n = prediction.shape[1]
    best_perm, best_loss = None, math.inf
    for perm in permutations(range(n)):
        loss = bce(prediction[:, list(perm)], reference)
        if loss < best_loss - 1e-15:
            best_perm, best_loss = perm, loss
    return best_perm, best_loss


def random_instance(rng, frames, n):
    reference = (rng.random((frames, n)) > 0.5).astype(float)
    prediction = rng.random((frames, n))
    return prediction, reference


class TestBce:
    def test_perfect_prediction_is_tiny(self):
        reference = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert bce(reference, reference) < 1e-6

    def test_uniform_prediction_is_ln2(self):
        reference = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert bce(np.full((2, 2), 0.5), reference) == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(0)
        prediction, reference = random_instance(rng, 13, 4)
        total = 0.0
        for t in range(13):
            for s in range(4):
                p = min(max(prediction[t, s], 1e-7), 1 - 1e-7)
                y = reference[t, s]
                total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
        assert bce(prediction, reference) == pytest.approx(total / (13 * 4), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bce(np.zeros((3, 2)), np.zeros((3, 3)))

    def test_non_binary_reference_rejected(self):
        with pytest.raises(ValueError):
            bce(np.zeros((2, 2)), np.full((2, 2), 0.5))

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            prediction, reference = random_instance(rng, 7, 3)
            assert bce(prediction, reference) >= 0.0


class TestPermutationInvariantBce:
    def test_swapped_columns_recovered(self):
        rng = np.random.default_rng(2)
        reference = (rng.random((30, 2)) > 0.5).astype(float)
        prediction = np.clip(reference[:, [1, 0]], 1e-4, 1 - 1e-4)
        result = permutation_invariant_bce(prediction, reference)
        assert result.permutation == (1, 0)
        assert result.loss < 1e-3

    def test_identity_optimal(self):
        rng = np.random.default_rng(3)
        reference = (rng.random((30, 3)) > 0.5).astype(float)
        prediction = np.clip(reference * 0.96 + 0.02, 0, 1)
        result = permutation_invariant_bce(prediction, reference)
        assert result.permutation == (0, 1, 2)

    def test_loss_is_bce_at_returned_permutation(self):
        rng = np.random.default_rng(4)
        prediction, reference = random_instance(rng, 11, 4)
        result = permutation_invariant_bce(prediction, reference)
        assert result.loss == pytest.approx(
            bce(prediction[:, list(result.permutation)], reference), abs=1e-12
        )

    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(60):
            n = int(rng.integers(1, 7))
            prediction, reference = random_instance(rng, int(rng.integers(1, 12)), n)
            result = permutation_invariant_bce(prediction, reference)
            oracle_perm, oracle_loss = brute_force_pi_bce(prediction, reference)
            assert result.loss == pytest.approx(oracle_loss, abs=1e-10)
            assert result.permutation == oracle_perm

    def test_invariant_under_prediction_permutation(self):
        rng = np.random.default_rng(6)
        prediction, reference = random_instance(rng, 15, 5)
        base = permutation_invariant_bce(prediction, reference).loss
        for _ in range(10):
            shuffled = prediction[:, rng.permutation(5)]
            assert permutation_invariant_bce(shuffled, reference).loss == pytest.approx(
                base, abs=1e-10
            )

    def test_tie_breaks_to_lexicographic_minimum(self):
        # two identical reference columns: both permutations cost the same
        reference = np.array([[1.0, 1.0], [0.0, 0.0]])
        prediction = np.full((2, 2), 0.5)
        assert permutation_invariant_bce(prediction, reference).permutation == (0, 1)


class TestPowersetCrossEntropy:
    def test_one_hot_reference_gives_zero_loss(self):
        codec = build_codec(3, 2)
        rng = np.random.default_rng(7)
        reference = np.zeros((20, 3))
        for t in range(20):
            active = rng.choice(3, size=rng.integers(0, 3), replace=False)
            reference[t, active] = 1.0
        prediction = one_hot(multilabel_to_powerset(codec, reference), codec.num_classes)
        result = permutation_invariant_powerset_ce(codec, prediction, reference)
        assert result.loss < 1e-6
        assert result.permutation == (0, 1, 2)

    def test_uniform_prediction_is_ln_num_classes(self):
        codec = build_codec(4, 2)
        reference = np.zeros((9, 4))
        reference[:3, 0] = 1.0
        prediction = np.full((9, codec.num_classes), 1.0 / codec.num_classes)
        result = permutation_invariant_powerset_ce(codec, prediction, reference)
        assert result.loss == pytest.approx(math.log(codec.num_classes), abs=1e-12)

    def test_relabeled_reference_still_zero(self):
        codec = build_codec(3, 2)
        rng = np.random.default_rng(8)
        reference = np.zeros((25, 3))
        for t in range(25):
            active = rng.choice(3, size=rng.integers(0, 3), replace=False)
            reference[t, active] = 1.0
        for perm in permutations(range(3)):
            relabeled = np.empty_like(reference)
            relabeled[:, list(perm)] = reference
            prediction = one_hot(multilabel_to_powerset(codec, reference), codec.num_classes)
            result = permutation_invariant_powerset_ce(codec, prediction, relabeled)
            assert result.loss < 1e-6

    def test_permutation_matches_brute_force_bce_minimum(self):
        rng = np.random.default_rng(9)
        for _ in range(25):
            n = int(rng.integers(2, 5))
            codec = build_codec(n, min(2, n))
            frames = int(rng.integers(2, 10))
            prediction = rng.dirichlet(np.ones(codec.num_classes), size=frames)
            reference = np.zeros((frames, n))
            for t in range(frames):
                active = rng.choice(n, size=rng.integers(0, min(2, n) + 1), replace=False)
                reference[t, active] = 1.0
            result = permutation_invariant_powerset_ce(codec, prediction, reference)
            from diarkit.powerset import powerset_to_multilabel

            oracle_perm, _ = brute_force_pi_bce(
                powerset_to_multilabel(codec, prediction), reference
            )
            assert result.permutation == oracle_perm
            assert result.loss >= 0.0

    def test_too_many_active_speakers_names_frame(self):
        codec = build_codec(4, 2)
        reference = np.zeros((5, 4))
        reference[3, :3] = 1.0
        prediction = np.full((5, codec.num_classes), 1.0 / codec.num_classes)
        with pytest.raises(ValueError, match="frame 3"):
            permutation_invariant_powerset_ce(codec, prediction, reference)

    def test_invalid_distribution_rejected(self):
        codec = build_codec(3, 2)
        reference = np.zeros((2, 3))
        with pytest.raises(ValueError, match="sum to 1"):
            permutation_invariant_powerset_ce(codec, np.full((2, codec.num_classes), 0.9), reference)
