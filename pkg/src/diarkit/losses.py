"""Permutation-invariant training losses for speaker activity prediction.

Speaker slots are interchangeable, so both losses are evaluated at the
best column permutation of the prediction. The binary cross entropy sums
over independent (reference, prediction) column pairs, which lets an
optimal-assignment solver find the exact best permutation in O(N^3)
instead of O(N!).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .powerset import PowersetCodec, multilabel_to_powerset, powerset_to_multilabel

__all__ = [
    "CLAMP_EPS",
    "PermutationResult",
    "bce",
    "permutation_invariant_bce",
    "permutation_invariant_powerset_ce",
]

CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class PermutationResult:
    """Best speaker permutation and the loss evaluated there.

    ``permutation`` reorders prediction columns onto reference columns:
    ``prediction[:, permutation]`` is the alignment that attains ``loss``.
    """

    permutation: tuple[int, ...]
    loss: float


def _validate_pair(prediction: np.ndarray, reference: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    prediction = np.asarray(prediction, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if prediction.ndim != 2 or reference.ndim != 2:
        raise ValueError("prediction and reference must be 2-D (frames x speakers)")
    if prediction.shape != reference.shape:
        raise ValueError(
            f"shape mismatch: prediction {prediction.shape} vs reference {reference.shape}"
        )
    if reference.size and not np.isin(reference, (0.0, 1.0)).all():
        raise ValueError("reference must be binary")
    return prediction, reference


def bce(prediction: np.ndarray, reference: np.ndarray) -> float:
    """Binary cross entropy, mean-reduced over frames and speakers.

    Predictions are clamped to [CLAMP_EPS, 1 - CLAMP_EPS] before taking
    logarithms, bounding the loss for saturated predictions.
    """
    prediction, reference = _validate_pair(prediction, reference)
    p = np.clip(prediction, CLAMP_EPS, 1.0 - CLAMP_EPS)
    cells = -(reference * np.log(p) + (1.0 - reference) * np.log(1.0 - p))
    return float(cells.mean())


def _pair_costs(prediction: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Summed BCE of every (reference column, prediction column) pair."""
    p = np.clip(prediction, CLAMP_EPS, 1.0 - CLAMP_EPS)
    log_p = np.log(p)
    log_q = np.log(1.0 - p)
    return -(reference.T @ log_p + (1.0 - reference).T @ log_q)


def _lexicographic_min_assignment(costs: np.ndarray) -> np.ndarray:
    """Optimal assignment, lexicographically smallest among equal optima.

    Fixes columns row by row: a candidate column is kept when the fixed
    prefix plus the optimum of the remaining subproblem still attains the
    global optimum (within a small relative tolerance).
    """
    n = costs.shape[0]
    rows, cols = linear_sum_assignment(costs)
    best = float(costs[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))

    perm: list[int] = []
    free = list(range(n))
    prefix = 0.0
    for i in range(n):
        for j in free:
            candidate = prefix + costs[i, j]
            remaining = [c for c in free if c != j]
            if remaining:
                sub = costs[np.ix_(range(i + 1, n), remaining)]
                sub_rows, sub_cols = linear_sum_assignment(sub)
                candidate += float(sub[sub_rows, sub_cols].sum())
            if candidate <= best + tol:
                perm.append(j)
                free.remove(j)
                prefix += costs[i, j]
                break
        else:
            raise RuntimeError("assignment refinement failed to reach the optimum")
    return np.asarray(perm, dtype=np.int64)


def permutation_invariant_bce(prediction: np.ndarray, reference: np.ndarray) -> PermutationResult:
    """Minimum BCE over all column permutations of the prediction.

    Ties between equally good permutations resolve to the lexicographically
    smallest one, which makes the result deterministic.
    """
    prediction, reference = _validate_pair(prediction, reference)
    frames, n = prediction.shape
    costs = _pair_costs(prediction, reference)
    perm = _lexicographic_min_assignment(costs)
    loss = float(costs[np.arange(n), perm].sum() / max(frames * n, 1))
    return PermutationResult(tuple(int(j) for j in perm), loss)


def permutation_invariant_powerset_ce(
    codec: PowersetCodec,
    prediction: np.ndarray,
    reference_multilabel: np.ndarray,
) -> PermutationResult:
    """Permutation-invariant cross entropy in the powerset class space.

    The class distribution is first converted to multilabel activities to
    find the best speaker permutation (by BCE against the reference); the
    reference is then carried into the prediction's slot order, encoded as
    class indices, and scored with the mean negative log probability of the
    encoded class.
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    reference = np.asarray(reference_multilabel, dtype=np.float64)
    if prediction.ndim != 2 or prediction.shape[1] != codec.num_classes:
        raise ValueError(
            f"prediction must be frames x {codec.num_classes} class probabilities, "
            f"got shape {prediction.shape}"
        )
    if reference.ndim != 2 or reference.shape[1] != codec.n_speakers:
        raise ValueError(
            f"reference must be frames x {codec.n_speakers}, got shape {reference.shape}"
        )
    if prediction.shape[0] != reference.shape[0]:
        raise ValueError("prediction and reference must have the same number of frames")
    if prediction.size and prediction.min() < 0:
        raise ValueError("class probabilities must be non-negative")
    if prediction.size and not np.allclose(prediction.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("each frame's class probabilities must sum to 1")
    if reference.size and not np.isin(reference, (0.0, 1.0)).all():
        raise ValueError("reference must be binary")

    active = reference.sum(axis=1)
    over = np.flatnonzero(active > codec.max_simultaneous)
    if over.size:
        raise ValueError(
            f"frame {int(over[0])} has {int(active[over[0]])} active speakers, "
            f"codec encodes at most {codec.max_simultaneous}"
        )

    prediction_multilabel = powerset_to_multilabel(codec, prediction)
    alignment = permutation_invariant_bce(prediction_multilabel, reference)

    aligned_reference = np.empty_like(reference)
    aligned_reference[:, list(alignment.permutation)] = reference
    class_indices = multilabel_to_powerset(codec, aligned_reference)

    frames = prediction.shape[0]
    picked = prediction[np.arange(frames), class_indices]
    loss = float(-np.log(np.clip(picked, CLAMP_EPS, 1.0)).mean()) if frames else 0.0
    return PermutationResult(alignment.permutation, loss)
