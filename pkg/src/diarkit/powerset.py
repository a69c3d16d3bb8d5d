"""Powerset codec between multilabel speaker activity and multiclass labels.

Each subset of up to K simultaneously active speakers (out of N) is one
class. Classes are ordered by cardinality first, then lexicographically on
sorted member indices, so class 0 is always the empty set.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

__all__ = [
    "PowersetCodec",
    "build_codec",
    "powerset_to_multilabel",
    "multilabel_to_powerset",
    "permute_classes",
    "one_hot",
    "first_frame_exceeding",
    "MAX_SPEAKERS",
]

MAX_SPEAKERS = 16


@dataclass(frozen=True)
class PowersetCodec:
    """Ordered class set and conversion matrix for a powerset encoding.

    Attributes
    ----------
    n_speakers : int
        Number of speaker slots N.
    max_simultaneous : int
        Largest subset cardinality K encoded as a class.
    classes : tuple of tuple of int
        Ordered speaker subsets; ``classes[0] == ()``.
    mapping : np.ndarray, shape (num_classes, n_speakers)
        Binary matrix M with ``M[i, j] == 1`` iff speaker j belongs to
        class i.
    """

    n_speakers: int
    max_simultaneous: int
    classes: tuple[tuple[int, ...], ...]
    mapping: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_index(self, members: Sequence[int]) -> int:
        """Index of the class with exactly the given members."""
        return self._index[tuple(sorted(members))]

    @property
    def _index(self) -> dict[tuple[int, ...], int]:
        index = self.__dict__.get("_index_cache")
        if index is None:
            index = {members: i for i, members in enumerate(self.classes)}
            self.__dict__["_index_cache"] = index
        return index

    def to_json_dict(self) -> dict:
        return {
            "n_speakers": self.n_speakers,
            "max_simultaneous": self.max_simultaneous,
            "classes": [list(members) for members in self.classes],
        }


def build_codec(n_speakers: int, max_simultaneous: int) -> PowersetCodec:
    """Enumerate the class set and conversion matrix for (N, K).

    Raises
    ------
    ValueError
        If N < 1, K < 1, K > N, or N exceeds ``MAX_SPEAKERS`` (the class
        count grows exponentially with N).
    """
    if n_speakers < 1:
        raise ValueError(f"need at least one speaker, got {n_speakers}")
    if not 1 <= max_simultaneous <= n_speakers:
        raise ValueError(
            f"max_simultaneous must satisfy 1 <= K <= N, got K={max_simultaneous}, N={n_speakers}"
        )
    if n_speakers > MAX_SPEAKERS:
        raise ValueError(f"n_speakers capped at {MAX_SPEAKERS}, got {n_speakers}")

    classes: list[tuple[int, ...]] = []
    for k in range(max_simultaneous + 1):
        classes.extend(combinations(range(n_speakers), k))

    mapping = np.zeros((len(classes), n_speakers))
    for i, members in enumerate(classes):
        mapping[i, list(members)] = 1.0
    mapping.setflags(write=False)
    return PowersetCodec(n_speakers, max_simultaneous, tuple(classes), mapping)


def _as_frames(array: np.ndarray, width: int, name: str) -> tuple[np.ndarray, bool]:
    array = np.asarray(array, dtype=np.float64)
    squeezed = array.ndim == 1
    if squeezed:
        array = array[np.newaxis, :]
    if array.ndim != 2 or array.shape[1] != width:
        raise ValueError(f"{name} must have {width} columns, got shape {array.shape}")
    return array, squeezed


def powerset_to_multilabel(codec: PowersetCodec, distribution: np.ndarray) -> np.ndarray:
    """Convert per-frame class distributions to per-speaker activities.

    The conversion is the linear map ``y = y' @ M``; soft probabilities are
    preserved, and outputs stay in [0, 1] whenever each input row is a
    probability distribution.
    """
    dist, squeezed = _as_frames(distribution, codec.num_classes, "distribution")
    if dist.size and dist.min() < 0:
        raise ValueError("distribution values must be non-negative")
    multilabel = dist @ codec.mapping
    return multilabel[0] if squeezed else multilabel


def multilabel_to_powerset(codec: PowersetCodec, multilabel: np.ndarray) -> np.ndarray:
    """Hard-assign each frame to the best-matching powerset class.

    Scores every class as ``y @ M.T`` and returns the argmax index per
    frame, resolving ties toward the lowest class index. Because classes
    are ordered by cardinality, a tie never promotes a larger subset. Soft
    inputs are accepted but the conversion is inherently hard.
    """
    frames, squeezed = _as_frames(multilabel, codec.n_speakers, "multilabel")
    if frames.size and (frames.min() < 0 or frames.max() > 1):
        raise ValueError("multilabel values must lie in [0, 1]")
    scores = frames @ codec.mapping.T
    indices = np.argmax(scores, axis=1)
    return int(indices[0]) if squeezed else indices


def permute_classes(codec: PowersetCodec, permutation: Sequence[int]) -> np.ndarray:
    """Class-index permutation induced by a speaker relabeling.

    ``permutation[j]`` is the new index of speaker j. The returned array
    ``sigma`` satisfies, for every binary activity vector y with at most K
    active speakers: encoding the relabeled vector equals
    ``sigma[encoding(y)]``.
    """
    perm = list(permutation)
    if sorted(perm) != list(range(codec.n_speakers)):
        raise ValueError(f"permutation must be a bijection on 0..{codec.n_speakers - 1}")
    sigma = np.empty(codec.num_classes, dtype=np.int64)
    for i, members in enumerate(codec.classes):
        sigma[i] = codec.class_index([perm[j] for j in members])
    return sigma


def one_hot(indices: np.ndarray, num_classes: int) -> np.ndarray:
    """One-hot rows for a vector of class indices."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros((indices.size, num_classes))
    out[np.arange(indices.size), indices] = 1.0
    return out


def first_frame_exceeding(multilabel: np.ndarray, k: int) -> int | None:
    """Index of the first frame with more than k active speakers, if any."""
    frames, _ = _as_frames(multilabel, np.asarray(multilabel).shape[-1], "multilabel")
    active = (frames > 0.5).sum(axis=1)
    over = np.flatnonzero(active > k)
    return int(over[0]) if over.size else None
