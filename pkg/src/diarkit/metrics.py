"""Diarization error rate scoring.

Scoring is frame-based: both annotations are sampled on a shared grid
(10 ms by default), frames near reference segment boundaries are excluded
by the collar, hypothesis speakers are mapped one-to-one onto reference
speakers by the assignment that maximizes correctly attributed speech, and
the residual mismatch is split into false alarm, missed speech, and
speaker confusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .annotations import (
    ActivityMatrix,
    Annotation,
    FrameGrid,
    Segment,
    crop,
    discretize,
    to_annotation,
)
from .pipeline import aggregate, threshold_activities

__all__ = [
    "DerBreakdown",
    "UndefinedDerError",
    "CorpusReport",
    "der",
    "der_corpus",
    "local_der",
    "oracle_cluster_der",
]


class UndefinedDerError(ValueError):
    """DER is undefined: the scored reference contains no speech while the
    hypothesis does. Carries the stray hypothesis speech in seconds."""

    def __init__(self, false_alarm_seconds: float):
        super().__init__(
            f"reference contains no scored speech but hypothesis has "
            f"{false_alarm_seconds:.3f}s; DER is undefined"
        )
        self.false_alarm_seconds = false_alarm_seconds


@dataclass(frozen=True)
class DerBreakdown:
    """DER components in seconds plus the resulting rate."""

    false_alarm: float
    missed: float
    confusion: float
    total: float
    der: float

    @property
    def error_seconds(self) -> float:
        return self.false_alarm + self.missed + self.confusion

    def as_dict(self) -> dict:
        return {
            "fa": self.false_alarm,
            "miss": self.missed,
            "conf": self.confusion,
            "total": self.total,
            "der": self.der,
        }


@dataclass(frozen=True)
class _FrameCounts:
    false_alarm: int
    missed: int
    confusion: int
    total: int

    def __add__(self, other: "_FrameCounts") -> "_FrameCounts":
        return _FrameCounts(
            self.false_alarm + other.false_alarm,
            self.missed + other.missed,
            self.confusion + other.confusion,
            self.total + other.total,
        )

    @property
    def errors(self) -> int:
        return self.false_alarm + self.missed + self.confusion


def _scored_mask(grid: FrameGrid, reference: Annotation, collar: float) -> np.ndarray:
    mask = np.ones(grid.num_frames, dtype=bool)
    if collar <= 0:
        return mask
    half = collar / 2.0
    mids = grid.midpoints()
    for boundary in reference.boundaries():
        mask &= ~(np.abs(mids - boundary) < half)
    return mask


def _count_errors(
    hypothesis: Annotation,
    reference: Annotation,
    collar: float,
    frame_duration: float,
) -> _FrameCounts:
    """Frame accounting with optimal one-to-one speaker mapping."""
    if collar < 0:
        raise ValueError(f"collar must be non-negative, got {collar}")
    if frame_duration <= 0:
        raise ValueError(f"frame_duration must be positive, got {frame_duration}")

    end = 0.0
    for annotation in (hypothesis, reference):
        extent = annotation.extent()
        if extent is not None:
            end = max(end, extent.end)
    num_frames = math.ceil(end / frame_duration - 1e-9) if end > 0 else 0
    grid = FrameGrid(0.0, frame_duration, num_frames)

    ref = discretize(reference, grid, reference.labels()).values.astype(bool)
    hyp = discretize(hypothesis, grid, hypothesis.labels()).values.astype(bool)
    scored = _scored_mask(grid, reference, collar)
    ref &= scored[:, np.newaxis]
    hyp &= scored[:, np.newaxis]

    ref_count = ref.sum(axis=1)
    hyp_count = hyp.sum(axis=1)
    total = int(ref_count.sum())
    false_alarm = int(np.maximum(hyp_count - ref_count, 0).sum())
    missed = int(np.maximum(ref_count - hyp_count, 0).sum())

    correct = 0
    if ref.shape[1] and hyp.shape[1]:
        overlap = ref.T.astype(np.int64) @ hyp.astype(np.int64)
        rows, cols = linear_sum_assignment(-overlap)
        correct = int(overlap[rows, cols].sum())
    confusion = int(np.minimum(ref_count, hyp_count).sum()) - correct
    return _FrameCounts(false_alarm, missed, confusion, total)


def _breakdown(counts: _FrameCounts, frame_duration: float) -> DerBreakdown:
    if counts.total == 0:
        if counts.errors > 0:
            raise UndefinedDerError(counts.false_alarm * frame_duration)
        return DerBreakdown(0.0, 0.0, 0.0, 0.0, 0.0)
    return DerBreakdown(
        false_alarm=counts.false_alarm * frame_duration,
        missed=counts.missed * frame_duration,
        confusion=counts.confusion * frame_duration,
        total=counts.total * frame_duration,
        der=counts.errors / counts.total,
    )


def der(
    hypothesis: Annotation,
    reference: Annotation,
    collar: float = 0.0,
    frame_duration: float = 0.01,
) -> DerBreakdown:
    """Diarization error rate of a hypothesis against a reference.

    Parameters
    ----------
    hypothesis, reference : Annotation
        Speaker timelines to compare; labels on the two sides are unrelated.
    collar : float
        Total width of the no-score zone centered on every reference
        segment boundary (a 0.25 collar excludes +/- 0.125 s).
    frame_duration : float
        Scoring resolution in seconds.

    Raises
    ------
    UndefinedDerError
        When the scored reference has no speech but the hypothesis does.
    """
    return _breakdown(_count_errors(hypothesis, reference, collar, frame_duration), frame_duration)


@dataclass(frozen=True)
class CorpusReport:
    """Per-file breakdowns plus macro and micro summaries.

    ``macro_der`` is the unweighted mean of per-group DERs (groups default
    to one per file); ``micro`` pools components over all files.
    """

    files: tuple[tuple[str, DerBreakdown], ...]
    group_der: Mapping[str, float]
    macro_der: float
    micro: DerBreakdown


def der_corpus(
    pairs: Sequence[tuple[Annotation, Annotation]],
    collar: float = 0.0,
    frame_duration: float = 0.01,
    group_by: Callable[[str], str] | None = None,
) -> CorpusReport:
    """Score a corpus of (hypothesis, reference) pairs.

    ``group_by`` maps a uri to a dataset key for the macro average; by
    default every file forms its own group.
    """
    if not pairs:
        raise ValueError("need at least one (hypothesis, reference) pair")
    group_of = group_by if group_by is not None else (lambda uri: uri)

    files: list[tuple[str, DerBreakdown]] = []
    group_counts: dict[str, _FrameCounts] = {}
    pooled = _FrameCounts(0, 0, 0, 0)
    for hypothesis, reference in pairs:
        if hypothesis.uri != reference.uri:
            raise ValueError(
                f"pair uris do not match: hypothesis {hypothesis.uri!r} "
                f"vs reference {reference.uri!r}"
            )
        counts = _count_errors(hypothesis, reference, collar, frame_duration)
        files.append((reference.uri, _breakdown(counts, frame_duration)))
        key = group_of(reference.uri)
        group_counts[key] = group_counts.get(key, _FrameCounts(0, 0, 0, 0)) + counts
        pooled = pooled + counts

    group_der = {}
    for key, counts in group_counts.items():
        if counts.total == 0 and counts.errors > 0:
            raise UndefinedDerError(counts.false_alarm * frame_duration)
        group_der[key] = counts.errors / counts.total if counts.total else 0.0
    macro = float(np.mean(list(group_der.values())))
    return CorpusReport(tuple(files), group_der, macro, _breakdown(pooled, frame_duration))


def _cap_reference(reference: Annotation, limit: int | None) -> Annotation:
    if limit is None or len(reference.labels()) <= limit:
        return reference
    ranked = sorted(reference.labels(), key=lambda lab: (-reference.label_duration(lab), lab))
    keep = set(ranked[:limit])
    return Annotation(
        reference.uri,
        tuple((seg, lab) for seg, lab in reference.entries if lab in keep),
    )


def local_der(
    local_segmentations: Sequence[tuple[ActivityMatrix, Segment]],
    reference: Annotation,
    threshold: float = 0.5,
    collar: float = 0.0,
    frame_duration: float = 0.01,
    max_reference_speakers: int | None = None,
) -> DerBreakdown:
    """DER of chunk-level segmentations, each scored against its own window.

    Every chunk is thresholded, scored against the reference cropped to its
    window with a per-chunk optimal speaker mapping, and the components are
    pooled over chunks (so silent chunks cannot divide by zero). This
    isolates segmentation quality from the clustering step.

    ``max_reference_speakers`` optionally drops all but the most-active
    reference speakers within each chunk, mirroring a segmenter that can
    only represent that many slots.
    """
    if not local_segmentations:
        raise ValueError("need at least one local segmentation")
    pooled = _FrameCounts(0, 0, 0, 0)
    for matrix, window in local_segmentations:
        binary = threshold_activities(matrix, threshold)
        hypothesis = to_annotation(binary, uri=reference.uri)
        chunk_reference = _cap_reference(crop(reference, window), max_reference_speakers)
        pooled = pooled + _count_errors(hypothesis, chunk_reference, collar, frame_duration)
    return _breakdown(pooled, frame_duration)


def oracle_cluster_der(
    local_segmentations: Sequence[tuple[ActivityMatrix, Segment]],
    reference: Annotation,
    threshold: float = 0.5,
    collar: float = 0.0,
    frame_duration: float = 0.01,
) -> DerBreakdown:
    """DER of the aggregated output under oracle speaker assignment.

    Each chunk's active slots are relabeled to reference identities by the
    per-chunk mapping that maximizes frame overlap; the relabeled chunks
    are then overlap-averaged, thresholded, and scored with one global DER.
    Unmatched active slots keep a unique synthetic label so they still
    count against the score.
    """
    if not local_segmentations:
        raise ValueError("need at least one local segmentation")

    relabeled: list[tuple[ActivityMatrix, Segment]] = []
    labels: list[str] = []
    for chunk_index, (matrix, window) in enumerate(local_segmentations):
        binary = threshold_activities(matrix, threshold)
        active_slots = [
            j for j in range(matrix.num_speakers)
            if binary.num_frames and binary.values[:, j].max() > 0
        ]
        if not active_slots:
            # silent chunk: still counts toward the aggregation denominator
            relabeled.append(
                (ActivityMatrix(matrix.grid, (), matrix.values[:, :0]), window)
            )
            continue
        chunk_reference = crop(reference, window)
        ref_labels = chunk_reference.labels()
        slot_label: dict[int, str] = {}
        if ref_labels:
            ref_matrix = discretize(chunk_reference, matrix.grid, ref_labels)
            overlap = (
                binary.values[:, active_slots].T.astype(np.int64)
                @ ref_matrix.values.astype(np.int64)
            )
            rows, cols = linear_sum_assignment(-overlap)
            for r, c in zip(rows, cols):
                if overlap[r, c] > 0:
                    slot_label[active_slots[r]] = ref_labels[c]
        for j in active_slots:
            slot_label.setdefault(j, f"chunk{chunk_index}:slot{j}")
        columns = [slot_label[j] for j in active_slots]
        relabeled.append(
            (
                ActivityMatrix(matrix.grid, tuple(columns), matrix.values[:, active_slots]),
                window,
            )
        )
        labels.extend(columns)

    ordered = sorted(set(labels))
    end = max(window.end for _, window in relabeled)
    frame = relabeled[0][0].grid.frame_duration
    out_frames = math.ceil(end / frame - 1e-9)
    combined = aggregate(relabeled, ordered, FrameGrid(0.0, frame, out_frames))
    hypothesis = to_annotation(threshold_activities(combined, threshold), uri=reference.uri)
    return der(hypothesis, reference, collar, frame_duration)
