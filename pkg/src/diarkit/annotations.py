"""Time-segment data model for speaker diarization.

Covers speaker-labeled segment timelines, RTTM interchange, conversion
between continuous annotations and frame-aligned activity matrices, and
corpus-level speaker-count statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Segment",
    "Annotation",
    "FrameGrid",
    "ActivityMatrix",
    "RttmParseError",
    "parse_rttm",
    "emit_rttm",
    "discretize",
    "to_annotation",
    "crop",
    "merge_annotations",
    "CoverageTables",
    "speaker_count_coverage",
]


class RttmParseError(ValueError):
    """Raised when an RTTM document cannot be parsed."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"RTTM line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True, order=True)
class Segment:
    """Half-open time interval [start, end) in seconds."""

    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"segment bounds must be finite, got ({self.start}, {self.end})")
        if self.start < 0:
            raise ValueError(f"segment start must be non-negative, got {self.start}")
        if not self.start < self.end:
            raise ValueError(f"segment must have positive duration, got ({self.start}, {self.end})")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def intersects(self, other: "Segment") -> bool:
        return self.start < other.end and other.start < self.end

    def intersection(self, other: "Segment") -> "Segment | None":
        start = max(self.start, other.start)
        end = min(self.end, other.end)
        if start < end:
            return Segment(start, end)
        return None


def _normalize_entries(
    entries: Iterable[tuple[Segment, str]],
) -> tuple[tuple[Segment, str], ...]:
    """Merge overlapping or touching same-speaker segments, sort by (start, label)."""
    by_label: dict[str, list[Segment]] = {}
    for segment, label in entries:
        if not isinstance(label, str) or not label:
            raise ValueError(f"speaker label must be a non-empty string, got {label!r}")
        by_label.setdefault(label, []).append(segment)

    merged: list[tuple[Segment, str]] = []
    for label, segments in by_label.items():
        segments.sort()
        current = segments[0]
        for seg in segments[1:]:
            if seg.start <= current.end:
                if seg.end > current.end:
                    current = Segment(current.start, seg.end)
            else:
                merged.append((current, label))
                current = seg
        merged.append((current, label))
    merged.sort(key=lambda item: (item[0].start, item[1]))
    return tuple(merged)


@dataclass(frozen=True)
class Annotation:
    """Speaker-labeled timeline for one recording.

    Entries are normalized on construction: overlapping or touching
    segments of the same speaker are merged, and entries are sorted by
    (start, label). Different speakers may overlap freely.
    """

    uri: str
    entries: tuple[tuple[Segment, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", _normalize_entries(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def labels(self) -> tuple[str, ...]:
        return tuple(sorted({label for _, label in self.entries}))

    def label_duration(self, label: str) -> float:
        return sum(seg.duration for seg, lab in self.entries if lab == label)

    def total_speaker_time(self) -> float:
        """Summed duration over all entries (overlap counted per speaker)."""
        return sum(seg.duration for seg, _ in self.entries)

    def extent(self) -> Segment | None:
        if not self.entries:
            return None
        start = min(seg.start for seg, _ in self.entries)
        end = max(seg.end for seg, _ in self.entries)
        return Segment(start, end)

    def boundaries(self) -> tuple[float, ...]:
        points = {seg.start for seg, _ in self.entries}
        points.update(seg.end for seg, _ in self.entries)
        return tuple(sorted(points))

    def rename(self, mapping: Mapping[str, str]) -> "Annotation":
        return Annotation(
            self.uri,
            tuple((seg, mapping.get(label, label)) for seg, label in self.entries),
        )


@dataclass(frozen=True)
class FrameGrid:
    """Uniform frame grid; frame i covers [start + i*d, start + (i+1)*d)."""

    start: float
    frame_duration: float
    num_frames: int

    def __post_init__(self):
        if self.frame_duration <= 0:
            raise ValueError(f"frame_duration must be positive, got {self.frame_duration}")
        if self.num_frames < 0:
            raise ValueError(f"num_frames must be non-negative, got {self.num_frames}")

    @property
    def end(self) -> float:
        return self.start + self.num_frames * self.frame_duration

    def midpoints(self) -> np.ndarray:
        return self.start + (np.arange(self.num_frames) + 0.5) * self.frame_duration


@dataclass(frozen=True)
class ActivityMatrix:
    """Frame-aligned speaker activity values in [0, 1].

    ``values`` has shape (num_frames, num_speakers); ``speakers`` gives the
    column labels (string labels or integer slot indices). When ``binary``
    is set, all values are asserted to be exactly 0 or 1.
    """

    grid: FrameGrid
    speakers: tuple
    values: np.ndarray
    binary: bool = False

    def __post_init__(self):
        speakers = tuple(self.speakers)
        if len(set(speakers)) != len(speakers):
            raise ValueError("speaker slots must be unique")
        values = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if values.shape != (self.grid.num_frames, len(speakers)):
            raise ValueError(
                f"values shape {values.shape} does not match "
                f"{self.grid.num_frames} frames x {len(speakers)} speakers"
            )
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("activity values must lie in [0, 1]")
        if self.binary and values.size and not np.isin(values, (0.0, 1.0)).all():
            raise ValueError("matrix flagged binary but has non-binary values")
        values.setflags(write=False)
        object.__setattr__(self, "speakers", speakers)
        object.__setattr__(self, "values", values)

    @property
    def num_frames(self) -> int:
        return self.grid.num_frames

    @property
    def num_speakers(self) -> int:
        return len(self.speakers)


# --- RTTM ---------------------------------------------------------------

def parse_rttm(text: str) -> list[Annotation]:
    """Parse RTTM SPEAKER records into one Annotation per file id.

    Lines starting with ';' or '#' and blank lines are skipped. Every other
    line must be a SPEAKER record with at least 9 whitespace-separated
    fields. Annotations are returned in order of first appearance.
    """
    entries: dict[str, list[tuple[Segment, str]]] = {}
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith((";", "#")):
            continue
        fields = line.split()
        if fields[0] != "SPEAKER":
            raise RttmParseError(line_number, f"expected SPEAKER record, got {fields[0]!r}")
        if len(fields) < 9:
            raise RttmParseError(line_number, f"expected at least 9 fields, got {len(fields)}")
        uri = fields[1]
        try:
            tbeg = float(fields[3])
            tdur = float(fields[4])
        except ValueError as exc:
            raise RttmParseError(line_number, f"bad time field: {exc}") from None
        if tdur <= 0:
            raise RttmParseError(line_number, f"segment duration must be positive, got {tdur}")
        label = fields[7]
        if not label:
            raise RttmParseError(line_number, "empty speaker label")
        try:
            segment = Segment(tbeg, tbeg + tdur)
        except ValueError as exc:
            raise RttmParseError(line_number, str(exc)) from None
        entries.setdefault(uri, []).append((segment, label))
    return [Annotation(uri, tuple(items)) for uri, items in entries.items()]


def emit_rttm(annotations: Iterable[Annotation]) -> str:
    """Serialize annotations as RTTM SPEAKER lines, times at 3 decimals."""
    lines = []
    for annotation in annotations:
        if any(ch.isspace() for ch in annotation.uri):
            raise ValueError(f"uri {annotation.uri!r} cannot contain whitespace")
        for segment, label in annotation.entries:
            if any(ch.isspace() for ch in label):
                raise ValueError(f"label {label!r} cannot contain whitespace")
            lines.append(
                f"SPEAKER {annotation.uri} 1 {segment.start:.3f} {segment.duration:.3f} "
                f"<NA> <NA> {label} <NA> <NA>"
            )
    return "".join(line + "\n" for line in lines)


# --- discretization -----------------------------------------------------

def discretize(
    annotation: Annotation,
    grid: FrameGrid,
    speakers: Sequence[str],
) -> ActivityMatrix:
    """Sample an annotation on a frame grid.

    A cell (frame, speaker) is 1 when the speaker is active at the frame's
    midpoint. Every label whose segments intersect the grid span must appear
    in ``speakers``.
    """
    speakers = tuple(speakers)
    column = {label: j for j, label in enumerate(speakers)}
    span_start, span_end = grid.start, grid.end
    mids = grid.midpoints()
    values = np.zeros((grid.num_frames, len(speakers)))
    for segment, label in annotation.entries:
        if segment.end <= span_start or segment.start >= span_end:
            continue
        if label not in column:
            raise ValueError(
                f"label {label!r} is active within the grid span but missing from speakers"
            )
        active = (mids >= segment.start) & (mids < segment.end)
        values[active, column[label]] = 1.0
    return ActivityMatrix(grid, speakers, values, binary=True)


def to_annotation(matrix: ActivityMatrix, uri: str = "") -> Annotation:
    """Convert a binary activity matrix back to segments.

    Maximal runs of consecutive active frames become one segment each;
    inverse of :func:`discretize` up to frame quantization.
    """
    values = matrix.values
    if values.size and not np.isin(values, (0.0, 1.0)).all():
        raise ValueError("matrix has non-binary values; threshold it first")
    grid = matrix.grid
    entries = []
    for j, speaker in enumerate(matrix.speakers):
        active = values[:, j] > 0.5
        if not active.any():
            continue
        padded = np.concatenate(([False], active, [False]))
        changes = np.flatnonzero(padded[1:] != padded[:-1])
        for first, stop in zip(changes[::2], changes[1::2]):
            segment = Segment(
                grid.start + first * grid.frame_duration,
                grid.start + stop * grid.frame_duration,
            )
            entries.append((segment, str(speaker)))
    return Annotation(uri, tuple(entries))


def crop(annotation: Annotation, window: Segment) -> Annotation:
    """Intersect all entries with a window, keeping absolute times."""
    entries = []
    for segment, label in annotation.entries:
        clipped = segment.intersection(window)
        if clipped is not None:
            entries.append((clipped, label))
    return Annotation(annotation.uri, tuple(entries))


def merge_annotations(annotations: Sequence[Annotation], uri: str | None = None) -> Annotation:
    """Union of several annotations for the same recording."""
    if uri is None:
        uris = {a.uri for a in annotations}
        if len(uris) > 1:
            raise ValueError(f"cannot merge annotations with different uris: {sorted(uris)}")
        uri = next(iter(uris)) if uris else ""
    entries: list[tuple[Segment, str]] = []
    for annotation in annotations:
        entries.extend(annotation.entries)
    return Annotation(uri, tuple(entries))


# --- speaker-count statistics -------------------------------------------

@dataclass(frozen=True)
class CoverageTables:
    """Speaker-count coverage percentages, pooled over a corpus.

    ``per_chunk[n][w]`` is the percentage of sliding chunks of size ``w``
    containing at most ``n`` distinct speakers. ``per_frame[k]`` is the
    percentage of frames with at most ``k`` simultaneously active speakers.
    """

    chunk_sizes: tuple[float, ...]
    per_chunk: Mapping[int, Mapping[float, float]]
    per_frame: Mapping[int, float]

    def per_chunk_csv(self) -> str:
        header = "N," + ",".join(f"{w:g}" for w in self.chunk_sizes)
        rows = [header]
        for n in sorted(self.per_chunk):
            cells = ",".join(f"{self.per_chunk[n][w]:.2f}" for w in self.chunk_sizes)
            rows.append(f"{n},{cells}")
        return "\n".join(rows) + "\n"

    def per_frame_csv(self) -> str:
        rows = ["K,percent"]
        for k in sorted(self.per_frame):
            rows.append(f"{k},{self.per_frame[k]:.2f}")
        return "\n".join(rows) + "\n"


def speaker_count_coverage(
    annotations: Sequence[Annotation],
    chunk_sizes: Sequence[float],
    frame_rate: float,
    chunk_step: float | None = None,
) -> CoverageTables:
    """Speaker-count coverage statistics over a corpus.

    For each chunk size W, a window slides over each file span [0, end]
    with step ``chunk_step`` (default W, i.e. non-overlapping) and the
    number of distinct speakers intersecting each window is counted. The
    per-frame table counts simultaneously active speakers on a
    ``frame_rate`` grid over the same spans.
    """
    if not annotations:
        raise ValueError("need at least one annotation")
    if any(w <= 0 for w in chunk_sizes):
        raise ValueError("chunk sizes must be positive")
    if frame_rate <= 0:
        raise ValueError("frame rate must be positive")
    if chunk_step is not None and chunk_step <= 0:
        raise ValueError("chunk step must be positive")

    chunk_sizes = tuple(float(w) for w in chunk_sizes)
    chunk_counts: dict[float, list[int]] = {w: [] for w in chunk_sizes}
    frame_counts: list[np.ndarray] = []
    frame_duration = 1.0 / frame_rate

    for annotation in annotations:
        extent = annotation.extent()
        duration = extent.end if extent is not None else 0.0
        if duration <= 0:
            continue

        for w in chunk_sizes:
            step = chunk_step if chunk_step is not None else w
            starts = [0.0]
            t = step
            while t + w <= duration + 1e-9:
                starts.append(t)
                t += step
            if duration < w:
                starts = [0.0]
            for start in starts:
                window_end = min(start + w, duration)
                distinct = {
                    label
                    for seg, label in annotation.entries
                    if seg.start < window_end and seg.end > start
                }
                chunk_counts[w].append(len(distinct))

        num_frames = math.ceil(duration * frame_rate - 1e-9)
        grid = FrameGrid(0.0, frame_duration, num_frames)
        matrix = discretize(annotation, grid, annotation.labels())
        frame_counts.append(matrix.values.sum(axis=1).astype(int))

    if not frame_counts or any(not counts for counts in chunk_counts.values()):
        raise ValueError("annotations contain no speech to measure")

    max_chunk_n = max(max(counts) for counts in chunk_counts.values())
    per_chunk: dict[int, dict[float, float]] = {}
    for n in range(1, max(max_chunk_n, 1) + 1):
        per_chunk[n] = {}
        for w in chunk_sizes:
            counts = chunk_counts[w]
            per_chunk[n][w] = 100.0 * sum(c <= n for c in counts) / len(counts)

    pooled = np.concatenate(frame_counts)
    max_frame_k = int(pooled.max())
    per_frame = {
        k: 100.0 * float((pooled <= k).sum()) / pooled.size
        for k in range(1, max(max_frame_k, 1) + 1)
    }
    return CoverageTables(chunk_sizes, per_chunk, per_frame)
