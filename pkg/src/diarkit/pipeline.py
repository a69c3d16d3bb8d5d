"""End-to-end chunked diarization pipeline.

A recording is cut into overlapping chunks, a pluggable segmenter produces
per-chunk speaker activity posteriors with chunk-local slots, a pluggable
embedder turns each active slot into a speaker embedding, agglomerative
clustering aligns slots across chunks, and the relabeled activities are
overlap-averaged, thresholded, and converted to a final annotation.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .annotations import ActivityMatrix, Annotation, FrameGrid, Segment, to_annotation
from .clustering import ClusterAssignment, ClusteringConfig, EmbeddingSet, hac_centroid

__all__ = [
    "ChunkPlan",
    "Segmenter",
    "PipelineConfig",
    "PipelineDiagnostics",
    "plan_chunks",
    "threshold_activities",
    "aggregate",
    "run_pipeline",
    "run_pipeline_precomputed",
    "DEFAULT_SLOTS_BY_CHUNK_SIZE",
    "activity_matrix_to_json_dict",
    "activity_matrix_from_json_dict",
]

# Speaker slots per chunk size covering at least 97% of chunks on typical
# meeting-style data.
DEFAULT_SLOTS_BY_CHUNK_SIZE: dict[float, int] = {5.0: 4, 10.0: 4, 30.0: 5, 50.0: 6}


@dataclass(frozen=True)
class ChunkPlan:
    """Sliding-window cover of a recording."""

    chunk_size: float
    step: float
    chunks: tuple[tuple[int, float, float], ...]  # (index, start, duration)

    def windows(self) -> tuple[Segment, ...]:
        return tuple(Segment(start, start + duration) for _, start, duration in self.chunks)


@dataclass(frozen=True)
class Segmenter:
    """Chunk-local segmentation backend.

    ``segment`` maps an absolute-time window to an ActivityMatrix of soft
    posteriors with ``n_speakers`` slot columns on a ``frame_rate`` grid.
    """

    n_speakers: int
    frame_rate: float
    segment: Callable[[Segment], ActivityMatrix]


def _nearest_table_key(table: dict[float, object], chunk_size: float) -> float:
    return min(table, key=lambda key: (abs(key - chunk_size), key))


@dataclass(frozen=True)
class PipelineConfig:
    """Pipeline hyperparameters; unset fields default from the chunk size."""

    chunk_size: float
    step: float = 0.0
    threshold: float = 0.5
    clustering: ClusteringConfig | None = None
    n_speakers_per_chunk: int = 0

    def __post_init__(self):
        if self.chunk_size <= 0:
            raise ValueError(f"chunk_size must be positive, got {self.chunk_size}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.step == 0.0:
            object.__setattr__(self, "step", 0.2 * self.chunk_size)
        if self.step <= 0 or self.step > self.chunk_size:
            raise ValueError(f"step must satisfy 0 < step <= chunk_size, got {self.step}")
        if self.clustering is None:
            object.__setattr__(self, "clustering", ClusteringConfig.for_chunk_size(self.chunk_size))
        if self.n_speakers_per_chunk == 0:
            key = _nearest_table_key(DEFAULT_SLOTS_BY_CHUNK_SIZE, self.chunk_size)
            object.__setattr__(self, "n_speakers_per_chunk", DEFAULT_SLOTS_BY_CHUNK_SIZE[key])
        if self.n_speakers_per_chunk < 1:
            raise ValueError("n_speakers_per_chunk must be at least 1")


@dataclass(frozen=True)
class PipelineDiagnostics:
    """Intermediate products of one pipeline run."""

    n_clusters: int
    plan: ChunkPlan
    local: tuple[tuple[ActivityMatrix, Segment], ...]
    assignment: ClusterAssignment | None
    aggregated: ActivityMatrix | None
    timings: dict


def plan_chunks(recording_duration: float, chunk_size: float, step: float) -> ChunkPlan:
    """Plan sliding chunks starting at 0, step, 2*step, ...

    Chunks have the requested size; when audio past the last full chunk
    remains, one final chunk is clamped to end exactly at the recording
    end. A recording shorter than one chunk yields a single clamped chunk.
    """
    if recording_duration <= 0:
        raise ValueError(f"recording duration must be positive, got {recording_duration}")
    if chunk_size <= 0 or step <= 0:
        raise ValueError("chunk size and step must be positive")
    if step > chunk_size:
        raise ValueError(f"step {step} must not exceed chunk size {chunk_size}")

    if recording_duration < chunk_size:
        return ChunkPlan(chunk_size, step, ((0, 0.0, recording_duration),))

    chunks: list[tuple[int, float, float]] = []
    start = 0.0
    index = 0
    while start + chunk_size <= recording_duration + 1e-9:
        chunks.append((index, start, chunk_size))
        index += 1
        start = index * step
    last_end = chunks[-1][1] + chunk_size
    if last_end < recording_duration - 1e-9:
        chunks.append((index, start, recording_duration - start))
    return ChunkPlan(chunk_size, step, tuple(chunks))


def threshold_activities(matrix: ActivityMatrix, threshold: float) -> ActivityMatrix:
    """Binarize activities: strictly above the threshold becomes 1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return ActivityMatrix(
        matrix.grid,
        matrix.speakers,
        (matrix.values > threshold).astype(np.float64),
        binary=True,
    )


def aggregate(
    local: Sequence[tuple[ActivityMatrix, Segment]],
    labels: Sequence,
    output_grid: FrameGrid,
) -> ActivityMatrix:
    """Overlap-average chunk activities onto a single output grid.

    Chunk matrices must already carry global labels as their speaker
    columns. Each output cell is the summed activity for that label divided
    by the number of chunks overlapping the frame, so a chunk that carries
    no column for a label still counts as (silent) evidence against it.
    Frames covered by no chunk are 0.
    """
    labels = tuple(labels)
    column = {label: j for j, label in enumerate(labels)}
    sums = np.zeros((output_grid.num_frames, len(labels)))
    covering = np.zeros(output_grid.num_frames)

    for matrix, window in local:
        if not math.isclose(matrix.grid.frame_duration, output_grid.frame_duration,
                            rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(
                f"frame duration mismatch: chunk {matrix.grid.frame_duration} "
                f"vs output {output_grid.frame_duration}"
            )
        offset = round((matrix.grid.start - output_grid.start) / output_grid.frame_duration)
        if offset < 0 or offset + matrix.num_frames > output_grid.num_frames:
            raise ValueError("chunk grid extends outside the output grid")
        covering[offset:offset + matrix.num_frames] += 1.0
        for j, label in enumerate(matrix.speakers):
            if label not in column:
                raise ValueError(f"chunk label {label!r} missing from output labels")
            sums[offset:offset + matrix.num_frames, column[label]] += matrix.values[:, j]

    values = np.divide(
        sums,
        covering[:, np.newaxis],
        out=np.zeros_like(sums),
        where=covering[:, np.newaxis] > 0,
    )
    return ActivityMatrix(output_grid, labels, values)


def _active_slots(matrix: ActivityMatrix, threshold: float) -> list[int]:
    if matrix.num_frames == 0:
        return []
    peaks = matrix.values.max(axis=0)
    return [j for j in range(matrix.num_speakers) if peaks[j] > threshold]


def _pipeline_core(
    locals_: Sequence[tuple[ActivityMatrix, Segment]],
    embeddings: EmbeddingSet,
    config: PipelineConfig,
    plan: ChunkPlan,
    frame_rate: float,
    uri: str,
    timings: dict,
) -> tuple[Annotation, PipelineDiagnostics]:
    active: dict[int, list[int]] = {
        index: _active_slots(matrix, config.threshold)
        for index, (matrix, _) in enumerate(locals_)
    }
    items = tuple(
        item for item in embeddings.items
        if item.chunk in active and item.slot in active[item.chunk]
    )

    if not items:
        diagnostics = PipelineDiagnostics(0, plan, tuple(locals_), None, None, timings)
        return Annotation(uri), diagnostics

    t0 = time.perf_counter()
    assignment = hac_centroid(EmbeddingSet(embeddings.dim, items), config.clustering)
    timings["cluster"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cluster_labels = tuple(f"spk{c:02d}" for c in range(assignment.n_clusters))
    relabeled: list[tuple[ActivityMatrix, Segment]] = []
    for index, (matrix, window) in enumerate(locals_):
        columns = np.zeros((matrix.num_frames, assignment.n_clusters))
        present = np.zeros(assignment.n_clusters, dtype=bool)
        for slot in active[index]:
            cluster = assignment.assignments.get((index, slot))
            if cluster is None:
                continue
            columns[:, cluster] = np.maximum(columns[:, cluster], matrix.values[:, slot])
            present[cluster] = True
        kept = np.flatnonzero(present)
        relabeled.append(
            (
                ActivityMatrix(
                    matrix.grid,
                    tuple(cluster_labels[c] for c in kept),
                    columns[:, kept],
                ),
                window,
            )
        )

    frame_duration = 1.0 / frame_rate
    num_frames = max(
        round((matrix.grid.start - 0.0) / frame_duration) + matrix.num_frames
        for matrix, _ in locals_
    )
    grid = FrameGrid(0.0, frame_duration, num_frames)
    aggregated = aggregate(relabeled, cluster_labels, grid)
    annotation = to_annotation(threshold_activities(aggregated, config.threshold), uri=uri)
    timings["aggregate"] = time.perf_counter() - t0

    diagnostics = PipelineDiagnostics(
        assignment.n_clusters, plan, tuple(locals_), assignment, aggregated, timings
    )
    return annotation, diagnostics


def run_pipeline(
    recording_duration: float,
    segmenter: Segmenter,
    embedder: Callable[[int, Segment, ActivityMatrix], EmbeddingSet],
    config: PipelineConfig,
    uri: str = "recording",
) -> tuple[Annotation, PipelineDiagnostics]:
    """Run the full pipeline over one recording.

    ``embedder(chunk_index, window, matrix)`` returns the chunk's speaker
    embeddings; slots the segmenter judges inactive (no activity above the
    threshold anywhere in the chunk) are skipped for clustering and
    aggregation.
    """
    plan = plan_chunks(recording_duration, config.chunk_size, config.step)
    timings: dict = {}

    t0 = time.perf_counter()
    locals_: list[tuple[ActivityMatrix, Segment]] = []
    for index, start, duration in plan.chunks:
        window = Segment(start, start + duration)
        try:
            matrix = segmenter.segment(window)
        except ValueError as exc:
            raise ValueError(f"chunk {index} [{start:.2f}, {start + duration:.2f}]: {exc}") from exc
        if matrix.num_speakers != segmenter.n_speakers:
            raise ValueError(
                f"chunk {index}: segmenter produced {matrix.num_speakers} slots, "
                f"declared {segmenter.n_speakers}"
            )
        expected = duration * segmenter.frame_rate
        if abs(matrix.num_frames - expected) > 1.0 + 1e-9:
            raise ValueError(
                f"chunk {index}: {matrix.num_frames} frames inconsistent with "
                f"{duration:.3f}s at {segmenter.frame_rate}Hz"
            )
        locals_.append((matrix, window))
    timings["segment"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    collected = []
    dim = None
    for index, (matrix, window) in enumerate(locals_):
        try:
            chunk_embeddings = embedder(index, window, matrix)
        except ValueError as exc:
            raise ValueError(f"chunk {index}: {exc}") from exc
        collected.extend(chunk_embeddings.items)
        dim = chunk_embeddings.dim
    timings["embed"] = time.perf_counter() - t0

    embeddings = EmbeddingSet(dim if dim is not None else 1, tuple(collected))
    return _pipeline_core(locals_, embeddings, config, plan, segmenter.frame_rate, uri, timings)


def run_pipeline_precomputed(
    local_segmentations: Sequence[tuple[ActivityMatrix, Segment]],
    embeddings: EmbeddingSet,
    config: PipelineConfig,
    frame_rate: float,
    uri: str = "recording",
) -> tuple[Annotation, PipelineDiagnostics]:
    """Run clustering and aggregation over precomputed chunk outputs."""
    if not local_segmentations:
        raise ValueError("need at least one local segmentation")
    windows = [window for _, window in local_segmentations]
    plan = ChunkPlan(
        config.chunk_size,
        config.step,
        tuple((i, w.start, w.duration) for i, w in enumerate(windows)),
    )
    return _pipeline_core(
        tuple(local_segmentations), embeddings, config, plan, frame_rate, uri, {}
    )


# --- JSON interchange ------------------------------------------------------

def activity_matrix_to_json_dict(matrix: ActivityMatrix) -> dict:
    out = {
        "grid": {
            "start": matrix.grid.start,
            "frame_duration": matrix.grid.frame_duration,
            "num_frames": matrix.grid.num_frames,
        },
        "n_speakers": matrix.num_speakers,
        "values": matrix.values.tolist(),
    }
    if tuple(matrix.speakers) != tuple(range(matrix.num_speakers)):
        out["speakers"] = list(matrix.speakers)
    return out


def activity_matrix_from_json_dict(data: dict) -> ActivityMatrix:
    grid = FrameGrid(
        float(data["grid"]["start"]),
        float(data["grid"]["frame_duration"]),
        int(data["grid"]["num_frames"]),
    )
    n_speakers = int(data["n_speakers"])
    speakers = tuple(data.get("speakers", range(n_speakers)))
    values = np.asarray(data["values"], dtype=np.float64)
    if values.size == 0:
        values = values.reshape(grid.num_frames, n_speakers)
    return ActivityMatrix(grid, speakers, values)


def load_chunk_manifest(path: str | Path) -> dict:
    """Load a chunk manifest and its referenced files.

    Schema: ``{"duration": s, "frame_rate": hz, "chunks": [{"index": i,
    "start": s, "duration": s, "file": relpath}], "embeddings": relpath?}``.
    Returns the manifest dict with chunks materialized as
    ``(ActivityMatrix, Segment)`` pairs under ``"local"``.
    """
    path = Path(path)
    manifest = json.loads(path.read_text())
    base = path.parent
    local = []
    for chunk in sorted(manifest["chunks"], key=lambda c: int(c["index"])):
        matrix = activity_matrix_from_json_dict(json.loads((base / chunk["file"]).read_text()))
        window = Segment(float(chunk["start"]), float(chunk["start"]) + float(chunk["duration"]))
        local.append((matrix, window))
    manifest["local"] = local
    if "embeddings" in manifest:
        manifest["embeddings_path"] = str(base / manifest["embeddings"])
    return manifest
