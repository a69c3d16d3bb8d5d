"""Synthetic conversations and noisy segmenter/embedding simulators.

These stand in for trained neural components so the full pipeline can be
verified end to end: speakers take exponential-length turns with Markov
hand-offs, overlapped speech is injected by advancing turn onsets toward a
target overlap ratio, and configurable noise (per-chunk slot permutation,
frame flips, boundary jitter, posterior softening, embedding perturbation)
maps onto the error components it should produce.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .annotations import ActivityMatrix, Annotation, FrameGrid, Segment, crop, discretize
from .clustering import embed_stub, random_centroid_bank
from .metrics import der, local_der, oracle_cluster_der
from .pipeline import ChunkPlan, PipelineConfig, Segmenter, plan_chunks, run_pipeline

__all__ = [
    "SimulationError",
    "ConversationSpec",
    "NoiseSpec",
    "ChunkSimulation",
    "generate_conversation",
    "jitter_annotation",
    "simulate_chunks",
    "simulate_segmenter",
    "make_segmenter",
    "make_stub_embedder",
    "AblationGrid",
    "AblationReport",
    "run_ablation",
]

_MAX_ATTEMPTS = 30
_MIN_TURN = 0.3
_OVERLAP_TOLERANCE = 0.05
_MAX_JUNCTION_OVERLAP = 1.2


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class ConversationSpec:
    """Parameters of one synthetic conversation."""

    duration: float
    n_speakers: int
    mean_turn: float = 2.5
    overlap_ratio: float = 0.0
    max_simultaneous: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        if self.n_speakers < 1:
            raise ValueError(f"need at least one speaker, got {self.n_speakers}")
        if self.mean_turn <= 0:
            raise ValueError(f"mean_turn must be positive, got {self.mean_turn}")
        if not 0.0 <= self.overlap_ratio <= 0.5:
            raise ValueError(f"overlap_ratio must lie in [0, 0.5], got {self.overlap_ratio}")
        if self.max_simultaneous < 1:
            raise ValueError(f"max_simultaneous must be at least 1, got {self.max_simultaneous}")

    def to_json_dict(self) -> dict:
        return {
            "duration": self.duration,
            "n_speakers": self.n_speakers,
            "mean_turn": self.mean_turn,
            "overlap_ratio": self.overlap_ratio,
            "max_simultaneous": self.max_simultaneous,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ConversationSpec":
        return cls(**{key: data[key] for key in data if key in cls.__dataclass_fields__})


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption applied to simulated local segmentations."""

    permute_per_chunk: bool = True
    frame_flip_prob: float = 0.0
    boundary_jitter: float = 0.0
    posterior_temperature: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.frame_flip_prob <= 1.0:
            raise ValueError(f"frame_flip_prob must lie in [0, 1], got {self.frame_flip_prob}")
        if self.boundary_jitter < 0:
            raise ValueError(f"boundary_jitter must be non-negative, got {self.boundary_jitter}")
        if not 0.0 <= self.posterior_temperature <= 1.0:
            raise ValueError(
                f"posterior_temperature must lie in [0, 1], got {self.posterior_temperature}"
            )

    def to_json_dict(self) -> dict:
        return {
            "permute_per_chunk": self.permute_per_chunk,
            "frame_flip_prob": self.frame_flip_prob,
            "boundary_jitter": self.boundary_jitter,
            "posterior_temperature": self.posterior_temperature,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "NoiseSpec":
        return cls(**{key: data[key] for key in data if key in cls.__dataclass_fields__})


def _occupancy(annotation: Annotation) -> tuple[float, float, int]:
    """(union speech seconds, seconds with >= 2 active, max concurrent)."""
    events: list[tuple[float, int]] = []
    for segment, _ in annotation.entries:
        events.append((segment.start, 1))
        events.append((segment.end, -1))
    events.sort()
    union = overlap = 0.0
    active = 0
    max_active = 0
    previous = None
    for time, delta in events:
        if previous is not None and active > 0:
            span = time - previous
            union += span
            if active >= 2:
                overlap += span
        active += delta
        max_active = max(max_active, active)
        previous = time
    return union, overlap, max_active


def generate_conversation(spec: ConversationSpec, uri: str | None = None) -> Annotation:
    """Generate a speaker-labeled conversation with the requested statistics.

    Turn lengths are exponential with the requested mean; the next speaker
    is drawn uniformly from the others. Overlap is injected by advancing
    each turn's onset into the previous turn, only ever pairing adjacent
    turns, so the concurrency cap is respected by construction. Generation
    retries with fresh draws until the realized overlap ratio is within
    +/- 0.05 of the target, and fails if the target is unreachable.
    """
    labels = [f"spk{i:02d}" for i in range(spec.n_speakers)]
    uri = uri if uri is not None else f"sim{spec.seed}"
    can_overlap = spec.max_simultaneous >= 2 and spec.n_speakers >= 2
    ratio_weight = spec.overlap_ratio / (1.0 + spec.overlap_ratio)
    # Overlap comes in short bursts at turn junctions; the cap loosens for
    # targets that cannot be met with short bursts alone.
    max_junction = max(_MAX_JUNCTION_OVERLAP, 1.5 * ratio_weight * spec.mean_turn)

    for attempt in range(_MAX_ATTEMPTS):
        rng = np.random.default_rng((spec.seed, attempt))
        speaker = labels[rng.integers(spec.n_speakers)]
        duration = max(_MIN_TURN, float(rng.exponential(spec.mean_turn)))
        turns: list[tuple[str, float, float]] = [(speaker, 0.0, duration)]
        total_speech = duration
        total_overlap = 0.0
        previous_overlap = 0.0
        end = duration

        while end < spec.duration:
            others = [label for label in labels if label != speaker] or [speaker]
            speaker = others[rng.integers(len(others))]
            duration = max(_MIN_TURN, float(rng.exponential(spec.mean_turn)))
            last_duration = turns[-1][2] - turns[-1][1]
            if can_overlap and spec.overlap_ratio > 0:
                needed = ratio_weight * (total_speech + duration) - total_overlap
                feasible = min(0.9 * min(last_duration - previous_overlap, duration), max_junction)
                advance = float(np.clip(needed * rng.uniform(0.9, 1.1), 0.0, max(feasible, 0.0)))
            else:
                advance = 0.0
            onset = end - advance
            turns.append((speaker, onset, onset + duration))
            total_speech += duration
            total_overlap += advance
            previous_overlap = advance
            end = onset + duration

        entries = []
        for label, start, stop in turns:
            stop = min(stop, spec.duration)
            if start < spec.duration and stop - start > 0.05:
                entries.append((Segment(start, stop), label))
        annotation = Annotation(uri, tuple(entries))
        union, overlapped, max_active = _occupancy(annotation)
        if union <= 0 or max_active > spec.max_simultaneous:
            continue
        if abs(overlapped / union - spec.overlap_ratio) <= _OVERLAP_TOLERANCE:
            return annotation

    raise SimulationError(
        f"could not reach overlap ratio {spec.overlap_ratio} within "
        f"+/- {_OVERLAP_TOLERANCE} given max_simultaneous={spec.max_simultaneous} "
        f"and {spec.n_speakers} speakers"
    )


def jitter_annotation(
    annotation: Annotation, amount: float, rng: np.random.Generator
) -> Annotation:
    """Perturb every segment boundary by uniform noise in [-amount, amount]."""
    if amount < 0:
        raise ValueError(f"jitter amount must be non-negative, got {amount}")
    if amount == 0:
        return annotation
    entries = []
    for segment, label in annotation.entries:
        start = max(0.0, segment.start + rng.uniform(-amount, amount))
        end = segment.end + rng.uniform(-amount, amount)
        if end - start > 1e-6:
            entries.append((Segment(start, end), label))
    return Annotation(annotation.uri, tuple(entries))


@dataclass(frozen=True)
class ChunkSimulation:
    """One simulated chunk: the local segmentation plus its hidden identities."""

    index: int
    window: Segment
    matrix: ActivityMatrix
    slot_to_speaker: dict[int, str]


def simulate_chunks(
    reference: Annotation,
    plan: ChunkPlan,
    n_slots: int,
    noise: NoiseSpec,
    frame_rate: float,
    seed: int = 0,
) -> list[ChunkSimulation]:
    """Simulate a chunk-local segmenter over a plan.

    Per chunk, the reference is cropped and discretized; if more than
    ``n_slots`` speakers appear, only the most active ones (by speech in
    the chunk) are kept. Speakers are mapped to slots (randomly permuted
    per chunk when requested) and the noise spec's boundary jitter, frame
    flips and posterior softening are applied. Deterministic per seed.
    """
    if n_slots < 1:
        raise ValueError(f"need at least one slot, got {n_slots}")
    if frame_rate <= 0:
        raise ValueError(f"frame_rate must be positive, got {frame_rate}")
    rng = np.random.default_rng((seed, 0xC0FFEE))
    frame_duration = 1.0 / frame_rate
    simulations = []
    for index, start, duration in plan.chunks:
        window = Segment(start, start + duration)
        chunk_reference = crop(reference, window)
        ranked = sorted(
            chunk_reference.labels(),
            key=lambda label: (-chunk_reference.label_duration(label), label),
        )
        kept = ranked[:n_slots]
        chunk_reference = Annotation(
            reference.uri,
            tuple((seg, label) for seg, label in chunk_reference.entries if label in kept),
        )
        if noise.boundary_jitter > 0:
            chunk_reference = jitter_annotation(chunk_reference, noise.boundary_jitter, rng)

        num_frames = max(1, round(duration * frame_rate))
        grid = FrameGrid(start, frame_duration, num_frames)
        sampled = discretize(chunk_reference, grid, kept)

        values = np.zeros((num_frames, n_slots))
        slot_order = rng.permutation(n_slots) if noise.permute_per_chunk else np.arange(n_slots)
        slot_to_speaker: dict[int, str] = {}
        for rank, label in enumerate(kept):
            slot = int(slot_order[rank])
            values[:, slot] = sampled.values[:, rank]
            slot_to_speaker[slot] = label

        if noise.frame_flip_prob > 0:
            flips = rng.random(values.shape) < noise.frame_flip_prob
            values = np.abs(values - flips)
        binary = noise.posterior_temperature == 0.0
        if noise.posterior_temperature > 0:
            tau = noise.posterior_temperature
            values = (1.0 - tau) * values + tau / 2.0

        matrix = ActivityMatrix(grid, tuple(range(n_slots)), values, binary=binary)
        simulations.append(ChunkSimulation(index, window, matrix, slot_to_speaker))
    return simulations


def simulate_segmenter(
    reference: Annotation,
    plan: ChunkPlan,
    n_slots: int,
    noise: NoiseSpec,
    frame_rate: float,
    seed: int = 0,
) -> list[ActivityMatrix]:
    """Local segmentations only (see :func:`simulate_chunks` for identities)."""
    return [sim.matrix for sim in simulate_chunks(reference, plan, n_slots, noise, frame_rate, seed)]


def make_segmenter(
    simulations: Sequence[ChunkSimulation], n_slots: int, frame_rate: float
) -> Segmenter:
    """Wrap precomputed chunk simulations as a pipeline segmenter."""
    by_window = {
        (sim.window.start, sim.window.end): sim.matrix for sim in simulations
    }

    def segment(window: Segment) -> ActivityMatrix:
        key = (window.start, window.end)
        if key not in by_window:
            raise ValueError(f"no simulated chunk for window [{window.start}, {window.end}]")
        return by_window[key]

    return Segmenter(n_speakers=n_slots, frame_rate=frame_rate, segment=segment)


def make_stub_embedder(
    simulations: Sequence[ChunkSimulation],
    centroid_bank: dict[str, np.ndarray],
    noise_scale: float,
    seed: int = 0,
):
    """Embedder reading each slot's hidden identity from the simulation."""
    by_index = {sim.index: sim for sim in simulations}

    def embed(index: int, window: Segment, matrix: ActivityMatrix):
        sim = by_index[index]
        rng = np.random.default_rng((seed, 0xE0BED, index))
        return embed_stub(
            matrix, sim.slot_to_speaker, centroid_bank, noise_scale,
            chunk_index=index, rng=rng,
        )

    return embed


# --- ablation sweep ---------------------------------------------------------

_ABLATION_COLUMNS = (
    "chunk_size",
    "permute_per_chunk",
    "frame_flip_prob",
    "boundary_jitter",
    "posterior_temperature",
    "embedding_noise",
    "seed",
    "local_der",
    "global_der",
    "oracle_der",
    "fa",
    "miss",
    "conf",
    "total",
    "n_clusters",
    "n_true_speakers",
)


@dataclass(frozen=True)
class AblationGrid:
    chunk_sizes: tuple[float, ...]
    segmenter_noise: tuple[NoiseSpec, ...]
    embedding_noise: tuple[float, ...]

    def __post_init__(self):
        if not (self.chunk_sizes and self.segmenter_noise and self.embedding_noise):
            raise ValueError("ablation grid must have at least one value per axis")


@dataclass(frozen=True)
class AblationReport:
    rows: tuple[dict, ...]

    def to_csv(self) -> str:
        lines = [",".join(_ABLATION_COLUMNS)]
        for row in self.rows:
            cells = []
            for column in _ABLATION_COLUMNS:
                value = row[column]
                cells.append(f"{value:.6g}" if isinstance(value, float) else str(value))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        """Per-cell means over seeds, keyed by the sweep coordinates."""
        cell_keys = (
            "chunk_size",
            "permute_per_chunk",
            "frame_flip_prob",
            "boundary_jitter",
            "posterior_temperature",
            "embedding_noise",
        )
        metric_keys = ("local_der", "global_der", "oracle_der", "fa", "miss", "conf")
        cells: dict[tuple, list[dict]] = {}
        for row in self.rows:
            cells.setdefault(tuple(row[key] for key in cell_keys), []).append(row)
        out = []
        for coords, rows in cells.items():
            cell = dict(zip(cell_keys, coords))
            for metric in metric_keys:
                cell[f"mean_{metric}"] = float(np.mean([row[metric] for row in rows]))
            cell["n_rows"] = len(rows)
            out.append(cell)
        return {"cells": out}


def _derived_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def run_ablation(
    grid: AblationGrid,
    spec: ConversationSpec,
    seeds: Sequence[int],
    frame_rate: float = 100.0,
    collar: float = 0.0,
    frame_duration: float = 0.01,
    embedding_dim: int = 16,
    anchor_similarity: float = 0.0,
) -> AblationReport:
    """Sweep chunk sizes x segmenter noise x embedding noise over seeds.

    Conversations and segmenter simulations are shared across embedding
    noise levels of the same seed, so comparisons along that axis are
    paired. For every cell and seed the full pipeline runs and the local,
    global, and oracle-clustering DERs are recorded together with the
    global component breakdown.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    rows = []
    for rep, seed in enumerate(seeds):
        reference = generate_conversation(replace(spec, seed=_derived_seed(spec.seed, seed)))
        bank_rng = np.random.default_rng((spec.seed, seed, 0xBA2C))
        bank = random_centroid_bank(
            reference.labels(), embedding_dim, bank_rng, pairwise_similarity=anchor_similarity
        )
        for ci, chunk_size in enumerate(grid.chunk_sizes):
            config = PipelineConfig(chunk_size=chunk_size)
            plan = plan_chunks(spec.duration, config.chunk_size, config.step)
            for si, seg_noise in enumerate(grid.segmenter_noise):
                sims = simulate_chunks(
                    reference, plan, config.n_speakers_per_chunk, seg_noise,
                    frame_rate, seed=_derived_seed(spec.seed, seed, ci, si),
                )
                segmenter = make_segmenter(sims, config.n_speakers_per_chunk, frame_rate)
                for ei, emb_noise in enumerate(grid.embedding_noise):
                    embedder = make_stub_embedder(
                        sims, bank, emb_noise,
                        seed=_derived_seed(spec.seed, seed, ci, si, ei),
                    )
                    try:
                        hypothesis, diagnostics = run_pipeline(
                            spec.duration, segmenter, embedder, config, uri=reference.uri
                        )
                        global_bd = der(hypothesis, reference, collar, frame_duration)
                        local_bd = local_der(
                            diagnostics.local, reference, config.threshold, collar,
                            frame_duration, max_reference_speakers=config.n_speakers_per_chunk,
                        )
                        oracle_bd = oracle_cluster_der(
                            diagnostics.local, reference, config.threshold, collar, frame_duration
                        )
                    except ValueError as exc:
                        raise SimulationError(
                            f"cell chunk_size={chunk_size} seg_noise={si} "
                            f"emb_noise={emb_noise} seed={seed}: {exc}"
                        ) from exc
                    rows.append(
                        {
                            "chunk_size": chunk_size,
                            "permute_per_chunk": seg_noise.permute_per_chunk,
                            "frame_flip_prob": seg_noise.frame_flip_prob,
                            "boundary_jitter": seg_noise.boundary_jitter,
                            "posterior_temperature": seg_noise.posterior_temperature,
                            "embedding_noise": emb_noise,
                            "seed": seed,
                            "local_der": local_bd.der,
                            "global_der": global_bd.der,
                            "oracle_der": oracle_bd.der,
                            "fa": global_bd.false_alarm,
                            "miss": global_bd.missed,
                            "conf": global_bd.confusion,
                            "total": global_bd.total,
                            "n_clusters": diagnostics.n_clusters,
                            "n_true_speakers": len(reference.labels()),
                        }
                    )
    return AblationReport(tuple(rows))
