import math
from itertools import permutations

import numpy as np
import pytest

from diarkit.annotations import ActivityMatrix, Annotation, FrameGrid, Segment, crop
from diarkit.metrics import (
    UndefinedDerError,
    der,
    der_corpus,
    local_der,
    oracle_cluster_der,
)


def brute_force_components(hypothesis, reference, collar, frame_duration):
    """Independent oracle: frame loop plus enumeration of injective mappings."""
    end = 0.0
    for ann in (hypothesis, reference):
        for seg, _ in ann.entries:
            end = max(end, seg.end)
    n_frames = math.ceil(end / frame_duration - 1e-9) if end > 0 else 0

    boundaries = sorted({b for seg, _ in reference.entries for b in (seg.start, seg.end)})
    ref_labels = sorted({lab for _, lab in reference.entries})
    hyp_labels = sorted({lab for _, lab in hypothesis.entries})

    def active(ann, label, t):
        return any(
            lab == label and seg.start <= t < seg.end for seg, lab in ann.entries
        )

    total = fa = miss = 0
    cooc = {(r, h): 0 for r in ref_labels for h in hyp_labels}
    min_rh = 0
    for i in range(n_frames):
        mid = (i + 0.5) * frame_duration
        if collar > 0 and any(abs(mid - b) < collar / 2 for b in boundaries):
            continue
        r_act = [lab for lab in ref_labels if active(reference, lab, mid)]
        h_act = [lab for lab in hyp_labels if active(hypothesis, lab, mid)]
        total += len(r_act)
        fa += max(0, len(h_act) - len(r_act))
        miss += max(0, len(r_act) - len(h_act))
        min_rh += min(len(r_act), len(h_act))
        for r in r_act:
            for h in h_act:
                cooc[(r, h)] += 1

    best_correct = 0
    if ref_labels and hyp_labels:
        if len(ref_labels) <= len(hyp_labels):
            small, large, key = ref_labels, hyp_labels, lambda r, h: (r, h)
        else:
            small, large, key = hyp_labels, ref_labels, lambda h, r: (r, h)
        for assigned in permutations(large, len(small)):
            correct = sum(cooc[key(s, a)] for s, a in zip(small, assigned))
            best_correct = max(best_correct, correct)
    conf = min_rh - best_correct
    return (
        fa * frame_duration,
        miss * frame_duration,
        conf * frame_duration,
        total * frame_duration,
    )


def random_annotation(rng, uri, labels, max_end=8.0):
    entries = []
    for label in labels:
        for _ in range(rng.integers(1, 4)):
            start = float(rng.uniform(0, max_end - 0.5))
            entries.append((Segment(start, start + float(rng.uniform(0.2, 2.5))), label))
    return Annotation(uri, tuple(entries))


class TestDer:
    def test_identical_is_zero(self):
        ann = Annotation("f", ((Segment(0, 5), "A"), (Segment(4, 9), "B")))
        breakdown = der(ann, ann)
        assert breakdown.der == 0.0
        assert breakdown.error_seconds == 0.0

    def test_empty_hypothesis_is_all_miss(self):
        reference = Annotation("f", ((Segment(0, 10), "A"),))
        breakdown = der(Annotation("f"), reference)
        assert breakdown.missed == pytest.approx(10.0)
        assert breakdown.der == 1.0

    def test_shifted_boundary_hand_case(self):
        reference = Annotation("f", ((Segment(0, 5), "A"), (Segment(5, 10), "B")))
        hypothesis = Annotation("f", ((Segment(0, 6), "X"), (Segment(6, 10), "Y")))
        breakdown = der(hypothesis, reference, collar=0.0)
        assert breakdown.der == 0.1
        assert breakdown.confusion == pytest.approx(1.0)
        assert breakdown.false_alarm == 0.0
        assert breakdown.missed == 0.0

    def test_label_renaming_invariance(self):
        reference = Annotation("f", ((Segment(0, 5), "A"), (Segment(3, 9), "B")))
        hypothesis = reference.rename({"A": "zz1", "B": "zz2"})
        assert der(hypothesis, reference).der == 0.0

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(10)
        for _ in range(40):
            n_ref = int(rng.integers(1, 5))
            n_hyp = int(rng.integers(1, 5))
            reference = random_annotation(rng, "f", [f"r{i}" for i in range(n_ref)])
            hypothesis = random_annotation(rng, "f", [f"h{i}" for i in range(n_hyp)])
            collar = float(rng.choice([0.0, 0.2]))
            breakdown = der(hypothesis, reference, collar=collar, frame_duration=0.05)
            oracle = brute_force_components(hypothesis, reference, collar, 0.05)
            assert (
                breakdown.false_alarm,
                breakdown.missed,
                breakdown.confusion,
                breakdown.total,
            ) == oracle

    def test_collar_never_increases_error(self):
        rng = np.random.default_rng(11)
        for _ in range(15):
            reference = random_annotation(rng, "f", ["a", "b"])
            hypothesis = random_annotation(rng, "f", ["x", "y"])
            errors = [
                der(hypothesis, reference, collar=c, frame_duration=0.02).error_seconds
                for c in (0.0, 0.1, 0.25, 0.5)
            ]
            assert all(e1 >= e2 - 1e-9 for e1, e2 in zip(errors, errors[1:]))

    def test_halving_frame_duration_moves_components_at_most_one_frame_per_boundary(self):
        rng = np.random.default_rng(12)
        for _ in range(10):
            reference = random_annotation(rng, "f", ["a", "b"])
            hypothesis = random_annotation(rng, "f", ["x", "y"])
            coarse = der(hypothesis, reference, frame_duration=0.02)
            fine = der(hypothesis, reference, frame_duration=0.01)
            n_boundaries = 2 * (len(reference.entries) + len(hypothesis.entries))
            budget = n_boundaries * 0.02
            for attr in ("false_alarm", "missed", "confusion", "total"):
                assert abs(getattr(coarse, attr) - getattr(fine, attr)) <= budget

    def test_empty_reference_with_hypothesis_speech_is_undefined(self):
        hypothesis = Annotation("f", ((Segment(0, 4), "X"),))
        with pytest.raises(UndefinedDerError) as err:
            der(hypothesis, Annotation("f"))
        assert err.value.false_alarm_seconds == pytest.approx(4.0)

    def test_both_empty_is_zero(self):
        assert der(Annotation("f"), Annotation("f")).der == 0.0

    def test_collar_excludes_boundary_jitter(self):
        reference = Annotation("f", ((Segment(1.0, 4.0), "A"), (Segment(5.0, 8.0), "B")))
        hypothesis = Annotation("f", ((Segment(0.93, 4.08), "A"), (Segment(5.04, 7.95), "B")))
        strict = der(hypothesis, reference, collar=0.0)
        assert strict.error_seconds > 0
        forgiving = der(hypothesis, reference, collar=0.25)
        assert forgiving.false_alarm + forgiving.missed == 0.0


class TestDerCorpus:
    def _pair_with_der(self, uri, rate):
        # 10 s reference; hypothesis misses `rate` fraction of it
        reference = Annotation(uri, ((Segment(0, 10), "A"),))
        hypothesis = Annotation(uri, ((Segment(0, 10 * (1 - rate)), "A"),))
        return hypothesis, reference

    def test_macro_is_unweighted_mean(self):
        pairs = [self._pair_with_der("f1", 0.1), self._pair_with_der("f2", 0.3)]
        report = der_corpus(pairs)
        assert report.macro_der == pytest.approx(0.2)

    def test_single_file_macro_equals_micro(self):
        pairs = [self._pair_with_der("f1", 0.25)]
        report = der_corpus(pairs)
        assert report.macro_der == pytest.approx(report.micro.der)

    def test_micro_pools_components(self):
        long_ref = Annotation("long", ((Segment(0, 40), "A"),))
        pairs = [
            (Annotation("long", ((Segment(0, 40), "A"),)), long_ref),
            self._pair_with_der("short", 0.5),
        ]
        report = der_corpus(pairs)
        # pooled: 5 s missed over 50 s reference speech
        assert report.micro.der == pytest.approx(0.1)
        assert report.macro_der == pytest.approx(0.25)

    def test_group_by_pools_within_groups(self):
        pairs = [
            self._pair_with_der("set1/a", 0.1),
            self._pair_with_der("set1/b", 0.1),
            self._pair_with_der("set2/a", 0.3),
        ]
        report = der_corpus(pairs, group_by=lambda uri: uri.split("/")[0])
        assert report.macro_der == pytest.approx(0.2)
        assert set(report.group_der) == {"set1", "set2"}

    def test_uri_mismatch_rejected(self):
        with pytest.raises(ValueError, match="uris do not match"):
            der_corpus([(Annotation("a"), Annotation("b"))])

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            der_corpus([])


def make_matrix(grid, columns, labels=None):
    values = np.asarray(columns, dtype=float).T
    speakers = tuple(labels) if labels is not None else tuple(range(values.shape[1]))
    return ActivityMatrix(grid, speakers, values, binary=True)


class TestLocalDer:
    def test_perfect_chunks_score_zero(self):
        reference = Annotation(
            "f", ((Segment(0, 1.0), "A"), (Segment(1.0, 2.0), "B"))
        )
        grid1 = FrameGrid(0.0, 0.1, 10)
        grid2 = FrameGrid(1.0, 0.1, 10)
        # chunk 2 stores B in slot 0: slot order must not matter
        chunk1 = make_matrix(grid1, [[1] * 10, [0] * 10])
        chunk2 = make_matrix(grid2, [[1] * 10, [0] * 10])
        breakdown = local_der(
            [(chunk1, Segment(0, 1.0)), (chunk2, Segment(1.0, 2.0))], reference
        )
        assert breakdown.der == 0.0

    def test_all_zero_chunks_score_one(self):
        reference = Annotation("f", ((Segment(0, 2), "A"),))
        grid = FrameGrid(0.0, 0.1, 20)
        silent = ActivityMatrix(grid, (0, 1), np.zeros((20, 2)), binary=True)
        assert local_der([(silent, Segment(0, 2))], reference).der == 1.0

    def test_pools_per_chunk_components(self):
        rng = np.random.default_rng(13)
        reference = random_annotation(rng, "f", ["a", "b"], max_end=6.0)
        chunks = []
        for start in (0.0, 3.0):
            grid = FrameGrid(start, 0.05, 60)
            values = (rng.random((60, 2)) > 0.7).astype(float)
            chunks.append((ActivityMatrix(grid, (0, 1), values, binary=True), Segment(start, start + 3)))
        pooled = local_der(chunks, reference, frame_duration=0.05)

        from diarkit.annotations import to_annotation

        fa = miss = conf = total = 0.0
        for matrix, window in chunks:
            hyp = to_annotation(matrix, uri="f")
            piece = crop(reference, window)
            try:
                bd = der(hyp, piece, frame_duration=0.05)
                fa, miss, conf, total = (
                    fa + bd.false_alarm,
                    miss + bd.missed,
                    conf + bd.confusion,
                    total + bd.total,
                )
            except UndefinedDerError as err:
                fa += err.false_alarm_seconds
        assert pooled.false_alarm == pytest.approx(fa)
        assert pooled.missed == pytest.approx(miss)
        assert pooled.confusion == pytest.approx(conf)
        assert pooled.total == pytest.approx(total)

    def test_reference_speaker_cap_drops_least_active(self):
        reference = Annotation(
            "f",
            (
                (Segment(0, 2.0), "big"),
                (Segment(0, 0.2), "small"),
            ),
        )
        grid = FrameGrid(0.0, 0.1, 20)
        chunk = make_matrix(grid, [[1] * 20])
        capped = local_der([(chunk, Segment(0, 2))], reference, max_reference_speakers=1)
        assert capped.der == 0.0

    def test_empty_chunk_list_rejected(self):
        with pytest.raises(ValueError):
            local_der([], Annotation("f"))


class TestOracleClusterDer:
    def test_perfect_chunks_score_zero(self):
        reference = Annotation("f", ((Segment(0, 1.0), "A"), (Segment(0.6, 2.0), "B")))
        from diarkit.annotations import discretize

        chunks = []
        for start in (0.0, 1.0):
            window = Segment(start, start + 1.0)
            grid = FrameGrid(start, 0.05, 20)
            piece = crop(reference, window)
            sampled = discretize(piece, grid, piece.labels())
            values = np.zeros((20, 2))
            values[:, : sampled.values.shape[1]] = sampled.values[:, ::-1]  # permuted slots
            chunks.append((ActivityMatrix(grid, (0, 1), values, binary=True), window))
        breakdown = oracle_cluster_der(chunks, reference, frame_duration=0.05)
        assert breakdown.der == 0.0

    def test_all_zero_chunks_score_one(self):
        reference = Annotation("f", ((Segment(0, 2), "A"),))
        grid = FrameGrid(0.0, 0.1, 20)
        silent = ActivityMatrix(grid, (0, 1), np.zeros((20, 2)), binary=True)
        assert oracle_cluster_der([(silent, Segment(0, 2))], reference).der == 1.0

    def test_spurious_slot_counts_against_score(self):
        reference = Annotation("f", ((Segment(0, 1.0), "A"),))
        grid = FrameGrid(0.0, 0.1, 10)
        chunk = make_matrix(grid, [[1] * 10, [1] * 10])
        breakdown = oracle_cluster_der([(chunk, Segment(0, 1))], reference)
        assert breakdown.false_alarm == pytest.approx(1.0)
