"""Command-line interface binding all toolkit modules.

Exit codes: 0 success, 1 usage error, 2 domain or validation error.
All commands are deterministic under a fixed --seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .annotations import (
    Annotation,
    RttmParseError,
    emit_rttm,
    parse_rttm,
    speaker_count_coverage,
)
from .clustering import ClusteringConfig, EmbeddingSet, hac_centroid, random_centroid_bank
from .losses import bce, permutation_invariant_bce, permutation_invariant_powerset_ce
from .metrics import UndefinedDerError, der_corpus, local_der
from .pipeline import (
    FrameGrid,
    PipelineConfig,
    aggregate,
    load_chunk_manifest,
    plan_chunks,
    run_pipeline,
    run_pipeline_precomputed,
    threshold_activities,
)
from .powerset import build_codec, first_frame_exceeding, multilabel_to_powerset, one_hot, powerset_to_multilabel
from .simulation import (
    AblationGrid,
    ConversationSpec,
    NoiseSpec,
    SimulationError,
    generate_conversation,
    make_segmenter,
    make_stub_embedder,
    run_ablation,
    simulate_chunks,
)
from .ssm import SsmParams, SsmSequenceInputs, finite_difference_check, ssm_forward_scan, ssm_forward_sequential

log = logging.getLogger("diarkit")


class _Parser(argparse.ArgumentParser):
    # argparse defaults to exit code 2 for usage errors; this toolkit
    # reserves 2 for domain errors.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _read_matrix_csv(path: str) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            rows.append([float(cell) for cell in line.split(",")])
    return np.asarray(rows, dtype=np.float64)


def _write_matrix_csv(path: str, matrix: np.ndarray):
    lines = [",".join(f"{cell:.10g}" for cell in row) for row in np.atleast_2d(matrix)]
    Path(path).write_text("\n".join(lines) + "\n")


def _load_annotations(path: str) -> list[Annotation]:
    return parse_rttm(Path(path).read_text())


def _score_csv(files) -> str:
    lines = ["uri,fa,miss,conf,total,der"]
    for uri, bd in files:
        lines.append(
            f"{uri},{bd.false_alarm:.3f},{bd.missed:.3f},{bd.confusion:.3f},"
            f"{bd.total:.3f},{bd.der:.6f}"
        )
    return "\n".join(lines) + "\n"


def cmd_score(args) -> int:
    hyps = {a.uri: a for a in _load_annotations(args.hyp)}
    refs = {a.uri: a for a in _load_annotations(args.ref)}
    missing = sorted(set(hyps) - set(refs))
    if missing:
        print(f"error: no reference for hypothesis uri(s): {', '.join(missing)}", file=sys.stderr)
        return 2
    group_map = None
    if args.group_by:
        group_map = json.loads(Path(args.group_by).read_text())
    pairs = [(hyps.get(uri, Annotation(uri)), refs[uri]) for uri in refs]
    report = der_corpus(
        pairs,
        collar=args.collar,
        frame_duration=args.frame,
        group_by=(lambda uri: group_map.get(uri, uri)) if group_map else None,
    )
    csv_text = _score_csv(report.files)
    summary = {
        "macro_der": report.macro_der,
        "micro": report.micro.as_dict(),
        "groups": dict(report.group_der),
    }
    if args.out_csv:
        Path(args.out_csv).write_text(csv_text)
    else:
        print(csv_text, end="")
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(summary, indent=2) + "\n")
    print(f"macro DER {report.macro_der:.6f}  micro DER {report.micro.der:.6f}")
    return 0


def cmd_score_local(args) -> int:
    manifest = load_chunk_manifest(args.manifest)
    refs = {a.uri: a for a in _load_annotations(args.ref)}
    uri = manifest.get("uri", next(iter(refs)))
    if uri not in refs:
        print(f"error: no reference for uri {uri!r}", file=sys.stderr)
        return 2
    breakdown = local_der(
        manifest["local"],
        refs[uri],
        threshold=args.threshold,
        collar=args.collar,
        frame_duration=args.frame,
        max_reference_speakers=args.max_ref_speakers,
    )
    print(json.dumps({"uri": uri, **breakdown.as_dict()}, indent=2))
    return 0


def cmd_powerset(args) -> int:
    codec = build_codec(args.n, args.k)
    if args.mode == "info":
        print(json.dumps(codec.to_json_dict(), indent=2))
        print(f"classes: {codec.num_classes}", file=sys.stderr)
        return 0
    if not args.infile:
        print("error: encode/decode need --in", file=sys.stderr)
        return 2
    matrix = _read_matrix_csv(args.infile)
    if args.mode == "encode":
        over = first_frame_exceeding(matrix, args.k)
        if over is not None:
            print(
                f"error: frame {over} has more than {args.k} active speakers", file=sys.stderr
            )
            return 2
        indices = multilabel_to_powerset(codec, matrix)
        out = "\n".join(str(int(i)) for i in np.atleast_1d(indices)) + "\n"
    else:  # decode
        if matrix.shape[1] == 1:  # column of class indices
            matrix = one_hot(matrix[:, 0].astype(int), codec.num_classes)
        multilabel = powerset_to_multilabel(codec, matrix)
        out = "\n".join(",".join(f"{v:.10g}" for v in row) for row in np.atleast_2d(multilabel)) + "\n"
    if args.out:
        Path(args.out).write_text(out)
    else:
        print(out, end="")
    return 0


def cmd_loss(args) -> int:
    prediction = _read_matrix_csv(args.pred)
    reference = _read_matrix_csv(args.ref)
    if args.powerset:
        codec = build_codec(args.n, args.k)
        result = permutation_invariant_powerset_ce(codec, prediction, reference)
        kind = "powerset_ce"
    else:
        result = permutation_invariant_bce(prediction, reference)
        kind = "bce"
    print(
        json.dumps(
            {
                "loss_kind": kind,
                "loss": result.loss,
                "permutation": list(result.permutation),
                "plain_bce": bce(prediction, reference) if not args.powerset else None,
            }
        )
    )
    return 0


def cmd_cluster(args) -> int:
    embeddings = EmbeddingSet.from_json_dict(json.loads(Path(args.embeddings).read_text()))
    config = ClusteringConfig(args.threshold, args.min_cluster_size)
    assignment = hac_centroid(embeddings, config)
    out = {
        "n_clusters": assignment.n_clusters,
        "assignments": [
            {"chunk": chunk, "slot": slot, "cluster": cluster}
            for (chunk, slot), cluster in sorted(assignment.assignments.items())
        ],
    }
    text = json.dumps(out, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def cmd_aggregate(args) -> int:
    manifest = load_chunk_manifest(args.manifest)
    local = manifest["local"]
    frame = local[0][0].grid.frame_duration
    labels = sorted({label for matrix, _ in local for label in matrix.speakers}, key=str)
    end = max(window.end for _, window in local)
    grid = FrameGrid(0.0, frame, int(np.ceil(end / frame - 1e-9)))
    combined = aggregate(local, labels, grid)
    if args.out_rttm:
        annotation = _to_annotation_cli(combined, args.threshold, manifest.get("uri", "recording"))
        Path(args.out_rttm).write_text(emit_rttm([annotation]))
    if args.out:
        from .pipeline import activity_matrix_to_json_dict

        Path(args.out).write_text(json.dumps(activity_matrix_to_json_dict(combined)) + "\n")
    return 0


def _to_annotation_cli(matrix, threshold, uri):
    from .annotations import to_annotation

    return to_annotation(threshold_activities(matrix, threshold), uri=uri)


def cmd_simulate(args) -> int:
    spec = ConversationSpec(
        duration=args.duration,
        n_speakers=args.n_speakers,
        mean_turn=args.mean_turn,
        overlap_ratio=args.overlap,
        max_simultaneous=args.max_simultaneous,
        seed=args.seed,
    )
    annotation = generate_conversation(spec, uri=args.uri)
    text = emit_rttm([annotation])
    if args.out_rttm:
        Path(args.out_rttm).write_text(text)
    else:
        print(text, end="")
    if args.out_spec:
        Path(args.out_spec).write_text(json.dumps(spec.to_json_dict(), indent=2) + "\n")
    return 0


def cmd_stats(args) -> int:
    annotations = []
    for path in args.ref:
        annotations.extend(_load_annotations(path))
    tables = speaker_count_coverage(
        annotations,
        chunk_sizes=[float(w) for w in args.chunk_sizes.split(",")],
        frame_rate=args.frame_rate,
        chunk_step=args.step,
    )
    if args.out_chunk_csv:
        Path(args.out_chunk_csv).write_text(tables.per_chunk_csv())
    else:
        print(tables.per_chunk_csv(), end="")
    if args.out_frame_csv:
        Path(args.out_frame_csv).write_text(tables.per_frame_csv())
    else:
        print(tables.per_frame_csv(), end="")
    return 0


def _run_from_simulation(args, sim_spec: dict) -> int:
    spec = ConversationSpec.from_json_dict({**sim_spec, "seed": sim_spec.get("seed", args.seed)})
    noise = NoiseSpec.from_json_dict(sim_spec.get("noise", {}))
    embedding = sim_spec.get("embedding", {})
    dim = int(embedding.get("dim", 32))
    noise_scale = float(embedding.get("noise_scale", 0.0))
    frame_rate = float(sim_spec.get("frame_rate", 100.0))

    reference = generate_conversation(spec)
    config = _pipeline_config(args, chunk_size=args.chunk_size or 10.0)
    plan = plan_chunks(spec.duration, config.chunk_size, config.step)
    sims = simulate_chunks(
        reference, plan, config.n_speakers_per_chunk, noise, frame_rate, seed=spec.seed
    )
    bank = random_centroid_bank(
        reference.labels(), dim, np.random.default_rng((spec.seed, 0xBA2C))
    )
    segmenter = make_segmenter(sims, config.n_speakers_per_chunk, frame_rate)
    embedder = make_stub_embedder(sims, bank, noise_scale, seed=spec.seed)
    hypothesis, diagnostics = run_pipeline(
        spec.duration, segmenter, embedder, config, uri=reference.uri
    )

    from .metrics import der, oracle_cluster_der

    global_bd = der(hypothesis, reference, collar=args.collar)
    local_bd = local_der(
        diagnostics.local, reference, config.threshold, args.collar,
        max_reference_speakers=config.n_speakers_per_chunk,
    )
    oracle_bd = oracle_cluster_der(diagnostics.local, reference, config.threshold, args.collar)
    report = {
        "uri": reference.uri,
        "n_clusters": diagnostics.n_clusters,
        "n_true_speakers": len(reference.labels()),
        "global": global_bd.as_dict(),
        "local": local_bd.as_dict(),
        "oracle": oracle_bd.as_dict(),
        "timings": diagnostics.timings,
    }
    _emit_run_outputs(args, hypothesis, report)
    return 0


def _pipeline_config(args, chunk_size: float) -> PipelineConfig:
    clustering = None
    if args.cluster_threshold is not None or args.min_cluster_size is not None:
        defaults = ClusteringConfig.for_chunk_size(chunk_size)
        clustering = ClusteringConfig(
            args.cluster_threshold if args.cluster_threshold is not None else defaults.threshold,
            args.min_cluster_size if args.min_cluster_size is not None else defaults.min_cluster_size,
        )
    return PipelineConfig(
        chunk_size=chunk_size,
        step=args.step or 0.0,
        threshold=args.threshold,
        clustering=clustering,
    )


def _emit_run_outputs(args, hypothesis: Annotation, report: dict):
    if args.out_rttm:
        Path(args.out_rttm).write_text(emit_rttm([hypothesis]))
    if args.report_json:
        Path(args.report_json).write_text(json.dumps(report, indent=2) + "\n")
    summary = report.get("global")
    if summary:
        print(f"global DER {summary['der']:.6f}  (N'={report['n_clusters']})")
    else:
        print(f"N'={report['n_clusters']}")


def cmd_run(args) -> int:
    payload = json.loads(Path(args.infile).read_text())
    if payload.get("kind", "simulation") == "simulation" or "n_speakers" in payload:
        return _run_from_simulation(args, payload)

    manifest = load_chunk_manifest(args.infile)
    if "embeddings_path" not in manifest:
        print("error: chunk manifest must reference an embeddings file", file=sys.stderr)
        return 2
    embeddings = EmbeddingSet.from_json_dict(
        json.loads(Path(manifest["embeddings_path"]).read_text())
    )
    chunk_size = args.chunk_size or manifest.get("chunk_size", 10.0)
    config = _pipeline_config(args, chunk_size=chunk_size)
    frame_rate = float(manifest.get("frame_rate", 1.0 / manifest["local"][0][0].grid.frame_duration))
    hypothesis, diagnostics = run_pipeline_precomputed(
        manifest["local"], embeddings, config, frame_rate, uri=manifest.get("uri", "recording")
    )
    report = {
        "uri": hypothesis.uri,
        "n_clusters": diagnostics.n_clusters,
        "timings": diagnostics.timings,
    }
    if args.ref:
        from .metrics import der

        reference = {a.uri: a for a in _load_annotations(args.ref)}[hypothesis.uri]
        report["global"] = der(hypothesis, reference, collar=args.collar).as_dict()
    _emit_run_outputs(args, hypothesis, report)
    return 0


def cmd_ablation(args) -> int:
    spec = ConversationSpec.from_json_dict(json.loads(Path(args.spec).read_text()))
    noise_levels = tuple(
        NoiseSpec(frame_flip_prob=p, boundary_jitter=args.jitter) for p in args.flip_probs
    )
    grid = AblationGrid(
        chunk_sizes=tuple(args.chunk_sizes),
        segmenter_noise=noise_levels,
        embedding_noise=tuple(args.embedding_noise),
    )
    report = run_ablation(grid, spec, seeds=list(range(args.n_seeds)))
    if args.out_csv:
        Path(args.out_csv).write_text(report.to_csv())
    if args.out_json:
        Path(args.out_json).write_text(json.dumps(report.summary(), indent=2) + "\n")
    print(f"{len(report.rows)} ablation rows")
    return 0


def cmd_ssm_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst_scan = 0.0
    for _ in range(args.trials):
        d_model = int(rng.integers(1, 5))
        d_state = int(rng.integers(1, 9))
        frames = int(rng.integers(1, 513))
        params = SsmParams.random(d_model, d_state, rng)
        inputs = SsmSequenceInputs.random(frames, d_model, d_state, rng)
        sequential = ssm_forward_sequential(params, inputs)
        scan = ssm_forward_scan(params, inputs)
        worst_scan = max(worst_scan, float(np.abs(sequential - scan).max()))

    params = SsmParams.random(3, 4, rng)
    inputs = SsmSequenceInputs.random(16, 3, 4, rng)
    gradient_error = finite_difference_check(ssm_forward_sequential, params, inputs, epsilon=1e-5)

    print(f"scan max deviation:     {worst_scan:.3e}")
    print(f"gradient max rel error: {gradient_error:.3e}")
    ok = worst_scan < 1e-6 and gradient_error < 1e-4
    print("ssm-check: " + ("PASS" if ok else "FAIL"))
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true", help="enable debug logging")
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument(
        "--threads", type=int, default=1,
        help="reserved; computations currently run single-threaded",
    )

    parser = _Parser(prog="diarkit", description=__doc__, parents=[common])
    parser.add_argument("--version", action="version", version=f"diarkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name, **kwargs):
        return sub.add_parser(name, parents=[common], **kwargs)

    p = add_parser("score", help="score hypothesis RTTM against reference RTTM")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--collar", type=float, default=0.0)
    p.add_argument("--frame", type=float, default=0.01)
    p.add_argument("--group-by", help="JSON file mapping uri -> dataset group")
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.set_defaults(func=cmd_score)

    p = add_parser("score-local", help="pooled DER of chunk-level segmentations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--collar", type=float, default=0.0)
    p.add_argument("--frame", type=float, default=0.01)
    p.add_argument("--max-ref-speakers", type=int)
    p.set_defaults(func=cmd_score_local)

    p = add_parser("powerset", help="powerset codec info / encode / decode")
    p.add_argument("--mode", choices=("info", "encode", "decode"), default="info")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--in", dest="infile")
    p.add_argument("--out")
    p.set_defaults(func=cmd_powerset)

    p = add_parser("loss", help="permutation-invariant loss of matrix files")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--powerset", action="store_true")
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--k", type=int, default=0)
    p.set_defaults(func=cmd_loss)

    p = add_parser("cluster", help="agglomerative clustering of an embeddings file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--min-cluster-size", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cluster)

    p = add_parser("aggregate", help="overlap-average relabeled chunks from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.add_argument("--out-rttm")
    p.set_defaults(func=cmd_aggregate)

    p = add_parser("simulate", help="generate a synthetic conversation RTTM")
    p.add_argument("--duration", type=float, default=300.0)
    p.add_argument("--n-speakers", type=int, default=4)
    p.add_argument("--mean-turn", type=float, default=2.5)
    p.add_argument("--overlap", type=float, default=0.2)
    p.add_argument("--max-simultaneous", type=int, default=2)
    p.add_argument("--uri")
    p.add_argument("--out-rttm")
    p.add_argument("--out-spec")
    p.set_defaults(func=cmd_simulate)

    p = add_parser("stats", help="speaker-count coverage tables over RTTM files")
    p.add_argument("--ref", nargs="+", required=True)
    p.add_argument("--chunk-sizes", default="5,10,30,50")
    p.add_argument("--frame-rate", type=float, default=100.0)
    p.add_argument("--step", type=float)
    p.add_argument("--out-chunk-csv")
    p.add_argument("--out-frame-csv")
    p.set_defaults(func=cmd_stats)

    p = add_parser("run", help="run the pipeline on a simulation spec or chunk manifest")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--ref")
    p.add_argument("--chunk-size", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--cluster-threshold", type=float)
    p.add_argument("--min-cluster-size", type=int)
    p.add_argument("--collar", type=float, default=0.0)
    p.add_argument("--out-rttm")
    p.add_argument("--report-json")
    p.set_defaults(func=cmd_run)

    p = add_parser("ablation", help="sweep chunk sizes and noise levels")
    p.add_argument("--spec", required=True, help="conversation spec JSON")
    p.add_argument("--chunk-sizes", type=float, nargs="+", default=[10.0])
    p.add_argument("--flip-probs", type=float, nargs="+", default=[0.0])
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--embedding-noise", type=float, nargs="+", default=[0.0])
    p.add_argument("--n-seeds", type=int, default=3)
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.set_defaults(func=cmd_ablation)

    p = add_parser("ssm-check", help="run the state-space kernel verification suite")
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_ssm_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (RttmParseError, UndefinedDerError, SimulationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
