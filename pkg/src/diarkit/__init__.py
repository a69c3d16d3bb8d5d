"""Speaker diarization toolkit.

Implements the non-neural machinery of a chunk-and-cluster diarization
pipeline: annotation timelines with RTTM I/O, the powerset multilabel
codec, permutation-invariant losses, DER scoring, agglomerative embedding
clustering, chunked pipeline orchestration, a selective state-space
forward kernel, and a conversation simulator for end-to-end verification.
"""

from .annotations import (
    ActivityMatrix,
    Annotation,
    CoverageTables,
    FrameGrid,
    RttmParseError,
    Segment,
    crop,
    discretize,
    emit_rttm,
    merge_annotations,
    parse_rttm,
    speaker_count_coverage,
    to_annotation,
)
from .clustering import (
    CHUNK_CLUSTERING_TABLE,
    ClusterAssignment,
    ClusteringConfig,
    EmbeddingItem,
    EmbeddingSet,
    embed_stub,
    hac_centroid,
    random_centroid_bank,
)
from .losses import (
    PermutationResult,
    bce,
    permutation_invariant_bce,
    permutation_invariant_powerset_ce,
)
from .metrics import (
    CorpusReport,
    DerBreakdown,
    UndefinedDerError,
    der,
    der_corpus,
    local_der,
    oracle_cluster_der,
)
from .pipeline import (
    DEFAULT_SLOTS_BY_CHUNK_SIZE,
    ChunkPlan,
    PipelineConfig,
    PipelineDiagnostics,
    Segmenter,
    aggregate,
    plan_chunks,
    run_pipeline,
    run_pipeline_precomputed,
    threshold_activities,
)
from .powerset import (
    PowersetCodec,
    build_codec,
    multilabel_to_powerset,
    one_hot,
    permute_classes,
    powerset_to_multilabel,
)
from .simulation import (
    AblationGrid,
    AblationReport,
    ChunkSimulation,
    ConversationSpec,
    NoiseSpec,
    SimulationError,
    generate_conversation,
    jitter_annotation,
    make_segmenter,
    make_stub_embedder,
    run_ablation,
    simulate_chunks,
    simulate_segmenter,
)
from .ssm import (
    MambaBlockParams,
    SsmParams,
    SsmSequenceInputs,
    bimamba_forward,
    finite_difference_check,
    mamba_block_forward,
    ssm_forward_scan,
    ssm_forward_sequential,
)

__version__ = "0.1.0"
