"""Polarity-prompt contrastive decoding.

Token-level contrastive decoding over a pair of opposing prompts, a
knowledge-token capturing probe, and a contrastive-attention image
refinement pipeline for vision-language models.
"""

from promptcd.distribution import (
    InvalidInputError,
    PolarityPromptPair,
    TokenDistribution,
    Vocabulary,
    argmax,
    log_probs,
    rank_of,
    softmax,
)
from promptcd.backends import (
    BackendError,
    DistributionProvider,
    HttpProvider,
    LogitServerEndpoint,
    ProtocolError,
    SizingError,
    TableModelSpec,
    TableProvider,
    conflict_scenario,
    http_provider,
    table_provider,
)
from promptcd.decoder import (
    ContrastiveConfig,
    ContrastiveScores,
    DecodeResult,
    DecodeTrace,
    DualContext,
    TraceStep,
    adjusted_distribution,
    contrastive_scores,
    decode,
    decode_step,
    plausibility_head,
    sample_token,
)
from promptcd.probe import (
    BehaviorMetrics,
    CaptureResult,
    ConflictRecord,
    aggregate_metrics,
    capture,
    classify_stubborn,
    common_membership,
    memorization_ratio,
    score_response,
)
from promptcd.attention import (
    AttentionStack,
    FusionSpec,
    Region,
    RegionSet,
    RefineSpec,
    carve,
    connected_components,
    contrast_attention,
    fuse_layers,
    percentile_threshold,
    refine_image,
    select_regions,
)

__version__ = "0.1.0"
