"""Unified open-text aerial detection and grounding tooling."""

__version__ = "0.1.0"

from .geometry import BoxCxCyWH, BoxXYXY, giou, iou, l1, to_normalized, to_pixel
from .data import (
    AggregatedSample,
    DatasetManifest,
    GroundingTriplet,
    GroundTruth,
    QueryEntry,
    aggregate_image_level,
    from_detection_annotations,
    naive_reformulate,
)
from .decomp import (
    Attribute,
    DecompositionResult,
    ValidationReport,
    build_prompt,
    decompose,
    mock_decompose,
    parse_response,
    truncate_attributes,
    validate,
)
from .supervision import (
    CorrespondenceSet,
    SamplerConfig,
    TextBatch,
    build_correspondence,
    full_batch,
    sample_ovad,
    sample_rsvg,
    verify_consistency,
)
from .head import HeadParams, LogitBlock, backward, dual_forward, gradcheck, similarity_logits
from .losses import (
    Assignment,
    LossParts,
    LossWeights,
    MalConfig,
    hungarian_match,
    localization_losses,
    mal,
    mal_grad,
    semantic_losses,
    total_loss,
)
from .inference import (
    Detection,
    aggregate_attr_to_query,
    decode,
    decode_from_attributes,
    select_top1_per_query,
)
from .metrics import (
    DetectionRecord,
    ExpressionOutcome,
    GroundTruthRecord,
    MetricReport,
    acc_at_05,
    attr_align,
    average_precision,
    map_coco,
)
from .toytrain import (
    ToyWorld,
    TrainConfig,
    WorldConfig,
    WorldSizes,
    evaluate_recovery,
    generate_world,
    train,
)
