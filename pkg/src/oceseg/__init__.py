"""Unsupervised object-centric embeddings for cell instance segmentation.

A small valid-convolution U-Net is trained self-supervised to predict, per
pixel, its offset relative to the containing object's center.  Instances
then fall out of mean-shift clustering of the per-pixel center estimates,
with noise-variance background detection and distance-based shrinkage.
"""

from .autodiff import (
    Tape,
    Tensor,
    conv2d_valid,
    crop_concat,
    gather_coords,
    maxpool2,
    relu,
    upsample_nearest2,
)
from .errors import (
    ConfigError,
    DegenerateError,
    FormatError,
    PlacementError,
    ShapeError,
)
from .loss import LossConfig, PairSet, oce_loss, pair_term_and_reg, sample_pairs, sigmoid_distance
from .metrics import (
    MatchResult,
    detection_scores,
    format_score_table,
    iou_matrix,
    match_at_threshold,
    scores_from_counts,
    seg_score,
    seg_score_dataset,
    threshold_sweep,
)
from .network import (
    CONTEXT,
    AdamState,
    ModelConfig,
    ModelParams,
    TrainConfig,
    TrainResult,
    adam_step,
    forward,
    init_params,
    load_checkpoint,
    lr_schedule,
    parameter_count,
    save_checkpoint,
    train,
)
from .segmentation import (
    SegmenterConfig,
    bandwidth_search,
    detect_foreground,
    embedding_variance,
    mean_shift,
    mean_shift_reference,
    otsu_threshold,
    predict_full,
    salt_pepper,
    segment,
    segment_image,
    shrink_instances,
)
from .synth import SceneSpec, build_pseudo_dataset, generate_dataset, object_template, synth_generate
from .theory import (
    OccurrenceIndex,
    OffsetDecomposition,
    OffsetStats,
    decompose_offsets,
    expected_offset_mc,
    make_scenes,
    offset_report,
    place_scene,
)

__version__ = "0.1.0"
