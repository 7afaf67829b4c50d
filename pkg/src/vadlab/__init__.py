"""Desk-scale toolkit for snippet-level anomaly detection experiments.

Procedurally generates two-domain labeled feature datasets related by a
known invertible affine shift, adapts source features to the target domain
with class-wise adversarial training, trains weakly- or fully-supervised
snippet anomaly detectors, and evaluates everything with exact frame-level
ROC-AUC.
"""

from .adapt import (
    AdaptationHyper,
    ClassAdaptationResult,
    DEFAULT_CLASS_MAP,
    adapt_dataset,
    adaptor_loss,
    apply_adaptor,
    critic_loss,
    interpolate,
    train_class_adaptation,
)
from .detector import (
    Detector,
    DetectorHyper,
    MODE_SUPERVISED,
    MODE_WEAK,
    load_detector,
    mil_loss,
    save_detector,
    score_video,
    supervised_loss,
    topk_mean,
    train_detector,
)
from .errors import (
    ContractError,
    FormatError,
    UndefinedMetricError,
    VadlabError,
    ValidationError,
)
from .evaluate import (
    AucReport,
    ExperimentMatrixConfig,
    MatrixReport,
    evaluate_detector,
    experiment_matrix,
    multi_seed_average,
    roc_auc,
)
from .nn import (
    AdamState,
    MlpGrads,
    MlpParams,
    MlpSpec,
    adam_step,
    init_adam,
    init_mlp,
    input_gradient,
    load_mlp,
    mlp_forward,
    param_gradients,
    penalty_gradients,
    save_mlp,
)
from .scenegen import (
    GenerationSpec,
    LocationAssignment,
    SceneConfig,
    ShiftSpec,
    World,
    assign_location,
    build_world,
    generate_dataset,
    generate_video,
    load_shift,
    oracle_align,
    oracle_align_dataset,
    sample_config,
    save_shift,
)
from .store import (
    DatasetStats,
    FeatureCache,
    LoadedVideo,
    Manifest,
    SnippetMatrix,
    VideoRecord,
    balanced_merge,
    dataset_stats,
    load_manifest,
    load_videos,
    read_feature_file,
    save_manifest,
    snippet_labels,
    stats_csv,
    write_feature_file,
)

__version__ = "0.1.0"
