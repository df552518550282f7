"""Few-shot object detection toolkit.

A shared CNN backbone embeds per-class support crops into channel
"exciting factors" that specialize a query feature map through
depth-wise cross correlation; a compact two-stage detector then runs
once per class on the specialized features. Training is two-phase:
base classes first, then fine-tuning on a k-shot-balanced set of base
and novel classes. Plain-detector baselines, a VOC-style AP evaluator,
and a synthetic-shapes fixture dataset round out the toolkit.
"""

from .backbone import Backbone, FeatureMap, SupportEmbedding
from .boxes import decode_deltas, encode_deltas, iou, iou_matrix, nms
from .episodes import Episode, KShotSet, build_episode, sample_kshot
from .errors import (
    AnnotationError,
    CapacityError,
    ConfigError,
    DatasetError,
    FsdetError,
    MissingArtifactError,
    SamplingError,
    ShapeError,
    TrainingDiverged,
    UsageError,
    VocabularyError,
)
from .evaluate import (
    BenchmarkGrid,
    EvalData,
    EvalResult,
    compute_ap,
    evaluate_detector,
    plot_results,
    run_benchmark,
)
from .detector import (
    AnchorConfig,
    Detection,
    Proposal,
    RoIHead,
    RPN,
    fuse_results,
    write_detections_jsonl,
)
from .fixtures import FixtureSpec, generate_fixture
from .highlight import (
    CoarseHighlighter,
    ExcitingFactor,
    FineHighlighter,
    HighlightModule,
    apply_highlight,
    dw_cross_correlate,
)
from .ingest import (
    AnnotatedImage,
    ClassSplit,
    ClassVocabulary,
    SupportCrop,
    build_support_pool,
    crop_supports,
    load_dataset,
    make_split,
    parse_annotations,
    partition_train_test,
)
from .losses import (
    BalancedSampler,
    GroundTruth,
    LossConfig,
    LossReport,
    ModelOutputs,
    StageOutputs,
    compute_loss,
    match_boxes,
    training_loss,
)
from .model import FewShotDetector, ModelConfig
from .train import (
    TrainConfig,
    TrainingData,
    TrainingResult,
    base_training_data,
    finetune_novel,
    finetune_training_data,
    joint_training_data,
    kshot_training_data,
    run_baseline,
    run_training,
    train_base,
)

__version__ = "0.1.0"
