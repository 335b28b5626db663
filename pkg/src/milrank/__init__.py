"""Weakly-supervised abnormal-activity scoring.

Bags of video-segment features are scored by a small fully-connected network
trained with a four-term margin ranking loss plus temporal-smoothness and
sparsity constraints, then evaluated with ROC/AUC and false-alarm metrics.
"""

from .backend import BACKEND_NAME, available_backends
from .dataset import (
    Bag,
    DatasetManifest,
    SyntheticConfig,
    VideoEntry,
    aggregate_clips_to_segments,
    assemble_bag,
    generate_synthetic,
    load_bags,
    load_manifest,
    read_features,
    read_truth,
    save_manifest,
    write_features,
    write_truth,
)
from .evaluation import (
    EvalReport,
    ScoreTimeline,
    auc,
    evaluate,
    expand_segments_to_frames,
    false_alarm_rate,
    miss_rate,
    roc_curve,
)
from .gradcheck import GradcheckReport, run_all as run_gradcheck
from .loss import (
    LossBreakdown,
    LossConfig,
    SortedScores,
    bag_pair_loss,
    hinge_components,
    loss_subgradient,
    order_desc,
    regularizer,
    sparsity,
    temporal_smoothness,
)
from .scorer import (
    DropoutPlan,
    ForwardCache,
    ScorerGrads,
    ScorerParams,
    backprop_instance,
    init_params,
    load_model,
    save_model,
    score_bag,
    score_instance,
    score_matrix,
)
from .trainer import (
    AdagradState,
    TrainConfig,
    TrainLog,
    adagrad_step,
    batch_objective,
    sample_batch,
    train,
)

__version__ = "0.1.0"
