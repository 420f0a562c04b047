"""Two-stage long-tail class-incremental learning laboratory.

Stage 1 trains an MLP feature extractor with mixup-augmented incremental
losses; stage 2 realigns the classifier heads on Gaussian pseudo-features
drawn around class prototypes with a single global covariance estimated
from the most-populated base-task class.
"""

from .data import (
    Dataset,
    ExemplarBank,
    ScenarioSpec,
    TaskDataset,
    build_scenario,
    herding_select,
    load_csv,
    long_tail_counts,
    make_synthetic_clusters,
    update_exemplars,
)
from .experiment import ExperimentConfig, RunResult, load_config, run, sweep
from .metrics import (
    AccuracyMatrix,
    GroupReport,
    average_incremental_accuracy,
    decision_region_grid,
    evaluate,
    group_accuracy,
    persist_results,
)
from .nn import ClassifierBank, Model, MlpFeatureExtractor, SgdConfig
from .stage1 import (
    FrozenTeacher,
    MixupConfig,
    Stage1Config,
    incremental_loss,
    mixup_batch,
    sample_mixup_lambda,
    stage1_train,
)
from .stage2 import (
    AlignConfig,
    GlobalVariance,
    IncrementalState,
    ProtoBank,
    align_classifiers,
    compute_prototypes,
    estimate_global_variance,
    run_task,
    sample_pseudo_features,
)

__version__ = "0.1.0"
