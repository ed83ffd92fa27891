from .learners import (
    KINDS,
    AdamLearner,
    BgdLearner,
    CmamlLearner,
    ConfigError,
    Learner,
    LearnerConfig,
    MamlLearner,
    MetaBgdLearner,
    StepDiagnostics,
    make_learner,
    shift_detected,
    update_modulation,
)
from .optim import AdamState, BgdState, adam_step, bgd_step
from .pretrain import (
    PretrainConfig,
    PretrainResult,
    TrainingError,
    adaptation_accuracy,
    meta_loss,
    pretrain_maml,
)
