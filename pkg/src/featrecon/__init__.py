"""Feature-space image reconstruction against a blackbox feature extractor.

Pipeline: train the extractor (oracle), learn an invertible latent metric
(flow), distill a gradient surrogate (distiller), then train a
feature-conditional progressive generator (gan, trainer) and evaluate
identity preservation and image quality (evalkit).
"""

from .config import RunConfig, smoke_config
from .data import Dataset, load_dataset, make_digits
from .distiller import DistillConfig, StudentConfig, build_student, distill_student
from .errors import (
    CheckpointError,
    ConfigError,
    FeatreconError,
    FormatError,
    IngestionError,
    NumericError,
    TrainingDivergenceError,
)
from .flow import (
    ClassPrior,
    FlowModel,
    FlowTrainConfig,
    class_log_likelihood,
    flow_forward,
    flow_inverse,
    init_class_priors,
    train_flow,
)
from .gan import Critic, GanConfig, Generator, generate, discriminate, grow_stage, sample_background
from .losses import (
    DistillWeights,
    GaussianMoments,
    LossWeights,
    ScheduleState,
    bijective_loss,
    bijective_pair_loss,
    distill_distance,
    distillation_loss,
    gaussian_w2,
    gradient_penalty,
    discriminator_loss,
    generator_total_loss,
    latent_moments,
    recon_l1,
    schedule_weights,
)
from .oracle import (
    FeatureOracle,
    TeacherModel,
    cache_features,
    load_teacher,
    read_feature_cache,
    train_teacher,
    verify_pair,
    write_feature_cache,
)
from .trainer import GanTrainer, load_generator, train_gan

__version__ = "0.1.0"
