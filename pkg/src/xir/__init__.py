"""Two-tower retrieval training with importance-resampled in-batch negatives."""

from .data import (
    EmptyDatasetError,
    Interaction,
    InteractionStore,
    PopularityTable,
    compute_popularity,
    load_interactions,
    load_split,
    popularity_from_probs,
    save_interactions,
    split_per_user,
)
from .diagnostics import (
    BoundTerms,
    DistributionReport,
    GradientBiasReport,
    evaluate_model,
    gradient_bias,
    ndcg_at_k,
    recall_at_k,
    tv_and_kl,
    verify_lemma31,
    verify_theorem31,
)
from .losses import (
    EncodedCandidates,
    LossBatchOutput,
    OracleScaleError,
    bir_loss,
    full_softmax_loss,
    sampled_softmax_loss,
    xir_loss,
)
from .model import (
    AdamState,
    CheckpointFormatError,
    MlpTowerSpec,
    NonFiniteGradientError,
    TwoTowerModel,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    score_batch,
    tower_forward_backward,
)
from .samplers import (
    EmptySupportError,
    ResampleSet,
    SampleCache,
    StreamFreqEstimator,
    bir_resample,
    bir_weights,
    cache_resample,
    categorical_draw,
    mns_candidates,
    stream_freq_update_and_estimate,
    update_occurrence_and_cache,
)
from .synthetic import generate_synthetic
from .train import METHODS, EpochRecord, RunConfig, TrainingAbortedError, train_run

__version__ = "0.1.0"
