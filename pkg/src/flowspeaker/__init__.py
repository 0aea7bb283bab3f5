"""Text-prompt-conditioned speaker embedding generation.

A prompt encoder maps a free-text speaker description to a diagonal-Gaussian
prior over a semantic space; an invertible flow couples that space to the
speaker-embedding space. Sampling the prior and inverting the flow yields
arbitrarily many distinct speakers matching one description. The package
also ships a synthetic attribute-clustered corpus, a direct-regression
baseline, and a metric suite that decides whether generated speakers are
novel or memorized.
"""

from .corpus import (
    CorpusConfig,
    PromptRecord,
    SpeakerRecord,
    generate_synthetic_corpus,
    load_corpus,
    speaker_dvector,
    split_same_speaker,
)
from .evaluation import (
    MetricsReport,
    SpeakerSets,
    attribute_accuracy,
    compute_metrics,
    diversity_check,
    nearest_distance,
    novelty_verdict,
)
from .flow import (
    FlowParameters,
    flow_forward,
    flow_inverse,
    init_flow_params,
    initialize_actnorms,
)
from .numerics import RngStream, cosine_distance, finite_diff_grad, gaussian_logpdf, slogdet
from .prompt_prior import (
    GaussianPrior,
    PromptEncoderConfig,
    PromptEncoderParams,
    PromptTokens,
    encode_prompt,
    init_encoder_params,
    sample_prior,
)
from .training import (
    Checkpoint,
    TrainConfig,
    generate_embeddings,
    load_checkpoint,
    nll_loss,
    save_checkpoint,
    train,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CorpusConfig",
    "FlowParameters",
    "GaussianPrior",
    "MetricsReport",
    "PromptEncoderConfig",
    "PromptEncoderParams",
    "PromptRecord",
    "PromptTokens",
    "RngStream",
    "SpeakerRecord",
    "SpeakerSets",
    "TrainConfig",
    "attribute_accuracy",
    "compute_metrics",
    "cosine_distance",
    "diversity_check",
    "encode_prompt",
    "finite_diff_grad",
    "flow_forward",
    "flow_inverse",
    "gaussian_logpdf",
    "generate_embeddings",
    "generate_synthetic_corpus",
    "init_encoder_params",
    "init_flow_params",
    "initialize_actnorms",
    "load_checkpoint",
    "load_corpus",
    "nearest_distance",
    "nll_loss",
    "novelty_verdict",
    "sample_prior",
    "save_checkpoint",
    "slogdet",
    "speaker_dvector",
    "split_same_speaker",
    "train",
    "train_step",
]
