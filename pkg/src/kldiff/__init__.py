"""Text-conditioned Gaussian diffusion trained with a KL-weighted variational objective."""
from .schedules import (GuidanceRamp, KLWeightConfig, NoiseSchedule, guidance_gate,
                        kl_weight, kl_weights, make_schedule)
from .core import (GaussianParams, LossBreakdown, TrainingBatch, elbo_loss, gaussian_kl,
                   make_batch, mu_from_eps, q_posterior, q_sample_closed, q_sample_step,
                   weighted_loss)
from .conditioning import (TextContext, Vocabulary, cross_attention, default_vocabulary,
                           embed_text, time_modulate, tokenize)
from .denoiser import DenoiserConfig, DenoiserParams, backward, init_params, predict_eps
from .config import TrainConfig, load_config, parse_config
from .sampler import p_sample_step, sample
from .metrics import (AttributeOracle, FeatureExtractor, alignment_score, feature_stats,
                      frechet_distance, inception_score)
from .trainer import Trainer, ablation_mode, train

__version__ = "0.1.0"

__all__ = [
    "AttributeOracle",
    "DenoiserConfig",
    "DenoiserParams",
    "FeatureExtractor",
    "GaussianParams",
    "GuidanceRamp",
    "KLWeightConfig",
    "LossBreakdown",
    "NoiseSchedule",
    "TextContext",
    "TrainConfig",
    "Trainer",
    "TrainingBatch",
    "Vocabulary",
    "ablation_mode",
    "alignment_score",
    "backward",
    "cross_attention",
    "default_vocabulary",
    "elbo_loss",
    "embed_text",
    "feature_stats",
    "frechet_distance",
    "gaussian_kl",
    "guidance_gate",
    "inception_score",
    "init_params",
    "kl_weight",
    "kl_weights",
    "load_config",
    "make_batch",
    "make_schedule",
    "mu_from_eps",
    "p_sample_step",
    "parse_config",
    "predict_eps",
    "q_posterior",
    "q_sample_closed",
    "q_sample_step",
    "sample",
    "time_modulate",
    "tokenize",
    "train",
    "weighted_loss",
]
