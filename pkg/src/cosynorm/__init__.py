"""Duration-controllable accent-normalization toolkit.

Train a flow-matching converter on synthetically accented source sequences
paired with clean native targets, then convert sources to native-style
feature sequences with the total duration inherited, fixed, or predicted.
"""

from .autodiff import (ConfigurationError, Module, Parameter, SGD, Tensor,
                       finite_diff_check, no_grad)
from .checkpoint import load_checkpoint, save_checkpoint
from .ctc import ctc_brute_force, ctc_greedy_decode, ctc_loss
from .datagen import (AccentRule, DatasetConfig, ManifestEntry, ToySpeaker,
                      ToyWorld, build_dataset)
from .decoder import (ConditionMask, DecoderConfig, SpeakerEmbedding,
                      VelocityDecoder, scale_positions)
from .duration import (DurationPredictor, DurationPredictorConfig,
                       DurationRatio, duration_cfm_loss, predict_ratio)
from .encoder import ContentFeatures, EncoderConfig, SpeechEncoder
from .flow import (GuidanceWeights, SamplerConfig, cfg_combine, cfm_loss,
                   euler_sample, sample_condition_mask)
from .pipeline import (ConversionModel, EvalReport, TrainConfig, convert,
                       evaluate, train, wer)

__all__ = [
    "AccentRule",
    "ConditionMask",
    "ConfigurationError",
    "ContentFeatures",
    "ConversionModel",
    "DatasetConfig",
    "DecoderConfig",
    "DurationPredictor",
    "DurationPredictorConfig",
    "DurationRatio",
    "EncoderConfig",
    "EvalReport",
    "GuidanceWeights",
    "ManifestEntry",
    "Module",
    "Parameter",
    "SGD",
    "SamplerConfig",
    "SpeakerEmbedding",
    "SpeechEncoder",
    "Tensor",
    "ToySpeaker",
    "ToyWorld",
    "TrainConfig",
    "VelocityDecoder",
    "build_dataset",
    "cfg_combine",
    "cfm_loss",
    "convert",
    "ctc_brute_force",
    "ctc_greedy_decode",
    "ctc_loss",
    "duration_cfm_loss",
    "euler_sample",
    "evaluate",
    "finite_diff_check",
    "load_checkpoint",
    "no_grad",
    "predict_ratio",
    "sample_condition_mask",
    "save_checkpoint",
    "scale_positions",
    "train",
    "wer",
]
