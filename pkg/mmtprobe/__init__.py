"""Probe whether multimodal machine translation models use visual features.

Degrade source sentences (color deprivation, entity masking, progressive
masking), train text-only and multimodal encoder-decoders, decode with
congruent, incongruent or blinded image features and compare the results.

Run a whole grid with `run_experiment(ExperimentConfig.from_toml(...))` or the
`mmtprobe` command.

"""

from ._core import (
    AnnotationError,
    CongruenceMode,
    ConfigurationError,
    ContractError,
    DataPaths,
    DataSplit,
    DegenerateBatchError,
    DegradationConfig,
    DegradationWarning,
    DimensionError,
    ExperimentConfig,
    FeatureFormatError,
    ModelConfig,
    NonFiniteLossError,
    SyntheticTaskSpec,
    TokenIndexError,
    TrainConfig,
    VocabularyMismatchError,
)
from ._decoding import Hypothesis, beam_search, greedy_decode, translate_corpus
from ._features import FeatureSet, remap_order, synthesize_features
from ._formats.mmtf import load_features, write_features
from ._metrics import (
    MetricReport,
    bleu,
    color_accuracy,
    gain_drop_report,
    meteor_lite,
    significance_test,
)
from ._models import TranslationModel
from ._synthetic import generate_synthetic
from ._text import (
    DegradationSpec,
    EntityAnnotations,
    ParallelSample,
    Vocabulary,
    build_vocab,
    degrade_corpus,
    degrade_sentence,
    tokenize,
)
from ._training import train
from .experiment import report, run_experiment
from .version import __version__

__all__ = [
    "AnnotationError",
    "ConfigurationError",
    "CongruenceMode",
    "ContractError",
    "DataPaths",
    "DataSplit",
    "DegenerateBatchError",
    "DegradationConfig",
    "DegradationSpec",
    "DegradationWarning",
    "DimensionError",
    "EntityAnnotations",
    "ExperimentConfig",
    "FeatureFormatError",
    "FeatureSet",
    "Hypothesis",
    "MetricReport",
    "ModelConfig",
    "NonFiniteLossError",
    "ParallelSample",
    "SyntheticTaskSpec",
    "TokenIndexError",
    "TrainConfig",
    "TranslationModel",
    "Vocabulary",
    "VocabularyMismatchError",
    "__version__",
    "beam_search",
    "bleu",
    "build_vocab",
    "color_accuracy",
    "degrade_corpus",
    "degrade_sentence",
    "gain_drop_report",
    "generate_synthetic",
    "greedy_decode",
    "load_features",
    "meteor_lite",
    "remap_order",
    "report",
    "run_experiment",
    "significance_test",
    "synthesize_features",
    "tokenize",
    "train",
    "translate_corpus",
]
