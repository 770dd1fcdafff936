"""Core configuration models, exceptions and warnings shared by all modules.

Every configuration object is a pydantic model that can be stored and read as
JSON or TOML. Build an experiment directly:

my_experiment = ExperimentConfig(
    name="en-fr color",
    data=DataPaths(
        train=[DataSplit(src="train.en", tgt="train.fr", features="train.mmtf")],
        dev=DataSplit(src="dev.en", tgt="dev.fr", features="dev.mmtf"),
        test=DataSplit(src="test.en", tgt="test.fr", features="test.mmtf"),
    ),
    schemes=[DegradationConfig(variant="color")],
    systems=["NMT", "DIRECT"],
)

Or read it from a TOML file:

my_experiment = ExperimentConfig.from_toml("path/to/experiment.toml")
"""

import json
import tomllib
from copy import deepcopy
from enum import Enum
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing_extensions import Self

from mmtprobe.version import __version__

Fusion = Literal["NMT", "INIT", "DIRECT", "HIER"]
ALL_SYSTEMS: tuple[Fusion, ...] = ("NMT", "INIT", "HIER", "DIRECT")


class DimensionError(ValueError):
    """Tensor shapes are incompatible for an operation."""


class ContractError(ValueError):
    """A function was called in a way its contract does not allow."""


class ConfigurationError(ValueError):
    """A numeric or structural setting is outside its valid range."""


class AnnotationError(ValueError):
    """Entity annotations do not fit the sentence they annotate."""


class DegenerateBatchError(ValueError):
    """A batch has no position that contributes to the loss."""


class VocabularyMismatchError(ValueError):
    """Vocabularies do not match the ones a checkpoint was trained with."""


class FeatureFormatError(ValueError):
    """A binary file does not follow its declared layout."""

    def __init__(self, msg: str, offset: int) -> None:
        """Store the byte offset where reading failed."""
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class TokenIndexError(IndexError):
    """A token id does not address a row of an embedding table."""

    def __init__(self, msg: str, index: int) -> None:
        """Store the offending id."""
        super().__init__(msg)
        self.index = index


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, epoch: int, batch: int, parameter_norms: dict[str, float]) -> None:
        """Keep enough state to diagnose the divergence."""
        largest = sorted(parameter_norms.items(), key=lambda kv: -kv[1])[:5]
        summary = ", ".join(f"{name}={norm:.3g}" for name, norm in largest)
        super().__init__(
            f"Non-finite loss at epoch {epoch}, batch {batch}. Largest parameter norms: {summary}"
        )
        self.epoch = epoch
        self.batch = batch
        self.parameter_norms = parameter_norms


class DegradationWarning(UserWarning):
    """Possible issues with a degradation, e.g. a lexicon that masks nothing."""


class CongruenceMode(str, Enum):
    """How visual features are paired with sentences."""

    CONGRUENT = "congruent"
    INCONGRUENT = "incongruent"
    BLINDED = "blinded"


class PackageParams(BaseModel):
    """Package details - generated automatically.

    Attributes:
        version: mmt-probe version used to write the configuration, set
            automatically.

    """

    version: str = Field(default=__version__)
    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def _update_version(self) -> Self:
        """Update version when model is read in or created."""
        if self.version != __version__:
            return self.model_copy(update={"version": __version__})
        return self


def check_degradation_k(variant: str, k: int | None) -> None:
    """Progressive masking needs an even k in [0, 30], other variants none."""
    if variant == "progressive":
        if k is None:
            msg = "Progressive masking requires k."
            raise ValueError(msg)
        if not 0 <= k <= 30 or k % 2:
            msg = f"k must be an even integer in [0, 30], got {k}."
            raise ValueError(msg)
    elif k is not None:
        msg = f"k is only used by progressive masking, not '{variant}'."
        raise ValueError(msg)


class DegradationConfig(BaseModel):
    """Which source-side degradation to apply.

    Attributes:
        variant: One of none, color, entity or progressive.
        k: Number of leading tokens kept by progressive masking, an even
            number between 0 and 30. Only valid for the progressive variant.

    """

    variant: Literal["none", "color", "entity", "progressive"] = "none"
    k: int | None = None

    model_config = ConfigDict(extra="forbid", frozen=True)

    @model_validator(mode="after")
    def _check_k(self) -> Self:
        check_degradation_k(self.variant, self.k)
        return self

    @property
    def label(self) -> str:
        """Short name used for directories and table headers."""
        if self.variant == "progressive":
            return f"k{self.k}"
        return self.variant


class ModelConfig(BaseModel):
    """Architecture of an attentive encoder-decoder and its fusion variant.

    Attributes:
        fusion: NMT (text only), INIT (pooled features initialise the
            recurrent states), DIRECT (projected concatenation of text and
            image contexts) or HIER (second attention over both contexts).
        emb_dim: Size of source and target embeddings.
        hidden_dim: GRU units per direction.
        enc_layers: Number of bidirectional encoder layers.
        dec_layers: Recurrent blocks of the conditional GRU decoder, always 2.
        split_directions: Split `hidden_dim` across the two encoder directions
            instead of giving each direction `hidden_dim` units.
        dropout_src_emb: Dropout on source embeddings.
        dropout_enc_out: Dropout on encoder annotations.
        dropout_dec_out: Dropout on the decoder readout.
        tie_embeddings: Share the target embedding table with the output
            projection.
        src_vocab_size: Source vocabulary size, 0 until derived from data.
        tgt_vocab_size: Target vocabulary size, 0 until derived from data.
        feature_dim: Depth of the visual features.

    """

    fusion: Fusion = "NMT"
    emb_dim: int = Field(default=200, gt=0)
    hidden_dim: int = Field(default=400, gt=0)
    enc_layers: int = Field(default=2, ge=1)
    dec_layers: Literal[2] = 2
    split_directions: bool = False
    dropout_src_emb: float = Field(default=0.4, ge=0, lt=1)
    dropout_enc_out: float = Field(default=0.5, ge=0, lt=1)
    dropout_dec_out: float = Field(default=0.5, ge=0, lt=1)
    tie_embeddings: bool = True
    src_vocab_size: int = Field(default=0, ge=0)
    tgt_vocab_size: int = Field(default=0, ge=0)
    feature_dim: int = Field(default=2048, gt=0)

    model_config = ConfigDict(extra="forbid", frozen=True)

    @model_validator(mode="after")
    def _check_split(self) -> Self:
        """Splitting the hidden size across directions needs an even size."""
        if self.split_directions and self.hidden_dim % 2:
            msg = "hidden_dim must be even when split_directions is set."
            raise ValueError(msg)
        return self

    @property
    def direction_dim(self) -> int:
        """Units of one encoder direction."""
        return self.hidden_dim // 2 if self.split_directions else self.hidden_dim

    @property
    def ctx_dim(self) -> int:
        """Size of the encoder annotations (both directions concatenated)."""
        return 2 * self.direction_dim

    @property
    def feature_layout(self) -> Literal["pooled", "spatial"] | None:
        """Feature layout consumed by the fusion, None if features are ignored."""
        if self.fusion == "INIT":
            return "pooled"
        if self.fusion in ("DIRECT", "HIER"):
            return "spatial"
        return None


class TrainConfig(BaseModel):
    """Optimisation settings.

    Attributes:
        lr: ADAM learning rate.
        batch_size: Samples per mini-batch.
        clip_norm: Global gradient norm threshold.
        weight_decay: L2 decay factor.
        decay_mode: "coupled" adds the decay to the gradient, "decoupled"
            shrinks the weights after the update.
        patience: Epochs without dev improvement before stopping.
        max_epochs: Hard cap on the number of epochs.
        seed: Seed for initialisation, shuffling and dropout.
        eval_metric: Dev metric used for early stopping.
        dev_beam: Beam size for dev decoding, 1 means greedy.
        beta1: ADAM first moment decay.
        beta2: ADAM second moment decay.
        eps: ADAM denominator guard.

    """

    lr: float = Field(default=4e-4, gt=0)
    batch_size: int = Field(default=64, ge=1)
    clip_norm: float = Field(default=1.0, gt=0)
    weight_decay: float = Field(default=1e-5, ge=0)
    decay_mode: Literal["coupled", "decoupled"] = "coupled"
    patience: int = Field(default=10, ge=1)
    max_epochs: int = Field(default=100, ge=1)
    seed: int = 1
    eval_metric: Literal["meteor-lite", "bleu"] = "meteor-lite"
    dev_beam: int = Field(default=1, ge=1)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)

    model_config = ConfigDict(extra="forbid")


class SyntheticTaskSpec(BaseModel):
    """Desk-scale color grounding task.

    Attributes:
        task: Only "color-grounding" is available.
        train_size: Training sentences.
        dev_size: Dev sentences.
        test_size: Test sentences.
        num_colors: Color classes K.
        channels: Feature depth C, must be at least K.
        sigma: Standard deviation of the feature noise.
        num_nouns: Nouns drawn by the template grammar.
        num_verbs: Verbs drawn by the template grammar.
        length_range: Inclusive (min, max) source length; lengths above 7 add
            trailing adverbs.
        seed: Seed for sentences and features.

    """

    task: Literal["color-grounding"] = "color-grounding"
    train_size: int = Field(default=5000, ge=1)
    dev_size: int = Field(default=500, ge=1)
    test_size: int = Field(default=500, ge=1)
    num_colors: int = Field(default=8, ge=2, le=10)
    channels: int = Field(default=32, ge=2)
    sigma: float = Field(default=0.1, ge=0)
    num_nouns: int = Field(default=12, ge=2, le=16)
    num_verbs: int = Field(default=8, ge=1, le=10)
    length_range: tuple[int, int] = (7, 9)
    seed: int = 1

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def _check_sizes(self) -> Self:
        """Colors must fit in the feature depth, lengths must fit the template."""
        if self.num_colors > self.channels:
            msg = f"num_colors ({self.num_colors}) cannot exceed channels ({self.channels})."
            raise ValueError(msg)
        low, high = self.length_range
        if low < 7 or high < low or high > 11:
            msg = f"length_range must satisfy 7 <= min <= max <= 11, got {self.length_range}."
            raise ValueError(msg)
        return self


class DataSplit(BaseModel):
    """One line-aligned split.

    Attributes:
        src: Source sentences, one per line.
        tgt: Target sentences, one per line.
        features: (optional) MMTF feature file with one row per line.
        annotations: (optional) Entity annotation TSV for this split.

    """

    src: Path
    tgt: Path
    features: Path | None = None
    annotations: Path | None = None

    model_config = ConfigDict(extra="forbid")


class DataPaths(BaseModel):
    """Where the data of an experiment lives.

    Attributes:
        train: Training splits, concatenated in order (e.g. train and val).
        dev: Split used for early stopping.
        test: Split used for evaluation.
        color_lexicon: (optional) Source color words, default ships with the
            package.
        target_color_lexicon: (optional) Target color words with canonical
            classes, default ships with the package.
        tokenized: Files are already tokenized; if false they are tokenized on
            load.

    """

    train: list[DataSplit] = Field(min_length=1)
    dev: DataSplit
    test: DataSplit
    color_lexicon: Path | None = None
    target_color_lexicon: Path | None = None
    tokenized: bool = True

    model_config = ConfigDict(extra="forbid")


class ExperimentConfig(BaseModel):
    """A grid of degradation schemes x systems x seeds x congruence modes.

    Attributes:
        name: Label used in reports, e.g. the language pair.
        data: Data locations.
        schemes: Degradations to run, each applied to train, dev and test.
        systems: Fusion variants to train.
        seeds: One training run per seed.
        congruence: Congruence modes used at decoding time.
        blind: Also train and decode every multimodal system with incongruent
            features.
        blind_order: Order used for blinding, reversed or a seeded shuffle.
        model: Architecture settings shared by all systems.
        train: Optimisation settings shared by all systems.
        beam: Beam size for test decoding.
        output: Results directory.
        threads: (optional) Parallel worker processes, MMTPROBE_THREADS wins.

    """

    package: PackageParams = Field(default_factory=PackageParams)
    name: str = "experiment"
    data: DataPaths
    schemes: list[DegradationConfig] = Field(
        default_factory=lambda: [DegradationConfig()], min_length=1
    )
    systems: list[Fusion] = Field(default_factory=lambda: list(ALL_SYSTEMS), min_length=1)
    seeds: list[int] = Field(default_factory=lambda: [1, 2, 3], min_length=1)
    congruence: list[CongruenceMode] = Field(
        default_factory=lambda: [CongruenceMode.CONGRUENT, CongruenceMode.INCONGRUENT],
        min_length=1,
    )
    blind: bool = False
    blind_order: Literal["reversed", "shuffled"] = "shuffled"
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    beam: int = Field(default=12, ge=1)
    output: Path = Path("results")
    threads: int | None = Field(default=None, ge=1)

    model_config = ConfigDict(extra="forbid")

    @field_validator("seeds", "systems")
    @classmethod
    def _no_duplicates(cls, v: list) -> list:
        """Seeds and systems must be unique."""
        if len(v) != len(set(v)):
            msg = f"Duplicate entries: {v}"
            raise ValueError(msg)
        return v

    @field_validator("congruence")
    @classmethod
    def _no_blinded_decoding(cls, v: list[CongruenceMode]) -> list[CongruenceMode]:
        """Blinding is a training protocol, requested with `blind`."""
        if CongruenceMode.BLINDED in v:
            msg = "Use blind = true to request blinded runs, not a congruence mode."
            raise ValueError(msg)
        return v

    @model_validator(mode="after")
    def _check_features(self) -> Self:
        """Multimodal systems need features for every split."""
        if any(system != "NMT" for system in self.systems):
            splits = [*self.data.train, self.data.dev, self.data.test]
            if any(split.features is None for split in splits):
                msg = "Multimodal systems require features for every split."
                raise ValueError(msg)
        return self

    @classmethod
    def from_dict(cls, data: dict, overrides: dict[str, Any] | None = None) -> Self:
        """Create an ExperimentConfig from a dictionary, dotted overrides win."""
        if overrides:
            data = deepcopy(data)
            for dotted, value in overrides.items():
                target = data
                *parents, leaf = dotted.split(".")
                for key in parents:
                    target = target.setdefault(key, {})
                target[leaf] = value
        return cls(**data)

    @classmethod
    def from_toml(cls, toml_file: str | Path, overrides: dict[str, Any] | None = None) -> Self:
        """Create an ExperimentConfig from a TOML file.

        Relative data paths are resolved against the directory of the file.
        """
        toml_file = Path(toml_file)
        with toml_file.open("rb") as f:
            data = tomllib.load(f)
        config = cls.from_dict(data, overrides)
        return config.resolve_paths(toml_file.parent)

    def resolve_paths(self, base: Path) -> Self:
        """Return a copy with relative paths anchored at `base`."""

        def _anchor(path: Path | None) -> Path | None:
            if path is None or path.is_absolute():
                return path
            return base / path

        def _split(split: DataSplit) -> DataSplit:
            return split.model_copy(
                update={
                    "src": _anchor(split.src),
                    "tgt": _anchor(split.tgt),
                    "features": _anchor(split.features),
                    "annotations": _anchor(split.annotations),
                },
            )

        data = self.data.model_copy(
            update={
                "train": [_split(s) for s in self.data.train],
                "dev": _split(self.data.dev),
                "test": _split(self.data.test),
                "color_lexicon": _anchor(self.data.color_lexicon),
                "target_color_lexicon": _anchor(self.data.target_color_lexicon),
            },
        )
        return self.model_copy(update={"data": data, "output": _anchor(self.output)})

    def to_json(self, json_file: str | Path | None = None, indent: int = 4) -> str:
        """Dump model as JSON string, optionally save as a JSON file."""
        json_string = self.model_dump_json(indent=indent)
        if json_file:
            json_file = Path(json_file)
            json_file.parent.mkdir(parents=True, exist_ok=True)
            with json_file.open("w", encoding="utf-8") as f:
                f.write(json_string)
        return json_string

    def subtree_hash_input(self) -> str:
        """Canonical JSON of the settings that determine results, without version."""
        return json.dumps(
            self.model_dump(mode="json", exclude={"package", "output", "threads", "name"}),
            sort_keys=True,
        )
