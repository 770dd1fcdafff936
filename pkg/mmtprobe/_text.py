"""Tokenization, vocabularies, corpora, batching and source-side degradations.

Three degradations replace source tokens with the mask token "[v]" while
keeping sentence length:

- color deprivation: every token found in a color lexicon,
- entity masking: annotated head nouns of depictable entities,
- progressive masking: every token after the first k.

Targets are never touched.
"""

import hashlib
import logging
import re
import unicodedata
import warnings
from collections import Counter
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator
from typing_extensions import Self

from mmtprobe._core import (
    AnnotationError,
    ConfigurationError,
    ContractError,
    DegradationConfig,
    DegradationWarning,
    check_degradation_k,
)

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4
MASK_TOKEN = "[v]"
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", MASK_TOKEN)
HYPHEN_MARKER = "@-@"

# Bucketing window, in batches
BUCKET_WINDOW = 32

_INTERNAL_HYPHEN = re.compile(r"(?<=\w)-(?=\w)")
_PUNCTUATION = re.compile(r"([^\w\s\x00])")


def tokenize(raw: str) -> list[str]:
    """Lowercase, NFC-normalize, isolate punctuation and split internal hyphens.

    Internal hyphens become a standalone "@-@" marker, e.g.
    "A lady-in-waiting." -> ["a", "lady", "@-@", "in", "@-@", "waiting", "."].
    """
    text = unicodedata.normalize("NFC", raw).lower()
    text = _INTERNAL_HYPHEN.sub("\x00", text)
    text = _PUNCTUATION.sub(r" \1 ", text)
    text = text.replace("\x00", f" {HYPHEN_MARKER} ")
    return text.split()


def stitch_hyphens(tokens: Sequence[str]) -> list[str]:
    """Collapse every `w1 @-@ w2` back into `w1-w2`.

    A marker at the start or end of the sequence has nothing to join and is
    left as it is.
    """
    out: list[str] = []
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if token == HYPHEN_MARKER and out and i + 1 < len(tokens):
            out[-1] = f"{out[-1]}-{tokens[i + 1]}"
            i += 2
            continue
        out.append(token)
        i += 1
    return out


class Vocabulary:
    """Bijective token <-> id map with five reserved ids.

    Ids 0-4 are PAD, BOS, EOS, UNK and MASK; MASK has the surface form "[v]".
    """

    __slots__ = ("_index", "tokens")

    def __init__(self, tokens: Sequence[str]) -> None:
        """Create from an ordered token list that starts with the reserved tokens."""
        tokens = tuple(tokens)
        if tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            msg = f"A vocabulary must start with the reserved tokens {RESERVED_TOKENS}."
            raise ValueError(msg)
        if len(set(tokens)) != len(tokens):
            duplicates = sorted({t for t in tokens if tokens.count(t) > 1})
            msg = f"Duplicate vocabulary entries: {duplicates}"
            raise ValueError(msg)
        self.tokens = tokens
        self._index = {token: i for i, token in enumerate(tokens)}

    def __len__(self) -> int:
        """Number of entries including reserved ones."""
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        """Whether a token has its own id."""
        return token in self._index

    def __eq__(self, other: object) -> bool:
        """Vocabularies are equal when their ordered tokens are."""
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self) -> int:
        """Hash of the ordered tokens."""
        return hash(self.tokens)

    def token_to_id(self, token: str) -> int:
        """Id of a token, UNK if unknown."""
        return self._index.get(token, UNK)

    def id_to_token(self, index: int) -> str:
        """Surface form of an id."""
        return self.tokens[index]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        """Map tokens to ids, unknown tokens become UNK."""
        return [self._index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids to tokens, stopping at EOS and skipping PAD/BOS."""
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out

    @property
    def fingerprint(self) -> str:
        """SHA-256 of the ordered entries, stored in checkpoints."""
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    @classmethod
    def from_file(cls, path: str | Path) -> Self:
        """Read one token per line."""
        with Path(path).open(encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f])

    def to_file(self, path: str | Path) -> None:
        """Write one token per line."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            f.write("\n".join(self.tokens) + "\n")


def build_vocab(corpus: Iterable[Sequence[str]]) -> Vocabulary:
    """Build a vocabulary from token lists without a frequency cutoff.

    Reserved ids come first, then tokens by descending frequency, ties broken
    lexicographically.
    """
    counts: Counter[str] = Counter()
    n_sentences = 0
    for tokens in corpus:
        counts.update(tokens)
        n_sentences += 1
    if n_sentences == 0:
        msg = "Cannot build a vocabulary from an empty corpus."
        raise ValueError(msg)
    for token in RESERVED_TOKENS:
        counts.pop(token, None)
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary([*RESERVED_TOKENS, *ordered])


class ParallelSample(BaseModel):
    """A source/target sentence pair bound to a row of the feature set.

    Attributes:
        src: Source tokens.
        tgt: Target tokens.
        image_index: Row of the feature set describing this pair.

    """

    src: tuple[str, ...] = Field(min_length=1)
    tgt: tuple[str, ...] = Field(min_length=1)
    image_index: int = Field(ge=0)

    model_config = ConfigDict(frozen=True, extra="forbid")


class EntityAnnotations(BaseModel):
    """Head-noun positions of depictable entities per sample.

    Attributes:
        indices: Sample index -> sorted, duplicate-free 0-based token indices.

    """

    indices: dict[int, tuple[int, ...]] = Field(default_factory=dict)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @field_validator("indices")
    @classmethod
    def _sorted_unique(cls, v: dict[int, tuple[int, ...]]) -> dict[int, tuple[int, ...]]:
        """Indices are non-negative and stored sorted without duplicates."""
        for sample, positions in v.items():
            if any(p < 0 for p in positions):
                msg = f"Sample {sample}: negative token index in {positions}."
                raise ValueError(msg)
        return {sample: tuple(sorted(set(positions))) for sample, positions in v.items()}

    @classmethod
    def from_tsv(cls, path: str | Path) -> Self:
        """Read `sample-index TAB comma-separated token indices` lines."""
        indices: dict[int, tuple[int, ...]] = {}
        with Path(path).open(encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                line = line.rstrip("\n")  # noqa: PLW2901
                if not line.strip():
                    continue
                sample, _, positions = line.partition("\t")
                try:
                    indices[int(sample)] = tuple(
                        int(p) for p in positions.split(",") if p.strip()
                    )
                except ValueError:
                    msg = f"{path}:{line_number}: cannot parse annotation line {line!r}."
                    raise AnnotationError(msg) from None
        return cls(indices=indices)


class DegradationSpec(BaseModel):
    """A degradation together with the resources it needs.

    Attributes:
        variant: none, color, entity or progressive.
        k: Tokens kept by progressive masking, even and in [0, 30].
        color_lexicon: Words replaced by color deprivation.
        annotations: Head-noun positions used by entity masking.

    """

    variant: Literal["none", "color", "entity", "progressive"] = "none"
    k: int | None = None
    color_lexicon: frozenset[str] | None = None
    annotations: EntityAnnotations | None = None

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def _check_resources(self) -> Self:
        """Exactly the resources of the chosen variant must be present."""
        check_degradation_k(self.variant, self.k)
        required = {"color": {"color_lexicon"}, "entity": {"annotations"}}.get(self.variant, set())
        present = {
            name for name in ("color_lexicon", "annotations") if getattr(self, name) is not None
        }
        if present != required:
            msg = (
                f"Degradation '{self.variant}' needs {sorted(required) or 'no resources'}, "
                f"got {sorted(present) or 'none'}."
            )
            raise ValueError(msg)
        if self.variant == "color" and not self.color_lexicon:
            msg = "Color lexicon must not be empty."
            raise ValueError(msg)
        return self

    @classmethod
    def from_config(
        cls,
        config: DegradationConfig,
        color_lexicon: frozenset[str] | None = None,
        annotations: EntityAnnotations | None = None,
    ) -> Self:
        """Attach the resources a configured variant needs, dropping the rest."""
        return cls(
            variant=config.variant,
            k=config.k,
            color_lexicon=color_lexicon if config.variant == "color" else None,
            annotations=annotations if config.variant == "entity" else None,
        )


class DegradationStats(BaseModel):
    """Masking statistics of a degraded split.

    Attributes:
        total_tokens: Source tokens in the split.
        masked_tokens: Source tokens equal to the mask token.
        affected_sentences: Sentences with at least one masked token.

    """

    total_tokens: int = Field(ge=0)
    masked_tokens: int = Field(ge=0)
    affected_sentences: int = Field(ge=0)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @computed_field  # type: ignore[prop-decorator]
    @property
    def masked_fraction(self) -> float:
        """masked_tokens / total_tokens, 0 for an empty split."""
        return self.masked_tokens / self.total_tokens if self.total_tokens else 0.0

    @classmethod
    def from_corpus(cls, corpus: Sequence[ParallelSample]) -> Self:
        """Count mask tokens on the source side."""
        masked = [sum(t == MASK_TOKEN for t in s.src) for s in corpus]
        return cls(
            total_tokens=sum(len(s.src) for s in corpus),
            masked_tokens=sum(masked),
            affected_sentences=sum(m > 0 for m in masked),
        )


def load_color_lexicon(path: str | Path | None = None) -> frozenset[str]:
    """Read one color word per line, the shipped English list by default."""
    if path is None:
        text = resources.files("mmtprobe.data").joinpath("colors.en.txt").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


def apply_color_deprivation(tokens: Sequence[str], lexicon: frozenset[str]) -> list[str]:
    """Replace every token found in the lexicon with the mask token."""
    if not lexicon:
        msg = "Color lexicon must not be empty."
        raise ConfigurationError(msg)
    return [MASK_TOKEN if t in lexicon else t for t in tokens]


def apply_entity_masking(
    tokens: Sequence[str],
    indices: Sequence[int],
    sample_index: int | None = None,
) -> list[str]:
    """Replace the tokens at the given positions with the mask token."""
    out = list(tokens)
    for i in indices:
        if not 0 <= i < len(out):
            msg = (
                f"Sample {sample_index}: entity index {i} is outside a sentence "
                f"of {len(out)} tokens."
            )
            raise AnnotationError(msg)
        out[i] = MASK_TOKEN
    return out


def apply_progressive_masking(tokens: Sequence[str], k: int) -> list[str]:
    """Keep the first k tokens and mask the rest."""
    if k < 0:
        msg = f"k must be non-negative, got {k}."
        raise ConfigurationError(msg)
    return [t if i < k else MASK_TOKEN for i, t in enumerate(tokens)]


def degrade_sentence(tokens: Sequence[str], spec: DegradationSpec, sample_index: int) -> list[str]:
    """Apply a degradation spec to one source sentence."""
    match spec.variant:
        case "none":
            return list(tokens)
        case "color":
            assert spec.color_lexicon is not None  # noqa: S101, ensured by Pydantic
            return apply_color_deprivation(tokens, spec.color_lexicon)
        case "entity":
            assert spec.annotations is not None  # noqa: S101, ensured by Pydantic
            positions = spec.annotations.indices.get(sample_index, ())
            return apply_entity_masking(tokens, positions, sample_index)
        case "progressive":
            assert spec.k is not None  # noqa: S101, ensured by Pydantic
            return apply_progressive_masking(tokens, spec.k)
    msg = f"Unknown degradation variant: {spec.variant}"
    raise ContractError(msg)


def degrade_corpus(
    corpus: Sequence[ParallelSample],
    spec: DegradationSpec,
) -> tuple[list[ParallelSample], DegradationStats]:
    """Degrade every source sentence; annotations are keyed by corpus position."""
    degraded = [
        sample.model_copy(update={"src": tuple(degrade_sentence(sample.src, spec, i))})
        for i, sample in enumerate(corpus)
    ]
    stats = DegradationStats.from_corpus(degraded)
    if spec.variant != "none" and stats.masked_tokens == 0 and corpus:
        warnings.warn(
            f"Degradation '{spec.variant}' did not mask any of {stats.total_tokens} tokens.",
            DegradationWarning,
            stacklevel=2,
        )
    logger.debug(
        "Degraded %d sentences with '%s': %.2f%% masked",
        len(degraded),
        spec.variant,
        100 * stats.masked_fraction,
    )
    return degraded, stats


def load_corpus(
    src_path: str | Path,
    tgt_path: str | Path,
    *,
    tokenized: bool = True,
    image_offset: int = 0,
) -> list[ParallelSample]:
    """Read line-aligned source and target files; image index is the line number."""
    with Path(src_path).open(encoding="utf-8") as f:
        src_lines = f.read().splitlines()
    with Path(tgt_path).open(encoding="utf-8") as f:
        tgt_lines = f.read().splitlines()
    if len(src_lines) != len(tgt_lines):
        msg = (
            f"{src_path} has {len(src_lines)} lines but {tgt_path} has {len(tgt_lines)}; "
            "parallel files must be line-aligned."
        )
        raise ValueError(msg)
    split = tokenize if not tokenized else str.split
    corpus = []
    for i, (src, tgt) in enumerate(zip(src_lines, tgt_lines, strict=True)):
        src_tokens, tgt_tokens = split(src), split(tgt)
        if not src_tokens or not tgt_tokens:
            msg = f"Line {i + 1} of {src_path} / {tgt_path} is empty."
            raise ValueError(msg)
        corpus.append(
            ParallelSample(src=src_tokens, tgt=tgt_tokens, image_index=image_offset + i),
        )
    return corpus


def read_tokens(path: str | Path) -> list[list[str]]:
    """Read one whitespace-tokenized sentence per line."""
    with Path(path).open(encoding="utf-8") as f:
        return [line.split() for line in f.read().splitlines()]


def write_tokens(path: str | Path, sentences: Iterable[Sequence[str]]) -> None:
    """Write one space-joined sentence per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        f.writelines(" ".join(tokens) + "\n" for tokens in sentences)


@dataclass(frozen=True)
class EncodedSample:
    """Id sequences of one sample, ready for batching."""

    src: np.ndarray
    tgt: np.ndarray
    image_index: int
    position: int


def encode_sample(
    sample: ParallelSample,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
) -> tuple[list[int], list[int]]:
    """Source ids + EOS, and BOS + target ids + EOS."""
    return (
        [*src_vocab.encode(sample.src), EOS],
        [BOS, *tgt_vocab.encode(sample.tgt), EOS],
    )


def encode_corpus(
    corpus: Sequence[ParallelSample],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
) -> list[EncodedSample]:
    """Encode every sample, remembering its position in the corpus."""
    encoded = []
    for position, sample in enumerate(corpus):
        src, tgt = encode_sample(sample, src_vocab, tgt_vocab)
        encoded.append(
            EncodedSample(
                src=np.asarray(src, dtype=np.int64),
                tgt=np.asarray(tgt, dtype=np.int64),
                image_index=sample.image_index,
                position=position,
            ),
        )
    return encoded


@dataclass(frozen=True)
class Batch:
    """Padded mini-batch; masks are 1 for real positions and 0 for padding.

    Attributes:
        src: Source ids (B, Ts).
        src_mask: (B, Ts).
        tgt_in: Decoder inputs, BOS + target (B, Tt).
        tgt_out: Decoder targets, target + EOS (B, Tt).
        tgt_mask: (B, Tt).
        image_indices: Feature row of each sample (B,).
        positions: Corpus position of each sample (B,).

    """

    src: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray
    image_indices: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        """Number of samples."""
        return self.src.shape[0]


def make_batch(samples: Sequence[EncodedSample]) -> Batch:
    """Right-pad samples into one batch."""
    n = len(samples)
    src_len = max(len(s.src) for s in samples)
    tgt_len = max(len(s.tgt) for s in samples) - 1
    src = np.full((n, src_len), PAD, dtype=np.int64)
    tgt = np.full((n, tgt_len + 1), PAD, dtype=np.int64)
    for i, s in enumerate(samples):
        src[i, : len(s.src)] = s.src
        tgt[i, : len(s.tgt)] = s.tgt
    tgt_out = tgt[:, 1:]
    return Batch(
        src=src,
        src_mask=(src != PAD).astype(np.float64),
        tgt_in=np.where(tgt[:, :-1] == EOS, PAD, tgt[:, :-1]),
        tgt_out=tgt_out,
        tgt_mask=(tgt_out != PAD).astype(np.float64),
        image_indices=np.asarray([s.image_index for s in samples], dtype=np.int64),
        positions=np.asarray([s.position for s in samples], dtype=np.int64),
    )


def batch_iterator(
    samples: Sequence[EncodedSample],
    batch_size: int,
    seed: int,
    epoch: int,
) -> Iterator[Batch]:
    """Shuffled, length-bucketed batches; order depends only on (seed, epoch).

    Samples are shuffled, then sorted by source length inside windows of
    32 x batch_size, then cut into batches emitted in window order.
    """
    if batch_size < 1:
        msg = f"batch_size must be at least 1, got {batch_size}."
        raise ConfigurationError(msg)
    order = np.random.default_rng([seed, epoch]).permutation(len(samples))
    window = BUCKET_WINDOW * batch_size
    for start in range(0, len(order), window):
        chunk = order[start : start + window]
        lengths = np.asarray([len(samples[i].src) for i in chunk])
        chunk = chunk[np.argsort(lengths, kind="stable")]
        for b in range(0, len(chunk), batch_size):
            yield make_batch([samples[i] for i in chunk[b : b + batch_size]])
