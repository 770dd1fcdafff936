"""Greedy and beam-search decoding, corpus translation and attention export.

Beam scores are summed log-probabilities. Candidates are ranked with a stable
sort over (hypothesis, token) so that ties go to the earlier hypothesis and
then to the lower token id. Finished hypotheses leave the beam and shrink its
live width.
"""

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from mmtprobe._autodiff import Tensor, log_softmax_array
from mmtprobe._core import ContractError, CongruenceMode
from mmtprobe._features import FeatureSet, prepare_for_fusion, remap_order
from mmtprobe._formats.tables import write_attention_matrix
from mmtprobe._models import SourceContext, TranslationModel, decoder_step, prepare_source
from mmtprobe._text import (
    BOS,
    EOS,
    ParallelSample,
    Vocabulary,
    stitch_hyphens,
    write_tokens,
)

logger = logging.getLogger(__name__)


@dataclass
class Hypothesis:
    """A translation produced by a decoder.

    Attributes:
        tokens: Output ids, ending with EOS when finished.
        score: Sum of the chosen tokens' log-probabilities.
        finished: Whether EOS was produced before the length limit.
        text_attention: (optional) One row of source weights per output token.
        image_attention: (optional) One row of image-position weights per
            output token.

    """

    tokens: list[int] = field(default_factory=list)
    score: float = 0.0
    finished: bool = False
    text_attention: list[np.ndarray] | None = None
    image_attention: list[np.ndarray] | None = None

    def normalized_score(self) -> float:
        """Score divided by the number of output tokens."""
        return self.score / max(1, len(self.tokens))


def default_max_len(src_ids: Sequence[int]) -> int:
    """2 x source length + 5, the source length not counting EOS."""
    n = len(src_ids) - (1 if len(src_ids) and src_ids[-1] == EOS else 0)
    return 2 * n + 5


def _encode_one(
    model: TranslationModel,
    src_ids: Sequence[int],
    feature_row: np.ndarray | None,
) -> tuple[SourceContext, Tensor]:
    src = np.asarray(src_ids, dtype=np.int64)[None]
    features = None if feature_row is None else np.asarray(feature_row)[None]
    return prepare_source(src, np.ones(src.shape), features, model.params, model.config)


def greedy_decode(
    model: TranslationModel,
    src_ids: Sequence[int],
    feature_row: np.ndarray | None = None,
    max_len: int | None = None,
    record_attention: bool = False,
) -> Hypothesis:
    """Pick the most probable token at every step until EOS or max_len.

    Ties go to the lowest token id.
    """
    max_len = default_max_len(src_ids) if max_len is None else max_len
    context, state = _encode_one(model, src_ids, feature_row)
    hyp = Hypothesis(
        text_attention=[] if record_attention else None,
        image_attention=[] if record_attention and context.image is not None else None,
    )
    prev = np.asarray([BOS], dtype=np.int64)
    score = 0.0
    for _ in range(max_len):
        step = decoder_step(prev, state, context, model.params, model.config)
        logp = log_softmax_array(step.logits.data)[0]
        token = int(np.argmax(logp))
        hyp.tokens.append(token)
        score = score + logp[token]
        if hyp.text_attention is not None:
            hyp.text_attention.append(step.text_weights.data[0].copy())
        if hyp.image_attention is not None and step.image_weights is not None:
            hyp.image_attention.append(step.image_weights.data[0].copy())
        if token == EOS:
            hyp.finished = True
            break
        prev = np.asarray([token], dtype=np.int64)
        state = step.state
    hyp.score = float(score)
    return hyp


def beam_search(
    model: TranslationModel,
    src_ids: Sequence[int],
    feature_row: np.ndarray | None = None,
    beam: int = 12,
    max_len: int | None = None,
    length_normalize: bool = False,
    record_attention: bool = False,
) -> list[Hypothesis]:
    """N-best list from a length-synchronous beam, best first.

    Hypotheses still alive at max_len are returned unfinished. The greedy path
    is always a candidate, so the best score is never below the greedy score.
    """
    if beam < 1:
        msg = f"Beam size must be at least 1, got {beam}."
        raise ContractError(msg)
    max_len = default_max_len(src_ids) if max_len is None else max_len
    base, state = _encode_one(model, src_ids, feature_row)
    record_image = record_attention and base.image is not None

    live_tokens: list[list[int]] = [[]]
    live_text: list[list[np.ndarray]] = [[]]
    live_image: list[list[np.ndarray]] = [[]]
    scores = np.zeros(1)
    prev = np.asarray([BOS], dtype=np.int64)
    finished: list[Hypothesis] = []

    def _hyp(tokens: list[int], score: float, done: bool, text: list, image: list) -> Hypothesis:
        return Hypothesis(
            tokens=tokens,
            score=float(score),
            finished=done,
            text_attention=text if record_attention else None,
            image_attention=image if record_image else None,
        )

    for t in range(max_len):
        width = beam - len(finished)
        if width <= 0 or not live_tokens:
            break
        context = base if len(live_tokens) == 1 else base.repeat(len(live_tokens))
        step = decoder_step(prev, state, context, model.params, model.config)
        logp = log_softmax_array(step.logits.data)
        vocab = logp.shape[1]
        candidates = (scores[:, None] + logp).ravel()
        chosen = np.argsort(-candidates, kind="stable")[:width]

        next_tokens, next_text, next_image, next_scores, keep = [], [], [], [], []
        for flat in chosen:
            origin, token = divmod(int(flat), vocab)
            tokens = [*live_tokens[origin], token]
            text = image = []
            if record_attention:
                text = [*live_text[origin], step.text_weights.data[origin].copy()]
            if record_image:
                assert step.image_weights is not None  # noqa: S101, DIRECT/HIER record images
                image = [*live_image[origin], step.image_weights.data[origin].copy()]
            if token == EOS:
                finished.append(_hyp(tokens, candidates[flat], True, text, image))
            elif t == max_len - 1:
                finished.append(_hyp(tokens, candidates[flat], False, text, image))
            else:
                next_tokens.append(tokens)
                next_text.append(text)
                next_image.append(image)
                next_scores.append(candidates[flat])
                keep.append(origin)
        live_tokens, live_text, live_image = next_tokens, next_text, next_image
        scores = np.asarray(next_scores)
        prev = np.asarray([tokens[-1] for tokens in live_tokens], dtype=np.int64)
        state = Tensor(step.state.data[keep])

    def _key(h: Hypothesis) -> float:
        return h.normalized_score() if length_normalize else h.score

    if beam > 1:
        greedy = greedy_decode(model, src_ids, feature_row, max_len, record_attention)
        if all(h.tokens != greedy.tokens for h in finished):
            finished.append(greedy)
    return sorted(finished, key=_key, reverse=True)[:beam]


def score_sequence(
    model: TranslationModel,
    src_ids: Sequence[int],
    tokens: Sequence[int],
    feature_row: np.ndarray | None = None,
) -> float:
    """Summed log-probability of a forced output sequence."""
    context, state = _encode_one(model, src_ids, feature_row)
    prev = np.asarray([BOS], dtype=np.int64)
    score = 0.0
    for token in tokens:
        step = decoder_step(prev, state, context, model.params, model.config)
        score = score + log_softmax_array(step.logits.data)[0, token]
        prev = np.asarray([token], dtype=np.int64)
        state = step.state
    return float(score)


def export_attention(
    hypothesis: Hypothesis,
    src_tokens: Sequence[str],
    tgt_vocab: Vocabulary,
    out_dir: str | Path,
    index: int,
) -> list[Path]:
    """Write text (and image) attention of one hypothesis as CSV matrices.

    Rows are output tokens; columns are source tokens plus EOS, or image
    positions p0, p1, ...
    """
    if hypothesis.text_attention is None:
        msg = "The hypothesis was decoded without recording attention."
        raise ContractError(msg)
    out_dir = Path(out_dir)
    rows = [tgt_vocab.id_to_token(t) for t in hypothesis.tokens]
    written = [out_dir / f"{index}.text.csv"]
    write_attention_matrix(
        written[0],
        np.asarray(hypothesis.text_attention),
        rows,
        [*src_tokens, tgt_vocab.id_to_token(EOS)],
    )
    if hypothesis.image_attention:
        image = np.asarray(hypothesis.image_attention)
        written.append(out_dir / f"{index}.image.csv")
        write_attention_matrix(
            written[1],
            image,
            rows,
            [f"p{i}" for i in range(image.shape[1])],
        )
    return written


def translate_corpus(
    model: TranslationModel,
    corpus: Sequence[ParallelSample],
    features: FeatureSet | None = None,
    mode: CongruenceMode = CongruenceMode.CONGRUENT,
    beam: int = 12,
    out_path: str | Path | None = None,
    attn_dir: str | Path | None = None,
    seed: int = 0,
    blind_order: Literal["reversed", "shuffled"] = "shuffled",
    threads: int = 1,
    length_normalize: bool = False,
    src_vocab: Vocabulary | None = None,
    tgt_vocab: Vocabulary | None = None,
) -> list[list[str]]:
    """Decode every source sentence, stitching hyphens in the output.

    Feature rows are reordered for the congruence mode. Output order follows
    the corpus regardless of the number of threads.
    """
    if src_vocab is not None or tgt_vocab is not None:
        model.check_vocabularies(src_vocab or model.src_vocab, tgt_vocab or model.tgt_vocab)
    prepared = None
    index_map = None
    if model.config.feature_layout is not None:
        if features is None:
            msg = f"{model.config.fusion} needs visual features for decoding."
            raise ContractError(msg)
        prepared = prepare_for_fusion(features, model.config.feature_layout)
        index_map = remap_order(prepared, mode, len(corpus), seed, blind_order)

    def _row(sample: ParallelSample) -> np.ndarray | None:
        if prepared is None or index_map is None:
            return None
        row = int(index_map[sample.image_index])
        if prepared.layout == "pooled":
            return prepared.vectors([row])[0]
        return prepared.positions([row])[0]

    record = attn_dir is not None

    def _decode(sample: ParallelSample) -> Hypothesis:
        src_ids = [*model.src_vocab.encode(sample.src), EOS]
        if beam == 1:
            return greedy_decode(model, src_ids, _row(sample), record_attention=record)
        return beam_search(model, src_ids, _row(sample), beam, None, length_normalize, record)[0]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        hypotheses = list(pool.map(_decode, corpus))

    outputs = [stitch_hyphens(model.tgt_vocab.decode(h.tokens)) for h in hypotheses]
    if out_path is not None:
        write_tokens(out_path, outputs)
    if attn_dir is not None:
        for i, (sample, hyp) in enumerate(zip(corpus, hypotheses, strict=True)):
            export_attention(hyp, sample.src, model.tgt_vocab, attn_dir, i)
    logger.info(
        "Translated %d sentences with %s (%s, beam %d)",
        len(corpus),
        model.config.fusion,
        CongruenceMode(mode).value,
        beam,
    )
    return outputs
