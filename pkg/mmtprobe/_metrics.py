"""Translation metrics, significance testing and report tables.

METEOR-lite is METEOR restricted to exact unigram matches (no stemming,
synonyms or paraphrases) with alpha = 0.9, beta = 3 and gamma = 0.5. Its
absolute values are not comparable with official METEOR.

BLEU uses n-grams up to 4 with uniform weights. A zero n-gram match count is
replaced by 1e-9 and an empty n-gram total by 1.
"""

import logging
import math
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from typing_extensions import Self

from mmtprobe._core import ContractError
from mmtprobe._formats import tables

logger = logging.getLogger(__name__)

ALPHA = 0.9
GAMMA = 0.5
BETA = 3.0
BLEU_EPSILON = 1e-9
MAX_ORDER = 4
ALIGN_BEAM = 40
MISSING = "—"

Tokens = Sequence[str]


class MetricReport(BaseModel):
    """Corpus and per-sentence scores of one metric on one hypothesis file.

    Attributes:
        metric: meteor-lite, bleu or color-acc.
        corpus_score: Score in [0, 1] aggregated over the corpus.
        sentence_scores: Per-sentence scores of the evaluated sentences.
        sentences: Indices of the evaluated sentences in the corpus.

    """

    metric: str
    corpus_score: float = Field(ge=0, le=1)
    sentence_scores: list[float] = Field(default_factory=list)
    sentences: list[int] = Field(default_factory=list)

    model_config = ConfigDict(extra="forbid")

    def to_json(self, json_file: str | Path | None = None, indent: int = 2) -> str:
        """Dump as JSON string, optionally save as a file."""
        json_string = self.model_dump_json(indent=indent)
        if json_file:
            json_file = Path(json_file)
            json_file.parent.mkdir(parents=True, exist_ok=True)
            json_file.write_text(json_string, encoding="utf-8")
        return json_string

    @classmethod
    def from_json(cls, json_file: str | Path) -> Self:
        """Read a report written by `to_json`."""
        return cls.model_validate_json(Path(json_file).read_text(encoding="utf-8"))


def _check_aligned(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> None:
    if len(hyps) != len(refs):
        msg = f"{len(hyps)} hypotheses but {len(refs)} references."
        raise ContractError(msg)


def _keep_fewest(layer: dict[tuple[int, int], int], key: tuple[int, int], chunks: int) -> None:
    if chunks < layer.get(key, math.inf):
        layer[key] = chunks


def align_unigrams(hyp: Tokens, ref: Tokens, beam: int = ALIGN_BEAM) -> tuple[int, int]:
    """Exact-match alignment with the most matches, then the fewest chunks.

    A chunk is a run of matches adjacent in both hypothesis and reference.
    Partial alignments are extended one hypothesis token at a time and at most
    `beam` of them, fewest chunks first, survive each step. The chunk count is
    exact whenever no step has more than `beam` live partial alignments, and
    an upper bound otherwise. The match count is always exact.

    Returns:
        (matches, chunks)

    """
    positions: dict[str, list[int]] = {}
    for j, token in enumerate(ref):
        positions.setdefault(token, []).append(j)
    hyp_counts = Counter(hyp)
    ref_counts = Counter(ref)
    target = {w: min(c, ref_counts[w]) for w, c in hyp_counts.items() if w in ref_counts}
    matches = sum(target.values())
    if matches == 0:
        return 0, 0

    # hyp occurrences of each word from position i onwards
    remaining = [dict.fromkeys(target, 0) for _ in range(len(hyp) + 1)]
    for i in range(len(hyp) - 1, -1, -1):
        remaining[i] = dict(remaining[i + 1])
        if hyp[i] in target:
            remaining[i][hyp[i]] += 1

    # partial alignments of hyp[:i], keyed by (used ref positions, previous match)
    states: dict[tuple[int, int], int] = {(0, -1): 0}
    for i, word in enumerate(hyp):
        layer: dict[tuple[int, int], int] = {}
        for (used, last_j), chunks in states.items():
            if word not in target:
                _keep_fewest(layer, (used, -1), chunks)
                continue
            free = [j for j in positions[word] if not used >> j & 1]
            still_needed = target[word] - (len(positions[word]) - len(free))
            if still_needed > 0:
                for j in free:
                    step = 0 if 0 <= last_j == j - 1 else 1
                    _keep_fewest(layer, (used | 1 << j, j), chunks + step)
            if still_needed < remaining[i][word]:
                _keep_fewest(layer, (used, -1), chunks)
        if len(layer) > beam:
            ranked = sorted(
                layer.items(),
                key=lambda item: (item[1], -item[0][0].bit_count(), item[0][1] < 0, item[0]),
            )
            layer = dict(ranked[:beam])
        states = layer

    return matches, min(states.values())


def _meteor_from_stats(matches: int, hyp_len: int, ref_len: int, chunks: int) -> float:
    if matches == 0:
        return 0.0
    precision = matches / hyp_len
    recall = matches / ref_len
    f_mean = precision * recall / (ALPHA * precision + (1 - ALPHA) * recall)
    penalty = GAMMA * (chunks / matches) ** BETA
    return f_mean * (1 - penalty)


def meteor_lite(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> MetricReport:
    """Exact-match METEOR; the corpus score uses summed alignment statistics."""
    _check_aligned(hyps, refs)
    stats = []
    for hyp, ref in zip(hyps, refs, strict=True):
        matches, chunks = align_unigrams(hyp, ref)
        stats.append((matches, len(hyp), len(ref), chunks))
    total = np.asarray(stats, dtype=np.int64).sum(axis=0) if stats else np.zeros(4, np.int64)
    return MetricReport(
        metric="meteor-lite",
        corpus_score=_meteor_from_stats(*(int(x) for x in total)),
        sentence_scores=[_meteor_from_stats(*s) for s in stats],
        sentences=list(range(len(stats))),
    )


def _ngram_stats(hyp: Tokens, ref: Tokens) -> tuple[list[int], list[int]]:
    """Clipped n-gram matches and hypothesis n-gram totals for n = 1..4."""
    matches, totals = [], []
    for n in range(1, MAX_ORDER + 1):
        hyp_ngrams = Counter(tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1))
        ref_ngrams = Counter(tuple(ref[i : i + n]) for i in range(len(ref) - n + 1))
        matches.append(sum(min(c, ref_ngrams[g]) for g, c in hyp_ngrams.items()))
        totals.append(max(0, len(hyp) - n + 1))
    return matches, totals


def _bleu_from_stats(
    matches: Sequence[int],
    totals: Sequence[int],
    hyp_len: int,
    ref_len: int,
) -> float:
    if hyp_len == 0:
        return 0.0
    log_precision = sum(
        math.log((m if m > 0 else BLEU_EPSILON) / (t if t > 0 else 1))
        for m, t in zip(matches, totals, strict=True)
    )
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    return brevity * math.exp(log_precision / MAX_ORDER)


def bleu(hyps: Sequence[Tokens], refs: Sequence[Tokens]) -> MetricReport:
    """Corpus BLEU with per-sentence BLEU for significance testing."""
    _check_aligned(hyps, refs)
    corpus_matches = [0] * MAX_ORDER
    corpus_totals = [0] * MAX_ORDER
    sentence_scores = []
    for hyp, ref in zip(hyps, refs, strict=True):
        matches, totals = _ngram_stats(hyp, ref)
        corpus_matches = [a + b for a, b in zip(corpus_matches, matches, strict=True)]
        corpus_totals = [a + b for a, b in zip(corpus_totals, totals, strict=True)]
        sentence_scores.append(_bleu_from_stats(matches, totals, len(hyp), len(ref)))
    return MetricReport(
        metric="bleu",
        corpus_score=_bleu_from_stats(
            corpus_matches,
            corpus_totals,
            sum(len(h) for h in hyps),
            sum(len(r) for r in refs),
        ),
        sentence_scores=sentence_scores,
        sentences=list(range(len(hyps))),
    )


def load_target_color_lexicon(path: str | Path | None = None) -> dict[str, str]:
    """Read `surface TAB CLASS` lines, the shipped French list by default."""
    if path is None:
        text = resources.files("mmtprobe.data").joinpath("colors.fr.tsv").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    lexicon = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        surface, sep, color = line.partition("\t")
        if not sep or not color.strip():
            msg = f"Line {line_number} of the color lexicon is not 'surface TAB class': {line!r}"
            raise ValueError(msg)
        lexicon[surface.strip()] = color.strip()
    return lexicon


def color_accuracy(
    hyps: Sequence[Tokens],
    refs: Sequence[Tokens],
    selection: Sequence[bool] | None,
    lexicon: Mapping[str, str],
) -> MetricReport:
    """Mean per-sentence share of reference colors found in the hypothesis.

    Colors are compared as canonical classes. Only selected sentences whose
    reference names a color are scored.
    """
    _check_aligned(hyps, refs)
    if selection is not None and len(selection) != len(refs):
        msg = f"Selection has {len(selection)} entries for {len(refs)} sentences."
        raise ContractError(msg)
    scores, indices = [], []
    for i, (hyp, ref) in enumerate(zip(hyps, refs, strict=True)):
        if selection is not None and not selection[i]:
            continue
        ref_colors = {lexicon[t] for t in ref if t in lexicon}
        if not ref_colors:
            continue
        hyp_colors = {lexicon[t] for t in hyp if t in lexicon}
        scores.append(len(hyp_colors & ref_colors) / len(ref_colors))
        indices.append(i)
    if not scores:
        msg = "No selected sentence has a color in its reference."
        raise ContractError(msg)
    return MetricReport(
        metric="color-acc",
        corpus_score=float(np.mean(scores)),
        sentence_scores=scores,
        sentences=indices,
    )


def significance_test(
    a: Sequence[float] | Sequence[Sequence[float]] | np.ndarray,
    b: Sequence[float] | Sequence[Sequence[float]] | np.ndarray,
    resamples: int = 10000,
    seed: int = 0,
) -> float:
    """Stratified approximate randomization over (run, sentence) pairs.

    Each resample swaps the A and B score of every (run, sentence) pair with
    probability 1/2 and recomputes |mean(A) - mean(B)|.

    Args:
        a: Per-sentence scores, (sentences,) or (runs, sentences).
        b: Same shape as `a`, runs matched by position.
        resamples: Number of random reassignments.
        seed: Seed of the resampling generator.

    Returns:
        p = (1 + #{resampled difference >= observed}) / (1 + resamples)

    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        msg = f"Score arrays are not aligned: {a.shape} vs {b.shape}."
        raise ContractError(msg)
    if a.size == 0:
        msg = "Cannot test empty score arrays."
        raise ContractError(msg)
    diff = (a - b).ravel()
    observed = abs(diff.mean())
    rng = np.random.default_rng(seed)
    count = 0
    chunk = 1000
    for start in range(0, resamples, chunk):
        size = min(chunk, resamples - start)
        signs = rng.integers(0, 2, size=(size, diff.size)) * 2.0 - 1.0
        resampled = np.abs((signs * diff).mean(axis=1))
        count += int((resampled >= observed).sum())
    return (1 + count) / (1 + resamples)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation, 0 for a single value."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        msg = "No values to summarise."
        raise ContractError(msg)
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), std


def format_mean_std(values: Sequence[float] | None, scale: float = 1.0) -> str:
    """Render runs as "70.6 ± 0.5", or a dash when there are none."""
    if not values:
        return MISSING
    mean, std = mean_std([v * scale for v in values])
    return f"{mean:.1f} ± {std:.1f}"


def _stars(p: float) -> str:
    if p <= 0.01:
        return "**"
    if p <= 0.05:
        return "*"
    return ""


@dataclass
class Table:
    """A rendered report table."""

    header: list[str]
    rows: list[list[str]]

    def to_markdown(self) -> str:
        """Aligned markdown."""
        return tables.to_markdown(self.header, self.rows)

    def to_csv(self) -> str:
        """CSV text."""
        return tables.to_csv(self.header, self.rows)


RunCell = Sequence[MetricReport]
ResultGrid = Mapping[tuple[str, str], RunCell]


def gain_drop_report(
    results: Mapping[str, ResultGrid],
    systems: Sequence[str] = ("INIT", "HIER", "DIRECT"),
    baseline: str = "NMT",
    scale: float = 100.0,
    resamples: int = 10000,
    seed: int = 0,
) -> Table:
    """Multimodal gain and incongruence drop per label (e.g. language) and system.

    `results[label][(system, mode)]` holds one MetricReport per run, where
    mode is "congruent" or "incongruent". gain = MMT congruent - baseline
    congruent; drop = MMT congruent - MMT incongruent, both on mean corpus
    scores. Cells read "+g (↓ d)" with stars on the gain when per-sentence
    scores allow a significance test (* p <= 0.05, ** p <= 0.01). With more
    than one label an Average row is added.
    """
    needed = [(baseline, "congruent")] + [
        (system, mode) for system in systems for mode in ("congruent", "incongruent")
    ]
    absent = [
        f"{label}/{system}/{mode}"
        for label, grid in results.items()
        for system, mode in needed
        if not grid.get((system, mode))
    ]
    if absent:
        msg = f"Missing runs for: {', '.join(absent)}"
        raise ContractError(msg)

    def _mean(reports: RunCell) -> float:
        return float(np.mean([r.corpus_score for r in reports])) * scale

    rows = []
    gains: dict[str, list[float]] = {s: [] for s in systems}
    drops: dict[str, list[float]] = {s: [] for s in systems}
    for label, grid in results.items():
        base = grid[(baseline, "congruent")]
        row = [label]
        for system in systems:
            congruent = grid[(system, "congruent")]
            gain = _mean(congruent) - _mean(base)
            drop = _mean(congruent) - _mean(grid[(system, "incongruent")])
            gains[system].append(gain)
            drops[system].append(drop)
            stars = ""
            if len(congruent) == len(base) and all(
                r.sentence_scores and r.sentences == b.sentences
                for r, b in zip(congruent, base, strict=True)
            ):
                p = significance_test(
                    [r.sentence_scores for r in congruent],
                    [r.sentence_scores for r in base],
                    resamples,
                    seed,
                )
                stars = _stars(p)
            row.append(f"{gain:+.1f}{stars} (↓ {drop:.1f})")
        rows.append(row)
    if len(results) > 1:
        rows.append(
            [
                "Average",
                *(
                    f"{np.mean(gains[s]):+.1f} (↓ {np.mean(drops[s]):.1f})"
                    for s in systems
                ),
            ],
        )
    return Table(header=["", *systems], rows=rows)


def mean_std_table(
    results: Mapping[str, Mapping[str, Sequence[float]]],
    columns: Sequence[str],
    scale: float = 100.0,
) -> Table:
    """Rows of "mean ± stdev" cells, e.g. systems x degradation schemes."""
    return Table(
        header=["", *columns],
        rows=[
            [row, *(format_mean_std(cells.get(c), scale) for c in columns)]
            for row, cells in results.items()
        ],
    )


def progressive_curve(
    results: Mapping[int | str, Mapping[str, float]],
    baseline: str = "NMT",
    nonmasked: Mapping[int | str, float] | None = None,
) -> Table:
    """One row per k: score per system, gain of every other system, non-masked fraction.

    Integer k sort ascending, other labels (e.g. "full") follow in their order.
    """
    keys = sorted((k for k in results if isinstance(k, int)), key=int)
    keys += [k for k in results if not isinstance(k, int)]
    systems = sorted({s for scores in results.values() for s in scores})
    others = [s for s in systems if s != baseline]
    header = ["k", *systems, *(f"gain_{s}" for s in others)]
    if nonmasked is not None:
        header.append("nonmasked_fraction")
    rows = []
    for k in keys:
        scores = results[k]
        row = [str(k), *(repr(scores[s]) if s in scores else MISSING for s in systems)]
        for s in others:
            if s in scores and baseline in scores:
                row.append(repr(scores[s] - scores[baseline]))
            else:
                row.append(MISSING)
        if nonmasked is not None:
            row.append(repr(nonmasked[k]) if k in nonmasked else MISSING)
        rows.append(row)
    return Table(header=header, rows=rows)
