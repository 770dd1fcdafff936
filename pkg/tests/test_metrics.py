"""Tests for METEOR-lite, BLEU, color accuracy, significance and report tables."""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from mmtprobe import (
    MetricReport,
    bleu,
    color_accuracy,
    gain_drop_report,
    meteor_lite,
    significance_test,
)
from mmtprobe._core import ContractError
from mmtprobe._metrics import (
    align_unigrams,
    format_mean_std,
    load_target_color_lexicon,
    mean_std_table,
    progressive_curve,
)


def _meteor(hyp: str, ref: str) -> float:
    return meteor_lite([hyp.split()], [ref.split()]).corpus_score


def _bleu(hyp: str, ref: str) -> float:
    return bleu([hyp.split()], [ref.split()]).corpus_score


@pytest.mark.parametrize(
    ("hyp", "ref", "expected"),
    [
        ("the cat sat on the mat", "the cat sat on the mat", 1 - 1 / 432),
        ("a b c", "c b a", 0.5),
        ("a b c d", "a c b d", 0.5),
        ("a b", "a b c d", (0.5 / 0.95) * 0.9375),
        ("a x b", "a b", (2 / 3) / 0.7 * 0.5),
        ("the the cat", "the cat the", 23 / 27),
        ("x y", "a b", 0.0),
    ],
)
def test_meteor_lite(hyp: str, ref: str, expected: float) -> None:
    """Hand-computed sentence scores."""
    assert _meteor(hyp, ref) == pytest.approx(expected)


def test_identical_sentence_penalty() -> None:
    """An identical sentence of n tokens scores 1 - 0.5 / n^3."""
    for n in range(1, 8):
        words = [f"w{i}" for i in range(n)]
        assert _meteor(" ".join(words), " ".join(words)) == pytest.approx(1 - 0.5 / n**3)


def test_alignment_prefers_fewer_chunks() -> None:
    """Among maximal alignments the one with the fewest chunks wins."""
    assert align_unigrams("the the cat".split(), "the cat the".split()) == (3, 2)
    assert align_unigrams("a b a b".split(), "a b".split()) == (2, 1)
    assert align_unigrams([], ["a"]) == (0, 0)


def _brute_force_alignment(hyp: list[str], ref: list[str]) -> tuple[int, int]:
    best: tuple[int, int] = (0, 0)

    def _walk(i: int, used: frozenset[int], links: list[tuple[int, int]]) -> None:
        nonlocal best
        if i == len(hyp):
            chunks = sum(
                1 for n, (a, b) in enumerate(links) if n == 0 or links[n - 1] != (a - 1, b - 1)
            )
            if len(links) > best[0] or (len(links) == best[0] and chunks < best[1]):
                best = (len(links), chunks)
            return
        _walk(i + 1, used, links)
        for j, token in enumerate(ref):
            if token == hyp[i] and j not in used:
                _walk(i + 1, used | {j}, [*links, (i, j)])

    _walk(0, frozenset(), [])
    return best


def test_alignment_matches_brute_force() -> None:
    """On short sentences the aligner agrees with exhaustive search."""
    rng = np.random.default_rng(3)
    for _ in range(60):
        hyp = rng.choice(["a", "b", "c"], size=rng.integers(0, 6)).tolist()
        ref = rng.choice(["a", "b", "c"], size=rng.integers(1, 6)).tolist()
        assert align_unigrams(hyp, ref, beam=10**6) == _brute_force_alignment(hyp, ref)
        matches, chunks = align_unigrams(hyp, ref)
        assert (matches, chunks) == _brute_force_alignment(hyp, ref)


def test_alignment_is_fast_on_repetitive_sentences() -> None:
    """Forty tokens of repeated phrases align in well under a second."""
    phrase = "le chien de la fille de la maison".split()
    sentence = phrase * 5
    shifted = sentence[3:] + sentence[:3]
    start = time.perf_counter()
    assert align_unigrams(sentence, sentence) == (40, 1)
    matches, chunks = align_unigrams(sentence, shifted)
    assert time.perf_counter() - start < 2.0
    assert matches == 40
    assert 2 <= chunks <= matches


def test_meteor_corpus_uses_summed_statistics() -> None:
    """The corpus score is not the mean of sentence scores."""
    report = meteor_lite([["a", "b", "c"], ["x"]], [["c", "b", "a"], ["y"]])
    assert report.sentence_scores == pytest.approx([0.5, 0.0])
    precision, recall = 3 / 4, 3 / 4
    f_mean = precision * recall / (0.9 * precision + 0.1 * recall)
    assert report.corpus_score == pytest.approx(f_mean * (1 - 0.5))
    assert report.sentences == [0, 1]


@pytest.mark.parametrize(
    ("hyp", "ref", "expected"),
    [
        ("the cat sat on the mat", "the cat sat on the mat", 1.0),
        ("a b c d", "a b c d e", math.exp(-0.25)),
        (
            "a b x d",
            "a b c d",
            math.exp((math.log(0.75) + math.log(1 / 3) + math.log(5e-10) + math.log(1e-9)) / 4),
        ),
        ("a", "a", 1e-9**0.75),
        ("", "a b", 0.0),
    ],
)
def test_bleu(hyp: str, ref: str, expected: float) -> None:
    """Hand-computed sentence scores, including smoothing of empty counts."""
    assert _bleu(hyp, ref) == pytest.approx(expected)


def test_metrics_need_aligned_inputs() -> None:
    """Hypotheses and references must pair up."""
    with pytest.raises(ContractError):
        meteor_lite([["a"]], [["a"], ["b"]])
    with pytest.raises(ContractError):
        bleu([["a"]], [])


def test_color_accuracy() -> None:
    """Colors are compared as classes, only on selected sentences with a reference color."""
    lexicon = {"rouge": "RED", "rouges": "RED", "bleu": "BLUE", "vert": "GREEN"}
    hyps = [
        ["des", "chapeaux", "rouges"],
        ["un", "chapeau", "bleu"],
        ["un", "chien"],
        ["un", "chat", "vert"],
    ]
    refs = [
        ["des", "chapeaux", "rouge"],
        ["un", "chapeau", "bleu", "et", "rouge"],
        ["un", "chien"],
        ["un", "chat", "vert"],
    ]
    report = color_accuracy(hyps, refs, None, lexicon)
    assert report.sentences == [0, 1, 3]
    assert report.sentence_scores == [1.0, 0.5, 1.0]
    assert report.corpus_score == pytest.approx(2.5 / 3)

    subset = color_accuracy(hyps, refs, [False, True, True, False], lexicon)
    assert subset.sentences == [1]
    assert subset.corpus_score == 0.5

    with pytest.raises(ContractError):
        color_accuracy(hyps, refs, [False, False, True, False], lexicon)
    with pytest.raises(ContractError):
        color_accuracy(hyps, refs, [True], lexicon)


def test_shipped_color_lexicon(tmp_path: Path) -> None:
    """The shipped French list maps inflections to one class; bad lines are rejected."""
    lexicon = load_target_color_lexicon()
    assert lexicon["rouge"] == lexicon["rouges"] == "RED"
    assert lexicon["noires"] == "BLACK"
    path = tmp_path / "colors.tsv"
    path.write_text("rouge RED\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_target_color_lexicon(path)


def test_significance_identical_systems() -> None:
    """No difference gives p = 1."""
    scores = [0.1 * i for i in range(20)]
    assert significance_test(scores, scores, resamples=200) == 1.0


def test_significance_clear_difference() -> None:
    """A constant shift over 500 sentences is significant at any usual level."""
    b = [float(i % 7) for i in range(500)]
    a = [x + 10.0 for x in b]
    p = significance_test(a, b, resamples=10000, seed=1)
    assert p <= 0.001
    assert p == significance_test(a, b, resamples=10000, seed=1)


def test_significance_needs_aligned_runs() -> None:
    """Both systems need the same (run, sentence) grid."""
    with pytest.raises(ContractError):
        significance_test([[1.0, 2.0]], [[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(ContractError):
        significance_test([], [])


def test_significance_is_symmetric() -> None:
    """Swapping the two systems leaves p unchanged."""
    rng = np.random.default_rng(4)
    a = rng.random((3, 40)).tolist()
    b = rng.random((3, 40)).tolist()
    assert significance_test(a, b, resamples=2000, seed=5) == significance_test(
        b, a, resamples=2000, seed=5
    )


def test_corpus_scores_ignore_sentence_order() -> None:
    """Shuffling the corpus keeps every corpus-level score."""
    hyps = [
        "un chien rouge court".split(),
        "une fille en bleu".split(),
        "le chat noir dort sur le lit".split(),
        "deux hommes".split(),
    ]
    refs = [
        "un chien rouge qui court".split(),
        "une fille habillée en bleu".split(),
        "le chat noir dort".split(),
        "deux hommes marchent".split(),
    ]
    lexicon = {"rouge": "RED", "bleu": "BLUE", "noir": "BLACK"}
    order = [2, 0, 3, 1]
    shuffled_hyps = [hyps[i] for i in order]
    shuffled_refs = [refs[i] for i in order]
    assert meteor_lite(shuffled_hyps, shuffled_refs).corpus_score == pytest.approx(
        meteor_lite(hyps, refs).corpus_score
    )
    assert bleu(shuffled_hyps, shuffled_refs).corpus_score == pytest.approx(
        bleu(hyps, refs).corpus_score
    )
    assert color_accuracy(
        shuffled_hyps, shuffled_refs, None, lexicon
    ).corpus_score == pytest.approx(color_accuracy(hyps, refs, None, lexicon).corpus_score)


def test_color_accuracy_grows_with_correct_colors() -> None:
    """Adding a reference color to a hypothesis never lowers the score."""
    lexicon = {"rouge": "RED", "bleu": "BLUE", "vert": "GREEN", "jaune": "YELLOW"}
    refs = [["un", "chapeau", "rouge", "et", "bleu", "et", "vert"]]
    previous = 0.0
    hyp = ["un", "chapeau"]
    for color in ("rouge", "bleu", "vert"):
        hyp = [*hyp, color]
        score = color_accuracy([hyp], refs, None, lexicon).corpus_score
        assert score >= previous
        previous = score
    assert previous == 1.0
    extra = color_accuracy([[*hyp, "jaune"]], refs, None, lexicon).corpus_score
    assert extra == 1.0


def test_format_mean_std() -> None:
    """Scaled mean and sample stdev with one decimal."""
    assert format_mean_std([0.701, 0.706, 0.711], scale=100) == "70.6 ± 0.5"
    assert format_mean_std([0.701], scale=100) == "70.1 ± 0.0"
    assert format_mean_std(None) == "—"
    assert format_mean_std([]) == "—"


def _runs(*scores: float, sentence_scores: list[float] | None = None) -> list[MetricReport]:
    return [
        MetricReport(
            metric="meteor-lite",
            corpus_score=s,
            sentence_scores=sentence_scores or [],
            sentences=list(range(len(sentence_scores or []))),
        )
        for s in scores
    ]


def test_gain_drop_report() -> None:
    """Gains and drops on mean corpus scores, with an average over labels."""
    results = {
        "en-fr": {
            ("NMT", "congruent"): _runs(0.60, 0.62),
            ("INIT", "congruent"): _runs(0.63, 0.65),
            ("INIT", "incongruent"): _runs(0.62, 0.62),
        },
        "en-de": {
            ("NMT", "congruent"): _runs(0.50),
            ("INIT", "congruent"): _runs(0.51),
            ("INIT", "incongruent"): _runs(0.51),
        },
    }
    table = gain_drop_report(results, systems=["INIT"])
    assert table.header == ["", "INIT"]
    assert table.rows == [
        ["en-fr", "+3.0 (↓ 2.0)"],
        ["en-de", "+1.0 (↓ 0.0)"],
        ["Average", "+2.0 (↓ 1.0)"],
    ]


def test_gain_drop_worked_example() -> None:
    """A baseline of 50.5, a system at 53.9 and 47.4 on wrong images."""
    results = {
        "en-fr": {
            ("NMT", "congruent"): _runs(0.505),
            ("DIRECT", "congruent"): _runs(0.539),
            ("DIRECT", "incongruent"): _runs(0.474),
        }
    }
    table = gain_drop_report(results, systems=["DIRECT"])
    assert table.rows == [["en-fr", "+3.4 (↓ 6.5)"]]


def test_gain_drop_stars() -> None:
    """Per-sentence scores allow a significance test of the gain."""
    base = [0.1 * (i % 5) for i in range(50)]
    better = [s + 0.2 for s in base]
    results = {
        "en-fr": {
            ("NMT", "congruent"): _runs(0.2, sentence_scores=base),
            ("DIRECT", "congruent"): _runs(0.4, sentence_scores=better),
            ("DIRECT", "incongruent"): _runs(0.3),
        },
    }
    table = gain_drop_report(results, systems=["DIRECT"], resamples=1000)
    assert table.rows == [["en-fr", "+20.0** (↓ 10.0)"]]


def test_gain_drop_missing_cells() -> None:
    """Absent runs are listed instead of producing partial tables."""
    results = {"fr": {("NMT", "congruent"): _runs(0.5), ("INIT", "congruent"): _runs(0.6)}}
    with pytest.raises(ContractError) as context:
        gain_drop_report(results, systems=["INIT"])
    assert "fr/INIT/incongruent" in str(context.value)


def test_mean_std_table() -> None:
    """Missing cells render as a dash."""
    table = mean_std_table({"NMT": {"none": [0.5, 0.6]}}, ["none", "color"])
    assert table.header == ["", "none", "color"]
    assert table.rows == [["NMT", "55.0 ± 7.1", "—"]]
    assert table.to_csv().splitlines()[1] == "NMT,55.0 ± 7.1,—"


def test_progressive_curve() -> None:
    """Rows follow k, then named settings; gains are relative to the baseline."""
    table = progressive_curve(
        {
            "full": {"NMT": 0.5, "DIRECT": 0.75},
            2: {"NMT": 0.25, "DIRECT": 0.5},
            0: {"NMT": 0.125},
        },
        nonmasked={0: 0.0, 2: 0.5, "full": 1.0},
    )
    assert table.header == ["k", "DIRECT", "NMT", "gain_DIRECT", "nonmasked_fraction"]
    assert table.rows == [
        ["0", "—", "0.125", "—", "0.0"],
        ["2", "0.5", "0.25", "0.25", "0.5"],
        ["full", "0.75", "0.5", "0.25", "1.0"],
    ]


def test_metric_report_file(tmp_path: Path) -> None:
    """Reports are stored as JSON next to the hypotheses."""
    report = meteor_lite([["a", "b"]], [["a", "b"]])
    report.to_json(tmp_path / "sub" / "metrics.json")
    assert MetricReport.from_json(tmp_path / "sub" / "metrics.json") == report
