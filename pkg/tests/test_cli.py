"""Tests for the command line interface."""

import json
from pathlib import Path

import pytest

from mmtprobe import Vocabulary
from mmtprobe.cli import build_parser, main
from tests.conftest import toy_model


def test_version(capsys: pytest.CaptureFixture) -> None:
    """--version prints the package version."""
    with pytest.raises(SystemExit) as context:
        build_parser().parse_args(["--version"])
    assert context.value.code == 0
    assert capsys.readouterr().out.startswith("mmtprobe ")


def test_prepare(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Raw text is tokenized and vocabularies are written."""
    (tmp_path / "raw.en").write_text("A man, in RED.\nTwo dogs\n", encoding="utf-8")
    (tmp_path / "raw.fr").write_text("Un homme, en rouge.\nDeux chiens\n", encoding="utf-8")
    code = main(
        [
            "prepare",
            "--src",
            str(tmp_path / "raw.en"),
            "--tgt",
            str(tmp_path / "raw.fr"),
            "--out",
            str(tmp_path / "out"),
        ],
    )
    assert code == 0
    lines = (tmp_path / "out" / "train.src").read_text(encoding="utf-8").splitlines()
    assert lines == ["a man , in red .", "two dogs"]
    vocab = Vocabulary.from_file(tmp_path / "out" / "src.vocab")
    assert "red" in vocab.tokens
    assert "2 sentence pairs" in capsys.readouterr().out


def test_degrade(test_data: dict, tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Color deprivation of the sample corpus and its statistics."""
    out = tmp_path / "deprived.en"
    code = main(
        [
            "degrade",
            "-i",
            str(test_data["corpus_src_path"]),
            "-o",
            str(out),
            "--scheme",
            "color",
        ],
    )
    assert code == 0
    assert capsys.readouterr().out.strip() == (
        "color: 5/30 tokens masked (16.7%), 4/4 sentences affected"
    )
    assert out.read_text(encoding="utf-8").splitlines()[0] == "a lady in a [v] dress singing"


def test_degrade_bad_k(test_data: dict, tmp_path: Path) -> None:
    """Invalid settings end with exit code 1 instead of a traceback."""
    code = main(
        [
            "degrade",
            "-i",
            str(test_data["corpus_src_path"]),
            "-o",
            str(tmp_path / "x"),
            "--scheme",
            "progressive",
            "--k",
            "3",
        ],
    )
    assert code == 1


def test_evaluate_and_significance(
    test_data: dict,
    tmp_path: Path,
    capsys: pytest.CaptureFixture,
) -> None:
    """Scoring a reference against itself."""
    ref = str(test_data["corpus_tgt_path"])
    report = tmp_path / "metrics.json"
    args = ["evaluate", "--hyp", ref, "--ref", ref, "--metric", "bleu", "--json", str(report)]
    assert main(args) == 0
    assert capsys.readouterr().out.strip() == "bleu = 100.00"
    assert json.loads(report.read_text(encoding="utf-8"))["metric"] == "bleu"

    code = main(["significance", "--a", ref, "--b", ref, "--ref", ref, "--resamples", "50"])
    assert code == 0
    assert capsys.readouterr().out.strip().endswith("p = 1.0000")

    code = main(["significance", "--a", ref, ref, "--b", ref, "--ref", ref])
    assert code == 1


def test_evaluate_subset(test_data: dict, tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Only sentences whose degraded source has a mask token are scored."""
    src = tmp_path / "src.en"
    src.write_text("a [v] hat\nno mask\na [v] dog\nnone\n", encoding="utf-8")
    ref = str(test_data["corpus_tgt_path"])
    report = tmp_path / "subset.json"
    args = ["evaluate", "--hyp", ref, "--ref", ref, "--subset-src", str(src), "--json", str(report)]
    assert main(args) == 0
    assert json.loads(report.read_text(encoding="utf-8"))["sentences"] == [0, 2]
    capsys.readouterr()


def test_synth(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """Generates every split and the experiment file."""
    args = ["synth", "--out", str(tmp_path), "--train-size", "4", "--dev-size", "2"]
    code = main([*args, "--test-size", "2", "--colors", "3", "--channels", "4"])
    assert code == 0
    assert capsys.readouterr().out.startswith("Wrote 16 files")
    assert (tmp_path / "experiment.toml").is_file()
    assert main(["synth", "--out", str(tmp_path), "--colors", "9", "--channels", "4"]) == 1


def test_translate(tmp_path: Path, capsys: pytest.CaptureFixture) -> None:
    """A checkpoint with its vocabularies decodes a source file."""
    model = toy_model(seed=3)
    model.save(tmp_path / "model.mmtc")
    model.src_vocab.to_file(tmp_path / "src.vocab")
    model.tgt_vocab.to_file(tmp_path / "tgt.vocab")
    (tmp_path / "in.txt").write_text("s0 s1\ns2\n", encoding="utf-8")
    checkpoint, source = str(tmp_path / "model.mmtc"), str(tmp_path / "in.txt")
    base = ["translate", "--checkpoint", checkpoint, "-i", source]

    assert main([*base, "--beam", "2", "-o", str(tmp_path / "out.txt")]) == 0
    written = (tmp_path / "out.txt").read_text(encoding="utf-8").splitlines()
    assert len(written) == 2
    assert main([*base, "--beam", "2"]) == 0
    assert capsys.readouterr().out.splitlines() == written

    toy_model(src_words=3).src_vocab.to_file(tmp_path / "other.vocab")
    assert main([*base, "--src-vocab", str(tmp_path / "other.vocab")]) == 1


def test_missing_file(tmp_path: Path) -> None:
    """Unreadable inputs are reported with exit code 1."""
    missing = str(tmp_path / "nope")
    assert main(["evaluate", "--hyp", missing, "--ref", missing]) == 1
