"""Tests for the experiment grid, its cache and the reports."""

import json
from pathlib import Path

import pytest
from pydantic import ValidationError

from mmtprobe import ExperimentConfig, SyntheticTaskSpec, generate_synthetic, run_experiment
from mmtprobe._formats.tables import read_csv
from mmtprobe._utils import file_sha256
from mmtprobe.experiment import (
    MANIFEST,
    Cell,
    cache_key,
    decode_modes,
    evaluate_hypotheses,
    plan_cells,
    report,
)


@pytest.fixture
def tiny(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> dict:
    """A generated color task and a small experiment over it."""
    monkeypatch.delenv("MMTPROBE_THREADS", raising=False)
    spec = SyntheticTaskSpec(
        train_size=12,
        dev_size=3,
        test_size=4,
        num_colors=2,
        channels=4,
        seed=2,
    )
    generate_synthetic(spec, tmp_path / "data")

    def _split(name: str) -> dict:
        data = tmp_path / "data"
        return {
            "src": str(data / f"{name}.en"),
            "tgt": str(data / f"{name}.fr"),
            "features": str(data / f"{name}.mmtf"),
        }

    return {
        "name": "tiny",
        "data": {"train": [_split("train")], "dev": _split("dev"), "test": _split("test")},
        "schemes": [{"variant": "none"}, {"variant": "color"}],
        "systems": ["NMT", "DIRECT"],
        "seeds": [1],
        "blind": True,
        "beam": 1,
        "output": str(tmp_path / "results"),
        "model": {"emb_dim": 4, "hidden_dim": 4, "enc_layers": 1, "feature_dim": 4},
        "train": {"max_epochs": 1, "patience": 1, "batch_size": 4},
    }


def test_plan_cells(tiny: dict) -> None:
    """Regular cells first, blinded multimodal cells after them."""
    config = ExperimentConfig.from_dict(tiny)
    cells = plan_cells(config)
    assert [c.id for c in cells] == [
        "none/NMT/seed1",
        "none/DIRECT/seed1",
        "color/NMT/seed1",
        "color/DIRECT/seed1",
        "none/DIRECT-blinded/seed1",
        "color/DIRECT-blinded/seed1",
    ]
    assert cells[-1].label == "DIRECT (blinded)"
    assert [m.value for m in decode_modes(config, cells[0])] == ["congruent", "incongruent"]
    assert [m.value for m in decode_modes(config, cells[-1])] == ["blinded"]


def test_cache_key(tiny: dict) -> None:
    """Keys change with results-relevant settings only."""
    config = ExperimentConfig.from_dict(tiny)
    cell = Cell("none", "NMT", 1)
    key = cache_key(config, {"a": "0"}, cell)
    assert key == cache_key(
        ExperimentConfig.from_dict(tiny, {"output": "elsewhere", "threads": 4, "name": "x"}),
        {"a": "0"},
        cell,
    )
    assert key != cache_key(config, {"a": "1"}, cell)
    assert key != cache_key(config, {"a": "0"}, Cell("none", "NMT", 2))
    assert key != cache_key(ExperimentConfig.from_dict(tiny, {"beam": 2}), {"a": "0"}, cell)


def test_config_validation(tiny: dict) -> None:
    """Blinded decoding is requested with blind, multimodal runs need features."""
    with pytest.raises(ValidationError):
        ExperimentConfig.from_dict(tiny, {"congruence": ["blinded"]})
    without_features = {**tiny, "data": {**tiny["data"], "dev": {**tiny["data"]["dev"]}}}
    del without_features["data"]["dev"]["features"]
    with pytest.raises(ValidationError):
        ExperimentConfig.from_dict(without_features)
    assert ExperimentConfig.from_dict({**without_features, "systems": ["NMT"]})


def test_toml_config(tmp_path: Path) -> None:
    """Relative paths in a TOML file are anchored at its directory; overrides win."""
    path = tmp_path / "exp.toml"
    path.write_text(
        'systems = ["NMT"]\n'
        "[data]\n"
        'train = [{ src = "train.en", tgt = "train.fr" }]\n'
        'dev = { src = "dev.en", tgt = "dev.fr" }\n'
        'test = { src = "test.en", tgt = "test.fr" }\n'
        "[train]\n"
        "max_epochs = 5\n",
        encoding="utf-8",
    )
    config = ExperimentConfig.from_toml(path, {"train.max_epochs": 2, "model.hidden_dim": 8})
    assert config.train.max_epochs == 2
    assert config.model.hidden_dim == 8
    assert config.data.dev.src == tmp_path / "dev.en"
    assert config.output == tmp_path / "results"


def test_evaluate_hypotheses() -> None:
    """Subset metrics cover sentences whose source has masked tokens."""
    hyps = [["un", "chat", "rouge"], ["un", "chien"], ["un", "chat", "bleu"]]
    refs = [["un", "chat", "rouge"], ["un", "chien"], ["un", "chat", "rouge"]]
    src = [("a", "[v]", "cat"), ("a", "dog"), ("a", "[v]", "cat")]
    metrics = evaluate_hypotheses(hyps, refs, src, {"rouge": "RED", "bleu": "BLUE"})
    assert set(metrics) == {"full", "subset"}
    assert metrics["subset"]["meteor-lite"].sentences == [0, 2]
    assert metrics["subset"]["color-acc"].sentence_scores == [1.0, 0.0]
    assert metrics["full"]["bleu"].sentences == [0, 1, 2]
    assert "subset" not in evaluate_hypotheses(hyps, refs, [("a",)] * 3, {})
    assert "color-acc" not in evaluate_hypotheses(hyps, refs, None, {})["full"]


def test_run_cache_and_report(tiny: dict) -> None:
    """A grid runs, is reused from cache, recomputes identically and is reported."""
    config = ExperimentConfig.from_dict(tiny)
    results = run_experiment(config, threads=1)
    manifest = json.loads((results / MANIFEST).read_text(encoding="utf-8"))
    assert [e["status"] for e in manifest["cells"]] == ["ok"] * 6
    assert [e["cell"] for e in manifest["cells"]] == sorted(c.id for c in plan_cells(config))

    cell_dir = results / "cells" / "color" / "DIRECT" / "seed1"
    for name in (
        "model.mmtc",
        "src.vocab",
        "tgt.vocab",
        "history.csv",
        "stats.json",
        "hyps.congruent.txt",
        "hyps.incongruent.txt",
        "metrics.congruent.json",
        "metrics.incongruent.json",
        "cell.json",
    ):
        assert (cell_dir / name).is_file(), name
    assert (results / "cells" / "none" / "DIRECT-blinded" / "seed1" / "hyps.blinded.txt").is_file()
    stats = json.loads((cell_dir / "stats.json").read_text(encoding="utf-8"))
    assert stats["train"]["affected_sentences"] == 12

    first = (results / MANIFEST).read_bytes()
    mtime = (cell_dir / "model.mmtc").stat().st_mtime_ns
    run_experiment(config, threads=1)
    assert (cell_dir / "model.mmtc").stat().st_mtime_ns == mtime
    assert (results / MANIFEST).read_bytes() == first
    run_experiment(config, force=True, threads=1)
    assert (results / MANIFEST).read_bytes() == first

    header, rows = read_csv(results / "mean_std.csv")
    assert header == ["", "none", "color"]
    assert [r[0] for r in rows] == ["NMT", "DIRECT", "DIRECT (blinded)"]
    assert all("±" in cell for r in rows for cell in r[1:])
    header, rows = read_csv(results / "gain_drop.csv")
    assert header == ["", "DIRECT"]
    assert [r[0] for r in rows] == ["tiny none", "tiny color", "Average"]
    assert (results / "color_accuracy.csv").is_file()
    markdown = report(results)
    assert markdown.startswith("## METEOR-lite")
    assert (results / "report.md").read_text(encoding="utf-8") == markdown
    assert report(results, fmt="csv").startswith("# mean_std\n")


def test_missing_artifact_recomputes_cell(tiny: dict) -> None:
    """A cached cell whose files were removed is run again and restored."""
    config = ExperimentConfig.from_dict(tiny)
    results = run_experiment(config, threads=1)
    first = (results / MANIFEST).read_bytes()
    cell_dir = results / "cells" / "color" / "DIRECT" / "seed1"
    other = results / "cells" / "color" / "NMT" / "seed1" / "model.mmtc"
    mtime = other.stat().st_mtime_ns
    (cell_dir / "hyps.congruent.txt").unlink()

    run_experiment(config, threads=1)
    assert (cell_dir / "hyps.congruent.txt").is_file()
    assert other.stat().st_mtime_ns == mtime
    assert (results / MANIFEST).read_bytes() == first


def test_rerun_reproduces_artifact_hashes(tiny: dict) -> None:
    """A forced rerun writes files with the same hashes as the manifest."""
    config = ExperimentConfig.from_dict(tiny)
    results = run_experiment(config, threads=1)
    before = {
        e["cell"]: e["artifacts"]
        for e in json.loads((results / MANIFEST).read_text(encoding="utf-8"))["cells"]
    }
    run_experiment(config, force=True, threads=1)
    after = json.loads((results / MANIFEST).read_text(encoding="utf-8"))["cells"]
    assert {e["cell"]: e["artifacts"] for e in after} == before
    for artifacts in before.values():
        assert "model.mmtc" in {Path(name).name for name in artifacts}
        for name, digest in artifacts.items():
            assert file_sha256(results / name) == digest


def test_failed_cells_show_as_dashes(tiny: dict) -> None:
    """A failing scheme is recorded in the manifest and left blank in the tables."""
    config = ExperimentConfig.from_dict(
        tiny,
        {"schemes": [{"variant": "none"}, {"variant": "entity"}], "blind": False},
    )
    results = run_experiment(config, threads=1)
    manifest = json.loads((results / MANIFEST).read_text(encoding="utf-8"))
    status = {e["cell"]: e["status"] for e in manifest["cells"]}
    assert status == {
        "entity/DIRECT/seed1": "failed",
        "entity/NMT/seed1": "failed",
        "none/DIRECT/seed1": "ok",
        "none/NMT/seed1": "ok",
    }
    failed = next(e for e in manifest["cells"] if e["cell"] == "entity/NMT/seed1")
    assert failed["error"].startswith("ContractError")

    _, rows = read_csv(results / "mean_std.csv")
    assert [r[2] for r in rows] == ["—", "—"]
    _, rows = read_csv(results / "gain_drop.csv")
    assert rows[0][0] == "tiny none"
    assert rows[1] == ["tiny entity", "—"]
