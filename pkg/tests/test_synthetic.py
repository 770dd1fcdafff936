"""Tests for the color grounding task generator."""

from pathlib import Path

import numpy as np
import pytest

from mmtprobe import ExperimentConfig, SyntheticTaskSpec, generate_synthetic, load_features
from mmtprobe._core import ContractError
from mmtprobe._synthetic import COLOR_POSITION, COLORS, transduce
from mmtprobe._text import MASK_TOKEN, read_tokens


def test_transduction(test_data: dict) -> None:
    """Known sentence pairs."""
    for src, tgt in test_data["transduction_pairs"]:
        assert transduce(src) == tgt


def test_transduction_rejects_other_sentences() -> None:
    """Only template sentences can be rendered."""
    with pytest.raises(ContractError):
        transduce("a man running".split())
    with pytest.raises(ContractError) as context:
        transduce("a man in a red hat flying".split())
    assert "flying" in str(context.value)


def test_spec_validation() -> None:
    """Colors must fit in the channels and lengths in the template."""
    with pytest.raises(ValueError):
        SyntheticTaskSpec(num_colors=8, channels=4)
    with pytest.raises(ValueError):
        SyntheticTaskSpec(length_range=(6, 8))


def _spec(**overrides: object) -> SyntheticTaskSpec:
    settings = {"train_size": 20, "dev_size": 5, "test_size": 5, "num_colors": 4, "channels": 6}
    return SyntheticTaskSpec(**{**settings, **overrides})


def test_generated_files(tmp_path: Path) -> None:
    """Every split gets aligned sources, targets, masked sources, features and truth."""
    dataset = generate_synthetic(_spec(length_range=(7, 11)), tmp_path)
    for name, size in (("train", 20), ("dev", 5), ("test", 5)):
        src = read_tokens(tmp_path / f"{name}.en")
        tgt = read_tokens(tmp_path / f"{name}.fr")
        deprived = read_tokens(tmp_path / f"{name}.en.deprived")
        assert len(src) == len(tgt) == len(deprived) == size
        for s, t, d in zip(src, tgt, deprived, strict=True):
            assert 7 <= len(s) <= 11
            assert transduce(s) == t
            assert d[COLOR_POSITION] == MASK_TOKEN
            assert d[:COLOR_POSITION] + d[COLOR_POSITION + 1 :] == (
                s[:COLOR_POSITION] + s[COLOR_POSITION + 1 :]
            )
        features = load_features(tmp_path / f"{name}.mmtf")
        assert features.data.shape == (size, 6, 2, 2)
        labels = dataset.splits[name].labels
        assert [list(COLORS)[k] for k in labels] == [s[COLOR_POSITION] for s in src]
        truth = (tmp_path / f"{name}.truth.tsv").read_text(encoding="utf-8").splitlines()
        assert truth[0] == f"0\t{labels[0]}\t{src[0][COLOR_POSITION]}"


def test_features_encode_the_color(tmp_path: Path) -> None:
    """Without noise the strongest channel is the color class."""
    dataset = generate_synthetic(_spec(sigma=0.0), tmp_path)
    features = load_features(tmp_path / "train.mmtf")
    pooled = features.data.mean(axis=(2, 3))
    np.testing.assert_array_equal(np.argmax(pooled, axis=1), dataset.splits["train"].labels)


def test_same_seed_same_bytes(tmp_path: Path) -> None:
    """Generation is a pure function of the spec."""
    generate_synthetic(_spec(seed=5), tmp_path / "a")
    generate_synthetic(_spec(seed=5), tmp_path / "b")
    generate_synthetic(_spec(seed=6), tmp_path / "c")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "train.en").read_bytes() != (tmp_path / "c" / "train.en").read_bytes()


def test_experiment_file(tmp_path: Path) -> None:
    """The written experiment loads and points at the generated files."""
    generate_synthetic(_spec(), tmp_path)
    config = ExperimentConfig.from_toml(tmp_path / "experiment.toml")
    assert config.systems == ["NMT", "DIRECT"]
    assert config.blind
    assert config.beam == 12
    assert config.model.feature_dim == 6
    assert config.data.train[0].features == tmp_path / "train.mmtf"
    assert config.output == tmp_path / "results"
