"""Pytest configuration."""

from pathlib import Path

import numpy as np
import pytest

from mmtprobe import ModelConfig, TranslationModel, Vocabulary
from mmtprobe._text import RESERVED_TOKENS


@pytest.fixture(scope="session")
def test_data() -> dict:
    """Data passed to all pytests."""
    base_folder = Path(__file__).parent / "test_data"
    with (base_folder / "transduction_pairs.tsv").open(encoding="utf-8") as f:
        pairs = [tuple(s.split() for s in line.rstrip("\n").split("\t")) for line in f]
    return {
        "annotations_path": base_folder / "annotations.tsv",
        "corpus_src_path": base_folder / "corpus.en",
        "corpus_tgt_path": base_folder / "corpus.fr",
        "transduction_pairs": pairs,
    }


def toy_vocab(n_words: int, prefix: str = "w") -> Vocabulary:
    """Reserved tokens plus n_words made-up words."""
    return Vocabulary([*RESERVED_TOKENS, *(f"{prefix}{i}" for i in range(n_words))])


def toy_model(
    fusion: str = "NMT",
    seed: int = 0,
    src_words: int = 7,
    tgt_words: int = 7,
    **overrides: object,
) -> TranslationModel:
    """Small model without dropout for gradient and search checks."""
    settings = {
        "emb_dim": 6,
        "hidden_dim": 5,
        "enc_layers": 1,
        "dropout_src_emb": 0.0,
        "dropout_enc_out": 0.0,
        "dropout_dec_out": 0.0,
        "feature_dim": 4,
    }
    config = ModelConfig(fusion=fusion, **{**settings, **overrides})
    return TranslationModel.create(
        config,
        toy_vocab(src_words, "s"),
        toy_vocab(tgt_words, "t"),
        seed,
    )


def toy_features(fusion: str, n: int, seed: int = 0) -> np.ndarray | None:
    """Random feature rows in the shape a fusion expects: (n, C) or (n, P, C)."""
    rng = np.random.default_rng(seed)
    if fusion == "INIT":
        return rng.normal(size=(n, 4))
    if fusion in ("DIRECT", "HIER"):
        return rng.normal(size=(n, 3, 4))
    return None
