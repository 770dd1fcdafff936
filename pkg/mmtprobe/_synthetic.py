"""Desk-scale color grounding task.

Sources follow the template "a <noun> in a <color> <noun> <verb> [adverbs]"
and targets are a word-by-word French rendering in which the color follows
its noun. When the source color is masked, only the image features (a noisy
one-hot code of the color class) can tell the model which color to produce.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mmtprobe._core import ContractError, SyntheticTaskSpec
from mmtprobe._features import synthesize_features
from mmtprobe._formats.mmtf import write_features
from mmtprobe._text import MASK_TOKEN, write_tokens

logger = logging.getLogger(__name__)

COLORS = {
    "red": "rouge",
    "blue": "bleu",
    "green": "vert",
    "yellow": "jaune",
    "black": "noir",
    "white": "blanc",
    "pink": "rose",
    "gray": "gris",
    "purple": "violet",
    "brown": "marron",
}
NOUNS = {
    "man": "homme",
    "boy": "garçon",
    "dog": "chien",
    "cat": "chat",
    "hat": "chapeau",
    "coat": "manteau",
    "truck": "camion",
    "boat": "bateau",
    "ball": "ballon",
    "chair": "fauteuil",
    "bag": "sac",
    "horse": "cheval",
    "bird": "oiseau",
    "sweater": "pull",
    "box": "carton",
    "garden": "jardin",
}
VERBS = {
    "running": "court",
    "sleeping": "dort",
    "jumping": "saute",
    "waiting": "attend",
    "smiling": "sourit",
    "standing": "reste",
    "walking": "marche",
    "playing": "joue",
    "eating": "mange",
    "singing": "chante",
}
ADVERBS = {
    "outside": "dehors",
    "quietly": "doucement",
    "again": "encore",
    "together": "ensemble",
}
FUNCTION_WORDS = {"a": "un", "in": "dans"}
COLOR_POSITION = 4
SPLITS = ("train", "dev", "test")


def transduce(src: list[str]) -> list[str]:
    """French rendering of a template sentence, color after its noun."""
    if len(src) < 7 or src[0] != "a" or src[2] != "in" or src[3] != "a":
        msg = f"Not a template sentence: {' '.join(src)}"
        raise ContractError(msg)
    _, noun1, _, _, color, noun2, verb, *adverbs = src
    try:
        return [
            FUNCTION_WORDS["a"],
            NOUNS[noun1],
            FUNCTION_WORDS["in"],
            FUNCTION_WORDS["a"],
            NOUNS[noun2],
            COLORS[color],
            VERBS[verb],
            *(ADVERBS[a] for a in adverbs),
        ]
    except KeyError as e:
        msg = f"Unknown template word {e.args[0]!r} in: {' '.join(src)}"
        raise ContractError(msg) from None


@dataclass
class SyntheticSplit:
    """Sentences and color classes of one split."""

    src: list[list[str]]
    tgt: list[list[str]]
    labels: np.ndarray

    @property
    def deprived(self) -> list[list[str]]:
        """Sources with the color word masked."""
        return [
            [MASK_TOKEN if i == COLOR_POSITION else t for i, t in enumerate(s)] for s in self.src
        ]


@dataclass
class SyntheticDataset:
    """Generated splits and the files they were written to."""

    splits: dict[str, SyntheticSplit]
    files: dict[str, Path] = field(default_factory=dict)


def sample_split(spec: SyntheticTaskSpec, size: int, rng: np.random.Generator) -> SyntheticSplit:
    """Draw template sentences and their color classes."""
    colors = list(COLORS)[: spec.num_colors]
    nouns = list(NOUNS)[: spec.num_nouns]
    verbs = list(VERBS)[: spec.num_verbs]
    adverbs = list(ADVERBS)
    low, high = spec.length_range
    src, tgt, labels = [], [], []
    for _ in range(size):
        label = int(rng.integers(spec.num_colors))
        n_adverbs = int(rng.integers(low, high + 1)) - 7
        sentence = [
            "a",
            nouns[int(rng.integers(len(nouns)))],
            "in",
            "a",
            colors[label],
            nouns[int(rng.integers(len(nouns)))],
            verbs[int(rng.integers(len(verbs)))],
            *(adverbs[int(i)] for i in rng.permutation(len(adverbs))[:n_adverbs]),
        ]
        src.append(sentence)
        tgt.append(transduce(sentence))
        labels.append(label)
    return SyntheticSplit(src, tgt, np.asarray(labels, dtype=np.int64))


def _experiment_template(spec: SyntheticTaskSpec) -> str:
    """TOML experiment running NMT and DIRECT on the generated task."""
    splits = "\n".join(
        f'{name} = {{ src = "{name}.en", tgt = "{name}.fr", features = "{name}.mmtf" }}'
        for name in ("dev", "test")
    )
    return f"""name = "color-grounding"
systems = ["NMT", "DIRECT"]
seeds = [1, 2, 3]
congruence = ["congruent", "incongruent"]
blind = true
beam = 12
output = "results"

[[schemes]]
variant = "color"

[data]
train = [{{ src = "train.en", tgt = "train.fr", features = "train.mmtf" }}]
{splits}

[model]
emb_dim = 64
hidden_dim = 128
feature_dim = {spec.channels}

[train]
max_epochs = 30
patience = 5
"""


def generate_synthetic(spec: SyntheticTaskSpec, out_dir: str | Path) -> SyntheticDataset:
    """Write sources, targets, masked sources, features and truth maps per split.

    Files per split: <split>.en, <split>.fr, <split>.en.deprived,
    <split>.mmtf (spatial 2 x 2) and <split>.truth.tsv. An experiment.toml
    for NMT versus DIRECT is written next to them.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sizes = {"train": spec.train_size, "dev": spec.dev_size, "test": spec.test_size}
    dataset = SyntheticDataset(splits={})
    for split_id, name in enumerate(SPLITS):
        split = sample_split(spec, sizes[name], np.random.default_rng([spec.seed, split_id]))
        dataset.splits[name] = split
        features = synthesize_features(
            split.labels,
            spec.channels,
            seed=spec.seed * 1000 + split_id,
            num_classes=spec.num_colors,
            sigma=spec.sigma,
            layout="spatial",
        )
        files = {
            f"{name}.en": out_dir / f"{name}.en",
            f"{name}.fr": out_dir / f"{name}.fr",
            f"{name}.en.deprived": out_dir / f"{name}.en.deprived",
            f"{name}.mmtf": out_dir / f"{name}.mmtf",
            f"{name}.truth.tsv": out_dir / f"{name}.truth.tsv",
        }
        write_tokens(files[f"{name}.en"], split.src)
        write_tokens(files[f"{name}.fr"], split.tgt)
        write_tokens(files[f"{name}.en.deprived"], split.deprived)
        write_features(files[f"{name}.mmtf"], features)
        with files[f"{name}.truth.tsv"].open("w", encoding="utf-8") as f:
            f.writelines(
                f"{i}\t{label}\t{s[COLOR_POSITION]}\n"
                for i, (label, s) in enumerate(zip(split.labels, split.src, strict=True))
            )
        dataset.files.update(files)
    toml_path = out_dir / "experiment.toml"
    toml_path.write_text(_experiment_template(spec), encoding="utf-8")
    dataset.files["experiment.toml"] = toml_path
    logger.info(
        "Wrote color grounding task (%d/%d/%d sentences, %d colors) to %s",
        spec.train_size,
        spec.dev_size,
        spec.test_size,
        spec.num_colors,
        out_dir,
    )
    return dataset
