"""Run a grid of degradation schemes x systems x seeds and report on it.

Every cell degrades the data, trains one system with one seed, translates the
test set under each congruence mode and evaluates the output. Results are
laid out as

    <output>/config.json
    <output>/manifest.json
    <output>/cells/<scheme>/<system>[-blinded]/seed<n>/
        model.mmtc  src.vocab  tgt.vocab  history.csv  stats.json
        hyps.<mode>.txt  metrics.<mode>.json  cell.json
    <output>/report.md  mean_std.csv  gain_drop.csv  color_accuracy.csv
    <output>/progressive.csv

A cell whose cache key (configuration, input file hashes and cell) matches
the key stored in its cell.json is reused instead of recomputed.
"""

import hashlib
import json
import logging
import traceback
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import portalocker

from mmtprobe._core import (
    ContractError,
    CongruenceMode,
    DegradationConfig,
    ExperimentConfig,
    Fusion,
)
from mmtprobe._decoding import translate_corpus
from mmtprobe._features import FeatureSet, remap_order
from mmtprobe._formats.mmtf import load_features
from mmtprobe._formats.tables import write_csv
from mmtprobe._metrics import (
    MISSING,
    MetricReport,
    Table,
    bleu,
    color_accuracy,
    gain_drop_report,
    load_target_color_lexicon,
    mean_std_table,
    meteor_lite,
    progressive_curve,
)
from mmtprobe._models import TranslationModel
from mmtprobe._text import (
    MASK_TOKEN,
    DegradationSpec,
    DegradationStats,
    EntityAnnotations,
    ParallelSample,
    Vocabulary,
    build_vocab,
    degrade_corpus,
    encode_corpus,
    load_color_lexicon,
    load_corpus,
    stitch_hyphens,
)
from mmtprobe._training import TrainingResult, dev_evaluator, train
from mmtprobe._utils import file_sha256, input_hashes, resolve_threads, validate_data_files

logger = logging.getLogger(__name__)

MANIFEST_LOG = "manifest.jsonl"
MANIFEST = "manifest.json"
CELL_RECORD = "cell.json"


@dataclass(frozen=True, order=True)
class Cell:
    """One training run of the grid."""

    scheme: str
    system: Fusion
    seed: int
    blinded: bool = False

    @property
    def id(self) -> str:
        """Relative directory of the cell."""
        suffix = "-blinded" if self.blinded else ""
        return f"{self.scheme}/{self.system}{suffix}/seed{self.seed}"

    @property
    def label(self) -> str:
        """System name used in reports."""
        return f"{self.system} (blinded)" if self.blinded else self.system


def plan_cells(config: ExperimentConfig) -> list[Cell]:
    """All cells of the grid, blinded variants after the regular ones."""
    cells = [
        Cell(scheme.label, system, seed)
        for scheme in config.schemes
        for system in config.systems
        for seed in config.seeds
    ]
    if config.blind:
        cells += [
            Cell(scheme.label, system, seed, blinded=True)
            for scheme in config.schemes
            for system in config.systems
            if system != "NMT"
            for seed in config.seeds
        ]
    return cells


def decode_modes(config: ExperimentConfig, cell: Cell) -> list[CongruenceMode]:
    """Congruence modes a cell is decoded with."""
    return [CongruenceMode.BLINDED] if cell.blinded else list(config.congruence)


@dataclass
class ExperimentData:
    """Corpora, features and resources of an experiment, before degradation."""

    train: list[ParallelSample]
    dev: list[ParallelSample]
    test: list[ParallelSample]
    train_features: FeatureSet | None
    dev_features: FeatureSet | None
    test_features: FeatureSet | None
    annotations: dict[str, EntityAnnotations | None]
    color_lexicon: frozenset[str]
    target_lexicon: dict[str, str]


def _concat_features(sets: list[FeatureSet]) -> FeatureSet:
    layouts = {(fs.layout, fs.data.shape[1:]) for fs in sets}
    if len(layouts) != 1:
        msg = f"Training feature files disagree in layout or shape: {sorted(map(str, layouts))}"
        raise ContractError(msg)
    return FeatureSet(np.concatenate([fs.data for fs in sets]), sets[0].layout)


def load_data(config: ExperimentConfig) -> ExperimentData:
    """Load every split; training splits are concatenated with offset image indices."""
    data = config.data
    validate_data_files(data)
    train: list[ParallelSample] = []
    train_features: list[FeatureSet] = []
    train_annotations: dict[int, tuple[int, ...]] = {}
    has_annotations = False
    for split in data.train:
        offset = len(train)
        train += load_corpus(split.src, split.tgt, tokenized=data.tokenized, image_offset=offset)
        if split.features is not None:
            train_features.append(load_features(split.features))
        if split.annotations is not None:
            has_annotations = True
            for i, positions in EntityAnnotations.from_tsv(split.annotations).indices.items():
                train_annotations[offset + i] = positions

    def _annotations(path: Path | None) -> EntityAnnotations | None:
        return EntityAnnotations.from_tsv(path) if path is not None else None

    def _features(path: Path | None) -> FeatureSet | None:
        return load_features(path) if path is not None else None

    return ExperimentData(
        train=train,
        dev=load_corpus(data.dev.src, data.dev.tgt, tokenized=data.tokenized),
        test=load_corpus(data.test.src, data.test.tgt, tokenized=data.tokenized),
        train_features=_concat_features(train_features) if train_features else None,
        dev_features=_features(data.dev.features),
        test_features=_features(data.test.features),
        annotations={
            "train": EntityAnnotations(indices=train_annotations) if has_annotations else None,
            "dev": _annotations(data.dev.annotations),
            "test": _annotations(data.test.annotations),
        },
        color_lexicon=load_color_lexicon(data.color_lexicon),
        target_lexicon=load_target_color_lexicon(data.target_color_lexicon),
    )


def degrade_splits(
    data: ExperimentData,
    scheme: DegradationConfig,
) -> tuple[dict[str, list[ParallelSample]], dict[str, DegradationStats]]:
    """Apply one scheme to train, dev and test."""
    corpora, stats = {}, {}
    for name, corpus in (("train", data.train), ("dev", data.dev), ("test", data.test)):
        if scheme.variant == "entity" and data.annotations[name] is None:
            msg = f"Entity masking needs annotations for the {name} split."
            raise ContractError(msg)
        spec = DegradationSpec.from_config(scheme, data.color_lexicon, data.annotations[name])
        corpora[name], stats[name] = degrade_corpus(corpus, spec)
    return corpora, stats


def _scheme(config: ExperimentConfig, label: str) -> DegradationConfig:
    return next(s for s in config.schemes if s.label == label)


def train_cell(
    config: ExperimentConfig,
    cell: Cell,
    cell_dir: str | Path,
    data: ExperimentData | None = None,
) -> tuple[TrainingResult, dict[str, list[ParallelSample]]]:
    """Degrade, build vocabularies and train one cell; writes model files.

    Returns the training result and the degraded corpora.
    """
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    data = data or load_data(config)
    corpora, stats = degrade_splits(data, _scheme(config, cell.scheme))
    (cell_dir / "stats.json").write_text(
        json.dumps({k: v.model_dump() for k, v in stats.items()}, indent=2, sort_keys=True),
        encoding="utf-8",
    )

    src_vocab = build_vocab(s.src for s in corpora["train"])
    tgt_vocab = build_vocab(s.tgt for s in corpora["train"])
    src_vocab.to_file(cell_dir / "src.vocab")
    tgt_vocab.to_file(cell_dir / "tgt.vocab")

    model_config = config.model.model_copy(update={"fusion": cell.system})
    model = TranslationModel.create(model_config, src_vocab, tgt_vocab, cell.seed)
    train_config = config.train.model_copy(update={"seed": cell.seed})
    mode = CongruenceMode.BLINDED if cell.blinded else CongruenceMode.CONGRUENT
    index_map = None
    if cell.blinded and data.train_features is not None:
        index_map = remap_order(
            data.train_features,
            mode,
            len(corpora["train"]),
            cell.seed,
            config.blind_order,
        )
    logger.info("Training %s on %d sentences", cell.id, len(corpora["train"]))
    result = train(
        model,
        encode_corpus(corpora["train"], src_vocab, tgt_vocab),
        data.train_features if model_config.feature_layout else None,
        train_config,
        dev_evaluator(
            corpora["dev"],
            data.dev_features if model_config.feature_layout else None,
            train_config,
            mode,
            cell.seed,
            config.blind_order,
        ),
        index_map=index_map,
        history_path=cell_dir / "history.csv",
    )
    result.model.save(
        cell_dir / "model.mmtc",
        metadata={"best_epoch": result.best_epoch, "best_dev_score": result.best_score},
    )
    return result, corpora


def evaluate_hypotheses(
    hyps: list[list[str]],
    refs: list[list[str]],
    degraded_src: list[tuple[str, ...]] | None,
    target_lexicon: dict[str, str],
) -> dict[str, dict[str, MetricReport]]:
    """Full-set metrics, plus subset metrics on sentences with masked tokens."""

    def _metrics(selection: list[int]) -> dict[str, MetricReport]:
        sub_hyps = [hyps[i] for i in selection]
        sub_refs = [refs[i] for i in selection]
        reports = {
            "meteor-lite": meteor_lite(sub_hyps, sub_refs),
            "bleu": bleu(sub_hyps, sub_refs),
        }
        for report in reports.values():
            report.sentences = list(selection)
        chosen = set(selection)
        try:
            mask = [i in chosen for i in range(len(refs))]
            reports["color-acc"] = color_accuracy(hyps, refs, mask, target_lexicon)
        except ContractError:
            logger.debug("No reference colors in the selection, skipping color accuracy")
        return reports

    results = {"full": _metrics(list(range(len(refs))))}
    if degraded_src is not None:
        subset = [i for i, src in enumerate(degraded_src) if MASK_TOKEN in src]
        if subset:
            results["subset"] = _metrics(subset)
    return results


def decode_cell(
    config: ExperimentConfig,
    cell: Cell,
    cell_dir: str | Path,
    model: TranslationModel,
    test: list[ParallelSample],
    data: ExperimentData,
) -> None:
    """Translate the test set under each mode and write hypotheses and metrics."""
    cell_dir = Path(cell_dir)
    refs = [stitch_hyphens(s.tgt) for s in test]
    for mode in decode_modes(config, cell):
        hyps = translate_corpus(
            model,
            test,
            data.test_features if model.config.feature_layout else None,
            mode,
            beam=config.beam,
            out_path=cell_dir / f"hyps.{mode.value}.txt",
            seed=cell.seed,
            blind_order=config.blind_order,
        )
        metrics = evaluate_hypotheses(hyps, refs, [s.src for s in test], data.target_lexicon)
        (cell_dir / f"metrics.{mode.value}.json").write_text(
            json.dumps(
                {
                    subset: {name: r.model_dump() for name, r in reports.items()}
                    for subset, reports in metrics.items()
                },
                indent=2,
                sort_keys=True,
            ),
            encoding="utf-8",
        )


def cache_key(config: ExperimentConfig, hashes: dict[str, str], cell: Cell) -> str:
    """Content hash of the settings, the inputs and the cell."""
    payload = json.dumps(
        {"config": config.subtree_hash_input(), "inputs": hashes, "cell": cell.id},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _artifacts(results_dir: Path, cell_dir: Path) -> dict[str, str]:
    return {
        path.relative_to(results_dir).as_posix(): file_sha256(path)
        for path in sorted(cell_dir.iterdir())
        if path.is_file() and path.name != CELL_RECORD
    }


def _artifacts_intact(results_dir: Path, record: dict) -> bool:
    """Every recorded artifact is on disk with its recorded hash."""
    artifacts = record.get("artifacts") or {}
    for name, digest in artifacts.items():
        path = results_dir / name
        if not path.is_file() or file_sha256(path) != digest:
            logger.warning("Cached artifact %s is missing or changed, recomputing", name)
            return False
    return bool(artifacts)


def _append_manifest(results_dir: Path, entry: dict) -> None:
    with portalocker.Lock(results_dir / MANIFEST_LOG, "a", timeout=60) as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")
        f.flush()


def run_cell(
    config: ExperimentConfig,
    cell: Cell,
    results_dir: str | Path,
    key: str,
    force: bool = False,
) -> dict:
    """Run or reuse one cell and append its manifest entry.

    Failures are recorded in the entry instead of raised.
    """
    results_dir = Path(results_dir)
    cell_dir = results_dir / "cells" / cell.id
    record_path = cell_dir / CELL_RECORD
    if not force and record_path.is_file():
        record = json.loads(record_path.read_text(encoding="utf-8"))
        if (
            record.get("key") == key
            and record.get("status") == "ok"
            and _artifacts_intact(results_dir, record)
        ):
            logger.info("Reusing cached cell %s", cell.id)
            _append_manifest(results_dir, record)
            return record

    entry: dict = {
        "cell": cell.id,
        "scheme": cell.scheme,
        "system": cell.system,
        "seed": cell.seed,
        "blinded": cell.blinded,
        "key": key,
    }
    try:
        data = load_data(config)
        result, corpora = train_cell(config, cell, cell_dir, data)
        decode_cell(config, cell, cell_dir, result.model, corpora["test"], data)
        entry["status"] = "ok"
        entry["artifacts"] = _artifacts(results_dir, cell_dir)
        logger.info("Finished %s (best dev %.4f)", cell.id, result.best_score)
    except Exception as e:  # noqa: BLE001, a failed cell must not stop the grid
        logger.error("Cell %s failed: %s", cell.id, e)  # noqa: TRY400
        logger.debug(traceback.format_exc())
        entry["status"] = "failed"
        entry["error"] = f"{type(e).__name__}: {e}"
    cell_dir.mkdir(parents=True, exist_ok=True)
    record_path.write_text(json.dumps(entry, indent=2, sort_keys=True), encoding="utf-8")
    _append_manifest(results_dir, entry)
    return entry


def run_experiment(
    config: ExperimentConfig,
    force: bool = False,
    threads: int | None = None,
) -> Path:
    """Run every cell, write the manifest and the reports.

    Returns:
        The results directory.

    """
    results_dir = Path(config.output)
    results_dir.mkdir(parents=True, exist_ok=True)
    validate_data_files(config.data)
    config.to_json(results_dir / "config.json")
    (results_dir / MANIFEST_LOG).write_text("", encoding="utf-8")
    hashes = input_hashes(config.data)
    cells = plan_cells(config)
    workers = threads or resolve_threads(config.threads)
    logger.info("Running %d cells with %d worker(s) into %s", len(cells), workers, results_dir)

    if workers == 1:
        entries = [
            run_cell(config, c, results_dir, cache_key(config, hashes, c), force) for c in cells
        ]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(run_cell, config, c, results_dir, cache_key(config, hashes, c), force)
                for c in cells
            ]
            entries = [f.result() for f in futures]

    manifest = {"cells": sorted(entries, key=lambda e: e["cell"])}
    (results_dir / MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    failed = [e["cell"] for e in entries if e["status"] != "ok"]
    if failed:
        logger.warning("%d of %d cells failed: %s", len(failed), len(entries), ", ".join(failed))
    report(results_dir)
    return results_dir


def load_cell_metrics(
    results_dir: str | Path,
    cell_id: str,
    mode: str,
) -> dict[str, dict[str, MetricReport]] | None:
    """Metrics of one cell and mode, None if absent."""
    path = Path(results_dir) / "cells" / cell_id / f"metrics.{mode}.json"
    if not path.is_file():
        return None
    raw = json.loads(path.read_text(encoding="utf-8"))
    return {
        subset: {name: MetricReport.model_validate(r) for name, r in reports.items()}
        for subset, reports in raw.items()
    }


def _collect(
    results_dir: Path,
    config: ExperimentConfig,
    entries: list[dict],
    metric: str,
    subset: str = "full",
) -> dict[tuple[str, str, str], list[MetricReport]]:
    """Reports keyed by (scheme, system label, mode), one per successful seed."""
    grid: dict[tuple[str, str, str], list[MetricReport]] = defaultdict(list)
    for entry in entries:
        if entry["status"] != "ok":
            continue
        cell = Cell(entry["scheme"], entry["system"], entry["seed"], entry["blinded"])
        for mode in decode_modes(config, cell):
            metrics = load_cell_metrics(results_dir, cell.id, mode.value)
            if not metrics:
                continue
            reports = metrics.get(subset) or metrics["full"]
            if metric in reports:
                grid[(cell.scheme, cell.label, mode.value)].append(reports[metric])
    return grid


def report(results_dir: str | Path, fmt: Literal["markdown", "csv"] = "markdown") -> str:
    """Write mean ± stdev, gain/drop, color accuracy and progressive tables.

    Missing cells are rendered as a dash. Returns the main tables as text.
    """
    results_dir = Path(results_dir)
    config = ExperimentConfig.model_validate_json(
        (results_dir / "config.json").read_text(encoding="utf-8"),
    )
    manifest_path = results_dir / MANIFEST
    if manifest_path.is_file():
        entries = json.loads(manifest_path.read_text(encoding="utf-8"))["cells"]
    else:
        log = (results_dir / MANIFEST_LOG).read_text(encoding="utf-8").splitlines()
        entries = [json.loads(line) for line in log if line.strip()]
    schemes = [s.label for s in config.schemes]
    labels = [c.label for c in plan_cells(config) if c.seed == config.seeds[0]]
    labels = list(dict.fromkeys(label for label in labels))

    def _runs(
        grid: dict[tuple[str, str, str], list[MetricReport]],
    ) -> dict[str, dict[str, list[float]]]:
        out: dict[str, dict[str, list[float]]] = {}
        for label in labels:
            mode = "blinded" if label.endswith("(blinded)") else "congruent"
            out[label] = {
                scheme: [r.corpus_score for r in grid.get((scheme, label, mode), [])]
                for scheme in schemes
            }
        return out

    meteor = _collect(results_dir, config, entries, "meteor-lite")
    tables: dict[str, Table] = {"mean_std": mean_std_table(_runs(meteor), schemes)}

    mmt = [s for s in config.systems if s != "NMT"]
    if "NMT" in config.systems and mmt and {"congruent", "incongruent"} <= {
        m.value for m in config.congruence
    }:
        complete, incomplete = {}, []
        for scheme in schemes:
            grid = {
                (system, mode): meteor.get((scheme, system, mode), [])
                for system in config.systems
                for mode in ("congruent", "incongruent")
            }
            if all(grid[key] for key in grid if key[0] in mmt) and grid[("NMT", "congruent")]:
                complete[f"{config.name} {scheme}"] = grid
            else:
                incomplete.append(f"{config.name} {scheme}")
        table = (
            gain_drop_report(complete, systems=mmt)
            if complete
            else Table(header=["", *mmt], rows=[])
        )
        table.rows += [[label, *([MISSING] * len(mmt))] for label in incomplete]
        tables["gain_drop"] = table

    colors = _collect(results_dir, config, entries, "color-acc", subset="subset")
    if colors:
        tables["color_accuracy"] = mean_std_table(_runs(colors), schemes)

    progressive = [s for s in config.schemes if s.variant in ("progressive", "none")]
    if any(s.variant == "progressive" for s in progressive):
        curve: dict[int | str, dict[str, float]] = {}
        nonmasked: dict[int | str, float] = {}
        for scheme in progressive:
            key: int | str = scheme.k if scheme.k is not None else "full"
            scores = {}
            for system in config.systems:
                runs = meteor.get((scheme.label, system, "congruent"), [])
                if runs:
                    scores[system] = float(np.mean([r.corpus_score for r in runs])) * 100
            curve[key] = scores
            fraction = _train_nonmasked(results_dir, entries, scheme.label)
            if fraction is not None:
                nonmasked[key] = fraction
        tables["progressive"] = progressive_curve(curve, nonmasked=nonmasked)

    for name, table in tables.items():
        write_csv(results_dir / f"{name}.csv", table.header, table.rows)
    titles = {
        "mean_std": "METEOR-lite (mean ± stdev over seeds)",
        "gain_drop": "Multimodal gain (↓ incongruence drop), METEOR-lite",
        "color_accuracy": "Color accuracy on degraded sentences",
        "progressive": "Progressive masking",
    }
    markdown = "\n".join(
        f"## {titles[name]}\n\n{table.to_markdown()}" for name, table in tables.items()
    )
    (results_dir / "report.md").write_text(markdown, encoding="utf-8")
    if fmt == "csv":
        return "\n".join(f"# {name}\n{table.to_csv()}" for name, table in tables.items())
    return markdown


def _train_nonmasked(results_dir: Path, entries: list[dict], scheme: str) -> float | None:
    """Fraction of training source tokens left unmasked by a scheme."""
    for entry in entries:
        if entry["scheme"] != scheme or entry["status"] != "ok":
            continue
        path = results_dir / "cells" / entry["cell"] / "stats.json"
        if path.is_file():
            stats = json.loads(path.read_text(encoding="utf-8"))["train"]
            return 1.0 - DegradationStats.model_validate(
                {k: stats[k] for k in ("total_tokens", "masked_tokens", "affected_sentences")},
            ).masked_fraction
    return None


def vocabularies(cell_dir: str | Path) -> tuple[Vocabulary, Vocabulary]:
    """Source and target vocabularies stored with a cell's checkpoint."""
    cell_dir = Path(cell_dir)
    return Vocabulary.from_file(cell_dir / "src.vocab"), Vocabulary.from_file(
        cell_dir / "tgt.vocab"
    )
