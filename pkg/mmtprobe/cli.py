"""Command line interface: `mmtprobe <command> [options]`."""

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from mmtprobe._core import (
    CongruenceMode,
    DegradationConfig,
    ExperimentConfig,
    SyntheticTaskSpec,
)
from mmtprobe._decoding import translate_corpus
from mmtprobe._formats.mmtf import load_features
from mmtprobe._metrics import (
    MetricReport,
    bleu,
    color_accuracy,
    load_target_color_lexicon,
    meteor_lite,
    significance_test,
)
from mmtprobe._models import TranslationModel
from mmtprobe._synthetic import generate_synthetic
from mmtprobe._text import (
    MASK_TOKEN,
    DegradationSpec,
    DegradationStats,
    EntityAnnotations,
    ParallelSample,
    Vocabulary,
    build_vocab,
    degrade_sentence,
    load_color_lexicon,
    load_corpus,
    read_tokens,
    write_tokens,
)
from mmtprobe._utils import parse_override, resolve_threads
from mmtprobe.experiment import MANIFEST, Cell, report, run_experiment, train_cell
from mmtprobe.version import __version__

logger = logging.getLogger(__name__)

METRICS = {"meteor-lite": meteor_lite, "bleu": bleu}


def _score(
    metric: str,
    hyps: list[list[str]],
    refs: list[list[str]],
    selection: list[bool] | None,
    lexicon_path: str | None,
) -> MetricReport:
    if metric == "color-acc":
        return color_accuracy(hyps, refs, selection, load_target_color_lexicon(lexicon_path))
    if selection is None:
        return METRICS[metric](hyps, refs)
    chosen = [i for i, keep in enumerate(selection) if keep]
    result = METRICS[metric]([hyps[i] for i in chosen], [refs[i] for i in chosen])
    result.sentences = chosen
    return result


def _subset(path: str | None) -> list[bool] | None:
    if path is None:
        return None
    return [MASK_TOKEN in tokens for tokens in read_tokens(path)]


def cmd_prepare(args: argparse.Namespace) -> int:
    """Tokenize raw parallel text and build vocabularies."""
    corpus = load_corpus(args.src, args.tgt, tokenized=False)
    out = Path(args.out)
    write_tokens(out / f"{args.prefix}.src", [s.src for s in corpus])
    write_tokens(out / f"{args.prefix}.tgt", [s.tgt for s in corpus])
    src_vocab = build_vocab(s.src for s in corpus)
    tgt_vocab = build_vocab(s.tgt for s in corpus)
    src_vocab.to_file(out / "src.vocab")
    tgt_vocab.to_file(out / "tgt.vocab")
    print(
        f"{len(corpus)} sentence pairs, vocabulary sizes "
        f"{len(src_vocab)} (source) / {len(tgt_vocab)} (target)",
    )
    return 0


def cmd_degrade(args: argparse.Namespace) -> int:
    """Mask a tokenized source file and print masking statistics."""
    config = DegradationConfig(variant=args.scheme, k=args.k)
    annotations = EntityAnnotations.from_tsv(args.annotations) if args.annotations else None
    spec = DegradationSpec.from_config(config, load_color_lexicon(args.lexicon), annotations)
    degraded = [
        degrade_sentence(tokens, spec, i) for i, tokens in enumerate(read_tokens(args.input))
    ]
    write_tokens(args.output, degraded)
    masked = [sum(t == MASK_TOKEN for t in tokens) for tokens in degraded]
    stats = DegradationStats(
        total_tokens=sum(len(tokens) for tokens in degraded),
        masked_tokens=sum(masked),
        affected_sentences=sum(m > 0 for m in masked),
    )
    print(
        f"{config.label}: {stats.masked_tokens}/{stats.total_tokens} tokens masked "
        f"({100 * stats.masked_fraction:.1f}%), "
        f"{stats.affected_sentences}/{len(degraded)} sentences affected",
    )
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    """Generate the color grounding task."""
    spec = SyntheticTaskSpec(
        train_size=args.train_size,
        dev_size=args.dev_size,
        test_size=args.test_size,
        num_colors=args.colors,
        channels=args.channels,
        sigma=args.sigma,
        seed=args.seed,
    )
    dataset = generate_synthetic(spec, args.out)
    print(f"Wrote {len(dataset.files)} files to {args.out}")
    return 0


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides = dict(parse_override(s) for s in args.set or [])
    if getattr(args, "output", None):
        overrides["output"] = str(Path(args.output).resolve())
    if getattr(args, "seeds", None):
        overrides["seeds"] = args.seeds
    if getattr(args, "threads", None):
        overrides["threads"] = args.threads
    return ExperimentConfig.from_toml(args.config, overrides)


def cmd_train(args: argparse.Namespace) -> int:
    """Train a single system, seed and degradation scheme."""
    config = _load_config(args)
    scheme = args.scheme or config.schemes[0].label
    if scheme not in {s.label for s in config.schemes}:
        labels = [s.label for s in config.schemes]
        msg = f"Scheme {scheme!r} is not configured, choose from {labels}."
        raise ValueError(msg)
    cell = Cell(scheme, args.system, args.seed, blinded=args.blind)
    out = Path(args.out) if args.out else Path(config.output) / "cells" / cell.id
    result, _ = train_cell(config, cell, out)
    print(
        f"Best dev {config.train.eval_metric} {result.best_score:.4f} "
        f"at epoch {result.best_epoch}",
    )
    return 0


def cmd_translate(args: argparse.Namespace) -> int:
    """Decode a tokenized source file with a trained checkpoint."""
    checkpoint = Path(args.checkpoint)
    src_vocab = Vocabulary.from_file(args.src_vocab or checkpoint.parent / "src.vocab")
    tgt_vocab = Vocabulary.from_file(args.tgt_vocab or checkpoint.parent / "tgt.vocab")
    model = TranslationModel.load(checkpoint, src_vocab, tgt_vocab)
    # Decoding reads the source side only.
    corpus = [
        ParallelSample(src=tokens, tgt=tokens, image_index=i)
        for i, tokens in enumerate(read_tokens(args.input))
    ]
    hyps = translate_corpus(
        model,
        corpus,
        load_features(args.features) if args.features else None,
        CongruenceMode(args.congruence),
        beam=args.beam,
        out_path=args.output,
        attn_dir=args.attn_out,
        seed=args.seed,
        blind_order=args.blind_order,
        threads=resolve_threads(args.threads),
        length_normalize=args.length_normalize,
    )
    if args.output is None:
        for tokens in hyps:
            print(" ".join(tokens))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    """Score a hypothesis file against a reference file."""
    result = _score(
        args.metric,
        read_tokens(args.hyp),
        read_tokens(args.ref),
        _subset(args.subset_src),
        args.lexicon,
    )
    if args.json:
        result.to_json(args.json)
    print(f"{result.metric} = {100 * result.corpus_score:.2f}")
    return 0


def cmd_significance(args: argparse.Namespace) -> int:
    """Approximate randomization between two systems' runs."""
    if len(args.a) != len(args.b):
        msg = f"Need the same number of runs per system, got {len(args.a)} and {len(args.b)}."
        raise ValueError(msg)
    refs = read_tokens(args.ref)
    selection = _subset(args.subset_src)
    runs_a = [_score(args.metric, read_tokens(p), refs, selection, args.lexicon) for p in args.a]
    runs_b = [_score(args.metric, read_tokens(p), refs, selection, args.lexicon) for p in args.b]
    p = significance_test(
        [r.sentence_scores for r in runs_a],
        [r.sentence_scores for r in runs_b],
        args.resamples,
        args.seed,
    )
    mean_a = sum(r.corpus_score for r in runs_a) / len(runs_a)
    mean_b = sum(r.corpus_score for r in runs_b) / len(runs_b)
    print(f"A {100 * mean_a:.2f}  B {100 * mean_b:.2f}  p = {p:.4f}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    """Render tables from a results directory."""
    print(report(args.results, args.format))
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    """Run a whole experiment grid; fails if any cell failed."""
    config = _load_config(args)
    results = run_experiment(config, force=args.force)
    manifest = json.loads((results / MANIFEST).read_text(encoding="utf-8"))
    failed = [c["cell"] for c in manifest["cells"] if c["status"] != "ok"]
    print(f"{len(manifest['cells']) - len(failed)}/{len(manifest['cells'])} cells succeeded")
    print(f"Results in {results}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one sub-command per pipeline stage."""
    parser = argparse.ArgumentParser(
        prog="mmtprobe",
        description="Probe how multimodal translation models use visual features.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true", help="Log debug messages")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="tokenize raw parallel text and build vocabularies")
    p.add_argument("--src", required=True, help="raw source text, one sentence per line")
    p.add_argument("--tgt", required=True, help="raw target text, line-aligned with --src")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--prefix", default="train", help="file name prefix (default: train)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("degrade", help="mask a tokenized source file")
    p.add_argument("--input", "-i", required=True)
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--scheme", choices=["none", "color", "entity", "progressive"], required=True)
    p.add_argument("--k", type=int, default=None, help="tokens kept by progressive masking")
    p.add_argument("--lexicon", default=None, help="color lexicon, one word per line")
    p.add_argument("--annotations", default=None, help="entity positions TSV")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("synth", help="generate the synthetic color grounding task")
    p.add_argument("--out", required=True)
    p.add_argument("--train-size", type=int, default=5000)
    p.add_argument("--dev-size", type=int, default=500)
    p.add_argument("--test-size", type=int, default=500)
    p.add_argument("--colors", type=int, default=8)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one system")
    p.add_argument("config", help="experiment TOML file")
    p.add_argument("--system", choices=["NMT", "INIT", "HIER", "DIRECT"], required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--scheme", default=None, help="degradation label, e.g. color or k4")
    p.add_argument("--blind", action="store_true", help="train with incongruent features")
    p.add_argument("--out", default=None, help="model directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--src-vocab", default=None, help="default: next to the checkpoint")
    p.add_argument("--tgt-vocab", default=None, help="default: next to the checkpoint")
    p.add_argument("--input", "-i", required=True, help="tokenized source file")
    p.add_argument("--features", default=None, help="MMTF feature file")
    p.add_argument("--congruence", choices=[m.value for m in CongruenceMode], default="congruent")
    p.add_argument("--blind-order", choices=["reversed", "shuffled"], default="shuffled")
    p.add_argument("--beam", type=int, default=12)
    p.add_argument("--length-normalize", action="store_true")
    p.add_argument("--attn-out", default=None, help="directory for attention CSVs")
    p.add_argument("--seed", type=int, default=0, help="seed of the blinded order")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--output", "-o", default=None, help="default: stdout")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="score hypotheses")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--metric", choices=["meteor-lite", "bleu", "color-acc"], default="meteor-lite")
    p.add_argument("--lexicon", default=None, help="target color lexicon TSV")
    p.add_argument("--subset-src", default=None, help="degraded source, scores masked sentences")
    p.add_argument("--json", default=None, help="write the MetricReport here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("significance", help="approximate randomization test")
    p.add_argument("--a", nargs="+", required=True, help="hypothesis files of system A")
    p.add_argument("--b", nargs="+", required=True, help="hypothesis files of system B")
    p.add_argument("--ref", required=True)
    p.add_argument("--metric", choices=["meteor-lite", "bleu", "color-acc"], default="meteor-lite")
    p.add_argument("--lexicon", default=None)
    p.add_argument("--subset-src", default=None)
    p.add_argument("--resamples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_significance)

    p = sub.add_parser("report", help="render tables from a results directory")
    p.add_argument("results")
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="run an experiment grid")
    p.add_argument("config", help="experiment TOML file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--output", default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--force", action="store_true", help="ignore cached cells")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point of the `mmtprobe` script."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, OSError, IndexError) as e:
        logger.error("%s: %s", type(e).__name__, e)  # noqa: TRY400
        return 1


if __name__ == "__main__":
    sys.exit(main())
