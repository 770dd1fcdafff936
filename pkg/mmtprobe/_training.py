"""ADAM training with gradient clipping and early stopping on a dev metric."""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mmtprobe import _autodiff as ad
from mmtprobe._core import NonFiniteLossError, TrainConfig
from mmtprobe._decoding import translate_corpus
from mmtprobe._features import FeatureSet, prepare_for_fusion
from mmtprobe._formats.tables import write_history
from mmtprobe._metrics import bleu, meteor_lite
from mmtprobe._models import ParameterSet, TranslationModel, forward_loss
from mmtprobe._text import EncodedSample, ParallelSample, batch_iterator, stitch_hyphens

logger = logging.getLogger(__name__)

DevEvaluator = Callable[[TranslationModel], float]


def clip_global_norm(
    grads: dict[str, np.ndarray],
    max_norm: float,
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients by max_norm / norm when the global L2 norm exceeds max_norm.

    Returns:
        The (possibly scaled) gradients and the norm before clipping.

    """
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


@dataclass
class OptimState:
    """ADAM moments and step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ParameterSet) -> "OptimState":
        """Zero moments shaped like the parameters."""
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
        )


def adam_step(
    params: ParameterSet,
    grads: dict[str, np.ndarray],
    state: OptimState,
    config: TrainConfig,
) -> OptimState:
    """Bias-corrected ADAM update of every parameter, in place.

    Coupled decay adds wd * theta to the gradient; decoupled decay subtracts
    lr * wd * theta after the moment update.
    """
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1 - b1**state.step
    correction2 = 1 - b2**state.step
    for name, tensor in params.items():
        g = grads[name]
        if config.decay_mode == "coupled" and config.weight_decay:
            g = g + config.weight_decay * tensor.data
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        update = (state.m[name] / correction1) / (np.sqrt(state.v[name] / correction2) + config.eps)
        new = tensor.data - config.lr * update
        if config.decay_mode == "decoupled" and config.weight_decay:
            new = new - config.lr * config.weight_decay * tensor.data
        tensor.data = new
    return state


@dataclass
class EpochRecord:
    """One line of the training history."""

    epoch: int
    train_loss: float
    dev_score: float
    best: bool


@dataclass
class TrainingResult:
    """Best model and the per-epoch history."""

    model: TranslationModel
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = -np.inf

    def write_history(self, path: str | Path) -> None:
        """Write the history CSV."""
        write_history(path, [vars(r) for r in self.history])


def dev_evaluator(
    corpus: Sequence[ParallelSample],
    features: FeatureSet | None,
    config: TrainConfig,
    index_map_mode: str = "congruent",
    seed: int = 0,
    blind_order: str = "shuffled",
) -> DevEvaluator:
    """Score a model on dev by decoding and computing the configured metric."""
    refs = [stitch_hyphens(s.tgt) for s in corpus]
    metric = meteor_lite if config.eval_metric == "meteor-lite" else bleu

    def _evaluate(model: TranslationModel) -> float:
        hyps = translate_corpus(
            model,
            corpus,
            features,
            index_map_mode,
            beam=config.dev_beam,
            seed=seed,
            blind_order=blind_order,
        )
        return metric(hyps, refs).corpus_score

    return _evaluate


def _gradients(params: ParameterSet, grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradients by parameter name, zeros for parameters the loss did not reach."""
    return {
        name: grads.get(t.node_id, np.zeros_like(t.data)) for name, t in params.items()
    }


def train(
    model: TranslationModel,
    samples: Sequence[EncodedSample],
    features: FeatureSet | None,
    config: TrainConfig,
    evaluate_dev: DevEvaluator,
    index_map: np.ndarray | None = None,
    history_path: str | Path | None = None,
) -> TrainingResult:
    """Train until the dev score stops improving for `patience` epochs.

    The returned model holds the parameters of the best epoch. The run is a
    pure function of the configuration seed and the data.
    """
    prepared = (
        prepare_for_fusion(features, model.config.feature_layout) if features is not None else None
    )
    dropout_rng = np.random.default_rng([config.seed, 7])
    state = OptimState.zeros(model.params)
    result = TrainingResult(model=model)
    best_arrays = model.params.arrays()

    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for batch_index, batch in enumerate(
            batch_iterator(samples, config.batch_size, config.seed, epoch),
        ):
            with ad.GradientTape() as tape:
                loss = forward_loss(
                    batch,
                    prepared,
                    index_map,
                    model.params,
                    model.config,
                    training=True,
                    rng=dropout_rng,
                )
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLossError(epoch, batch_index, model.params.norms())
            grads = _gradients(model.params, ad.backward(tape, loss))
            grads, _ = clip_global_norm(grads, config.clip_norm)
            adam_step(model.params, grads, state, config)
            losses.append(value)

        score = evaluate_dev(model)
        improved = score > result.best_score
        if improved:
            result.best_score = score
            result.best_epoch = epoch
            best_arrays = model.params.arrays()
        result.history.append(
            EpochRecord(epoch, float(np.mean(losses)) if losses else 0.0, score, improved),
        )
        logger.info(
            "epoch %d: loss %.4f, dev %s %.4f%s",
            epoch,
            result.history[-1].train_loss,
            config.eval_metric,
            score,
            " (best)" if improved else "",
        )
        if history_path is not None:
            result.write_history(history_path)
        if epoch - result.best_epoch >= config.patience:
            logger.info("No dev improvement for %d epochs, stopping", config.patience)
            break

    result.model = TranslationModel(
        model.config,
        ParameterSet.from_arrays(best_arrays, model.config),
        model.src_vocab,
        model.tgt_vocab,
    )
    return result
