"""Tests for the optimiser, clipping and the early-stopping loop."""

from pathlib import Path

import numpy as np
import pytest

from mmtprobe import NonFiniteLossError, TrainConfig, TranslationModel, train
from mmtprobe._autodiff import GradientTape, Tensor, backward, finite_difference_check
from mmtprobe._formats.tables import read_csv
from mmtprobe._models import ParameterSet, forward_loss
from mmtprobe._text import ParallelSample, encode_corpus, make_batch
from mmtprobe._training import OptimState, adam_step, clip_global_norm
from tests.conftest import toy_model


def test_clip_global_norm() -> None:
    """Gradients above the threshold are scaled jointly; others are left alone."""
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    clipped, norm = clip_global_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped["a"], [0.6, 0.0])
    np.testing.assert_allclose(clipped["b"], [0.8])
    same, norm = clip_global_norm(grads, 10.0)
    assert same is grads
    assert norm == 5.0


def _single(value: float) -> ParameterSet:
    return ParameterSet({"w": Tensor(np.array([value]), requires_grad=True)})


@pytest.mark.parametrize(
    ("decay_mode", "expected"),
    [
        # first step moves by lr * sign of the (decayed) gradient
        ("coupled", 2.0 - 0.1),
        ("decoupled", 2.0 - 0.1 - 0.1 * 0.5 * 2.0),
    ],
)
def test_adam_first_step(decay_mode: str, expected: float) -> None:
    """Bias correction makes the first update lr times the gradient sign."""
    params = _single(2.0)
    config = TrainConfig(lr=0.1, weight_decay=0.5, decay_mode=decay_mode, eps=1e-12)
    state = adam_step(params, {"w": np.array([3.0])}, OptimState.zeros(params), config)
    assert state.step == 1
    assert params["w"].data[0] == pytest.approx(expected)


def test_adam_without_gradient_or_decay() -> None:
    """Zero gradient and no decay leave the parameters unchanged."""
    params = _single(2.0)
    config = TrainConfig(weight_decay=0.0)
    adam_step(params, {"w": np.array([0.0])}, OptimState.zeros(params), config)
    assert params["w"].data[0] == 2.0


def test_coupled_decay_enters_the_moments() -> None:
    """With coupled decay a zero gradient still moves the weight towards zero."""
    params = _single(2.0)
    config = TrainConfig(lr=0.1, weight_decay=0.5, decay_mode="coupled")
    state = adam_step(params, {"w": np.array([0.0])}, OptimState.zeros(params), config)
    np.testing.assert_allclose(state.m["w"], [0.1 * 0.5 * 2.0])
    assert params["w"].data[0] == pytest.approx(1.9)


def test_adam_converges_on_a_quadratic() -> None:
    """Exact gradients of a convex bowl lead ADAM to its minimum."""
    target = np.array([0.5, 1.0, -1.0])
    params = ParameterSet({"w": Tensor(np.array([2.0, -3.0, 5.0]), requires_grad=True)})
    config = TrainConfig(lr=0.1, weight_decay=0.0)
    state = OptimState.zeros(params)
    for _ in range(500):
        grad = 2.0 * (params["w"].data - target)
        adam_step(params, {"w": grad}, state, config)
    np.testing.assert_allclose(params["w"].data, target, atol=0.05)


def test_tied_embedding_step_uses_summed_gradient() -> None:
    """The shared target table gets one update from both of its uses."""
    model = toy_model(seed=4)
    assert model.config.tie_embeddings
    assert "readout.W_o" not in model.params.arrays()
    batch = make_batch(_samples(model, n=4))
    table = model.params["emb.tgt"]

    def _loss(_: Tensor) -> Tensor:
        return forward_loss(batch, None, None, model.params, model.config)

    assert finite_difference_check(_loss, table, max_coords=30) < 1e-4

    with GradientTape() as tape:
        loss = _loss(table)
    grad = backward(tape, loss)[table.node_id]
    before = table.data.copy()
    config = TrainConfig(lr=0.01, weight_decay=0.0)
    grads = {name: np.zeros_like(t.data) for name, t in model.params.items()}
    grads["emb.tgt"] = grad
    adam_step(model.params, grads, OptimState.zeros(model.params), config)
    # first ADAM step moves every coordinate by lr * g / (|g| + eps)
    expected = before - config.lr * grad / (np.abs(grad) + config.eps)
    np.testing.assert_allclose(table.data, expected, rtol=1e-9, atol=1e-12)


def _samples(model: TranslationModel, n: int = 8) -> list:
    rng = np.random.default_rng(0)
    corpus = []
    for i in range(n):
        words = rng.integers(0, 7, size=rng.integers(1, 4))
        corpus.append(
            ParallelSample(
                src=tuple(f"s{k}" for k in words),
                tgt=tuple(f"t{k}" for k in words),
                image_index=i,
            ),
        )
    return encode_corpus(corpus, model.src_vocab, model.tgt_vocab)


def _config(**overrides: object) -> TrainConfig:
    defaults = {"lr": 0.05, "batch_size": 4, "max_epochs": 12, "patience": 12, "seed": 3}
    return TrainConfig(**{**defaults, **overrides})


def test_training_reduces_loss(tmp_path: Path) -> None:
    """A copy task gets easier with training and the history is written."""
    model = toy_model(seed=0)
    result = train(
        model,
        _samples(model),
        None,
        _config(),
        lambda _: 0.0,
        history_path=tmp_path / "history.csv",
    )
    losses = [r.train_loss for r in result.history]
    assert len(losses) == 12
    assert losses[-1] < losses[0]
    header, rows = read_csv(tmp_path / "history.csv")
    assert header == ["epoch", "train_loss", "dev_score", "best"]
    assert len(rows) == 12


def test_early_stopping_keeps_best_epoch() -> None:
    """Training stops after `patience` epochs without improvement and restores the best."""
    model = toy_model(seed=1)
    scores = iter([0.1, 0.3, 0.2, 0.25, 0.9])
    snapshots = []

    def _evaluate(m: TranslationModel) -> float:
        snapshots.append(m.params.arrays())
        return next(scores)

    result = train(model, _samples(model), None, _config(patience=2), _evaluate)
    assert [r.epoch for r in result.history] == [1, 2, 3, 4]
    assert [r.best for r in result.history] == [True, True, False, False]
    assert (result.best_epoch, result.best_score) == (2, 0.3)
    assert result.best_score == max(r.dev_score for r in result.history)
    for name, values in snapshots[1].items():
        np.testing.assert_array_equal(result.model.params[name].data, values)


def test_training_is_deterministic() -> None:
    """Same seed and data, same parameters."""
    results = []
    for _ in range(2):
        model = toy_model(seed=2, dropout_src_emb=0.2, dropout_dec_out=0.3)
        results.append(train(model, _samples(model), None, _config(max_epochs=3), lambda _: 0.0))
    a, b = (r.model.params for r in results)
    for name, tensor in a.items():
        np.testing.assert_array_equal(tensor.data, b[name].data)


def test_non_finite_loss() -> None:
    """Diverged parameters stop training with a diagnostic."""
    model = toy_model(seed=0)
    arrays = model.params.arrays()
    arrays["emb.src"][:] = np.nan
    broken = TranslationModel(
        model.config,
        ParameterSet.from_arrays(arrays, model.config),
        model.src_vocab,
        model.tgt_vocab,
    )
    with pytest.raises(NonFiniteLossError) as context:
        train(broken, _samples(broken), None, _config(), lambda _: 0.0)
    assert (context.value.epoch, context.value.batch) == (1, 0)
    assert "emb.src" in context.value.parameter_norms
