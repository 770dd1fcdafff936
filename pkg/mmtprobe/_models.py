"""Attentive GRU encoder-decoder and its three multimodal fusion variants.

The encoder is a stack of bidirectional GRU layers. The decoder is a
conditional GRU: a first GRU block reads the previous target embedding, its
state queries the source annotations (and, for DIRECT and HIER, the image
positions), the fused context feeds a second GRU block, and a deep-output
readout projects onto the tied target embeddings.

Fusion variants:

- NMT: text only.
- INIT: pooled image features initialise every encoder GRU and the first
  decoder block through tanh(f W + b).
- DIRECT: text and image contexts are concatenated and linearly projected.
- HIER: both contexts are projected to the annotation size and a second
  attention chooses between them.

All operations work on batches: ids are (B, T), states (B, hidden).
"""

import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mmtprobe import _autodiff as ad
from mmtprobe._autodiff import Tensor
from mmtprobe._core import (
    ConfigurationError,
    ContractError,
    ModelConfig,
    VocabularyMismatchError,
)
from mmtprobe._features import FeatureSet
from mmtprobe._formats.checkpoint import read_checkpoint, write_checkpoint
from mmtprobe._text import Batch, Vocabulary

logger = logging.getLogger(__name__)

DIRECTIONS = ("fwd", "bwd")


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every learnable tensor, in initialisation order."""
    if config.src_vocab_size <= 0 or config.tgt_vocab_size <= 0:
        msg = "Vocabulary sizes must be set before parameters can be created."
        raise ConfigurationError(msg)
    e, d, c, h, f = (
        config.emb_dim,
        config.direction_dim,
        config.ctx_dim,
        config.hidden_dim,
        config.feature_dim,
    )
    a = c  # attention size
    shapes: dict[str, tuple[int, ...]] = {
        "emb.src": (config.src_vocab_size, e),
        "emb.tgt": (config.tgt_vocab_size, e),
    }

    def _gru(prefix: str, n_in: int, n_hidden: int) -> None:
        shapes[f"{prefix}.W"] = (n_in, 3 * n_hidden)
        shapes[f"{prefix}.U"] = (n_hidden, 3 * n_hidden)
        shapes[f"{prefix}.b"] = (3 * n_hidden,)

    def _attention(prefix: str, n_key: int) -> None:
        shapes[f"{prefix}.W_a"] = (h, a)
        shapes[f"{prefix}.U_a"] = (n_key, a)
        shapes[f"{prefix}.b_a"] = (a,)
        shapes[f"{prefix}.v_a"] = (a, 1)

    for layer in range(config.enc_layers):
        for direction in DIRECTIONS:
            _gru(f"enc.l{layer}.{direction}", e if layer == 0 else c, d)
    _gru("dec.gru1", e, h)
    _attention("att_txt", c)
    _gru("dec.gru2", c, h)
    shapes["readout.W_s"] = (h, e)
    shapes["readout.W_e"] = (e, e)
    shapes["readout.W_c"] = (c, e)
    shapes["readout.b"] = (e,)
    if not config.tie_embeddings:
        shapes["readout.W_o"] = (e, config.tgt_vocab_size)
    shapes["readout.b_out"] = (config.tgt_vocab_size,)

    match config.fusion:
        case "INIT":
            for layer in range(config.enc_layers):
                for direction in DIRECTIONS:
                    shapes[f"init.enc.l{layer}.{direction}.W"] = (f, d)
                    shapes[f"init.enc.l{layer}.{direction}.b"] = (d,)
            shapes["init.dec.W"] = (f, h)
            shapes["init.dec.b"] = (h,)
        case "DIRECT":
            _attention("att_img", f)
            shapes["fuse.W_f"] = (c + f, c)
        case "HIER":
            _attention("att_img", f)
            shapes["att_hier.P_txt"] = (c, c)
            shapes["att_hier.P_img"] = (f, c)
            _attention("att_hier", c)
    return shapes


class ParameterSet:
    """Named learnable tensors of one model."""

    def __init__(self, tensors: dict[str, Tensor]) -> None:
        """Wrap named tensors."""
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        """Tensor by name."""
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        """Whether a tensor exists."""
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        """Names in initialisation order."""
        return iter(self.tensors)

    def __len__(self) -> int:
        """Number of tensors."""
        return len(self.tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        """(name, tensor) pairs in initialisation order."""
        yield from self.tensors.items()

    def arrays(self) -> dict[str, np.ndarray]:
        """Copies of the values."""
        return {name: t.numpy() for name, t in self.tensors.items()}

    def norms(self) -> dict[str, float]:
        """L2 norm of every tensor."""
        return {name: float(np.linalg.norm(t.data)) for name, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], config: ModelConfig) -> "ParameterSet":
        """Rebuild from stored values, checking names and shapes."""
        shapes = parameter_shapes(config)
        if set(arrays) != set(shapes):
            missing = sorted(set(shapes) - set(arrays))
            extra = sorted(set(arrays) - set(shapes))
            msg = f"Stored parameters do not fit the model: missing {missing}, unexpected {extra}."
            raise ContractError(msg)
        for name, shape in shapes.items():
            if arrays[name].shape != shape:
                msg = f"{name} has shape {arrays[name].shape}, expected {shape}."
                raise ContractError(msg)
        return cls(
            {
                name: Tensor(arrays[name].copy(), requires_grad=True, name=name)
                for name in shapes
            },
        )


def init_parameters(config: ModelConfig, seed: int) -> ParameterSet:
    """Xavier-uniform matrices and zero biases, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if len(shape) == 1:
            data = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ParameterSet(tensors)


def _gru_step(x_proj: Tensor, h: Tensor, U: Tensor) -> Tensor:
    """One GRU update from a precomputed input projection x W + b.

    Gate blocks are [update, reset, candidate].
    """
    n = h.shape[-1]
    h_proj = ad.matmul(h, U)
    z = ad.sigmoid(ad.narrow(x_proj, 0, n) + ad.narrow(h_proj, 0, n))
    r = ad.sigmoid(ad.narrow(x_proj, n, n) + ad.narrow(h_proj, n, n))
    candidate = ad.tanh(ad.narrow(x_proj, 2 * n, n) + r * ad.narrow(h_proj, 2 * n, n))
    return candidate + z * (h - candidate)


def _run_direction(
    x: Tensor,
    mask: np.ndarray,
    params: ParameterSet,
    prefix: str,
    h0: Tensor,
    reverse: bool,
) -> Tensor:
    """Run one GRU direction over (B, T, in); padded steps carry the state."""
    x_proj = ad.matmul(x, params[f"{prefix}.W"]) + params[f"{prefix}.b"]
    n_hidden = h0.shape[-1]
    steps = range(x.shape[1] - 1, -1, -1) if reverse else range(x.shape[1])
    h = h0
    outputs: dict[int, Tensor] = {}
    for t in steps:
        h_new = _gru_step(ad.take(x_proj, t, axis=1), h, params[f"{prefix}.U"])
        m = Tensor(np.repeat(mask[:, t : t + 1], n_hidden, axis=1))
        h = h + m * (h_new - h)
        outputs[t] = h
    return ad.stack([outputs[t] for t in range(x.shape[1])], axis=1)


def encode_source(
    ids: np.ndarray,
    mask: np.ndarray,
    params: ParameterSet,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    init_states: dict[str, Tensor] | None = None,
) -> Tensor:
    """Source annotations (B, T, ctx_dim); padded positions are exactly zero.

    A single unbatched sequence (T,) gives annotations of shape (T, ctx_dim).
    """
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if ids.ndim == 1:
        return ad.take(
            encode_source(ids[None], mask[None], params, config, training, rng, init_states),
            0,
            axis=0,
        )
    batch, length = ids.shape
    if length == 0:
        msg = "Cannot encode an empty source sequence."
        raise ContractError(msg)

    x = ad.embedding_lookup(params["emb.src"], ids)
    x = ad.dropout(x, config.dropout_src_emb, rng, training)
    zero_state = Tensor(np.zeros((batch, config.direction_dim)))
    keep = Tensor(np.repeat(mask[:, :, None], config.ctx_dim, axis=2))
    for layer in range(config.enc_layers):
        outputs = []
        for direction in DIRECTIONS:
            prefix = f"enc.l{layer}.{direction}"
            h0 = init_states.get(prefix, zero_state) if init_states else zero_state
            outputs.append(_run_direction(x, mask, params, prefix, h0, direction == "bwd"))
        x = ad.concat(outputs, axis=-1) * keep
    return ad.dropout(x, config.dropout_enc_out, rng, training)


def _mlp_attention(
    query: Tensor,
    keys: Tensor,
    key_proj: Tensor,
    mask: np.ndarray | None,
    params: ParameterSet,
    prefix: str,
) -> tuple[Tensor, Tensor]:
    """Bahdanau scores v^T tanh(W s + U k + b), masked softmax, weighted sum of keys."""
    length = keys.shape[1]
    q = ad.expand(ad.matmul(query, params[f"{prefix}.W_a"]), axis=1, n=length)
    scores = ad.matmul(ad.tanh(q + key_proj), params[f"{prefix}.v_a"])
    scores = ad.reshape(scores, scores.shape[:-1])
    weights = ad.softmax(scores, axis=-1, mask=mask)
    expanded = ad.expand(weights, axis=2, n=keys.shape[2])
    return ad.sum_(expanded * keys, axis=1), weights


def project_keys(keys: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    """Key side of an MLP attention, U k + b, reusable across decoder steps."""
    return ad.matmul(keys, params[f"{prefix}.U_a"]) + params[f"{prefix}.b_a"]


def attention(
    query: Tensor,
    keys: Tensor,
    mask: np.ndarray,
    params: ParameterSet,
    key_proj: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Attend from decoder states (B, hidden) over annotations (B, T, ctx_dim).

    Returns the context (B, ctx_dim) and the weights (B, T).
    """
    if key_proj is None:
        key_proj = project_keys(keys, params, "att_txt")
    return _mlp_attention(query, keys, key_proj, mask, params, "att_txt")


def visual_attention(
    query: Tensor,
    positions: Tensor,
    params: ParameterSet,
    key_proj: Tensor | None = None,
) -> tuple[Tensor, Tensor]:
    """Attend over image positions (B, P, C) with separate parameters."""
    if positions.ndim != 3:
        msg = f"Visual attention needs spatial positions (B, P, C), got {positions.shape}."
        raise ContractError(msg)
    if key_proj is None:
        key_proj = project_keys(positions, params, "att_img")
    return _mlp_attention(query, positions, key_proj, None, params, "att_img")


def fuse(
    config: ModelConfig,
    c_text: Tensor,
    c_img: Tensor | None,
    query: Tensor,
    params: ParameterSet,
) -> tuple[Tensor, Tensor | None]:
    """Combine text and image contexts into one (B, ctx_dim) context.

    Returns the context and, for HIER, the weights over the two modalities.
    """
    if config.fusion in ("NMT", "INIT"):
        return c_text, None
    if c_img is None:
        msg = f"{config.fusion} fusion needs an image context."
        raise ContractError(msg)
    if config.fusion == "DIRECT":
        return ad.matmul(ad.concat([c_text, c_img], axis=-1), params["fuse.W_f"]), None
    projected = ad.stack(
        [
            ad.matmul(c_text, params["att_hier.P_txt"]),
            ad.matmul(c_img, params["att_hier.P_img"]),
        ],
        axis=1,
    )
    key_proj = project_keys(projected, params, "att_hier")
    return _mlp_attention(query, projected, key_proj, None, params, "att_hier")


def init_states_from_pool5(
    pooled: Tensor,
    params: ParameterSet,
    config: ModelConfig,
) -> tuple[dict[str, Tensor], Tensor]:
    """Initial encoder states per layer and direction, and the decoder state."""
    if pooled.ndim != 2:
        msg = f"INIT needs pooled features (B, C), got {pooled.shape}."
        raise ContractError(msg)
    encoder = {}
    for layer in range(config.enc_layers):
        for direction in DIRECTIONS:
            prefix = f"init.enc.l{layer}.{direction}"
            encoder[f"enc.l{layer}.{direction}"] = ad.tanh(
                ad.matmul(pooled, params[f"{prefix}.W"]) + params[f"{prefix}.b"],
            )
    decoder = ad.tanh(ad.matmul(pooled, params["init.dec.W"]) + params["init.dec.b"])
    return encoder, decoder


@dataclass
class SourceContext:
    """Everything the decoder reads at every step for a batch of sentences."""

    annotations: Tensor
    annotation_proj: Tensor
    mask: np.ndarray
    image: Tensor | None = None
    image_proj: Tensor | None = None

    def repeat(self, n: int) -> "SourceContext":
        """Tile a single-sentence context n times, detached from any tape."""

        def _tile(t: Tensor | None) -> Tensor | None:
            return None if t is None else Tensor(np.repeat(t.data, n, axis=0))

        return SourceContext(
            annotations=Tensor(np.repeat(self.annotations.data, n, axis=0)),
            annotation_proj=Tensor(np.repeat(self.annotation_proj.data, n, axis=0)),
            mask=np.repeat(self.mask, n, axis=0),
            image=_tile(self.image),
            image_proj=_tile(self.image_proj),
        )


def prepare_source(
    src: np.ndarray,
    src_mask: np.ndarray,
    features: np.ndarray | None,
    params: ParameterSet,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[SourceContext, Tensor]:
    """Encode a batch and compute the initial decoder state.

    `features` holds the rows for this batch: (B, C) pooled for INIT,
    (B, P, C) positions for DIRECT and HIER, ignored for NMT.
    """
    batch = src.shape[0]
    init_states = None
    dec_state = Tensor(np.zeros((batch, config.hidden_dim)))
    image = image_proj = None
    if config.fusion != "NMT" and features is None:
        msg = f"{config.fusion} needs visual features."
        raise ContractError(msg)
    if config.fusion == "INIT":
        init_states, dec_state = init_states_from_pool5(Tensor(features), params, config)
    elif config.fusion in ("DIRECT", "HIER"):
        image = Tensor(features)
        if image.ndim != 3:
            msg = f"{config.fusion} needs spatial features, got shape {image.shape}."
            raise ContractError(msg)
        image_proj = project_keys(image, params, "att_img")
    annotations = encode_source(src, src_mask, params, config, training, rng, init_states)
    context = SourceContext(
        annotations=annotations,
        annotation_proj=project_keys(annotations, params, "att_txt"),
        mask=np.asarray(src_mask, dtype=np.float64),
        image=image,
        image_proj=image_proj,
    )
    return context, dec_state


@dataclass
class StepOutput:
    """Result of one decoder step."""

    logits: Tensor
    state: Tensor
    text_weights: Tensor
    image_weights: Tensor | None
    modality_weights: Tensor | None


def decoder_step(
    prev_ids: np.ndarray,
    state: Tensor,
    context: SourceContext,
    params: ParameterSet,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> StepOutput:
    """Advance the conditional GRU by one target position."""
    emb = ad.embedding_lookup(params["emb.tgt"], prev_ids)
    s1 = _gru_step(
        ad.matmul(emb, params["dec.gru1.W"]) + params["dec.gru1.b"],
        state,
        params["dec.gru1.U"],
    )
    c_text, text_weights = attention(
        s1, context.annotations, context.mask, params, key_proj=context.annotation_proj
    )
    c_img = image_weights = None
    if config.fusion in ("DIRECT", "HIER"):
        if context.image is None:
            msg = f"{config.fusion} needs visual features."
            raise ContractError(msg)
        c_img, image_weights = visual_attention(s1, context.image, params, context.image_proj)
    c, modality_weights = fuse(config, c_text, c_img, s1, params)
    s2 = _gru_step(
        ad.matmul(c, params["dec.gru2.W"]) + params["dec.gru2.b"],
        s1,
        params["dec.gru2.U"],
    )
    readout = ad.tanh(
        ad.matmul(s2, params["readout.W_s"])
        + ad.matmul(emb, params["readout.W_e"])
        + ad.matmul(c, params["readout.W_c"])
        + params["readout.b"],
    )
    readout = ad.dropout(readout, config.dropout_dec_out, rng, training)
    output_proj = params["emb.tgt"].T if config.tie_embeddings else params["readout.W_o"]
    logits = ad.matmul(readout, output_proj) + params["readout.b_out"]
    return StepOutput(logits, s2, text_weights, image_weights, modality_weights)


def batch_features(
    features: FeatureSet | None,
    rows: np.ndarray,
    config: ModelConfig,
) -> np.ndarray | None:
    """Feature rows for a batch in the layout the fusion consumes."""
    match config.feature_layout:
        case None:
            return None
        case _ if features is None:
            msg = f"{config.fusion} needs visual features."
            raise ContractError(msg)
        case "pooled":
            return features.vectors(rows)
        case "spatial":
            return features.positions(rows)
    return None


def forward_loss(
    batch: Batch,
    features: FeatureSet | None,
    index_map: np.ndarray | None,
    params: ParameterSet,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Teacher-forced mean cross-entropy over all unmasked target positions.

    Feature rows are looked up through the congruence index map.
    """
    rows = batch.image_indices if index_map is None else index_map[batch.image_indices]
    context, state = prepare_source(
        batch.src,
        batch.src_mask,
        batch_features(features, rows, config),
        params,
        config,
        training,
        rng,
    )
    logits = []
    for t in range(batch.tgt_in.shape[1]):
        step = decoder_step(batch.tgt_in[:, t], state, context, params, config, training, rng)
        logits.append(step.logits)
        state = step.state
    return ad.masked_cross_entropy(ad.stack(logits, axis=1), batch.tgt_out, batch.tgt_mask)


class TranslationModel:
    """Configuration, parameters and vocabularies of a trained system."""

    def __init__(
        self,
        config: ModelConfig,
        params: ParameterSet,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
    ) -> None:
        """Bundle a model; vocabulary sizes must match the configuration."""
        if (len(src_vocab), len(tgt_vocab)) != (config.src_vocab_size, config.tgt_vocab_size):
            msg = (
                f"Vocabularies have {len(src_vocab)}/{len(tgt_vocab)} entries, the model "
                f"expects {config.src_vocab_size}/{config.tgt_vocab_size}."
            )
            raise VocabularyMismatchError(msg)
        self.config = config
        self.params = params
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab

    @classmethod
    def create(
        cls,
        config: ModelConfig,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        seed: int,
    ) -> "TranslationModel":
        """Freshly initialised model sized to the vocabularies."""
        config = config.model_copy(
            update={"src_vocab_size": len(src_vocab), "tgt_vocab_size": len(tgt_vocab)},
        )
        return cls(config, init_parameters(config, seed), src_vocab, tgt_vocab)

    def check_vocabularies(self, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> None:
        """Refuse vocabularies other than the ones the model was trained with."""
        for side, mine, theirs in (
            ("source", self.src_vocab, src_vocab),
            ("target", self.tgt_vocab, tgt_vocab),
        ):
            if mine.fingerprint != theirs.fingerprint:
                msg = (
                    f"The {side} vocabulary (sha256 {theirs.fingerprint[:12]}) is not the one "
                    f"the model was trained with (sha256 {mine.fingerprint[:12]}). Token ids "
                    "would be scrambled; use the vocabulary files stored with the checkpoint."
                )
                raise VocabularyMismatchError(msg)

    def save(self, path: str | Path, metadata: dict | None = None) -> None:
        """Write a checkpoint; tied embeddings are stored once."""
        header = {
            "model": self.config.model_dump(mode="json"),
            "src_vocab_sha256": self.src_vocab.fingerprint,
            "tgt_vocab_sha256": self.tgt_vocab.fingerprint,
            "metadata": metadata or {},
        }
        write_checkpoint(path, header, self.params.arrays())

    @classmethod
    def load(
        cls,
        path: str | Path,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
    ) -> "TranslationModel":
        """Read a checkpoint and verify the vocabularies against its hashes."""
        header, arrays = read_checkpoint(path)
        for side, vocab in (("src", src_vocab), ("tgt", tgt_vocab)):
            if header[f"{side}_vocab_sha256"] != vocab.fingerprint:
                msg = (
                    f"{path} was trained with a different {side} vocabulary "
                    f"(sha256 {header[f'{side}_vocab_sha256'][:12]}, "
                    f"given {vocab.fingerprint[:12]})."
                )
                raise VocabularyMismatchError(msg)
        config = ModelConfig(**header["model"])
        return cls(config, ParameterSet.from_arrays(arrays, config), src_vocab, tgt_vocab)
