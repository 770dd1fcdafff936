"""Per-image visual feature sets: normalization, pooling, reordering, synthesis.

Rows are aligned with corpus line order. Spatial sets hold a C x H x W map per
row, pooled sets a C vector.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from mmtprobe._core import ConfigurationError, ContractError, CongruenceMode, DimensionError

logger = logging.getLogger(__name__)

Layout = Literal["pooled", "spatial"]


@dataclass(frozen=True)
class FeatureSet:
    """Immutable feature tensor.

    Attributes:
        data: float64 array, (rows, C, H, W) for spatial or (rows, C) for pooled.
        layout: "spatial" or "pooled".

    """

    data: np.ndarray
    layout: Layout

    def __post_init__(self) -> None:
        """Check rank against layout and freeze the array."""
        expected = 4 if self.layout == "spatial" else 2
        if self.data.ndim != expected:
            msg = f"A {self.layout} feature set needs {expected} dimensions, got {self.data.shape}."
            raise DimensionError(msg)
        data = np.array(self.data, dtype=np.float64)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        """Number of images."""
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        """Depth C."""
        return self.data.shape[1]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        """(H, W), (1, 1) for pooled sets."""
        if self.layout == "pooled":
            return (1, 1)
        return self.data.shape[2], self.data.shape[3]

    def positions(self, rows: np.ndarray | Sequence[int]) -> np.ndarray:
        """Spatial rows flattened to (len(rows), H*W, C) for attention."""
        if self.layout != "spatial":
            msg = "Only spatial features have positions to attend over."
            raise ContractError(msg)
        selected = self.data[np.asarray(rows, dtype=np.int64)]
        n, c, h, w = selected.shape
        return selected.reshape(n, c, h * w).transpose(0, 2, 1)

    def vectors(self, rows: np.ndarray | Sequence[int]) -> np.ndarray:
        """Pooled rows as (len(rows), C)."""
        if self.layout != "pooled":
            msg = "Only pooled features are single vectors."
            raise ContractError(msg)
        return self.data[np.asarray(rows, dtype=np.int64)]


def normalize_depth(fs: FeatureSet) -> FeatureSet:
    """L2-normalize the depth vector at every spatial position; zero vectors stay zero."""
    if fs.layout != "spatial":
        msg = "normalize_depth needs spatial features."
        raise ContractError(msg)
    norm = np.linalg.norm(fs.data, axis=1, keepdims=True)
    scaled = np.divide(fs.data, norm, out=np.zeros_like(fs.data), where=norm > 0)
    return FeatureSet(scaled, "spatial")


def global_average_pool(fs: FeatureSet) -> FeatureSet:
    """Average every channel over the H x W grid."""
    if fs.layout != "spatial":
        msg = "global_average_pool needs spatial features."
        raise ContractError(msg)
    return FeatureSet(fs.data.mean(axis=(2, 3)), "pooled")


def _derangement(n: int, seed: int) -> np.ndarray:
    """Seeded permutation without fixed points (identity for n = 1)."""
    order = np.random.default_rng(seed).permutation(n)
    if n < 2:
        return order
    for i in range(n):
        if order[i] == i:
            j = (i + 1) % n
            order[i], order[j] = order[j], order[i]
    return order


def remap_order(
    fs: FeatureSet | None,
    mode: CongruenceMode,
    n: int,
    seed: int = 0,
    blind_order: Literal["reversed", "shuffled"] = "shuffled",
) -> np.ndarray:
    """Index map from corpus position to feature row.

    Congruent is the identity, incongruent reverses the order, blinded
    reverses or applies a seeded shuffle without fixed points.
    """
    if fs is not None and fs.rows != n:
        msg = f"Corpus has {n} sentences but the feature set has {fs.rows} rows."
        raise ContractError(msg)
    identity = np.arange(n, dtype=np.int64)
    match CongruenceMode(mode):
        case CongruenceMode.CONGRUENT:
            return identity
        case CongruenceMode.INCONGRUENT:
            return identity[::-1].copy()
        case CongruenceMode.BLINDED if blind_order == "reversed":
            return identity[::-1].copy()
        case CongruenceMode.BLINDED:
            return _derangement(n, seed).astype(np.int64)
    msg = f"Unknown congruence mode {mode}."
    raise ContractError(msg)


def synthesize_features(
    labels: Sequence[int] | np.ndarray,
    channels: int,
    seed: int,
    num_classes: int | None = None,
    sigma: float = 0.1,
    layout: Layout = "pooled",
    grid: tuple[int, int] = (2, 2),
) -> FeatureSet:
    """One-hot class code plus Gaussian noise, L2-normalized per row.

    The spatial layout repeats the same vector at every grid position.
    """
    labels = np.asarray(labels, dtype=np.int64)
    k = num_classes if num_classes is not None else int(labels.max(initial=-1)) + 1
    if k > channels:
        msg = f"{k} classes do not fit in {channels} channels."
        raise ConfigurationError(msg)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        msg = f"Labels must lie in [0, {k})."
        raise ConfigurationError(msg)
    rng = np.random.default_rng(seed)
    rows = np.zeros((labels.size, channels))
    rows[np.arange(labels.size), labels] = 1.0
    rows += rng.normal(0.0, sigma, size=rows.shape)
    norm = np.linalg.norm(rows, axis=1, keepdims=True)
    rows = np.divide(rows, norm, out=np.zeros_like(rows), where=norm > 0)
    if layout == "pooled":
        return FeatureSet(rows, "pooled")
    h, w = grid
    return FeatureSet(np.repeat(np.repeat(rows[:, :, None, None], h, axis=2), w, axis=3), "spatial")


def prepare_for_fusion(fs: FeatureSet, layout: Layout | None) -> FeatureSet | None:
    """Bring a feature set into the layout a fusion variant consumes.

    Spatial sets are depth-normalized for attention and pooled for INIT.
    """
    if layout is None:
        return None
    if layout == "pooled":
        return fs if fs.layout == "pooled" else global_average_pool(fs)
    if fs.layout != "spatial":
        msg = "Attention over image positions needs spatial features."
        raise ContractError(msg)
    return normalize_depth(fs)
