# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""HSIC and centered kernel alignment between layer activations.

All estimators work in float64 on ``m × p`` activation matrices (one row
per sample). A heatmap compares every pair of layers of one stream; its
mean off-diagonal value is the stream's redundancy score.
"""

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CheckpointError, ConfigError, DegenerateInputError, ShapeError
from .model import EVAL_BATCH, FusionNet

logger = logging.getLogger(__name__)

KERNELS = ("linear", "rbf")
DEFAULT_SIGMA_FRACTION = 0.5
MIN_SAMPLES = 4
CSV_HEADER = ("layer_i", "layer_j", "cka")


@dataclass(frozen=True)
class ActivationMatrix:
    values: np.ndarray
    layer: str
    stream: str

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[0] < MIN_SAMPLES:
            raise ShapeError(
                f"Layer {self.layer} needs an m×p matrix with m >= {MIN_SAMPLES}, "
                f"got {self.values.shape}",
                shapes=[self.values.shape],
            )
        if not np.all(np.isfinite(self.values)):
            raise DegenerateInputError("Activations contain non-finite values", layer=self.layer)

    @property
    def samples(self) -> int:
        return int(self.values.shape[0])


def _check_kernel(kernel: str, sigma_fraction: float) -> None:
    if kernel not in KERNELS:
        raise ConfigError(f"Unknown kernel {kernel!r}; expected one of {KERNELS}")
    if kernel == "rbf" and sigma_fraction <= 0:
        raise ConfigError("sigma_fraction must be positive", context={"sigma_fraction": sigma_fraction})


def _squared_distances(X: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", X, X)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return d2


def median_distance(X: np.ndarray) -> float:
    """Median over all pairwise distances; the lower middle for an even count."""
    X = np.asarray(X, dtype=np.float64)
    rows, cols = np.triu_indices(X.shape[0], k=1)
    dists = np.sort(np.sqrt(_squared_distances(X)[rows, cols]))
    return float(dists[(len(dists) - 1) // 2])


def gram(X: np.ndarray, kernel: str = "linear", sigma_fraction: float = DEFAULT_SIGMA_FRACTION) -> np.ndarray:
    """Kernel matrix of the rows of ``X``.

    Args:
        X: ``m × p`` activation matrix
        kernel: ``"linear"`` for ``X Xᵀ`` or ``"rbf"`` for a Gaussian kernel
        sigma_fraction: RBF bandwidth as a fraction of the median pairwise distance

    Returns:
        ``m × m`` float64 Gram matrix

    Raises:
        ConfigError: Unknown kernel or non-positive bandwidth fraction
        ShapeError: ``X`` is not a matrix with at least two rows
        DegenerateInputError: RBF bandwidth vanishes
    """
    _check_kernel(kernel, sigma_fraction)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ShapeError(f"gram needs an m×p matrix with m >= 2, got {X.shape}", shapes=[X.shape])
    if kernel == "linear":
        return X @ X.T
    median = median_distance(X)
    if median == 0.0:
        raise DegenerateInputError(
            "RBF bandwidth is zero: the median pairwise distance vanishes (rows are identical)"
        )
    sigma = sigma_fraction * median
    K = np.exp(-_squared_distances(X) / (2.0 * sigma * sigma))
    np.fill_diagonal(K, 1.0)
    return K


def hsic(K_x: np.ndarray, K_z: np.ndarray) -> float:
    """Biased empirical HSIC ``tr(K_x H K_z H) / (n − 1)²``."""
    K_x = np.asarray(K_x, dtype=np.float64)
    K_z = np.asarray(K_z, dtype=np.float64)
    if K_x.ndim != 2 or K_x.shape[0] != K_x.shape[1] or K_x.shape != K_z.shape or K_x.shape[0] < 2:
        raise ShapeError(
            f"hsic needs two equal n×n kernels with n >= 2, got {K_x.shape} and {K_z.shape}",
            shapes=[K_x.shape, K_z.shape],
        )
    n = K_x.shape[0]
    H = np.eye(n) - np.full((n, n), 1.0 / n)
    return float(np.trace(K_x @ H @ K_z @ H)) / (n - 1) ** 2


def _vanishes(self_hsic: float, K: np.ndarray) -> bool:
    """Self-HSIC indistinguishable from zero at the scale of ``K``."""
    scale = float(np.abs(K).max()) ** 2
    return self_hsic <= 1e-12 * scale


def _cka_from_grams(K_x: np.ndarray, K_z: np.ndarray, self_x: float, self_z: float) -> float:
    return hsic(K_x, K_z) / np.sqrt(self_x * self_z)


def cka(
    X: np.ndarray, Z: np.ndarray, kernel: str = "linear", sigma_fraction: float = DEFAULT_SIGMA_FRACTION
) -> float:
    """Centered kernel alignment between two activation matrices.

    Args:
        X: ``m × p₁`` activations of one layer
        Z: ``m × p₂`` activations of another layer, same samples and order
        kernel: ``"linear"`` or ``"rbf"``
        sigma_fraction: RBF bandwidth fraction

    Returns:
        Similarity in ``[0, 1]``; 1 for representations equal up to rotation and scale

    Raises:
        ShapeError: Row counts differ
        DegenerateInputError: One side is constant across samples
    """
    X, Z = np.asarray(X), np.asarray(Z)
    if X.shape[0] != Z.shape[0]:
        raise ShapeError("cka: X and Z must have the same number of rows", shapes=[X.shape, Z.shape])
    K_x, K_z = gram(X, kernel, sigma_fraction), gram(Z, kernel, sigma_fraction)
    self_x, self_z = hsic(K_x, K_x), hsic(K_z, K_z)
    if _vanishes(self_x, K_x) or _vanishes(self_z, K_z):
        raise DegenerateInputError("Self-HSIC is zero: activations are constant across samples")
    return _cka_from_grams(K_x, K_z, self_x, self_z)


# -- layer heatmaps ------------------------------------------------------------


def collect_activations(
    net: FusionNet,
    x_rgb: Optional[np.ndarray],
    x_depth: Optional[np.ndarray],
    stream: str,
    *,
    include_projections: bool = False,
) -> List[ActivationMatrix]:
    """Flattened stage outputs (and optionally projections) of one stream."""
    if stream not in net.arch.streams:
        raise ConfigError(f"Stream {stream!r} is not part of the {net.arch.variant} variant")
    n = len(x_rgb if x_rgb is not None else x_depth)
    stages: List[List[np.ndarray]] = [[] for _ in range(net.arch.stages)]
    projected: List[List[np.ndarray]] = [[] for _ in range(net.arch.stages)]
    for start in range(0, n, EVAL_BATCH):
        sl = slice(start, min(start + EVAL_BATCH, n))
        rec = net.forward(
            None if x_rgb is None else x_rgb[sl], None if x_depth is None else x_depth[sl]
        )
        for i in range(net.arch.stages):
            out = rec.stages[stream][i].data
            stages[i].append(out.reshape(out.shape[0], -1))
            projected[i].append(rec.projected[stream][i].data)
    mats = [
        ActivationMatrix(np.concatenate(chunks).astype(np.float64), f"{stream}.stage{i}", stream)
        for i, chunks in enumerate(stages)
    ]
    if include_projections:
        mats += [
            ActivationMatrix(np.concatenate(chunks).astype(np.float64), f"{stream}.proj{i}", stream)
            for i, chunks in enumerate(projected)
        ]
    return mats


@dataclass(frozen=True)
class SimilarityHeatmap:
    values: np.ndarray
    layers: Tuple[str, ...]
    kernel: str
    samples: int
    stream: str = ""

    @property
    def size(self) -> int:
        return len(self.layers)

    def off_diagonal(self) -> np.ndarray:
        return self.values[~np.eye(self.size, dtype=bool)]

    def upper_triangle(self) -> np.ndarray:
        rows, cols = np.triu_indices(self.size, k=1)
        return self.values[rows, cols]

    def rows(self) -> List[Tuple[str, str, float]]:
        return [
            (self.layers[i], self.layers[j], float(self.values[i, j]))
            for i in range(self.size)
            for j in range(self.size)
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for a, b, v in self.rows():
            writer.writerow((a, b, f"{v:.9g}"))
        return buf.getvalue()

    def save_csv(self, path: Path) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_csv(), encoding="utf-8")
        except OSError as e:
            raise CheckpointError(f"Cannot write heatmap to {path}: {e}", path=str(path)) from e


def similarity_heatmap(
    mats: Sequence[ActivationMatrix], kernel: str = "linear", sigma_fraction: float = DEFAULT_SIGMA_FRACTION
) -> SimilarityHeatmap:
    """Pairwise CKA over ``mats``; each gram matrix is built once."""
    _check_kernel(kernel, sigma_fraction)
    if len({m.samples for m in mats}) > 1:
        raise ShapeError("All activation matrices need the same sample count")
    grams, selfs = [], []
    for m in mats:
        try:
            K = gram(m.values, kernel, sigma_fraction)
        except DegenerateInputError as e:
            raise DegenerateInputError(str(e), layer=m.layer) from e
        s = hsic(K, K)
        if _vanishes(s, K):
            raise DegenerateInputError(
                "Self-HSIC is zero: activations are constant across samples", layer=m.layer
            )
        grams.append(K)
        selfs.append(s)

    size = len(mats)
    values = np.eye(size)
    for i in range(size):
        for j in range(i + 1, size):
            values[i, j] = values[j, i] = _cka_from_grams(grams[i], grams[j], selfs[i], selfs[j])
    logger.debug("heatmap computed", extra={"layers": size, "kernel": kernel})
    return SimilarityHeatmap(
        values=values,
        layers=tuple(m.layer for m in mats),
        kernel=kernel,
        samples=mats[0].samples if mats else 0,
        stream=mats[0].stream if mats else "",
    )


def heatmap(
    net: FusionNet,
    stream: str,
    x_rgb: Optional[np.ndarray],
    x_depth: Optional[np.ndarray],
    *,
    kernel: str = "linear",
    sigma_fraction: float = DEFAULT_SIGMA_FRACTION,
    include_projections: bool = False,
) -> SimilarityHeatmap:
    """CKA between every pair of layers of one stream of ``net``.

    Args:
        net: Trained classifier
        stream: ``"rgb"`` or ``"depth"``
        x_rgb: Preprocessed RGB inputs ``[N, 3, H, W]``
        x_depth: Preprocessed depth inputs ``[N, 3, H, W]``
        kernel: ``"linear"`` or ``"rbf"``
        sigma_fraction: RBF bandwidth fraction
        include_projections: Also compare the projected stage vectors

    Returns:
        Symmetric SimilarityHeatmap with a unit diagonal
    """
    mats = collect_activations(net, x_rgb, x_depth, stream, include_projections=include_projections)
    return similarity_heatmap(mats, kernel, sigma_fraction)


def redundancy_score(hm: SimilarityHeatmap) -> float:
    """Mean off-diagonal similarity."""
    size = hm.values.shape[0]
    if size < 2:
        raise DegenerateInputError("A 1×1 heatmap has no off-diagonal entries")
    return float(hm.off_diagonal().mean())


def pearson(
    a: Union[SimilarityHeatmap, Sequence[SimilarityHeatmap]],
    b: Union[SimilarityHeatmap, Sequence[SimilarityHeatmap]],
) -> float:
    """Pearson correlation between the off-diagonal entries of two heatmaps.

    Only the strict upper triangles enter; the unit diagonal does not.
    Sequences of heatmaps are pooled in order.

    Args:
        a: A heatmap or a sequence of heatmaps.
        b: Heatmap(s) with the same layer layout as ``a``.

    Returns:
        The correlation coefficient in ``[−1, 1]``.

    Raises:
        ShapeError: The layouts differ.
        DegenerateInputError: Fewer than two entries, or one side is constant.
    """
    maps_a = [a] if isinstance(a, SimilarityHeatmap) else list(a)
    maps_b = [b] if isinstance(b, SimilarityHeatmap) else list(b)
    if [m.layers for m in maps_a] != [m.layers for m in maps_b]:
        raise ShapeError("pearson: heatmaps cover different layers")
    va = np.concatenate([m.upper_triangle() for m in maps_a]) if maps_a else np.empty(0)
    vb = np.concatenate([m.upper_triangle() for m in maps_b]) if maps_b else np.empty(0)
    if va.size < 2:
        raise DegenerateInputError("pearson needs at least two off-diagonal entries")
    if np.ptp(va) == 0.0 or np.ptp(vb) == 0.0:
        raise DegenerateInputError("pearson is undefined for constant off-diagonal entries")
    return float(np.corrcoef(va, vb)[0, 1])
