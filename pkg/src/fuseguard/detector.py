# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Rejection defense in RGB-D feature space.

Class centroids are the mean fused feature ``R(x)`` of each class's training
samples. A sample's anomaly score is its distance to the centroid of the
class the network predicts; scores above the calibrated threshold ``β`` are
assigned to the extra rejection class (index ``c``).
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .errors import CalibrationError, CheckpointError, ConfigError, ShapeError
from .model import FusionNet, features
from .tensor import Operand, Tensor, as_tensor, concat, mul, reshape, sigmoid, sub

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 30.0
DEFAULT_FPR = 0.1
DEFAULT_RHO = 1e-5
DEFAULT_GRID_STEPS = 10**10
MODES = ("hard", "soft")
CALIBRATION_SPLITS = ("train", "holdout")


@dataclass(frozen=True)
class DetectorState:
    """Centroids plus the calibrated threshold; immutable once calibrated."""

    centroids: Optional[np.ndarray]
    beta: Optional[float] = None
    lam: float = DEFAULT_LAMBDA
    fpr_target: float = DEFAULT_FPR
    rho: float = DEFAULT_RHO
    grid_steps: int = DEFAULT_GRID_STEPS
    achieved_fpr: Optional[float] = None
    calibration_split: str = "train"
    calibration_size: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def calibrated(self) -> bool:
        return self.centroids is not None and self.beta is not None

    @property
    def num_classes(self) -> int:
        return 0 if self.centroids is None else int(self.centroids.shape[0])

    @property
    def rejection_label(self) -> int:
        """Index of the rejection class in ``S′`` (``c`` for ``c`` real classes)."""
        return self.num_classes

    def require_centroids(self) -> np.ndarray:
        if self.centroids is None:
            raise CalibrationError("Detector has no centroids; run calibration first")
        return self.centroids

    def require_calibrated(self) -> float:
        self.require_centroids()
        if self.beta is None:
            raise CalibrationError("Detector threshold is not calibrated; run calibration first")
        return float(self.beta)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "centroids": [[float(v) for v in row] for row in self.require_centroids()],
            "beta": self.beta,
            "lambda": self.lam,
            "fpr_target": self.fpr_target,
            "rho": self.rho,
            "grid_steps": self.grid_steps,
            "achieved_fpr": self.achieved_fpr,
            "calibration_split": self.calibration_split,
            "calibration_size": self.calibration_size,
            **self.extra,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DetectorState":
        known = {
            "centroids", "beta", "lambda", "fpr_target", "rho", "grid_steps",
            "achieved_fpr", "calibration_split", "calibration_size",
        }
        return cls(
            centroids=np.asarray(data["centroids"], dtype=np.float64),
            beta=None if data.get("beta") is None else float(data["beta"]),
            lam=float(data.get("lambda", DEFAULT_LAMBDA)),
            fpr_target=float(data.get("fpr_target", DEFAULT_FPR)),
            rho=float(data.get("rho", DEFAULT_RHO)),
            grid_steps=int(data.get("grid_steps", DEFAULT_GRID_STEPS)),
            achieved_fpr=data.get("achieved_fpr"),
            calibration_split=str(data.get("calibration_split", "train")),
            calibration_size=int(data.get("calibration_size", 0)),
            extra={k: v for k, v in data.items() if k not in known},
        )

    def save(self, path: Path) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8") as f:
                json.dump(self.to_dict(), f, indent=2)
        except OSError as e:
            raise CheckpointError(f"Failed to write detector file {path}: {e}", path=str(path)) from e

    @classmethod
    def load(cls, path: Path) -> "DetectorState":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise CheckpointError(f"Detector file not found: {path}", path=str(path)) from e
        except (OSError, json.JSONDecodeError) as e:
            raise CheckpointError(f"Corrupt detector file {path}: {e}", path=str(path)) from e
        return cls.from_dict(data)


# -- centroids and scores ------------------------------------------------------


def centroids_from_features(feats: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class mean of ``feats`` grouped by true label."""
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels)
    if feats.ndim != 2 or len(feats) != len(labels):
        raise ShapeError(
            f"features {feats.shape} do not match {len(labels)} labels", shapes=[feats.shape]
        )
    centroids = np.zeros((num_classes, feats.shape[1]))
    for gamma in range(num_classes):
        members = feats[labels == gamma]
        if len(members) == 0:
            raise CalibrationError(
                f"Class {gamma} has no training samples; cannot compute its centroid",
                context={"class": gamma},
            )
        centroids[gamma] = members.mean(axis=0)
    return centroids


def compute_centroids(
    net: FusionNet, x_rgb: np.ndarray, x_depth: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    feats, _ = features(net, x_rgb, x_depth)
    return centroids_from_features(feats, labels, net.arch.num_classes)


def scores_from_features(feats: np.ndarray, probs: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """``E = ‖R(x) − C_γ‖₂`` with ``γ`` the predicted class, row-wise."""
    gamma = np.argmax(probs, axis=1)
    return np.linalg.norm(np.asarray(feats, dtype=np.float64) - centroids[gamma], axis=1)


def anomaly_score(
    net: FusionNet, detector: DetectorState, x_rgb: Optional[Operand], x_depth: Optional[Operand]
) -> Union[float, np.ndarray]:
    """Anomaly score of one ``3×H×W`` sample, or an array for a batch."""
    centroids = detector.require_centroids()
    ref = as_tensor(x_rgb if x_rgb is not None else x_depth)
    if ref.ndim == 3:
        rec = net.forward(x_rgb, x_depth)
        return float(
            scores_from_features(rec.feature.data[None], rec.scores.data[None], centroids)[0]
        )
    rgb = None if x_rgb is None else as_tensor(x_rgb).data
    depth = None if x_depth is None else as_tensor(x_depth).data
    feats, probs = features(net, rgb, depth)
    return scores_from_features(feats, probs, centroids)


# -- threshold search ----------------------------------------------------------


def false_positive_rate(scores: np.ndarray, beta: float) -> float:
    """Fraction of ``scores`` strictly above ``beta``."""
    scores = np.asarray(scores, dtype=np.float64)
    return float(np.count_nonzero(scores > beta)) / len(scores)


def _max_rejections(total: int, r: float) -> int:
    """Largest ``n`` with ``n / N <= r`` under the same float comparison as the scan."""
    counts = np.arange(total + 1)
    return int(counts[counts / total <= r].max())


def calibrate_threshold(
    scores: np.ndarray,
    r: float = DEFAULT_FPR,
    rho: float = DEFAULT_RHO,
    grid_steps: int = DEFAULT_GRID_STEPS,
) -> float:
    """Smallest grid threshold ``β = ρ·i`` (``1 <= i <= T``) whose FPR is at most ``r``.

    Returns exactly what a scan of ``i = 1, 2, …, T`` would return, without
    visiting the grid: at the default ``T = 1e10`` a literal scan is out of
    reach. The rejected count is non-increasing in ``i``, so qualifying
    indices form a suffix of the grid. The start index ``⌈s/ρ⌉``, with ``s``
    the largest score that must stay accepted, lands on or next to the first
    qualifying index; stepping up while it fails and down while its left
    neighbour qualifies, using the grid's own products ``ρ·i``, then yields
    the first qualifying index even when ``s/ρ`` rounds badly.

    Args:
        scores: Anomaly scores of the calibration set.
        r: Target false-positive rate in ``(0, 1]``.
        rho: Grid spacing ``ρ``.
        grid_steps: Number of grid points ``T``.

    Returns:
        The threshold ``β = ρ·i``.

    Raises:
        CalibrationError: Empty or non-finite scores, or no grid point
            reaches ``r``.
        ConfigError: Parameters out of range.
    """
    scores = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    total = len(scores)
    if total == 0:
        raise CalibrationError("Cannot calibrate on an empty score set")
    if not (0 < r <= 1) or rho <= 0 or grid_steps < 1:
        raise ConfigError(
            "Calibration needs 0 < r <= 1, rho > 0 and grid_steps >= 1",
            context={"r": r, "rho": rho, "grid_steps": grid_steps},
        )
    if not np.all(np.isfinite(scores)):
        raise CalibrationError("Anomaly scores contain non-finite values")

    allowed = _max_rejections(total, r)

    def rejected(i: int) -> int:
        return total - int(np.searchsorted(scores, rho * i, side="right"))

    def qualifies(i: int) -> bool:
        return rejected(i) <= allowed

    if not qualifies(grid_steps):
        top = rho * grid_steps
        raise CalibrationError(
            f"FPR {r} is unreachable within {grid_steps} grid steps of {rho}",
            context={"max_grid_value": top, "residual_fpr": rejected(grid_steps) / total},
        )
    if allowed >= total:
        i = 1
    else:
        pivot = scores[total - allowed - 1]
        i = int(min(grid_steps, max(1, np.ceil(pivot / rho))))
    while not qualifies(i):
        i += 1
    while i > 1 and qualifies(i - 1):
        i -= 1
    beta = rho * i
    logger.debug(
        "threshold found",
        extra={"beta": beta, "grid_index": i, "fpr": rejected(i) / total, "r": r},
    )
    return beta


def _calibration_split(labels: np.ndarray, split: str, holdout_fraction: float) -> np.ndarray:
    """Boolean mask of samples used for threshold search (the rest fit centroids)."""
    if split not in CALIBRATION_SPLITS:
        raise ConfigError(f"Unknown calibration split {split!r}; expected {CALIBRATION_SPLITS}")
    mask = np.zeros(len(labels), dtype=bool)
    if split == "train":
        return ~mask
    for gamma in np.unique(labels):
        idx = np.flatnonzero(labels == gamma)
        take = int(np.floor(len(idx) * holdout_fraction))
        if take == 0 or take == len(idx):
            raise CalibrationError(
                f"Class {gamma} has {len(idx)} samples; cannot hold out {holdout_fraction:.0%}",
                context={"class": int(gamma)},
            )
        mask[idx[len(idx) - take:]] = True
    return mask


def calibrate(
    net: FusionNet,
    x_rgb: np.ndarray,
    x_depth: np.ndarray,
    labels: np.ndarray,
    *,
    fpr: float = DEFAULT_FPR,
    rho: float = DEFAULT_RHO,
    grid_steps: int = DEFAULT_GRID_STEPS,
    lam: float = DEFAULT_LAMBDA,
    split: str = "train",
    holdout_fraction: float = 0.2,
) -> DetectorState:
    """Fit centroids and the rejection threshold from one feature pass over the data.

    Args:
        net: Trained classifier
        x_rgb: Preprocessed RGB training inputs
        x_depth: Preprocessed depth training inputs
        labels: Training labels
        fpr: Target false-positive rate ``r``
        rho: Grid spacing of the threshold search
        grid_steps: Number of grid points
        lam: Steepness of the soft rejection score
        split: ``"train"`` scores the centroid samples themselves; ``"holdout"``
            keeps a stratified fraction apart for the threshold
        holdout_fraction: Share of each class held out when ``split="holdout"``

    Returns:
        A calibrated DetectorState recording the achieved FPR

    Raises:
        CalibrationError: A class has no samples or ``r`` is unreachable
        ConfigError: Invalid parameters
    """
    if lam <= 0:
        raise ConfigError("lambda must be positive", context={"lambda": lam})
    labels = np.asarray(labels)
    feats, probs = features(net, x_rgb, x_depth)
    held = _calibration_split(labels, split, holdout_fraction)
    fit = ~held if split == "holdout" else held
    centroids = centroids_from_features(feats[fit], labels[fit], net.arch.num_classes)
    scores = scores_from_features(feats[held], probs[held], centroids)
    beta = calibrate_threshold(scores, fpr, rho, grid_steps)
    state = DetectorState(
        centroids=centroids,
        beta=beta,
        lam=lam,
        fpr_target=fpr,
        rho=rho,
        grid_steps=grid_steps,
        achieved_fpr=false_positive_rate(scores, beta),
        calibration_split=split,
        calibration_size=int(held.sum()),
    )
    logger.info(
        f"Calibrated detector: beta={beta:.6g}, achieved FPR={state.achieved_fpr:.4f}",
        extra={"beta": beta, "achieved_fpr": state.achieved_fpr, "fpr_target": fpr, "split": split},
    )
    return state


# -- defended classifier -------------------------------------------------------


def soft_reject_score(E: Operand, beta: float, lam: float = DEFAULT_LAMBDA) -> Tensor:
    """``1 / (1 + exp(−λ(E − β)))``, differentiable in ``E``."""
    if lam <= 0:
        raise ConfigError("lambda must be positive", context={"lambda": lam})
    e = as_tensor(E, dtype=np.float64)
    return sigmoid(mul(sub(e, beta), lam))


def defended_scores(scores: Operand, reject: Operand) -> Tensor:
    """``S′ = [(1 − s_{c+1}) s_1, …, (1 − s_{c+1}) s_c, s_{c+1}]`` for one sample."""
    s = as_tensor(scores)
    rej = as_tensor(reject, dtype=s.dtype)
    if s.ndim != 1 or rej.size != 1:
        raise ShapeError(
            "defended_scores expects [c] scores and a scalar rejection score",
            shapes=[s.shape, rej.shape],
        )
    rej = reshape(rej, ())
    return concat([mul(s, sub(1.0, rej)), reshape(rej, (1,))], axis=0)


def defend(
    probs: np.ndarray, energies: np.ndarray, detector: DetectorState, mode: str = "hard"
) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise ``S′`` and labels from undefended scores and anomaly scores."""
    if mode not in MODES:
        raise ConfigError(f"Unknown defense mode {mode!r}; expected one of {MODES}")
    beta = detector.require_calibrated()
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    energies = np.atleast_1d(np.asarray(energies, dtype=np.float64))
    if mode == "hard":
        reject = (energies > beta).astype(np.float64)
    else:
        z = detector.lam * (energies - beta)
        e = np.exp(-np.abs(z))
        reject = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    s_prime = np.concatenate([probs * (1.0 - reject)[:, None], reject[:, None]], axis=1)
    return s_prime, np.argmax(s_prime, axis=1)


def defended_predict(
    net: FusionNet,
    detector: DetectorState,
    x_rgb: Optional[Operand],
    x_depth: Optional[Operand],
    mode: str = "hard",
):
    """``(S′, label)`` over ``c + 1`` outputs; the label ``c`` means rejected."""
    detector.require_calibrated()
    ref = as_tensor(x_rgb if x_rgb is not None else x_depth)
    if ref.ndim == 3:
        rec = net.forward(x_rgb, x_depth)
        feats, probs = rec.feature.data[None], rec.scores.data[None]
    else:
        rgb = None if x_rgb is None else as_tensor(x_rgb).data
        depth = None if x_depth is None else as_tensor(x_depth).data
        feats, probs = features(net, rgb, depth)
    energies = scores_from_features(feats, probs, detector.centroids)
    s_prime, labels = defend(probs, energies, detector, mode)
    if ref.ndim == 3:
        return s_prime[0], int(labels[0])
    return s_prime, labels


def with_threshold(detector: DetectorState, beta: float) -> DetectorState:
    """Copy of ``detector`` with threshold ``beta``."""
    return replace(detector, beta=float(beta))
