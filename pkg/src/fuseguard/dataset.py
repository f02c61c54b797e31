# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Synthetic RGB-D shape dataset, depth colorization and mean-centering.

Each class is an analytic shape family rendered as a height field over the
image plane. The depth map is the background plane minus the height field;
the RGB image shades a class palette with the same surface normals. Some
classes share a palette, so colour alone cannot separate every class while
shape (visible in depth) can. The RGB background is per-sample clutter of
coloured gratings; the depth background is a flat plane.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DatasetError
from .seeding import rng_for
from .tensor import Tensor
from .tensor_io import load_array, save_tensor

logger = logging.getLogger(__name__)

SHAPE_FAMILIES: Tuple[str, ...] = ("sphere", "box", "pyramid", "ring", "cone", "wedge")
PALETTES: Tuple[Tuple[float, float, float], ...] = (
    (0.85, 0.25, 0.20),
    (0.20, 0.45, 0.85),
    (0.30, 0.70, 0.30),
    (0.90, 0.75, 0.20),
    (0.60, 0.30, 0.75),
    (0.20, 0.70, 0.70),
)
COLOR_POLICIES = ("shared", "distinct")
NORMALIZATIONS = ("minmax", "global", "none")
MODALITIES = ("rgb", "depth_raw", "depth")
_LIGHT = np.array([-0.4, -0.5, 1.0]) / np.linalg.norm([-0.4, -0.5, 1.0])
BACKGROUND_LEVEL = 0.45
CLUTTER_GRATINGS = 3

ArrayOrTensor = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters that fully determine a generated dataset."""

    num_classes: int = 5
    samples_per_class: int = 50
    instances_per_class: int = 5
    image_size: int = 32
    color_policy: str = "shared"
    background_depth: float = 10.0
    depth_noise: float = 0.0
    rgb_clutter: float = 0.25
    normalization: str = "minmax"
    depth_gain: float = 8.0
    depth_range: float = 4.0
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if not 3 <= self.num_classes <= len(SHAPE_FAMILIES):
            problems.append(f"num_classes must be in [3, {len(SHAPE_FAMILIES)}]")
        if self.instances_per_class < 2:
            problems.append("instances_per_class must be >= 2 (one instance is held out)")
        if self.samples_per_class < self.instances_per_class:
            problems.append("samples_per_class must be >= instances_per_class")
        if self.image_size < 8:
            problems.append("image_size must be >= 8")
        if self.color_policy not in COLOR_POLICIES:
            problems.append(f"color_policy must be one of {COLOR_POLICIES}")
        if self.normalization not in NORMALIZATIONS:
            problems.append(f"normalization must be one of {NORMALIZATIONS}")
        if self.depth_noise < 0 or self.rgb_clutter < 0:
            problems.append("depth_noise and rgb_clutter must be >= 0")
        if self.depth_gain <= 0 or self.depth_range <= 0:
            problems.append("depth_gain and depth_range must be > 0")
        if problems:
            raise DatasetError("Invalid dataset spec: " + "; ".join(problems), context=asdict(self))

    @property
    def class_names(self) -> Tuple[str, ...]:
        return SHAPE_FAMILIES[: self.num_classes]

    def palette_index(self, label: int) -> int:
        return label // 2 if self.color_policy == "shared" else label

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetSpec":
        return cls(**data)


@dataclass(frozen=True)
class RgbdSample:
    rgb: np.ndarray
    depth_raw: np.ndarray
    depth_colorized: np.ndarray
    label: int
    sample_id: str = ""


@dataclass(frozen=True)
class Dataset:
    """Immutable batch of samples stored as stacked arrays."""

    rgb: np.ndarray  # [N, 3, H, W] in [0, 1]
    depth_raw: np.ndarray  # [N, H, W]
    depth: np.ndarray  # [N, 3, H, W] colorized, in [0, 1]
    labels: np.ndarray  # [N]
    ids: Tuple[str, ...]
    class_names: Tuple[str, ...] = field(default=SHAPE_FAMILIES[:5])

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> RgbdSample:
        return RgbdSample(
            rgb=self.rgb[i],
            depth_raw=self.depth_raw[i],
            depth_colorized=self.depth[i],
            label=int(self.labels[i]),
            sample_id=self.ids[i],
        )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            rgb=self.rgb[idx],
            depth_raw=self.depth_raw[idx],
            depth=self.depth[idx],
            labels=self.labels[idx],
            ids=tuple(self.ids[i] for i in idx),
            class_names=self.class_names,
        )


# -- depth colorization ------------------------------------------------------


def _as_array(value: ArrayOrTensor) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def normalize_depth(
    depth_raw: ArrayOrTensor,
    *,
    normalization: str = "minmax",
    depth_gain: float = 8.0,
    depth_range: float = 4.0,
) -> np.ndarray:
    """Rescale a depth map before normal estimation.

    ``minmax`` maps each image onto ``[0, depth_gain]``; ``global`` divides by a
    fixed ``depth_range`` shared by all images; ``none`` passes depth through.
    """
    d = _as_array(depth_raw).astype(np.float64)
    if normalization == "minmax":
        lo, hi = d.min(), d.max()
        if hi - lo <= 0:
            return np.zeros_like(d)
        return (d - lo) / (hi - lo) * depth_gain
    if normalization == "global":
        return d / depth_range * depth_gain
    if normalization == "none":
        return d
    raise DatasetError(f"Unknown depth normalization: {normalization}")


def surface_normals(depth: np.ndarray) -> np.ndarray:
    """Unit normals ``normalize(-∂d/∂x, -∂d/∂y, 1)`` as a ``[3, H, W]`` array.

    Central differences inside the image, one-sided differences at the borders.
    """
    d_dy, d_dx = np.gradient(np.asarray(depth, dtype=np.float64))
    n = np.stack([-d_dx, -d_dy, np.ones_like(d_dx)])
    return n / np.linalg.norm(n, axis=0, keepdims=True)


def colorize_depth(
    depth_raw: ArrayOrTensor,
    *,
    normalization: str = "minmax",
    depth_gain: float = 8.0,
    depth_range: float = 4.0,
) -> np.ndarray:
    """Surface-normal colorization of a raw depth map into ``[3, H, W]`` in [0, 1]."""
    d = _as_array(depth_raw)
    if d.ndim != 2 or min(d.shape) < 2:
        raise DatasetError(f"Depth map must be 2-D with sides >= 2, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise DatasetError("Depth map contains non-finite values")
    norm = normalize_depth(
        d, normalization=normalization, depth_gain=depth_gain, depth_range=depth_range
    )
    return ((surface_normals(norm) + 1.0) / 2.0).astype(np.float32)


# -- rendering ---------------------------------------------------------------


def _height_field(family: str, u: np.ndarray, v: np.ndarray, radius: float) -> np.ndarray:
    rho = np.sqrt(u * u + v * v)
    if family == "sphere":
        return np.sqrt(np.clip(radius**2 - rho**2, 0.0, None))
    if family == "box":
        half = 0.8 * radius
        return np.where(np.maximum(np.abs(u), np.abs(v)) <= half, 0.6 * radius, 0.0)
    if family == "pyramid":
        return np.clip(0.9 * radius * (1.0 - np.maximum(np.abs(u), np.abs(v)) / radius), 0.0, None)
    if family == "ring":
        major, tube = 0.65 * radius, 0.32 * radius
        return 1.5 * np.sqrt(np.clip(tube**2 - (rho - major) ** 2, 0.0, None))
    if family == "cone":
        return np.clip(0.9 * radius * (1.0 - rho / radius), 0.0, None)
    if family == "wedge":
        inside = (np.abs(u) <= 0.9 * radius) & (np.abs(v) <= 0.6 * radius)
        return np.where(inside, 0.8 * radius * (u / radius + 1.0) / 2.0, 0.0)
    raise DatasetError(f"Unknown shape family: {family}")


def _clutter(pose: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    """Coloured gratings with random orientation, frequency and phase, ``[3, H, W]``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((3, size, size))
    for _ in range(CLUTTER_GRATINGS):
        angle = pose.uniform(0, np.pi)
        freq = pose.uniform(0.5, 1.6)
        phase = pose.uniform(0, 2 * np.pi)
        tint = pose.uniform(-1.0, 1.0, 3)
        wave = np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        out += tint[:, None, None] * wave[None]
    return amplitude * out / np.sqrt(CLUTTER_GRATINGS)


def _render(spec: DatasetSpec, label: int, instance: int, index: int) -> Tuple[np.ndarray, np.ndarray]:
    size = spec.image_size
    inst = rng_for(spec.seed, "instance", label, instance)
    size_factor = inst.uniform(0.9, 1.05)
    height_factor = inst.uniform(0.9, 1.1)
    color = np.clip(np.array(PALETTES[spec.palette_index(label)]) + inst.normal(0, 0.03, 3), 0, 1)

    pose = rng_for(spec.seed, "sample", label, index)
    cy, cx = (size - 1) / 2 + pose.uniform(-3, 3, size=2)
    theta = pose.uniform(0, 2 * np.pi)
    radius = 0.3 * size * size_factor * pose.uniform(0.9, 1.1)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    du, dv = xx - cx, yy - cy
    u = np.cos(theta) * du + np.sin(theta) * dv
    v = -np.sin(theta) * du + np.cos(theta) * dv
    height = _height_field(SHAPE_FAMILIES[label], u, v, radius) * height_factor
    foreground = height > 0

    depth = spec.background_depth - 0.1 * height
    if spec.depth_noise > 0:
        depth = depth + pose.normal(0.0, spec.depth_noise, depth.shape)
    depth = np.clip(depth, 0.0, None)

    # palette-specific stripes keep texture shared between classes of one palette
    freq = 0.6 + 0.15 * spec.palette_index(label)
    texture = 0.75 + 0.25 * np.sin(freq * u + pose.uniform(0, 2 * np.pi))
    shading = 0.4 + 0.6 * np.clip(np.tensordot(_LIGHT, surface_normals(height), axes=1), 0, None)
    albedo = color[:, None, None] * texture[None] * shading[None]
    background = (
        BACKGROUND_LEVEL
        + _clutter(pose, size, spec.rgb_clutter)
        + pose.normal(0.0, 0.02, (3, size, size))
    )
    rgb = np.clip(np.where(foreground[None], albedo, background), 0.0, 1.0)
    return rgb.astype(np.float32), depth.astype(np.float32)


def generate(spec: DatasetSpec) -> Tuple[Dataset, Dataset]:
    """Render the train and test splits; the last instance of each class is held out."""
    spec.validate()
    held_out = spec.instances_per_class - 1
    buckets: Dict[str, List[Any]] = {"train": [], "test": []}
    for label in range(spec.num_classes):
        for index in range(spec.samples_per_class):
            instance = index % spec.instances_per_class
            rgb, depth_raw = _render(spec, label, instance, index)
            colorized = colorize_depth(
                depth_raw,
                normalization=spec.normalization,
                depth_gain=spec.depth_gain,
                depth_range=spec.depth_range,
            )
            split = "test" if instance == held_out else "train"
            buckets[split].append((f"c{label}-s{index:03d}", rgb, depth_raw, colorized, label))

    train, test = (_stack(buckets[s], spec.class_names) for s in ("train", "test"))
    logger.info(
        "Generated synthetic RGB-D dataset",
        extra={"train_size": len(train), "test_size": len(test), "seed": spec.seed},
    )
    return train, test


def _stack(rows: List[Any], class_names: Tuple[str, ...]) -> Dataset:
    ids, rgb, depth_raw, depth, labels = zip(*rows)
    return Dataset(
        rgb=np.stack(rgb),
        depth_raw=np.stack(depth_raw),
        depth=np.stack(depth),
        labels=np.array(labels, dtype=np.int64),
        ids=tuple(ids),
        class_names=class_names,
    )


# -- preprocessing -----------------------------------------------------------


@dataclass(frozen=True)
class InputBounds:
    """Valid preprocessed range per modality, as full ``[3, H, W]`` arrays."""

    rgb_low: np.ndarray
    rgb_high: np.ndarray
    depth_low: np.ndarray
    depth_high: np.ndarray

    def clip(self, x: np.ndarray, modality: str) -> np.ndarray:
        low, high = (self.rgb_low, self.rgb_high) if modality == "rgb" else (self.depth_low, self.depth_high)
        return np.clip(x, low, high).astype(x.dtype)


@dataclass
class Preprocessor:
    """Per-channel mean-centering fitted on the training split."""

    rgb_mean: Optional[np.ndarray] = None
    depth_mean: Optional[np.ndarray] = None

    @classmethod
    def fit(cls, train: Dataset) -> "Preprocessor":
        """Channel means of the training split.

        Raises:
            DatasetError: The split is empty
        """
        if len(train) == 0:
            raise DatasetError("Cannot fit channel means on an empty split")
        return cls(
            rgb_mean=train.rgb.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32),
            depth_mean=train.depth.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32),
        )

    @property
    def fitted(self) -> bool:
        return self.rgb_mean is not None and self.depth_mean is not None

    def _means(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.rgb_mean is None or self.depth_mean is None:
            raise DatasetError(
                "Channel means are not available; fit the preprocessor on the train split first"
            )
        return self.rgb_mean[:, None, None], self.depth_mean[:, None, None]

    def preprocess(self, sample: RgbdSample) -> Tuple[np.ndarray, np.ndarray]:
        rgb_mean, depth_mean = self._means()
        return sample.rgb - rgb_mean, sample.depth_colorized - depth_mean

    def preprocess_batch(self, data: Dataset) -> Tuple[np.ndarray, np.ndarray]:
        rgb_mean, depth_mean = self._means()
        return data.rgb - rgb_mean, data.depth - depth_mean

    def inverse_preprocess(self, x: np.ndarray, modality: str = "rgb") -> np.ndarray:
        """Map a preprocessed ``[3, H, W]`` (or batched) image back to display space."""
        rgb_mean, depth_mean = self._means()
        return x + (rgb_mean if modality == "rgb" else depth_mean)

    def bounds(self, image_size: int) -> InputBounds:
        """Preprocessed image of the displayable range ``[0, 1]``, per modality."""
        rgb_mean, depth_mean = self._means()
        shape = (3, image_size, image_size)
        return InputBounds(
            rgb_low=np.broadcast_to(-rgb_mean, shape).astype(np.float32),
            rgb_high=np.broadcast_to(1.0 - rgb_mean, shape).astype(np.float32),
            depth_low=np.broadcast_to(-depth_mean, shape).astype(np.float32),
            depth_high=np.broadcast_to(1.0 - depth_mean, shape).astype(np.float32),
        )

    def to_dict(self) -> Dict[str, Any]:
        rgb_mean, depth_mean = self._means()
        return {
            "rgb": [float(v) for v in rgb_mean.ravel()],
            "depth": [float(v) for v in depth_mean.ravel()],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Preprocessor":
        return cls(
            rgb_mean=np.asarray(data["rgb"], dtype=np.float32),
            depth_mean=np.asarray(data["depth"], dtype=np.float32),
        )


# -- storage -----------------------------------------------------------------


@dataclass
class LoadedDataset:
    spec: DatasetSpec
    train: Dataset
    test: Dataset
    preprocessor: Preprocessor


class DatasetStore:
    """Reads and writes a dataset directory.

    Layout: ``meta.json`` (spec echo, class names, split ids and sizes, channel
    means), ``labels.csv`` (``sample_id,label``) and one FGT1 file per sample and
    modality under ``tensors/``.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.logger = logging.getLogger(__name__)

    @property
    def meta_path(self) -> Path:
        return self.root / "meta.json"

    @property
    def labels_path(self) -> Path:
        return self.root / "labels.csv"

    def _tensor_path(self, sample_id: str, modality: str) -> Path:
        return self.root / "tensors" / f"{sample_id}.{modality}.fgt"

    def save(
        self,
        spec: DatasetSpec,
        train: Dataset,
        test: Dataset,
        preprocessor: Preprocessor,
        metadata: Optional[Dict[str, Any]] = None,
    ) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        meta = {
            "spec": spec.to_dict(),
            "class_names": list(spec.class_names),
            "splits": {"train": list(train.ids), "test": list(test.ids)},
            "split_sizes": {"train": len(train), "test": len(test)},
            "channel_means": preprocessor.to_dict(),
            **(metadata or {}),
        }
        try:
            with open(self.meta_path, "w", encoding="utf-8") as f:
                json.dump(meta, f, indent=2)
            with open(self.labels_path, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["sample_id", "label"])
                for data in (train, test):
                    writer.writerows(zip(data.ids, (int(y) for y in data.labels)))
        except OSError as e:
            raise DatasetError(f"Failed to write dataset: {e}", path=str(self.root)) from e

        for data in (train, test):
            for i, sample_id in enumerate(data.ids):
                save_tensor(self._tensor_path(sample_id, "rgb"), data.rgb[i])
                save_tensor(self._tensor_path(sample_id, "depth_raw"), data.depth_raw[i])
                save_tensor(self._tensor_path(sample_id, "depth"), data.depth[i])
        self.logger.info(f"Saved dataset to {self.root}", extra={"path": str(self.root)})

    def load(self) -> LoadedDataset:
        """Read a dataset written by :meth:`save`.

        Returns:
            LoadedDataset with the spec, both splits and the fitted preprocessor

        Raises:
            DatasetError: Missing or inconsistent files
        """
        if not self.meta_path.exists():
            raise DatasetError(f"Dataset directory has no meta.json: {self.root}", path=str(self.root))
        try:
            with open(self.meta_path, encoding="utf-8") as f:
                meta = json.load(f)
            with open(self.labels_path, encoding="utf-8", newline="") as f:
                labels = {row["sample_id"]: int(row["label"]) for row in csv.DictReader(f)}
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as e:
            raise DatasetError(f"Failed to read dataset: {e}", path=str(self.root)) from e

        spec = DatasetSpec.from_dict(meta["spec"])
        missing = [i for name in ("train", "test") for i in meta["splits"][name] if i not in labels]
        if missing:
            raise DatasetError(
                f"labels.csv has no entry for {len(missing)} samples (first: {missing[0]})",
                path=str(self.labels_path),
            )
        class_names = tuple(meta["class_names"])
        splits = []
        for name in ("train", "test"):
            ids = meta["splits"][name]
            splits.append(
                Dataset(
                    rgb=np.stack([load_array(self._tensor_path(i, "rgb")) for i in ids]),
                    depth_raw=np.stack([load_array(self._tensor_path(i, "depth_raw")) for i in ids]),
                    depth=np.stack([load_array(self._tensor_path(i, "depth")) for i in ids]),
                    labels=np.array([labels[i] for i in ids], dtype=np.int64),
                    ids=tuple(ids),
                    class_names=class_names,
                )
            )
        return LoadedDataset(
            spec=spec,
            train=splits[0],
            test=splits[1],
            preprocessor=Preprocessor.from_dict(meta["channel_means"]),
        )
