# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Two-stream RGB-D fusion classifier.

Each stream is a stack of strided convolution stages. Every stage output is
projected to a fixed-size vector; the per-stage RGB and depth vectors are
concatenated and fed, stage by stage, to a GRU whose final state is the
RGB-D feature ``R(x)``. A dense head maps ``R(x)`` to class scores.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError, TrainingDivergedError
from .seeding import rng_for
from .tensor import (
    GRUParams,
    Operand,
    Tape,
    Tensor,
    as_tensor,
    bias_add,
    concat,
    conv2d,
    cross_entropy,
    gru_cell,
    matmul,
    mean,
    relu,
    reshape,
    softmax,
    zeros,
)
from .tensor_io import load_array, save_tensor

logger = logging.getLogger(__name__)

VARIANTS = ("rgbd", "rgb", "depth")
STREAMS = ("rgb", "depth")
EVAL_BATCH = 64


@dataclass(frozen=True)
class Architecture:
    """Shape hyperparameters: ``M`` stages, projection depth ``p``, memory ``a``, ``c`` classes."""

    num_classes: int = 5
    image_size: int = 32
    stage_channels: Tuple[int, ...] = (8, 16, 32)
    projection_channels: int = 16
    projection_dim: int = 32
    memory: int = 16
    variant: str = "rgbd"
    tag: str = ""

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def stages(self) -> int:
        return len(self.stage_channels)

    @property
    def streams(self) -> Tuple[str, ...]:
        return STREAMS if self.variant == "rgbd" else (self.variant,)

    @property
    def fused_dim(self) -> int:
        return self.projection_dim * len(self.streams)

    def stage_shapes(self) -> List[Tuple[int, int, int]]:
        shapes, size = [], self.image_size
        for channels in self.stage_channels:
            size = (size + 2 - 3) // 2 + 1
            shapes.append((channels, size, size))
        return shapes

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["stage_channels"] = list(self.stage_channels)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Architecture:
        fields_ = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        fields_["stage_channels"] = tuple(fields_.get("stage_channels", (8, 16, 32)))
        return cls(**fields_)


@dataclass
class ProjectionBlock:
    """1×1 convolution, global average pooling, dense map to ``p``."""

    conv_weight: Tensor
    conv_bias: Tensor
    dense_weight: Tensor
    dense_bias: Tensor


@dataclass
class ForwardRecord:
    stages: Dict[str, List[Tensor]] = field(default_factory=dict)
    projected: Dict[str, List[Tensor]] = field(default_factory=dict)
    fused: List[Tensor] = field(default_factory=list)
    feature: Optional[Tensor] = None
    logits: Optional[Tensor] = None
    scores: Optional[Tensor] = None


def project(volume: Operand, block: ProjectionBlock, *, activation: bool = True) -> Tensor:
    """Turn a ``C×H×W`` (or batched) volume into a ``p``-vector."""
    v = as_tensor(volume)
    single = v.ndim == 3
    if single:
        v = reshape(v, (1, *v.shape))
    if v.ndim != 4 or v.shape[1] != block.conv_weight.shape[1]:
        raise ShapeError(
            f"project: volume {v.shape} does not match block expecting "
            f"{block.conv_weight.shape[1]} channels",
            shapes=[v.shape, block.conv_weight.shape],
        )
    n, _, h, w = v.shape
    mixed = conv2d(v, block.conv_weight, block.conv_bias)
    pooled = mean(reshape(mixed, (n, mixed.shape[1], h * w)), axis=2)
    out = bias_add(matmul(pooled, block.dense_weight), block.dense_bias)
    if activation:
        out = relu(out)
    return reshape(out, (-1,)) if single else out


class FusionNet:
    """Parameter container and forward pass of the fusion classifier."""

    def __init__(self, arch: Architecture, params: Dict[str, Tensor]):
        self.arch = arch
        self.params = dict(params)
        missing = sorted(set(self.parameter_shapes()) - set(self.params))
        if missing:
            raise CheckpointError(f"Missing parameters: {', '.join(missing)}")

    # -- construction --------------------------------------------------------

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        a, p, q = self.arch.memory, self.arch.projection_dim, self.arch.projection_channels
        shapes: Dict[str, Tuple[int, ...]] = {}
        for stream in self.arch.streams:
            c_in = 3
            for i, c_out in enumerate(self.arch.stage_channels):
                shapes[f"{stream}.stage{i}.weight"] = (c_out, c_in, 3, 3)
                shapes[f"{stream}.stage{i}.bias"] = (c_out,)
                shapes[f"{stream}.proj{i}.conv_weight"] = (q, c_out, 1, 1)
                shapes[f"{stream}.proj{i}.conv_bias"] = (q,)
                shapes[f"{stream}.proj{i}.dense_weight"] = (q, p)
                shapes[f"{stream}.proj{i}.dense_bias"] = (p,)
                c_in = c_out
        d = self.arch.fused_dim
        for gate in ("z", "r", "h"):
            shapes[f"gru.w_{gate}"] = (d, a)
            shapes[f"gru.u_{gate}"] = (a, a)
            shapes[f"gru.b_{gate}"] = (a,)
        shapes["head.weight"] = (a, self.arch.num_classes)
        shapes["head.bias"] = (self.arch.num_classes,)
        return shapes

    @classmethod
    def initialize(cls, arch: Architecture, seed: int = 0) -> FusionNet:
        """He-normal convolutions, uniform GRU and head weights, zero biases.

        Args:
            arch: Shape hyperparameters
            seed: Seed of the weight generator

        Returns:
            A fresh network
        """
        rng = rng_for(seed, "init", arch.variant)
        params: Dict[str, Tensor] = {}
        shell = cls.__new__(cls)
        shell.arch = arch
        for name, shape in shell.parameter_shapes().items():
            if name.endswith("bias") or name.startswith("gru.b_"):
                arr = np.zeros(shape)
            elif len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
                arr = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
            elif name.startswith("gru.") or name.startswith("head."):
                bound = 1.0 / np.sqrt(arch.memory)
                arr = rng.uniform(-bound, bound, shape)
            else:
                arr = rng.normal(0.0, np.sqrt(2.0 / shape[0]), shape)
            params[name] = Tensor(arr.astype(np.float32), name=name)
        return cls(arch, params)

    def parameters(self) -> Dict[str, Tensor]:
        return {name: self.params[name] for name in sorted(self.params)}

    def copy(self, *, requires_grad: bool = False) -> FusionNet:
        return FusionNet(
            self.arch,
            {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()},
        )

    def astype(self, dtype: np.dtype) -> FusionNet:
        return FusionNet(
            self.arch,
            {
                k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
                for k, v in self.params.items()
            },
        )

    def with_tag(self, tag: str) -> FusionNet:
        arch = Architecture.from_dict({**self.arch.to_dict(), "tag": tag})
        return FusionNet(arch, self.params)

    def projection(self, stream: str, i: int) -> ProjectionBlock:
        prefix = f"{stream}.proj{i}."
        return ProjectionBlock(
            conv_weight=self.params[prefix + "conv_weight"],
            conv_bias=self.params[prefix + "conv_bias"],
            dense_weight=self.params[prefix + "dense_weight"],
            dense_bias=self.params[prefix + "dense_bias"],
        )

    @property
    def gru(self) -> GRUParams:
        return GRUParams(**{name: self.params[f"gru.{name}"] for name in GRUParams.__dataclass_fields__})

    # -- forward -------------------------------------------------------------

    def _stream_input(self, stream: str, x: Optional[Operand]) -> Tensor:
        if x is None:
            raise ShapeError(f"The {self.arch.variant} variant needs a {stream} input")
        t = as_tensor(x)
        size = self.arch.image_size
        if t.shape[-3:] != (3, size, size) or t.ndim not in (3, 4):
            raise ShapeError(
                f"{stream} input {t.shape} does not match 3×{size}×{size}",
                shapes=[t.shape, (3, size, size)],
            )
        return t

    def forward(self, x_rgb: Optional[Operand], x_depth: Optional[Operand]) -> ForwardRecord:
        """Forward pass over single samples or batches.

        Args:
            x_rgb: ``3×H×W`` or ``N×3×H×W`` RGB input; None for the depth variant
            x_depth: Same for the colorized depth; None for the rgb variant

        Returns:
            ForwardRecord with stage outputs, projections, ``R(x)`` and scores

        Raises:
            ShapeError: A required input is missing or has the wrong shape
        """
        inputs = {"rgb": x_rgb, "depth": x_depth}
        tensors = {s: self._stream_input(s, inputs[s]) for s in self.arch.streams}
        single = next(iter(tensors.values())).ndim == 3
        batch = {s: reshape(t, (1, *t.shape)) if single else t for s, t in tensors.items()}
        sizes = {t.shape[0] for t in batch.values()}
        if len(sizes) != 1:
            raise ShapeError("RGB and depth batches differ in size", shapes=[t.shape for t in batch.values()])
        n = sizes.pop()

        record = ForwardRecord()
        for stream, h in batch.items():
            record.stages[stream], record.projected[stream] = [], []
            for i in range(self.arch.stages):
                h = relu(
                    conv2d(
                        h,
                        self.params[f"{stream}.stage{i}.weight"],
                        self.params[f"{stream}.stage{i}.bias"],
                        stride=2,
                        padding=1,
                    )
                )
                record.stages[stream].append(h)
                record.projected[stream].append(project(h, self.projection(stream, i)))

        gru = self.gru
        dtype = self.params["head.weight"].dtype
        state = zeros((n, self.arch.memory), dtype=dtype)
        for i in range(self.arch.stages):
            fused = concat([record.projected[s][i] for s in self.arch.streams], axis=1)
            record.fused.append(fused)
            state = gru_cell(fused, state, gru)
        logits = bias_add(matmul(state, self.params["head.weight"]), self.params["head.bias"])
        record.feature, record.logits, record.scores = state, logits, softmax(logits, axis=1)

        if single:
            squeeze = lambda t: reshape(t, t.shape[1:])  # noqa: E731
            record.stages = {s: [squeeze(t) for t in ts] for s, ts in record.stages.items()}
            record.projected = {s: [squeeze(t) for t in ts] for s, ts in record.projected.items()}
            record.fused = [squeeze(t) for t in record.fused]
            record.feature = squeeze(state)
            record.logits = squeeze(logits)
            record.scores = squeeze(record.scores)
        return record


def forward(net: FusionNet, x_rgb: Optional[Operand], x_depth: Optional[Operand]) -> ForwardRecord:
    return net.forward(x_rgb, x_depth)


def _chunks(n: int, size: int) -> List[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _take(x: Optional[np.ndarray], sl: slice) -> Optional[np.ndarray]:
    return None if x is None else x[sl]


def features(
    net: FusionNet, x_rgb: Optional[np.ndarray], x_depth: Optional[np.ndarray]
) -> Tuple[np.ndarray, np.ndarray]:
    """Batched ``(R(x), S(x))`` for ``[N, 3, H, W]`` inputs, no tape."""
    n = len(x_rgb if x_rgb is not None else x_depth)
    feats, scores = [], []
    for sl in _chunks(n, EVAL_BATCH):
        rec = net.forward(_take(x_rgb, sl), _take(x_depth, sl))
        feats.append(rec.feature.data)
        scores.append(rec.scores.data)
    return np.concatenate(feats), np.concatenate(scores)


def predict(net: FusionNet, x_rgb: Optional[Operand], x_depth: Optional[Operand]):
    """Return ``(label, scores)``; ties go to the lowest class index.

    Single ``3×H×W`` inputs give an ``int`` label, batches an array of labels.
    """
    ref = as_tensor(x_rgb if x_rgb is not None else x_depth)
    if ref.ndim == 3:
        scores = net.forward(x_rgb, x_depth).scores.data
        return int(np.argmax(scores)), scores
    rgb = None if x_rgb is None else as_tensor(x_rgb).data
    depth = None if x_depth is None else as_tensor(x_depth).data
    _, scores = features(net, rgb, depth)
    return np.argmax(scores, axis=1), scores


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "rmsprop"
    learning_rate: float = 1e-3
    decay: float = 0.99
    momentum: float = 0.5
    weight_decay: float = 2e-4
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0

    def validate(self) -> None:
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ConfigError(f"Unknown optimizer {self.optimizer!r}; expected rmsprop or sgd")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning_rate must be > 0, batch_size >= 1 and epochs >= 0")
        if not (0 <= self.decay < 1 and 0 <= self.momentum < 1 and self.weight_decay >= 0):
            raise ConfigError("decay and momentum must lie in [0, 1), weight_decay >= 0")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class RMSprop:
    """RMSprop with optional momentum and L2 weight decay."""

    def __init__(self, params: Dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.square_avg = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.buffer = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        cfg = self.cfg
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + cfg.weight_decay * p.data
            self.square_avg[name] = cfg.decay * self.square_avg[name] + (1 - cfg.decay) * g * g
            update = g / (np.sqrt(self.square_avg[name]) + cfg.eps)
            self.buffer[name] = cfg.momentum * self.buffer[name] + update
            p.data = (p.data - cfg.learning_rate * self.buffer[name]).astype(p.data.dtype)
            p.grad = None


class SGD:
    """Plain SGD with momentum and L2 weight decay."""

    def __init__(self, params: Dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.buffer = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        cfg = self.cfg
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + cfg.weight_decay * p.data
            self.buffer[name] = cfg.momentum * self.buffer[name] + g
            p.data = (p.data - cfg.learning_rate * self.buffer[name]).astype(p.data.dtype)
            p.grad = None


@dataclass
class TrainHistory:
    initial_loss: float = float("nan")
    epoch_losses: List[float] = field(default_factory=list)
    epoch_accuracy: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    net: FusionNet
    history: TrainHistory


# extra (x_rgb, x_depth, labels) appended to the training pool for one epoch
EpochHook = Callable[[int, FusionNet, np.random.Generator], Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]]


def evaluate_loss(
    net: FusionNet, x_rgb: np.ndarray, x_depth: np.ndarray, labels: np.ndarray
) -> Tuple[float, float]:
    """Mean cross-entropy and accuracy over a dataset, no tape."""
    total, correct = 0.0, 0
    for sl in _chunks(len(labels), EVAL_BATCH):
        rec = net.forward(x_rgb[sl], x_depth[sl])
        total += cross_entropy(rec.logits, labels[sl]).item() * len(labels[sl])
        correct += int((np.argmax(rec.scores.data, axis=1) == labels[sl]).sum())
    return total / len(labels), correct / len(labels)


def train(
    net: FusionNet,
    x_rgb: np.ndarray,
    x_depth: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    *,
    epoch_hook: Optional[EpochHook] = None,
) -> TrainResult:
    """Minibatch training on preprocessed inputs.

    Args:
        net: Starting network; it is copied, never modified
        x_rgb: RGB inputs ``[N, 3, H, W]``
        x_depth: Depth inputs ``[N, 3, H, W]``
        labels: Training labels
        cfg: Optimizer, schedule and seed
        epoch_hook: Optional source of extra samples for each epoch

    Returns:
        TrainResult with a frozen copy of the trained net and its history

    Raises:
        ConfigError: Invalid settings or an empty dataset
        TrainingDivergedError: Loss or gradients became non-finite
    """
    cfg.validate()
    if len(labels) == 0:
        raise ConfigError("Cannot train on an empty dataset")
    model = net.copy(requires_grad=True)
    params = model.parameters()
    optimizer = RMSprop(params, cfg) if cfg.optimizer == "rmsprop" else SGD(params, cfg)
    rng = rng_for(cfg.seed, "train")

    history = TrainHistory()
    history.initial_loss, _ = evaluate_loss(model, x_rgb, x_depth, labels)
    logger.info("Starting training", extra={"initial_loss": history.initial_loss, **cfg.to_dict()})

    for epoch in range(1, cfg.epochs + 1):
        pool_rgb, pool_depth, pool_y = x_rgb, x_depth, labels
        if epoch_hook is not None:
            extra = epoch_hook(epoch, model, rng)
            if extra is not None:
                pool_rgb = np.concatenate([x_rgb, extra[0]])
                pool_depth = np.concatenate([x_depth, extra[1]])
                pool_y = np.concatenate([labels, extra[2]])

        order = rng.permutation(len(pool_y))
        for step, sl in enumerate(_chunks(len(order), cfg.batch_size)):
            idx = order[sl]
            with Tape():
                rec = model.forward(pool_rgb[idx], pool_depth[idx])
                loss = cross_entropy(rec.logits, pool_y[idx])
                loss.backward()
            if not np.isfinite(loss.item()) or not all(
                p.grad is None or np.all(np.isfinite(p.grad)) for p in params.values()
            ):
                raise TrainingDivergedError(
                    epoch=epoch, step=step, context={"loss": float(loss.item())}
                )
            optimizer.step()

        epoch_loss, epoch_acc = evaluate_loss(model, x_rgb, x_depth, labels)
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(epoch=epoch, context={"loss": epoch_loss})
        history.epoch_losses.append(epoch_loss)
        history.epoch_accuracy.append(epoch_acc)
        logger.info(
            f"epoch {epoch}/{cfg.epochs} loss={epoch_loss:.4f} acc={epoch_acc:.3f}",
            extra={"epoch": epoch, "loss": epoch_loss, "accuracy": epoch_acc},
        )

    return TrainResult(net=model.copy(requires_grad=False), history=history)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(net: FusionNet, path: Path, metadata: Optional[Dict[str, Any]] = None) -> None:
    """Write one FGT1 file per parameter plus ``arch.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, tensor in net.parameters().items():
        save_tensor(path / f"{name}.fgt", tensor)
    arch = {
        **net.arch.to_dict(),
        "M": net.arch.stages,
        "p": net.arch.projection_dim,
        "a": net.arch.memory,
        "c": net.arch.num_classes,
        "stage_shapes": [list(s) for s in net.arch.stage_shapes()],
        "parameters": sorted(net.params),
        **(metadata or {}),
    }
    try:
        with open(path / "arch.json", "w", encoding="utf-8") as f:
            json.dump(arch, f, indent=2)
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint: {e}", path=str(path)) from e
    logger.info(f"Saved checkpoint to {path}", extra={"path": str(path)})


def load_checkpoint(path: Path) -> Tuple[FusionNet, Dict[str, Any]]:
    """Load a checkpoint written by :func:`save_checkpoint`.

    Args:
        path: Checkpoint directory

    Returns:
        The network and the raw ``arch.json`` metadata

    Raises:
        CheckpointError: Missing, corrupt or mismatched files
    """
    path = Path(path)
    arch_file = path / "arch.json"
    if not arch_file.exists():
        raise CheckpointError(f"Checkpoint not found: {path}", path=str(path))
    try:
        with open(arch_file, encoding="utf-8") as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Corrupt checkpoint metadata: {e}", path=str(arch_file)) from e
    arch = Architecture.from_dict(meta)
    params = {name: Tensor(load_array(path / f"{name}.fgt"), name=name) for name in meta["parameters"]}
    net = FusionNet(arch, params)
    for name, shape in net.parameter_shapes().items():
        if net.params[name].shape != shape:
            raise CheckpointError(
                f"Parameter {name} has shape {net.params[name].shape}, expected {shape}",
                path=str(path),
            )
    return net, meta

