# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Gradient-based evasion attacks on the fusion classifier.

All attacks are untargeted and minimize a margin loss over perturbations of
the preprocessed inputs:

- ``pgd``: full-image ℓ∞ PGD on the RGB part, the depth part or both.
- ``patch``: a per-sample patch whose content replaces the pixels under a
  square mask, optionally translated every iteration.
- ``adaptive-pgd`` / ``adaptive-patch``: the same optimizers against the
  defended scores ``S′`` with a soft rejection score.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .dataset import InputBounds
from .detector import (
    DetectorState,
    defend,
    defended_scores,
    scores_from_features,
    soft_reject_score,
)
from .errors import ConfigError, GradientError, ShapeError
from .model import FusionNet
from .tensor import (
    Operand,
    Tape,
    Tensor,
    add,
    as_tensor,
    clamp,
    max as tmax,
    mul,
    roll,
    select,
    sqrt,
    sub,
    sum as tsum,
)

logger = logging.getLogger(__name__)

PARTS = ("rgb", "depth", "both")
STEP_RULES = ("sign", "gradient")
PLACEMENTS = ("center", "random")
COMPETITORS = ("rescaled", "raw")
MODES = ("pgd", "patch", "adaptive-pgd", "adaptive-patch")
PATCH_PARTS = ("rgb",)

__all__ = [
    "AttackBudget",
    "AttackResult",
    "PatchSpec",
    "adaptive_loss",
    "adaptive_patch_attack",
    "adaptive_pgd_attack",
    "apply_patch",
    "descend",
    "make_mask",
    "margin_loss",
    "patch_attack",
    "pgd_attack",
    "pgd_batch",
    "project_linf",
    "run_attack",
    "soft_reject_score",
]


@dataclass(frozen=True)
class AttackBudget:
    epsilon: float
    step_size: float = 0.05
    iterations: int = 100
    target_parts: str = "both"
    step_rule: str = "sign"

    def validate(self) -> None:
        if self.iterations < 1:
            raise GradientError(
                "An attack needs at least one iteration", context={"iterations": self.iterations}
            )
        if self.epsilon < 0 or self.step_size <= 0:
            raise ConfigError(
                "Attack budget needs epsilon >= 0 and step_size > 0",
                context={"epsilon": self.epsilon, "step_size": self.step_size},
            )
        if self.target_parts not in PARTS:
            raise ConfigError(f"Unknown target parts {self.target_parts!r}; expected one of {PARTS}")
        if self.step_rule not in STEP_RULES:
            raise ConfigError(f"Unknown step rule {self.step_rule!r}; expected one of {STEP_RULES}")

    @property
    def parts(self) -> Tuple[str, ...]:
        return ("rgb", "depth") if self.target_parts == "both" else (self.target_parts,)

    def with_epsilon(self, epsilon: float) -> "AttackBudget":
        return AttackBudget(epsilon, self.step_size, self.iterations, self.target_parts, self.step_rule)


def make_mask(image_size: int, side: int, top: int, left: int) -> np.ndarray:
    """Binary ``[3, H, W]`` mask with a ``side×side`` square at ``(top, left)``."""
    if side < 0 or top < 0 or left < 0 or top + side > image_size or left + side > image_size:
        raise ShapeError(
            f"Patch of side {side} at ({top}, {left}) does not fit a {image_size}×{image_size} image",
            context={"side": side, "top": top, "left": left},
        )
    mask = np.zeros((3, image_size, image_size), dtype=np.float32)
    mask[:, top : top + side, left : left + side] = 1.0
    return mask


@dataclass(frozen=True)
class PatchSpec:
    """Square patch placement; the base location is the image center."""

    side: int
    image_size: int
    placement: str = "center"

    def __post_init__(self) -> None:
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"Unknown patch placement {self.placement!r}; expected {PLACEMENTS}")
        if not 0 <= self.side <= self.image_size:
            raise ShapeError(
                f"Patch side {self.side} exceeds the {self.image_size}×{self.image_size} image",
                context={"side": self.side, "image_size": self.image_size},
            )

    @property
    def origin(self) -> Tuple[int, int]:
        corner = (self.image_size - self.side) // 2
        return corner, corner

    def mask(self) -> np.ndarray:
        top, left = self.origin
        return make_mask(self.image_size, self.side, top, left)

    def draw_shift(self, rng: Optional[np.random.Generator]) -> Tuple[int, int]:
        """Translation of the base patch that keeps it inside the image."""
        if self.placement == "center" or rng is None or self.side in (0, self.image_size):
            return 0, 0
        top, left = self.origin
        room = self.image_size - self.side
        return int(rng.integers(-top, room - top + 1)), int(rng.integers(-left, room - left + 1))


@dataclass
class AttackResult:
    delta: Dict[str, np.ndarray]
    x_rgb: np.ndarray
    x_depth: np.ndarray
    loss_trace: List[float] = field(default_factory=list)
    clean_label: int = -1
    adv_label: int = -1
    defended_label: Optional[int] = None
    rejected: bool = False
    anomaly: Optional[float] = None
    success: bool = False

    @property
    def linf_norm(self) -> float:
        return float(max((np.abs(d).max() if d.size else 0.0) for d in self.delta.values()))

    def to_record(self, sample_id: str, label: int) -> Dict[str, Any]:
        return {
            "id": sample_id,
            "label": int(label),
            "clean_label": self.clean_label,
            "adv_label": self.adv_label,
            "defended_label": self.defended_label,
            "rejected": self.rejected,
            "anomaly": self.anomaly,
            "success": self.success,
            "loss_trace": [float(v) for v in self.loss_trace],
            "linf_norm": self.linf_norm,
        }


# -- losses and projections ----------------------------------------------------


def _onehot(c: int, y: int, dtype=bool) -> np.ndarray:
    mask = np.zeros(c, dtype=dtype)
    mask[int(y)] = True
    return mask


def margin_loss(scores: Operand, y: int) -> Tensor:
    """``s_y − max_{j≠y} s_j`` for one score vector; negative iff misclassified."""
    s = as_tensor(scores)
    if s.ndim != 1 or s.shape[0] < 2 or not 0 <= int(y) < s.shape[0]:
        raise ShapeError(f"margin_loss needs [c>=2] scores and a valid label, got {s.shape}", shapes=[s.shape])
    target = _onehot(s.shape[0], y)
    true_score = tsum(select(target, s, 0.0))
    rival = tmax(select(~target, s, -np.inf))
    return sub(true_score, rival)


def project_linf(delta: Operand, epsilon: float) -> np.ndarray:
    """Componentwise clip into ``[−ε, ε]``."""
    d = delta.data if isinstance(delta, Tensor) else np.asarray(delta)
    return np.clip(d, -epsilon, epsilon).astype(d.dtype)


def apply_patch(
    x: Operand,
    delta: Operand,
    mask: np.ndarray,
    *,
    shift: Tuple[int, int] = (0, 0),
    low: Optional[np.ndarray] = None,
    high: Optional[np.ndarray] = None,
) -> Tensor:
    """``(1 − μ)∘x + μ∘Aδ`` with ``A`` a spatial translation.

    Patch values are clamped into ``[low, high]`` when bounds are given;
    pixels where ``μ = 0`` are copied from ``x`` unchanged.
    """
    tx, td = as_tensor(x), as_tensor(delta)
    if tx.shape != td.shape or tx.shape != np.shape(mask):
        raise ShapeError(
            "apply_patch: input, patch and mask shapes differ",
            shapes=[tx.shape, td.shape, np.shape(mask)],
        )
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ShapeError("apply_patch: mask must be binary")
    if shift != (0, 0):
        td = roll(td, shift)
        mask = np.roll(mask, shift, axis=(-2, -1))
    if low is not None and high is not None:
        td = clamp(td, low, high)
    return select(mask.astype(bool), td, tx)


# -- optimizer loop ------------------------------------------------------------

Objective = Callable[[int, Dict[str, Tensor]], Tensor]
Projection = Callable[[str, np.ndarray], np.ndarray]
StepCallback = Callable[[int, Dict[str, np.ndarray]], None]


def descend(
    objective: Objective,
    deltas: Dict[str, np.ndarray],
    budget: AttackBudget,
    project: Projection,
    *,
    step_mask: Optional[Dict[str, np.ndarray]] = None,
    callback: Optional[StepCallback] = None,
) -> Tuple[Dict[str, np.ndarray], List[float]]:
    """Run ``budget.iterations`` projected descent steps on ``deltas``.

    ``objective(iteration, leaves)`` rebuilds the scalar loss from fresh leaf
    tensors. The loss of each iterate is recorded before its update.

    Args:
        objective: Builds the loss to minimize from the current perturbations
        deltas: Initial perturbation per input part
        budget: Step size, iteration count and step rule
        project: Maps ``(part, candidate)`` back into the feasible set
        step_mask: Optional per-part multiplier applied to every step
        callback: Called as ``callback(iteration, deltas)`` after each projection

    Returns:
        The final perturbations and the per-iteration loss trace

    Raises:
        GradientError: A gradient turned non-finite
    """
    budget.validate()
    deltas = {k: v.copy() for k, v in deltas.items()}
    trace: List[float] = []
    for it in range(budget.iterations):
        leaves = {k: Tensor(v, requires_grad=True, name=f"delta.{k}") for k, v in deltas.items()}
        with Tape():
            loss = objective(it, leaves)
            loss.backward()
        value = loss.item()
        trace.append(value)
        for k, leaf in leaves.items():
            grad = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
            if not np.all(np.isfinite(grad)):
                raise GradientError(
                    f"Non-finite gradient for the {k} perturbation",
                    context={"iteration": it, "loss": value},
                )
            step = np.sign(grad) if budget.step_rule == "sign" else grad
            if step_mask is not None:
                step = step * step_mask[k]
            deltas[k] = project(k, (deltas[k] - budget.step_size * step).astype(deltas[k].dtype))
        if callback is not None:
            callback(it, deltas)
        logger.debug("attack step", extra={"iteration": it, "loss": value})
    return deltas, trace


# -- per-sample plumbing -------------------------------------------------------


@dataclass
class _Sample:
    net: FusionNet
    inputs: Dict[str, np.ndarray]
    y: int
    bounds: Optional[InputBounds]

    def clip(self, part: str, x: np.ndarray) -> np.ndarray:
        return x if self.bounds is None else self.bounds.clip(x, part)

    def limits(self, part: str) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        if self.bounds is None:
            return None, None
        if part == "rgb":
            return self.bounds.rgb_low, self.bounds.rgb_high
        return self.bounds.depth_low, self.bounds.depth_high

    def additive(self, part: str, leaf: Tensor) -> Tensor:
        low, high = self.limits(part)
        x = add(self.inputs[part], leaf)
        return x if low is None else clamp(x, low, high)

    def feasible_linf(self, epsilon: float) -> Projection:
        def project(part: str, d: np.ndarray) -> np.ndarray:
            d = project_linf(d, epsilon)
            x = self.inputs[part]
            return project_linf(self.clip(part, x + d) - x, epsilon)

        return project

    def streams(self, part_inputs: Dict[str, Operand]) -> Tuple[Optional[Operand], Optional[Operand]]:
        merged: Dict[str, Operand] = {**self.inputs, **part_inputs}
        return merged.get("rgb"), merged.get("depth")


def _finish(
    sample: _Sample,
    final: Dict[str, np.ndarray],
    deltas: Dict[str, np.ndarray],
    trace: List[float],
    detector: Optional[DetectorState],
    *,
    adaptive: bool,
) -> AttackResult:
    x_rgb, x_depth = sample.streams(final)
    clean = sample.net.forward(sample.inputs.get("rgb"), sample.inputs.get("depth"))
    rec = sample.net.forward(x_rgb, x_depth)
    clean_label = int(np.argmax(clean.scores.data))
    adv_label = int(np.argmax(rec.scores.data))
    result = AttackResult(
        delta=deltas,
        x_rgb=None if x_rgb is None else as_tensor(x_rgb).data,
        x_depth=None if x_depth is None else as_tensor(x_depth).data,
        loss_trace=trace,
        clean_label=clean_label,
        adv_label=adv_label,
        success=adv_label != sample.y,
    )
    if detector is not None and detector.calibrated:
        energy = scores_from_features(
            rec.feature.data[None], rec.scores.data[None], detector.require_centroids()
        )
        _, labels = defend(rec.scores.data[None], energy, detector, "hard")
        result.anomaly = float(energy[0])
        result.defended_label = int(labels[0])
        result.rejected = result.defended_label == detector.rejection_label
        if adaptive:
            result.success = result.defended_label not in (sample.y, detector.rejection_label)
    return result


def _sample(
    net: FusionNet,
    x_rgb: Optional[Operand],
    x_depth: Optional[Operand],
    y: int,
    bounds: Optional[InputBounds],
) -> _Sample:
    inputs = {}
    for part, x in (("rgb", x_rgb), ("depth", x_depth)):
        if x is not None:
            arr = as_tensor(x).data
            if arr.ndim != 3:
                raise ShapeError(f"Attacks run on single 3×H×W samples, got {arr.shape}", shapes=[arr.shape])
            inputs[part] = arr
    return _Sample(net=net, inputs=inputs, y=int(y), bounds=bounds)


def _check_parts(sample: _Sample, budget: AttackBudget) -> None:
    budget.validate()
    missing = [p for p in budget.parts if p not in sample.inputs]
    if missing:
        raise ShapeError(f"Attack targets {missing} but the sample has no such input")


def _check_patch_parts(budget: AttackBudget) -> None:
    if budget.target_parts not in PATCH_PARTS:
        raise ConfigError(
            f"Patches are placed on the RGB image only; got target parts {budget.target_parts!r}",
            context={"target_parts": budget.target_parts},
        )


# -- full-image attacks --------------------------------------------------------


def _pgd(
    sample: _Sample,
    budget: AttackBudget,
    loss_of: Callable[[Optional[Operand], Optional[Operand]], Tensor],
    callback: Optional[StepCallback],
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray], List[float]]:
    _check_parts(sample, budget)

    def objective(_: int, leaves: Dict[str, Tensor]) -> Tensor:
        return loss_of(*sample.streams({k: sample.additive(k, v) for k, v in leaves.items()}))

    init = {p: np.zeros_like(sample.inputs[p]) for p in budget.parts}
    deltas, trace = descend(objective, init, budget, sample.feasible_linf(budget.epsilon), callback=callback)
    final = {p: sample.clip(p, sample.inputs[p] + deltas[p]) for p in budget.parts}
    return final, deltas, trace


def pgd_attack(
    net: FusionNet,
    x_rgb: Optional[Operand],
    x_depth: Optional[Operand],
    y: int,
    budget: AttackBudget,
    *,
    bounds: Optional[InputBounds] = None,
    detector: Optional[DetectorState] = None,
    callback: Optional[StepCallback] = None,
) -> AttackResult:
    """Defense-unaware ℓ∞ PGD on one sample.

    Parts outside ``budget.target_parts`` stay untouched.

    Args:
        net: Classifier under attack
        x_rgb: Preprocessed ``3×H×W`` RGB input, or None
        x_depth: Preprocessed ``3×H×W`` colorized depth input, or None
        y: True label
        budget: ε, step size, iterations, target parts and step rule
        bounds: Valid input range; iterates are kept inside it when given
        detector: Optional detector used only to report the defended outcome
        callback: Called after every projected step

    Returns:
        AttackResult with the adversarial pair, perturbations and loss trace
    """
    sample = _sample(net, x_rgb, x_depth, y, bounds)

    def loss_of(rgb, depth):
        return margin_loss(net.forward(rgb, depth).scores, sample.y)

    final, deltas, trace = _pgd(sample, budget, loss_of, callback)
    return _finish(sample, final, deltas, trace, detector, adaptive=False)


def pgd_batch(
    net: FusionNet,
    x_rgb: np.ndarray,
    x_depth: np.ndarray,
    labels: np.ndarray,
    budget: AttackBudget,
    *,
    bounds: Optional[InputBounds] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Batched PGD on ``[N, 3, H, W]`` inputs; returns the adversarial pair.

    Per-sample margins are summed, so each sample's update equals the one a
    single-sample run would take.
    """
    budget.validate()
    inputs = {"rgb": x_rgb, "depth": x_depth}
    limits = {}
    if bounds is not None:
        limits = {
            "rgb": (bounds.rgb_low[None].repeat(len(labels), 0), bounds.rgb_high[None].repeat(len(labels), 0)),
            "depth": (bounds.depth_low[None].repeat(len(labels), 0), bounds.depth_high[None].repeat(len(labels), 0)),
        }
    c = net.arch.num_classes
    target = np.zeros((len(labels), c), dtype=bool)
    target[np.arange(len(labels)), labels] = True

    def perturbed(k: str, leaf: Tensor) -> Tensor:
        x = add(inputs[k], leaf)
        return clamp(x, *limits[k]) if k in limits else x

    def objective(_: int, leaves: Dict[str, Tensor]) -> Tensor:
        merged = {**inputs, **{k: perturbed(k, v) for k, v in leaves.items()}}
        scores = net.forward(merged["rgb"], merged["depth"]).scores
        true_score = tsum(select(target, scores, 0.0), axis=1)
        rival = tmax(select(~target, scores, -np.inf), axis=1)
        return tsum(sub(true_score, rival))

    def project(k: str, d: np.ndarray) -> np.ndarray:
        d = project_linf(d, budget.epsilon)
        if k not in limits:
            return d
        return project_linf(np.clip(inputs[k] + d, *limits[k]) - inputs[k], budget.epsilon)

    init = {p: np.zeros_like(inputs[p]) for p in budget.parts}
    deltas, _ = descend(objective, init, budget, project)
    out = {}
    for k in ("rgb", "depth"):
        if k in deltas:
            x = inputs[k] + deltas[k]
            out[k] = np.clip(x, *limits[k]).astype(x.dtype) if k in limits else x
        else:
            out[k] = inputs[k]
    return out["rgb"], out["depth"]


# -- patch attacks -------------------------------------------------------------


def _patch(
    sample: _Sample,
    patch: PatchSpec,
    budget: AttackBudget,
    loss_of: Callable[[Optional[Operand], Optional[Operand]], Tensor],
    rng: Optional[np.random.Generator],
    callback: Optional[StepCallback],
) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray], List[float]]:
    _check_parts(sample, budget)
    _check_patch_parts(budget)
    mask = patch.mask()
    support = mask.astype(bool)
    if patch.side == 0:
        trace = [loss_of(*sample.streams({})).item()]
        return (
            {p: sample.inputs[p] for p in budget.parts},
            {p: np.zeros_like(sample.inputs[p]) for p in budget.parts},
            trace,
        )

    def objective(_: int, leaves: Dict[str, Tensor]) -> Tensor:
        shift = patch.draw_shift(rng)
        patched = {}
        for k, leaf in leaves.items():
            low, high = sample.limits(k)
            patched[k] = apply_patch(sample.inputs[k], leaf, mask, shift=shift, low=low, high=high)
        return loss_of(*sample.streams(patched))

    def project(part: str, d: np.ndarray) -> np.ndarray:
        d = project_linf(d, budget.epsilon)
        low, high = sample.limits(part)
        if low is not None:
            d = np.clip(d, low, high).astype(d.dtype)
        return np.where(support, d, 0).astype(d.dtype)

    init = {p: np.zeros_like(sample.inputs[p]) for p in budget.parts}
    deltas, trace = descend(
        objective,
        init,
        budget,
        project,
        step_mask={p: mask for p in budget.parts},
        callback=callback,
    )
    final = {}
    for p in budget.parts:
        low, high = sample.limits(p)
        final[p] = apply_patch(sample.inputs[p], deltas[p], mask, low=low, high=high).data
    return final, deltas, trace


def patch_attack(
    net: FusionNet,
    x_rgb: Optional[Operand],
    x_depth: Optional[Operand],
    y: int,
    patch: PatchSpec,
    budget: AttackBudget,
    *,
    bounds: Optional[InputBounds] = None,
    detector: Optional[DetectorState] = None,
    rng: Optional[np.random.Generator] = None,
    callback: Optional[StepCallback] = None,
) -> AttackResult:
    """ℓ∞ patch attack on the RGB image of one sample.

    The result is evaluated at the base patch location; random placement only
    moves the patch during optimization.

    Args:
        net: Classifier under attack
        x_rgb: Preprocessed ``3×H×W`` RGB input
        x_depth: Preprocessed depth input, left untouched
        y: True label
        patch: Side, image size and placement of the square mask
        budget: Patch ε and optimizer settings; ``target_parts`` must be ``"rgb"``
        bounds: Valid input range for the patch content
        detector: Optional detector used only to report the defended outcome
        rng: Source of random placements
        callback: Called after every projected step

    Returns:
        AttackResult for the patched sample

    Raises:
        ConfigError: The budget targets the depth part
    """
    sample = _sample(net, x_rgb, x_depth, y, bounds)

    def loss_of(rgb, depth):
        return margin_loss(net.forward(rgb, depth).scores, sample.y)

    final, deltas, trace = _patch(sample, patch, budget, loss_of, rng, callback)
    return _finish(sample, final, deltas, trace, detector, adaptive=False)


# -- defense-aware attacks -----------------------------------------------------


def adaptive_loss(
    net: FusionNet,
    detector: DetectorState,
    x_rgb: Optional[Operand],
    x_depth: Optional[Operand],
    y: int,
    *,
    competitor: str = "rescaled",
) -> Tensor:
    """Defense-aware loss ``s′_y + s′_{c+1} − max_{j∉{y, c+1}} s′_j``.

    Rejection counts as a failure for the attacker, so the rejection score
    sits on the defender's side of the margin: the loss grows with the
    anomaly score and is negative only when an accepted wrong class wins.
    With the threshold far above the anomaly score it reduces to
    :func:`margin_loss`. The centroid is chosen from the current prediction
    and held constant for the gradient.

    Args:
        net: The fusion classifier under attack.
        detector: A calibrated detector providing ``β``, ``λ`` and centroids.
        x_rgb: RGB input of one sample (``3×H×W``), or ``None``.
        x_depth: Depth input of one sample, or ``None``.
        y: The true label.
        competitor: ``"rescaled"`` takes the rival from ``S′``; ``"raw"``
            takes it from the undefended scores ``S``.

    Returns:
        The scalar loss as a tensor on the active tape.

    Raises:
        ConfigError: Unknown competitor mode or uncalibrated detector.
        ShapeError: The input is a batch rather than a single sample.
    """
    if competitor not in COMPETITORS:
        raise ConfigError(f"Unknown competitor mode {competitor!r}; expected {COMPETITORS}")
    beta = detector.require_calibrated()
    centroids = detector.require_centroids()
    rec = net.forward(x_rgb, x_depth)
    scores = rec.scores
    if scores.ndim != 1:
        raise ShapeError("adaptive_loss works on a single sample", shapes=[scores.shape])
    gamma = int(np.argmax(scores.data))
    diff = sub(rec.feature, centroids[gamma].astype(rec.feature.dtype))
    energy = sqrt(add(tsum(mul(diff, diff)), 1e-12))
    reject = soft_reject_score(energy, beta, detector.lam)
    s_prime = defended_scores(scores, reject)

    c = scores.shape[0]
    guarded = _onehot(c + 1, y)
    guarded[c] = True
    defender = tsum(select(guarded, s_prime, 0.0))
    if competitor == "rescaled":
        rival = tmax(select(~guarded, s_prime, -np.inf))
    else:
        rival = tmax(select(~guarded[:c], scores, -np.inf))
    return sub(defender, rival)


def adaptive_pgd_attack(
    net: FusionNet,
    detector: DetectorState,
    x_rgb: Optional[Operand],
    x_depth: Optional[Operand],
    y: int,
    budget: AttackBudget,
    *,
    bounds: Optional[InputBounds] = None,
    competitor: str = "rescaled",
    callback: Optional[StepCallback] = None,
) -> AttackResult:
    """ℓ∞ PGD on :func:`adaptive_loss`, aware of the rejection defense.

    Success means an accepted wrong label; rejected samples count as failures.

    Args:
        net: Classifier under attack
        detector: Calibrated detector the attacker knows
        x_rgb: Preprocessed ``3×H×W`` RGB input, or None
        x_depth: Preprocessed ``3×H×W`` depth input, or None
        y: True label
        budget: ε and optimizer settings
        bounds: Valid input range
        competitor: Rival term of the loss, ``"rescaled"`` or ``"raw"``
        callback: Called after every projected step

    Returns:
        AttackResult including the defended label and rejection flag

    Raises:
        CalibrationError: The detector has no threshold
    """
    detector.require_calibrated()
    sample = _sample(net, x_rgb, x_depth, y, bounds)

    def loss_of(rgb, depth):
        return adaptive_loss(net, detector, rgb, depth, sample.y, competitor=competitor)

    final, deltas, trace = _pgd(sample, budget, loss_of, callback)
    return _finish(sample, final, deltas, trace, detector, adaptive=True)


def adaptive_patch_attack(
    net: FusionNet,
    detector: DetectorState,
    x_rgb: Optional[Operand],
    x_depth: Optional[Operand],
    y: int,
    patch: PatchSpec,
    budget: AttackBudget,
    *,
    bounds: Optional[InputBounds] = None,
    competitor: str = "rescaled",
    rng: Optional[np.random.Generator] = None,
    callback: Optional[StepCallback] = None,
) -> AttackResult:
    """Patch attack on :func:`adaptive_loss`, aware of the rejection defense.

    Args:
        net: Classifier under attack
        detector: Calibrated detector the attacker knows
        x_rgb: Preprocessed ``3×H×W`` RGB input
        x_depth: Preprocessed depth input, left untouched
        y: True label
        patch: Side, image size and placement of the square mask
        budget: Patch ε and optimizer settings; ``target_parts`` must be ``"rgb"``
        bounds: Valid input range for the patch content
        competitor: Rival term of the loss, ``"rescaled"`` or ``"raw"``
        rng: Source of random placements
        callback: Called after every projected step

    Returns:
        AttackResult including the defended label and rejection flag
    """
    detector.require_calibrated()
    sample = _sample(net, x_rgb, x_depth, y, bounds)

    def loss_of(rgb, depth):
        return adaptive_loss(net, detector, rgb, depth, sample.y, competitor=competitor)

    final, deltas, trace = _patch(sample, patch, budget, loss_of, rng, callback)
    return _finish(sample, final, deltas, trace, detector, adaptive=True)


# -- dispatch ------------------------------------------------------------------


@dataclass(frozen=True)
class AttackPlan:
    """Everything needed to attack one sample at a given strength level.

    ``level`` is the ε of full-image modes and the patch side of patch modes.
    """

    mode: str
    budget: AttackBudget
    patch_side: int = 8
    patch_epsilon: Optional[float] = None
    placement: str = "center"
    competitor: str = "rescaled"
    image_size: int = 32

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"Unknown attack mode {self.mode!r}; expected one of {MODES}")
        if self.is_patch:
            _check_patch_parts(self.budget)

    @property
    def adaptive(self) -> bool:
        return self.mode.startswith("adaptive")

    @property
    def is_patch(self) -> bool:
        return self.mode.endswith("patch")

    @property
    def axis(self) -> str:
        return "patch_side" if self.is_patch else "epsilon"

    def at(self, level: float) -> Tuple[AttackBudget, Optional[PatchSpec]]:
        """Budget and patch for one strength level of the curve."""
        if self.is_patch:
            eps = self.budget.epsilon if self.patch_epsilon is None else self.patch_epsilon
            return self.budget.with_epsilon(eps), PatchSpec(int(level), self.image_size, self.placement)
        return self.budget.with_epsilon(float(level)), None

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), "budget": asdict(self.budget)}


def run_attack(
    plan: AttackPlan,
    level: float,
    net: FusionNet,
    x_rgb: Optional[np.ndarray],
    x_depth: Optional[np.ndarray],
    y: int,
    *,
    bounds: Optional[InputBounds] = None,
    detector: Optional[DetectorState] = None,
    rng: Optional[np.random.Generator] = None,
) -> AttackResult:
    """Attack one sample with ``plan`` at strength ``level``.

    Args:
        plan: Attack mode and shared settings
        level: ε for full-image modes, patch side for patch modes
        net: Classifier under attack
        x_rgb: Preprocessed ``3×H×W`` RGB input, or None
        x_depth: Preprocessed ``3×H×W`` depth input, or None
        y: True label
        bounds: Valid input range
        detector: Detector to report against; required by adaptive modes
        rng: Source of random patch placements

    Returns:
        AttackResult of the dispatched attack

    Raises:
        ConfigError: An adaptive mode without a calibrated detector
    """
    budget, patch = plan.at(level)
    if plan.adaptive and (detector is None or not detector.calibrated):
        raise ConfigError(f"Mode {plan.mode} needs a calibrated detector")
    if plan.mode == "pgd":
        return pgd_attack(net, x_rgb, x_depth, y, budget, bounds=bounds, detector=detector)
    if plan.mode == "patch":
        return patch_attack(net, x_rgb, x_depth, y, patch, budget, bounds=bounds, detector=detector, rng=rng)
    if plan.mode == "adaptive-pgd":
        return adaptive_pgd_attack(
            net, detector, x_rgb, x_depth, y, budget, bounds=bounds, competitor=plan.competitor
        )
    return adaptive_patch_attack(
        net, detector, x_rgb, x_depth, y, patch, budget,
        bounds=bounds, competitor=plan.competitor, rng=rng,
    )
