# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Security evaluation curves and the adversarial-training baseline.

Counting rules per curve level, over ``n`` test samples:

- ``acc_undef``: undefended prediction equals the true label.
- ``acc_def`` at level 0: defended prediction equals the true label, so a
  clean sample that is rejected counts as an error.
- ``acc_def`` above level 0: the sample is rejected or its defended
  prediction equals the true label.
- ``rej_rate``: rejected samples over ``n``.
"""

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attacks import PARTS, STEP_RULES, AttackBudget, AttackPlan, AttackResult, pgd_batch, run_attack
from .dataset import InputBounds
from .detector import DetectorState, defend, scores_from_features
from .errors import ConfigError, DatasetError, FuseGuardError
from .model import FusionNet, TrainConfig, TrainResult, features, train
from .seeding import rng_for

logger = logging.getLogger(__name__)

CSV_HEADER = "level,acc_undef,acc_def,rej_rate,n"
AXES = ("epsilon", "patch_side")
DEFAULT_EPSILON_LEVELS = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5)
DEFAULT_PATCH_LEVELS = (0, 4, 8, 12, 16)
CHUNK_SIZE = 8
AT_MODES = ("regenerate", "fixed")


def format_number(value: float) -> str:
    """Nine significant digits, the precision of every curve file."""
    return f"{float(value):.9g}"


def _round9(value: float) -> float:
    return float(format_number(value))


def validate_levels(levels: Sequence[float]) -> Tuple[float, ...]:
    """Check a level sweep: starts at 0 and strictly increases.

    Args:
        levels: ε values or patch sides

    Returns:
        The levels as a tuple of floats

    Raises:
        ConfigError: Empty, not starting at 0, or not strictly increasing
    """
    levels = tuple(float(v) for v in levels)
    if not levels:
        raise ConfigError("At least one level is required")
    if levels[0] != 0:
        raise ConfigError("The first level must be 0 (clean)", context={"levels": list(levels)})
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigError("Levels must be strictly increasing", context={"levels": list(levels)})
    return levels


@dataclass(frozen=True)
class SampleOutcome:
    label: int
    predicted: int
    defended: Optional[int] = None
    rejected: bool = False


@dataclass(frozen=True)
class CurvePoint:
    level: float
    acc_undef: float
    acc_def: float
    rej_rate: float
    n: int

    def csv_row(self) -> str:
        return ",".join(
            [format_number(self.level), format_number(self.acc_undef), format_number(self.acc_def),
             format_number(self.rej_rate), str(self.n)]
        )


def count_outcomes(outcomes: Sequence[SampleOutcome], level: float) -> CurvePoint:
    """Fold per-sample outcomes into one curve point.

    Rejected samples count as correct under attack (``level > 0``) and as
    errors on clean data.

    Args:
        outcomes: One outcome per test sample
        level: Attack strength the outcomes were produced at

    Returns:
        The accuracies and rejection rate, rounded to nine digits

    Raises:
        DatasetError: No outcomes
    """
    n = len(outcomes)
    if n == 0:
        raise DatasetError("Cannot evaluate a curve point on an empty test set")
    correct = sum(o.predicted == o.label for o in outcomes)
    defended = [o for o in outcomes if o.defended is not None]
    if not defended:
        acc_def, rejected = correct, 0
    else:
        rejected = sum(o.rejected for o in outcomes)
        accepted_correct = sum((not o.rejected) and o.defended == o.label for o in outcomes)
        acc_def = accepted_correct if level == 0 else accepted_correct + rejected
    return CurvePoint(
        level=float(level),
        acc_undef=_round9(correct / n),
        acc_def=_round9(acc_def / n),
        rej_rate=_round9(rejected / n),
        n=n,
    )


@dataclass
class SecurityCurve:
    axis: str
    points: List[CurvePoint] = field(default_factory=list)
    mode: str = ""
    seed: int = 0
    config: Dict[str, Any] = field(default_factory=dict)

    @property
    def levels(self) -> List[float]:
        return [p.level for p in self.points]

    def to_csv(self) -> str:
        return "\n".join([CSV_HEADER, *(p.csv_row() for p in self.points)]) + "\n"

    @classmethod
    def from_csv(cls, text: str, axis: str = "epsilon") -> "SecurityCurve":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or ",".join(header) != CSV_HEADER:
            raise DatasetError(f"Not a security curve CSV (header {header!r})")
        points = [
            CurvePoint(float(r[0]), float(r[1]), float(r[2]), float(r[3]), int(r[4])) for r in reader if r
        ]
        return cls(axis=axis, points=points)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "axis": self.axis,
            "mode": self.mode,
            "seed": self.seed,
            "points": [asdict(p) for p in self.points],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SecurityCurve":
        return cls(
            axis=data["axis"],
            points=[CurvePoint(**p) for p in data["points"]],
            mode=data.get("mode", ""),
            seed=int(data.get("seed", 0)),
            config=data.get("config", {}),
        )


def emit(curve: SecurityCurve, fmt: str, path: Path) -> None:
    """Write ``curve`` as ``csv`` or ``json``."""
    if fmt not in ("csv", "json"):
        raise ConfigError(f"Unknown curve format {fmt!r}; expected csv or json")
    text = curve.to_csv() if fmt == "csv" else json.dumps(curve.to_dict(), indent=2) + "\n"
    write_text(Path(path), text)


def load_curve(path: Path) -> SecurityCurve:
    """Read a curve written by :func:`emit`; the suffix picks the format."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetError(f"Cannot read curve file {path}: {e}", path=str(path)) from e
    if path.suffix == ".json":
        return SecurityCurve.from_dict(json.loads(text))
    return SecurityCurve.from_csv(text)


def write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    except OSError as e:
        raise FuseGuardError(f"Cannot write output file {path}: {e}", context={"path": str(path)}) from e


# -- evaluation ----------------------------------------------------------------


def _chunks(n: int) -> List[range]:
    return [range(i, min(i + CHUNK_SIZE, n)) for i in range(0, n, CHUNK_SIZE)]


def attack_split(
    plan: AttackPlan,
    level: float,
    net: FusionNet,
    x_rgb: Optional[np.ndarray],
    x_depth: Optional[np.ndarray],
    labels: np.ndarray,
    ids: Sequence[str],
    *,
    bounds: Optional[InputBounds] = None,
    detector: Optional[DetectorState] = None,
    seed: int = 0,
    jobs: int = 1,
) -> List[AttackResult]:
    """Attack every sample independently; results are in sample order.

    Each sample's generator is derived from the seed, the mode, the level
    and the sample id, so the worker count never changes the output.
    """
    key = format_number(level)

    def work(indices: range) -> List[AttackResult]:
        out = []
        for i in indices:
            rng = rng_for(seed, plan.mode, key, ids[i])
            out.append(
                run_attack(
                    plan,
                    level,
                    net,
                    None if x_rgb is None else x_rgb[i],
                    None if x_depth is None else x_depth[i],
                    int(labels[i]),
                    bounds=bounds,
                    detector=detector,
                    rng=rng,
                )
            )
        return out

    chunks = _chunks(len(labels))
    if jobs <= 1:
        results = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, chunks))
    return [r for chunk in results for r in chunk]


def clean_outcomes(
    net: FusionNet,
    x_rgb: Optional[np.ndarray],
    x_depth: Optional[np.ndarray],
    labels: np.ndarray,
    detector: Optional[DetectorState] = None,
) -> List[SampleOutcome]:
    """Outcomes on unperturbed inputs, defended when ``detector`` is given."""
    feats, probs = features(net, x_rgb, x_depth)
    predicted = np.argmax(probs, axis=1)
    if detector is None:
        return [SampleOutcome(int(y), int(p)) for y, p in zip(labels, predicted)]
    energies = scores_from_features(feats, probs, detector.require_centroids())
    _, defended = defend(probs, energies, detector, "hard")
    return [
        SampleOutcome(int(y), int(p), int(d), bool(d == detector.rejection_label))
        for y, p, d in zip(labels, predicted, defended)
    ]


def outcomes_from_results(results: Sequence[AttackResult], labels: np.ndarray) -> List[SampleOutcome]:
    return [
        SampleOutcome(int(y), r.adv_label, r.defended_label, r.rejected) for r, y in zip(results, labels)
    ]


def evaluate_curve(
    net: FusionNet,
    detector: Optional[DetectorState],
    plan: AttackPlan,
    levels: Sequence[float],
    x_rgb: Optional[np.ndarray],
    x_depth: Optional[np.ndarray],
    labels: np.ndarray,
    ids: Sequence[str],
    *,
    bounds: Optional[InputBounds] = None,
    seed: int = 0,
    jobs: int = 1,
) -> SecurityCurve:
    """Accuracy of ``net`` with and without rejection at every level.

    Args:
        net: Classifier under evaluation
        detector: Calibrated detector, or None for an undefended curve
        plan: Attack mode and settings shared by all levels
        levels: Strictly increasing levels starting at 0
        x_rgb: Preprocessed RGB test inputs ``[N, 3, H, W]``
        x_depth: Preprocessed depth test inputs ``[N, 3, H, W]``
        labels: True labels
        ids: Sample ids, used to derive per-sample generators
        bounds: Valid input range
        seed: Base seed for random patch placements
        jobs: Worker threads; the result does not depend on it

    Returns:
        SecurityCurve with one point per level

    Raises:
        ConfigError: Invalid levels or an adaptive plan without detector
        DatasetError: Empty test set
    """
    levels = validate_levels(levels)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DatasetError("Cannot evaluate a security curve on an empty test set")
    if detector is not None:
        detector.require_calibrated()

    curve = SecurityCurve(axis=plan.axis, mode=plan.mode, seed=seed, config=plan.to_dict())
    for level in levels:
        if level == 0:
            outcomes = clean_outcomes(net, x_rgb, x_depth, labels, detector)
        else:
            results = attack_split(
                plan, level, net, x_rgb, x_depth, labels, ids,
                bounds=bounds, detector=detector, seed=seed, jobs=jobs,
            )
            outcomes = outcomes_from_results(results, labels)
        point = count_outcomes(outcomes, level)
        curve.points.append(point)
        logger.info(
            f"{plan.mode} level {format_number(level)}: acc_undef={point.acc_undef:.3f} "
            f"acc_def={point.acc_def:.3f} rej_rate={point.rej_rate:.3f}",
            extra={"level": level, **asdict(point)},
        )
    return curve


# -- adversarial training ------------------------------------------------------


@dataclass(frozen=True)
class AdvTrainConfig:
    """Augmentation settings; ``ratio`` is adversarial examples per clean sample."""

    epsilons: Tuple[float, ...] = (0.1,)
    steps: int = 10
    step_size: Optional[float] = None
    ratio: float = 1.0
    parts: str = "both"
    mode: str = "regenerate"
    step_rule: str = "sign"

    def validate(self) -> None:
        if not self.epsilons or any(e < 0 for e in self.epsilons):
            raise ConfigError("Adversarial training needs a nonempty set of epsilons >= 0")
        if self.steps < 1 or self.ratio <= 0:
            raise ConfigError("Adversarial training needs steps >= 1 and ratio > 0")
        if self.mode not in AT_MODES:
            raise ConfigError(f"Unknown adversarial training mode {self.mode!r}; expected {AT_MODES}")
        if self.parts not in PARTS or self.step_rule not in STEP_RULES:
            raise ConfigError("Invalid target parts or step rule for adversarial training")

    def budget(self, epsilon: float) -> AttackBudget:
        """Inner PGD budget for ε; the default step is ``2.5·ε / steps``."""
        step = self.step_size if self.step_size is not None else 2.5 * epsilon / self.steps
        return AttackBudget(
            epsilon=epsilon,
            step_size=step if step > 0 else 1e-3,
            iterations=self.steps,
            target_parts=self.parts,
            step_rule=self.step_rule,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), "epsilons": list(self.epsilons)}


def adversarial_examples(
    net: FusionNet,
    x_rgb: np.ndarray,
    x_depth: np.ndarray,
    labels: np.ndarray,
    advcfg: AdvTrainConfig,
    rng: np.random.Generator,
    *,
    bounds: Optional[InputBounds] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Correctly labeled PGD examples from a random subset, one ε per example."""
    n = len(labels)
    count = max(1, int(round(advcfg.ratio * n)))
    idx = rng.choice(n, size=count, replace=count > n)
    eps = rng.choice(np.asarray(advcfg.epsilons, dtype=np.float64), size=count)
    adv_rgb, adv_depth = x_rgb[idx].copy(), x_depth[idx].copy()
    for value in np.unique(eps):
        sel = np.flatnonzero(eps == value)
        if value == 0:
            continue
        adv_rgb[sel], adv_depth[sel] = pgd_batch(
            net, x_rgb[idx[sel]], x_depth[idx[sel]], labels[idx[sel]], advcfg.budget(float(value)),
            bounds=bounds,
        )
    return adv_rgb, adv_depth, labels[idx]


def adversarial_train(
    net_init: FusionNet,
    x_rgb: np.ndarray,
    x_depth: np.ndarray,
    labels: np.ndarray,
    advcfg: AdvTrainConfig,
    traincfg: TrainConfig,
    *,
    bounds: Optional[InputBounds] = None,
) -> TrainResult:
    """Train on clean data plus adversarial examples of the model being trained.

    Args:
        net_init: Starting weights, usually the plainly trained model
        x_rgb: Preprocessed RGB training inputs
        x_depth: Preprocessed depth training inputs
        labels: Training labels
        advcfg: Augmentation epsilons, inner PGD settings and mode
        traincfg: Optimizer settings shared with plain training
        bounds: Valid input range for the generated examples

    Returns:
        TrainResult whose network is tagged ``at``

    Raises:
        ConfigError: Invalid settings or a single-stream network
    """
    advcfg.validate()
    if net_init.arch.variant != "rgbd":
        raise ConfigError("Adversarial training is defined for the rgbd variant")
    if all(e == 0 for e in advcfg.epsilons):
        logger.info("All augmentation epsilons are zero; training without adversarial examples")
        result = train(net_init, x_rgb, x_depth, labels, traincfg)
        return TrainResult(net=result.net.with_tag("at"), history=result.history)

    cache: Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def hook(epoch: int, model: FusionNet, rng: np.random.Generator):
        if advcfg.mode == "fixed" and "fixed" in cache:
            return cache["fixed"]
        frozen = model.copy(requires_grad=False)
        extra = adversarial_examples(frozen, x_rgb, x_depth, labels, advcfg, rng, bounds=bounds)
        logger.info(
            f"epoch {epoch}: generated {len(extra[2])} adversarial examples",
            extra={"epoch": epoch, "count": len(extra[2]), "mode": advcfg.mode},
        )
        if advcfg.mode == "fixed":
            cache["fixed"] = extra
        return extra

    result = train(net_init, x_rgb, x_depth, labels, traincfg, epoch_hook=hook)
    return TrainResult(net=result.net.with_tag("at"), history=result.history)
