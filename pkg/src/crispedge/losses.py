"""Boundary-detection losses over probability maps and multi-annotator labels.

Two label views exist side by side: a hard binary map obtained by majority
vote across annotators, and a consensus weight map holding the fraction of
annotators that marked each pixel. The cross-entropy and overlap (dice-style)
losses come in a hard and a soft variant accordingly, plus two fusions of the
soft pair: fixed weights, and trainable weights with a log-barrier coupling
term.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError
from .tensorcore import Parameter, Tensor, add, clip, exp, global_sum, log, mul, reciprocal, square


class AnnotationSet:
    """Binary boundary maps from ``n >= 1`` annotators of one image."""

    __slots__ = ("maps",)

    def __init__(self, maps):
        if isinstance(maps, np.ndarray):
            stack = np.asarray(maps, dtype=np.float64)
            if stack.ndim == 2:
                stack = stack[None]
        else:
            maps = list(maps)
            if not maps:
                raise ContractError("an annotation set needs at least one annotator")
            shapes = {np.asarray(m).shape for m in maps}
            if len(shapes) != 1:
                raise ShapeError(f"annotator maps disagree on shape: {sorted(shapes)}")
            stack = np.stack([np.asarray(m, dtype=np.float64) for m in maps])
        if stack.ndim != 3 or stack.shape[0] < 1:
            raise ContractError(f"expected n x H x W annotator maps, got shape {stack.shape}")
        if not np.all((stack == 0.0) | (stack == 1.0)):
            raise DomainError("annotator maps must be strictly binary")
        self.maps = stack

    @property
    def n(self) -> int:
        return self.maps.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.maps.shape[1:]

    def majority(self) -> np.ndarray:
        """Hard binary label: positive where at least half the annotators
        (rounded up) marked the pixel."""
        need = (self.n + 1) // 2
        return (self.maps.sum(axis=0) >= need).astype(np.float64)


@dataclass(frozen=True)
class ConsensusWeightMap:
    """Per-pixel fraction of annotators marking a boundary, with the derived
    class-balance statistics.

    ``w`` is (B, 1, H, W); ``beta`` is the negative-pixel fraction over the
    whole batch. ``pos_count``/``neg_count`` partition the pixels by w > 0.
    """

    w: np.ndarray
    beta: float
    pos_count: int
    neg_count: int

    @classmethod
    def from_array(cls, w) -> "ConsensusWeightMap":
        arr = np.asarray(w, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, None]
        elif arr.ndim == 3:
            arr = arr[:, None]
        if arr.ndim != 4 or arr.shape[1] != 1:
            raise ShapeError(f"weight map must be (B, 1, H, W), got {arr.shape}")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise DomainError(f"weights must lie in [0, 1], range is [{arr.min()}, {arr.max()}]")
        pos = int(np.count_nonzero(arr > 0.0))
        neg = arr.size - pos
        return cls(w=arr, beta=neg / arr.size, pos_count=pos, neg_count=neg)


def weight_map(annotations: AnnotationSet) -> ConsensusWeightMap:
    """Average the annotator maps into one consensus map."""
    return ConsensusWeightMap.from_array(annotations.maps.mean(axis=0))


def batch_weight_maps(annotation_sets: Sequence[AnnotationSet]) -> ConsensusWeightMap:
    """Stack per-sample consensus maps; balance statistics are global over
    every pixel of the batch, not per-image."""
    sets = list(annotation_sets)
    if not sets:
        raise ContractError("empty batch")
    shapes = {a.spatial_shape for a in sets}
    if len(shapes) != 1:
        raise ShapeError(f"batch mixes spatial shapes: {sorted(shapes)}")
    return ConsensusWeightMap.from_array(np.stack([a.maps.mean(axis=0) for a in sets]))


def remap_weights(wmap: ConsensusWeightMap, floor: float) -> ConsensusWeightMap:
    """Affinely squeeze the positive weights from (0, 1] into (floor, 1];
    zeros stay zero, so the class partition is unchanged."""
    if not 0.0 <= floor < 1.0:
        raise ContractError(f"floor must be in [0, 1), got {floor}")
    w = np.where(wmap.w > 0.0, floor + (1.0 - floor) * wmap.w, 0.0)
    return ConsensusWeightMap(w=w, beta=wmap.beta, pos_count=wmap.pos_count, neg_count=wmap.neg_count)


@dataclass(frozen=True)
class LossConfig:
    """Shared numeric guards and the fixed balance factor of the adaptive
    fusion. ``clamp`` bounds probabilities away from {0, 1} before logs."""

    epsilon: float = 1e-6
    zeta: float = 0.1
    clamp: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ContractError(f"epsilon must be positive, got {self.epsilon}")
        if self.zeta <= 0.0:
            raise ContractError(f"zeta must be positive, got {self.zeta}")
        if not 0.0 < self.clamp < 0.5:
            raise ContractError(f"clamp must be in (0, 0.5), got {self.clamp}")


class AdaptiveLossState:
    """Trainable fusion weights, stored as logs so they stay positive no
    matter what the optimizer does."""

    __slots__ = ("log_kappa", "log_tau")

    def __init__(self, kappa: float = 1.0, tau: float = 1.0):
        if kappa <= 0.0 or tau <= 0.0:
            raise ContractError(f"fusion weights must be positive, got kappa={kappa}, tau={tau}")
        self.log_kappa = Parameter(np.full((1, 1, 1, 1), np.log(kappa)))
        self.log_tau = Parameter(np.full((1, 1, 1, 1), np.log(tau)))

    @property
    def kappa(self) -> float:
        return float(np.exp(self.log_kappa.data.reshape(())))

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data.reshape(())))

    def params(self) -> list[Parameter]:
        return [self.log_kappa, self.log_tau]


def _stack_labels(annotations) -> np.ndarray:
    if isinstance(annotations, AnnotationSet):
        annotations = [annotations]
    labels = np.stack([a.majority() for a in annotations])[:, None]
    return labels


def _check_p(p: Tensor, spatial: tuple) -> None:
    if p.shape != spatial:
        raise ShapeError(f"prediction shape {p.shape} does not match labels {spatial}")


def weighted_ce(p: Tensor, annotations, config: LossConfig = LossConfig()) -> Tensor:
    """Class-balanced cross-entropy against the majority-vote binary label.

    Positives are weighted by the negative-pixel fraction beta and negatives
    by 1 - beta, so the sparse boundary class is not drowned out.
    """
    labels = _stack_labels(annotations)
    _check_p(p, labels.shape)
    n = labels.size
    n_pos = int(labels.sum())
    beta = (n - n_pos) / n
    pc = clip(p, config.clamp, 1.0 - config.clamp)
    pos_coef = labels * (-beta)
    neg_coef = (1.0 - labels) * (-(1.0 - beta))
    one_minus = add(mul(pc, -1.0), 1.0)
    return global_sum(add(mul(log(pc), pos_coef), mul(log(one_minus), neg_coef)))


def soft_ce(p: Tensor, wmap: ConsensusWeightMap, config: LossConfig = LossConfig()) -> Tensor:
    """Consensus-weighted cross-entropy, count-normalized per class.

    Positive pixels (w > 0) contribute w_i * log p_i scaled by beta / #pos;
    negative pixels contribute log(1 - p_i) scaled by (1 - beta) / #neg.
    Either class being empty silences its term.
    """
    _check_p(p, wmap.w.shape)
    pos_mask = wmap.w > 0.0
    pos_scale = -(wmap.beta / wmap.pos_count) if wmap.pos_count else 0.0
    neg_scale = -((1.0 - wmap.beta) / wmap.neg_count) if wmap.neg_count else 0.0
    pc = clip(p, config.clamp, 1.0 - config.clamp)
    one_minus = add(mul(pc, -1.0), 1.0)
    pos_coef = np.where(pos_mask, wmap.w * pos_scale, 0.0)
    neg_coef = np.where(pos_mask, 0.0, neg_scale)
    return global_sum(add(mul(log(pc), pos_coef), mul(log(one_minus), neg_coef)))


def dice(p: Tensor, annotations) -> Tensor:
    """Reciprocal overlap ratio against the majority-vote label; equals 1
    exactly when p matches the label pointwise (and the label is nonempty)."""
    labels = _stack_labels(annotations)
    _check_p(p, labels.shape)
    den = mul(global_sum(mul(p, labels)), 2.0)
    if den.item() == 0.0:
        raise DomainError("overlap denominator is zero (empty prediction against empty label); "
                          "use soft_dice, whose epsilon guard covers this case")
    num = add(global_sum(square(p)), float((labels * labels).sum()))
    return mul(num, reciprocal(den))


def soft_dice(p: Tensor, wmap: ConsensusWeightMap, config: LossConfig = LossConfig()) -> Tensor:
    """Reciprocal overlap against the consensus weights with an epsilon guard
    on both sides of the ratio; minimum value 1 at pointwise agreement."""
    _check_p(p, wmap.w.shape)
    eps = config.epsilon
    num = add(global_sum(square(p)), float((wmap.w * wmap.w).sum()) + eps)
    den = add(mul(global_sum(mul(p, wmap.w)), 2.0), eps)
    return mul(num, reciprocal(den))


def combined_loss(p: Tensor, wmap: ConsensusWeightMap, kappa_fixed: float, tau_fixed: float,
                  config: LossConfig = LossConfig()) -> Tensor:
    """Fixed-weight fusion of the two soft losses."""
    if kappa_fixed < 0.0 or tau_fixed < 0.0:
        raise ContractError(f"fixed fusion weights must be non-negative, got {kappa_fixed}, {tau_fixed}")
    return add(mul(soft_ce(p, wmap, config), kappa_fixed),
               mul(soft_dice(p, wmap, config), tau_fixed))


def adaptive_loss(p: Tensor, wmap: ConsensusWeightMap, awl: AdaptiveLossState,
                  config: LossConfig = LossConfig()) -> Tensor:
    """Trainable-weight fusion: ce_term / kappa^2 + zeta * overlap_term / tau^2
    + log(1 + kappa * tau).

    The log term stops both weights from growing without bound; gradients
    reach the log-parameterized weights as well as the network.
    """
    sce = soft_ce(p, wmap, config)
    sd = soft_dice(p, wmap, config)
    kappa = exp(awl.log_kappa)
    tau = exp(awl.log_tau)
    inv_k2 = exp(mul(awl.log_kappa, -2.0))
    inv_t2 = exp(mul(awl.log_tau, -2.0))
    barrier = log(add(mul(kappa, tau), 1.0))
    return add(add(mul(inv_k2, sce), mul(mul(inv_t2, sd), config.zeta)), barrier)
