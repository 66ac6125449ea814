# hdafl/losses.py
"""
Training losses and hard-sample mining.

Every loss is a pure function of its tensor inputs and is differentiable with
respect to feature and prototype inputs. Mining decisions are taken on
detached cosine similarities, so they act as fixed masks for autograd.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F

from hdafl.errors import ConfigError, ShapeError

COS_EPS = 1e-12
PRESENCE_THRESHOLD = 0.5
AAL_VARIANTS = ("verbatim", "flipped")
COMPONENTS = ("cls", "mse", "aal", "acl", "ccl")
# Floor tolerance so that e.g. 0.29 * 100 drops 29 rather than 28
_FLOOR_TOL = 1e-9

DROP_MOST_SIMILAR = "drop_most_similar"
DROP_LEAST_SIMILAR = "drop_least_similar"


@dataclass(frozen=True)
class LossWeights:
    lambda_mse: float = 1.0
    lambda_aal: float = 0.01
    lambda_acl: float = 0.1
    lambda_ccl: float = 0.1
    alpha: float = 25.0
    tau_attr: float = 0.3
    tau_class: float = 0.1
    mu: float = 0.32
    epsilon: float = 0.42

    def __post_init__(self) -> None:
        for key in ("lambda_mse", "lambda_aal", "lambda_acl", "lambda_ccl"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative, got {getattr(self, key)}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.tau_attr <= 0 or self.tau_class <= 0:
            raise ConfigError("temperatures must be > 0")
        for key in ("mu", "epsilon"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError(f"{key} must lie in [0, 1), got {getattr(self, key)}")

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.normalize(a, dim=-1, eps=COS_EPS) @ F.normalize(b, dim=-1, eps=COS_EPS).transpose(-1, -2)


def _warn_zero_norm(t: torch.Tensor, name: str) -> None:
    if t.numel() and bool((t.detach().norm(dim=-1) < COS_EPS).any()):
        logging.warning("Zero-norm %s row; cosine denominator floored at %g", name, COS_EPS)


# ----------------------------
# Classification and localisation
# ----------------------------
def classification_loss(h_batch: torch.Tensor, cp: torch.Tensor, labels: torch.Tensor, alpha: float) -> torch.Tensor:
    """Mean over the batch of -log softmax_y(alpha * cos(h_i, cp))."""
    if h_batch.shape[-1] != cp.shape[-1]:
        raise ShapeError(f"features {tuple(h_batch.shape)} and prototypes {tuple(cp.shape)} disagree on C")
    _warn_zero_norm(h_batch, "feature")
    _warn_zero_norm(cp, "prototype")
    logits = alpha * _cosine_matrix(h_batch, cp)
    return F.cross_entropy(logits, labels.long())


def mse_attribute_loss(a_hat: torch.Tensor, a_y: torch.Tensor) -> torch.Tensor:
    """||a_hat - a_y||^2 per image; batched inputs are averaged over images."""
    if a_hat.shape != a_y.shape:
        raise ShapeError(f"attribute scores {tuple(a_hat.shape)} and targets {tuple(a_y.shape)} differ")
    sq = ((a_hat - a_y) ** 2).sum(dim=-1)
    return sq.mean() if sq.dim() else sq


# ----------------------------
# Attribute pool
# ----------------------------
@dataclass
class AttributePool:
    features: torch.Tensor        # P x C
    attribute_ids: torch.Tensor   # P
    image_ids: torch.Tensor       # P

    def __len__(self) -> int:
        return int(self.attribute_ids.numel())

    @property
    def empty(self) -> bool:
        return len(self) == 0


def build_attribute_pool(
    attribute_rows: torch.Tensor,
    targets: torch.Tensor,
    presence_threshold: float = PRESENCE_THRESHOLD,
    image_ids: Optional[torch.Tensor] = None,
) -> AttributePool:
    """One entry per (image, attribute with normalised ground truth > threshold).

    attribute_rows is B x K x C (AF or EAF), targets is B x K in [0, 1].
    """
    if attribute_rows.dim() != 3 or targets.shape != attribute_rows.shape[:2]:
        raise ShapeError(f"attribute rows {tuple(attribute_rows.shape)} and targets {tuple(targets.shape)} disagree")
    present = targets > presence_threshold
    img, attr = torch.nonzero(present, as_tuple=True)
    if image_ids is not None:
        img_ids = image_ids.to(img.device)[img]
    else:
        img_ids = img
    pool = AttributePool(features=attribute_rows[img, attr], attribute_ids=attr, image_ids=img_ids)
    if pool.empty:
        logging.warning("Empty attribute pool: no attribute present above %g", presence_threshold)
    return pool


# ----------------------------
# Attribute alignment
# ----------------------------
def attribute_alignment_loss(
    pool: AttributePool,
    ap: torch.Tensor,
    variant: str = "verbatim",
    margin: float = 0.0,
) -> torch.Tensor:
    """Sum over pool entries.

    verbatim: ReLU(cos(af_j, ap_j) - 0.5 * min_{j' != j} cos(af_j, ap_j'))
    flipped:  ReLU(0.5 * min_{j' != j} cos(af_j, ap_j') - cos(af_j, ap_j) + margin)
    """
    if variant not in AAL_VARIANTS:
        raise ConfigError(f"aal_variant must be one of {AAL_VARIANTS}, got {variant!r}")
    zero = ap.sum() * 0.0
    if pool.empty:
        return zero
    if ap.shape[0] < 2:
        logging.warning("Attribute alignment needs K >= 2, got K=%d; loss set to 0", ap.shape[0])
        return zero
    _warn_zero_norm(pool.features, "attribute feature")

    cos = _cosine_matrix(pool.features, ap)                           # P x K
    rows = torch.arange(len(pool), device=cos.device)
    own = cos[rows, pool.attribute_ids]
    others = cos.masked_fill(F.one_hot(pool.attribute_ids, ap.shape[0]).bool(), math.inf)
    cross_min = others.min(dim=1).values
    if variant == "verbatim":
        terms = F.relu(own - 0.5 * cross_min)
    else:
        terms = F.relu(0.5 * cross_min - own + margin)
    return terms.sum()


# ----------------------------
# Hard-sample mining
# ----------------------------
def _drop_count(fraction: float, n: torch.Tensor) -> torch.Tensor:
    drop = torch.floor(fraction * n.to(torch.float64) + _FLOOR_TOL).long()
    return torch.minimum(drop, (n - 1).clamp(min=0))


def _keep_mask(sim: torch.Tensor, valid: torch.Tensor, fraction: float, direction: str) -> torch.Tensor:
    """Rows are anchors. Among valid candidates drop the floor(fraction * n) easiest ones.

    Easiest means most similar for positives and least similar for negatives;
    ties keep original column order (stable sort).
    """
    if direction == DROP_MOST_SIMILAR:
        keyed = sim.masked_fill(~valid, -math.inf)
        order = torch.sort(keyed, dim=1, descending=True, stable=True).indices
    elif direction == DROP_LEAST_SIMILAR:
        keyed = sim.masked_fill(~valid, math.inf)
        order = torch.sort(keyed, dim=1, descending=False, stable=True).indices
    else:
        raise ConfigError(f"unknown mining direction {direction!r}")
    ranks = torch.empty_like(order)
    ranks.scatter_(1, order, torch.arange(sim.shape[1], device=sim.device).expand_as(order).contiguous())
    n = valid.sum(dim=1)
    drop = _drop_count(fraction, n)
    return valid & (ranks >= drop.unsqueeze(1))


def mine_hard_samples(
    anchor: torch.Tensor,
    candidates: torch.Tensor,
    fraction: float,
    direction: str,
) -> List[int]:
    """Indices (ascending) of candidates retained after dropping the easiest floor(fraction * n).

    The floor is taken after adding _FLOOR_TOL, a guard against float rounding
    (0.29 * 100 evaluates to 28.999999999999996 and must still drop 29). The
    drop count never exceeds n - 1, so at least one candidate survives.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"mining fraction must lie in [0, 1), got {fraction}")
    if candidates.shape[0] == 0:
        return []
    sim = _cosine_matrix(anchor.detach().reshape(1, -1), candidates.detach())
    valid = torch.ones_like(sim, dtype=torch.bool)
    keep = _keep_mask(sim, valid, fraction, direction)[0]
    return torch.nonzero(keep).flatten().tolist()


# ----------------------------
# Contrastive losses
# ----------------------------
def attribute_contrastive_loss(pool: AttributePool, mu: float, epsilon: float, tau_attr: float) -> torch.Tensor:
    """Mean over contributing anchors of p_j.

    Positives share the anchor's attribute and come from another image;
    negatives carry a different attribute. Positives are mined with mu,
    negatives with epsilon. Anchors without a retained positive are skipped.
    """
    if pool.empty:
        return pool.features.sum() * 0.0
    for name, value in (("mu", mu), ("epsilon", epsilon)):
        if not 0.0 <= value < 1.0:
            raise ConfigError(f"{name} must lie in [0, 1), got {value}")
    _warn_zero_norm(pool.features, "attribute feature")

    cos = _cosine_matrix(pool.features, pool.features)
    same_attr = pool.attribute_ids.unsqueeze(0) == pool.attribute_ids.unsqueeze(1)
    same_img = pool.image_ids.unsqueeze(0) == pool.image_ids.unsqueeze(1)
    positives = same_attr & ~same_img
    negatives = ~same_attr

    sim = cos.detach()
    pos_keep = _keep_mask(sim, positives, mu, DROP_MOST_SIMILAR)
    neg_keep = _keep_mask(sim, negatives, epsilon, DROP_LEAST_SIMILAR)

    n_pos = pos_keep.sum(dim=1)
    contributing = n_pos > 0
    if not bool(contributing.any()):
        logging.warning("Attribute contrastive loss: no anchor has a positive; loss set to 0")
        return pool.features.sum() * 0.0

    # Only anchors with a positive; their denominators are never empty.
    logits = cos[contributing] / tau_attr
    pos_keep = pos_keep[contributing]
    in_denom = pos_keep | neg_keep[contributing]
    log_denom = torch.logsumexp(logits.masked_fill(~in_denom, -math.inf), dim=1)
    log_prob = (logits - log_denom.unsqueeze(1)).masked_fill(~pos_keep, 0.0)
    p = -log_prob.sum(dim=1) / n_pos[contributing]
    return p.mean()


def class_contrastive_loss(h_batch: torch.Tensor, labels: torch.Tensor, tau_class: float) -> torch.Tensor:
    """Supervised contrastive loss over global features; images without positives contribute 0."""
    b = h_batch.shape[0]
    if b < 2:
        logging.warning("Class contrastive loss needs B >= 2, got B=%d; loss set to 0", b)
        return h_batch.sum() * 0.0
    _warn_zero_norm(h_batch, "global feature")

    logits = _cosine_matrix(h_batch, h_batch) / tau_class
    self_mask = torch.eye(b, dtype=torch.bool, device=h_batch.device)
    labels = labels.reshape(-1)
    pos = (labels.unsqueeze(0) == labels.unsqueeze(1)) & ~self_mask

    log_denom = torch.logsumexp(logits.masked_fill(self_mask, -math.inf), dim=1)
    log_prob = (logits - log_denom.unsqueeze(1)).masked_fill(~pos, 0.0)
    n_pos = pos.sum(dim=1)
    per_image = -log_prob.sum(dim=1) / n_pos.clamp(min=1)
    return per_image.mean()


# ----------------------------
# Total
# ----------------------------
@dataclass
class LossComponents:
    cls: torch.Tensor
    mse: torch.Tensor
    aal: torch.Tensor
    acl: torch.Tensor
    ccl: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in COMPONENTS}


def total_loss(components: LossComponents, weights: LossWeights) -> torch.Tensor:
    """L = L_cls + l1 L_mse + l2 L_aal + l3 L_acl + l4 L_ccl."""
    return (
        components.cls
        + weights.lambda_mse * components.mse
        + weights.lambda_aal * components.aal
        + weights.lambda_acl * components.acl
        + weights.lambda_ccl * components.ccl
    )


def ablation_weights(weights: LossWeights, enabled: Sequence[str]) -> LossWeights:
    """Zero the lambda of every component not listed. cls is always on."""
    unknown = set(enabled) - set(COMPONENTS)
    if unknown:
        raise ConfigError(f"unknown loss components {sorted(unknown)}")
    d = weights.to_dict()
    for comp in COMPONENTS[1:]:
        if comp not in enabled:
            d[f"lambda_{comp}"] = 0.0
    return LossWeights(**d)
