# hdafl/model.py
"""
The HDAFL head on top of precomputed backbone feature maps.

Functional pieces (attention maps, attribute features, pooling, channel
attention) are plain functions over tensors with optional leading batch
dimensions; the nn.Module classes only own parameters and compose them.

Shapes: f is (..., H, W, C), attribute kernels are (K, C), Att(x) is
(..., H, W, K), AF and EAF are (..., K, C), h(x) is (..., C), a_hat is (..., K).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from hdafl.errors import ConfigError, NumericError, ShapeError

SOFTMAX_AXES = ("spatial", "attribute")


def _check_finite(t: torch.Tensor, name: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values in {name}")


# ----------------------------
# Attribute feature extraction
# ----------------------------
def attention_maps(f: torch.Tensor, kernels: torch.Tensor, axis: str = "spatial") -> torch.Tensor:
    """K 1x1xC kernels followed by a softmax.

    axis="spatial" normalises each attribute over all H*W positions,
    axis="attribute" normalises each position over the K attributes.
    """
    if f.dim() < 3 or kernels.dim() != 2 or f.shape[-1] != kernels.shape[-1]:
        raise ShapeError(f"feature map {tuple(f.shape)} and kernels {tuple(kernels.shape)} disagree on C")
    _check_finite(f, "feature map")
    _check_finite(kernels, "attribute kernels")

    logits = f @ kernels.transpose(0, 1)
    if axis == "spatial":
        flat = logits.flatten(-3, -2)
        return F.softmax(flat, dim=-2).reshape(logits.shape)
    if axis == "attribute":
        return F.softmax(logits, dim=-1)
    raise ConfigError(f"attention_softmax_axis must be one of {SOFTMAX_AXES}, got {axis!r}")


def attribute_features(f: torch.Tensor, att: torch.Tensor) -> torch.Tensor:
    """AF = reshape(Att, HW x K)^T . reshape(f, HW x C)."""
    if f.shape[:-1] != att.shape[:-1]:
        raise ShapeError(f"feature map {tuple(f.shape)} and attention {tuple(att.shape)} disagree on (..., H, W)")
    return att.flatten(-3, -2).transpose(-1, -2) @ f.flatten(-3, -2)


def global_feature(f: torch.Tensor) -> torch.Tensor:
    """h(x): global average pooling over H and W."""
    if f.dim() < 3:
        raise ShapeError(f"feature map must be (..., H, W, C), got {tuple(f.shape)}")
    return f.mean(dim=(-3, -2))


def attribute_scores(att: torch.Tensor) -> torch.Tensor:
    """a_hat: global max pooling of Att(x) over H and W."""
    if att.dim() < 3:
        raise ShapeError(f"attention must be (..., H, W, K), got {tuple(att.shape)}")
    return att.flatten(-3, -2).amax(dim=-2)


# ----------------------------
# Attribute discrimination encoder
# ----------------------------
def channel_attention(
    af: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_o: torch.Tensor,
    return_weights: bool = False,
) -> Union[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
    """MH(Q, K, V): per-head attention over channels, heads concatenated then mixed by W^o.

    w_q / w_k / w_v are stacked per head as (h, C/h, C/h); w_o is (C, C) and
    multiplies from the right.
    """
    *lead, k, c = af.shape
    heads, d, _ = w_q.shape
    if heads * d != c:
        raise ConfigError(f"heads={heads} with block width {d} does not split C={c}")

    blocks = af.reshape(*lead, k, heads, d).transpose(-3, -2)    # (..., h, K, d)
    q = blocks @ w_q
    key = blocks @ w_k
    v = blocks @ w_v
    scores = q.transpose(-1, -2) @ key / math.sqrt(k)            # (..., h, d, d)
    weights = F.softmax(scores, dim=-1)
    head = weights @ v.transpose(-1, -2)                          # (..., h, d, K)
    concat = head.transpose(-1, -2).transpose(-3, -2).reshape(*lead, k, c)
    out = concat @ w_o
    if return_weights:
        return out, weights
    return out


def attribute_discrimination_encode(
    af: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_o: torch.Tensor,
    feed_forward: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """EAF = AF_hat + FFN(AF_hat) with AF_hat = AF + MH(Q, K, V)."""
    _check_finite(af, "attribute features")
    af_hat = af + channel_attention(af, w_q, w_k, w_v, w_o)
    return af_hat + feed_forward(af_hat)


def _uniform_(t: torch.Tensor, fan_in: int) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.init.uniform_(t, -bound, bound)


class AttributeDiscriminationEncoder(nn.Module):
    def __init__(self, channels: int, heads: int, ff_mult: int = 4) -> None:
        super().__init__()
        if heads < 1 or channels % heads:
            raise ConfigError(f"heads={heads} must divide channels={channels}")
        d = channels // heads
        self.heads = heads
        self.w_q = nn.Parameter(_uniform_(torch.empty(heads, d, d), d))
        self.w_k = nn.Parameter(_uniform_(torch.empty(heads, d, d), d))
        self.w_v = nn.Parameter(_uniform_(torch.empty(heads, d, d), d))
        self.w_o = nn.Parameter(_uniform_(torch.empty(channels, channels), channels))
        self.feed_forward = nn.Sequential(
            nn.Linear(channels, ff_mult * channels),
            nn.ReLU(),
            nn.Linear(ff_mult * channels, channels),
        )

    def forward(self, af: torch.Tensor) -> torch.Tensor:
        return attribute_discrimination_encode(af, self.w_q, self.w_k, self.w_v, self.w_o, self.feed_forward)


# ----------------------------
# Semantic encoders
# ----------------------------
class SemanticEncoder(nn.Module):
    """in -> hidden -> hidden -> out, rectifier after each hidden layer."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int) -> None:
        super().__init__()
        self.in_dim = in_dim
        self.layers = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, out_dim),
        )

    def forward(self, semantics: torch.Tensor) -> torch.Tensor:
        if semantics.shape[-1] != self.in_dim:
            raise ShapeError(f"encoder expects width {self.in_dim}, got {semantics.shape[-1]}")
        return self.layers(semantics)


def encode_class_prototypes(class_semantics: torch.Tensor, encoder: SemanticEncoder) -> torch.Tensor:
    """cp: one prototype row per class."""
    return encoder(class_semantics)


def encode_attribute_prototypes(attribute_semantics: torch.Tensor, encoder: SemanticEncoder) -> torch.Tensor:
    """ap: one prototype row per attribute."""
    return encoder(attribute_semantics)


# ----------------------------
# Head
# ----------------------------
@dataclass(frozen=True)
class HeadConfig:
    n_attributes: int
    channels: int
    class_dim: int
    attr_dim: int
    hidden_dim: int = 1024
    heads: int = 8
    ff_mult: int = 4
    attention_softmax_axis: str = "spatial"
    use_enhanced_features: bool = True

    def __post_init__(self) -> None:
        for key in ("n_attributes", "channels", "class_dim", "attr_dim", "hidden_dim", "heads", "ff_mult"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.channels % self.heads:
            raise ConfigError(f"heads={self.heads} must divide channels={self.channels}")
        if self.attention_softmax_axis not in SOFTMAX_AXES:
            raise ConfigError(
                f"attention_softmax_axis must be one of {SOFTMAX_AXES}, got {self.attention_softmax_axis!r}"
            )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "HeadConfig":
        return cls(**d)


@dataclass
class ForwardOut:
    att: torch.Tensor     # (..., H, W, K)
    af: torch.Tensor      # (..., K, C)
    eaf: torch.Tensor     # (..., K, C)
    h_x: torch.Tensor     # (..., C)
    a_hat: torch.Tensor   # (..., K)

    def attribute_rows(self, enhanced: bool) -> torch.Tensor:
        return self.eaf if enhanced else self.af


class HDAFLHead(nn.Module):
    def __init__(self, config: HeadConfig) -> None:
        super().__init__()
        self.config = config
        c = config.channels
        self.attr_kernels = nn.Parameter(_uniform_(torch.empty(config.n_attributes, c), c))
        self.class_encoder = SemanticEncoder(config.class_dim, config.hidden_dim, c)
        self.attr_encoder = SemanticEncoder(config.attr_dim, config.hidden_dim, c)
        self.ade = AttributeDiscriminationEncoder(c, config.heads, config.ff_mult)

    @classmethod
    def build(cls, config: HeadConfig, seed: int, dtype: torch.dtype = torch.float32) -> "HDAFLHead":
        """Seeded construction that leaves the global RNG untouched."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = cls(config)
        return model.to(dtype)

    def forward(self, f: torch.Tensor) -> ForwardOut:
        att = attention_maps(f, self.attr_kernels, self.config.attention_softmax_axis)
        af = attribute_features(f, att)
        eaf = self.ade(af)
        return ForwardOut(att=att, af=af, eaf=eaf, h_x=global_feature(f), a_hat=attribute_scores(att))

    def class_prototypes(self, class_semantics: torch.Tensor) -> torch.Tensor:
        return encode_class_prototypes(class_semantics, self.class_encoder)

    def attribute_prototypes(self, attribute_semantics: torch.Tensor) -> torch.Tensor:
        return encode_attribute_prototypes(attribute_semantics, self.attr_encoder)
