"""Attribute cross-entropy and cross-network triplet ranking objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .network import ForwardOutputs, RoutedOutputs
from .schema import Domain

FEATURE_LAYERS = ("fc1", "c4", "c5")
EUCLIDEAN = "euclidean"
SQUARED_EUCLIDEAN = "squared_euclidean"


@dataclass(frozen=True)
class RankingConfig:
    margin: float = 0.3
    feature_spec: tuple[str, ...] = ("fc1",)
    distance: str = EUCLIDEAN
    attr_weight: float = 1.0
    rank_weight: float = 1.0

    def __post_init__(self):
        spec = tuple(str(s).lower() for s in self.feature_spec)
        object.__setattr__(self, "feature_spec", spec)
        self.validate()

    def validate(self) -> None:
        if not self.margin > 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        unknown = [s for s in self.feature_spec if s not in FEATURE_LAYERS]
        if unknown:
            raise ConfigError(f"feature_spec: unknown layers {unknown}; choose from {FEATURE_LAYERS}")
        if "fc1" not in self.feature_spec:
            raise ConfigError("feature_spec must include fc1")
        if self.distance not in (EUCLIDEAN, SQUARED_EUCLIDEAN):
            raise ConfigError(f"distance must be {EUCLIDEAN!r} or {SQUARED_EUCLIDEAN!r}, got {self.distance!r}")
        if self.attr_weight < 0 or self.rank_weight < 0:
            raise ConfigError("attr_weight and rank_weight must be non-negative")


def normalize_spec(spec: Sequence[str]) -> tuple[str, ...]:
    spec = {str(s).lower() for s in spec}
    unknown = spec - set(FEATURE_LAYERS)
    if unknown:
        raise ConfigError(f"feature_spec: unknown layers {sorted(unknown)}")
    if "fc1" not in spec:
        raise ConfigError("feature_spec must include fc1")
    return tuple(layer for layer in FEATURE_LAYERS if layer in spec)


def feature_segments(outputs: ForwardOutputs, spec: Sequence[str]) -> list[Tensor]:
    """FC1, then pooled C4, then pooled C5 (each ``[N, d]``), in that fixed order."""
    spec = normalize_spec(spec)
    segs = [outputs.fc1]
    if "c4" in spec:
        segs.append(ad.flatten(ad.adaptive_maxpool_3x3(outputs.c4_map)))
    if "c5" in spec:
        segs.append(ad.flatten(ad.adaptive_maxpool_3x3(outputs.c5_map)))
    return segs


def ranking_feature(outputs: ForwardOutputs, spec: Sequence[str]) -> Tensor:
    segs = feature_segments(outputs, spec)
    return segs[0] if len(segs) == 1 else ad.concat(segs)


def feature_dim(fc1_dim: int, c4_filters: int, c5_filters: int, spec: Sequence[str]) -> int:
    spec = normalize_spec(spec)
    return fc1_dim + 9 * c4_filters * ("c4" in spec) + 9 * c5_filters * ("c5" in spec)


def _distance(x: Tensor, y: Tensor, kind: str) -> Tensor:
    diff = x - y
    return ad.row_norm(diff) if kind == EUCLIDEAN else ad.row_sq_norm(diff)


def triplet_loss(a: Tensor, b: Tensor, c: Tensor, cfg: RankingConfig = RankingConfig()) -> Tensor:
    """``max(0, m + dist(a, b) - dist(a, c))``; a is the street anchor, b its shop match.

    Rows of 2-d inputs are independent triplets and the result is their mean.
    """
    a, b, c = (t if isinstance(t, Tensor) else Tensor(t) for t in (a, b, c))
    if not (a.shape == b.shape == c.shape):
        raise DimensionError(f"triplet shapes differ: {a.shape}, {b.shape}, {c.shape}")
    if a.ndim == 1:
        a, b, c = (t.reshape(1, -1) for t in (a, b, c))
    elif a.ndim != 2:
        raise DimensionError(f"triplet features must be [D] or [N,D], got {a.shape}")
    hinge = ad.relu(_distance(a, b, cfg.distance) - _distance(a, c, cfg.distance) + cfg.margin)
    return ad.mean(hinge)


class LossTerms(NamedTuple):
    total: Tensor
    attr: Tensor
    rank: Tensor


def attribute_loss(routed: RoutedOutputs, labels: np.ndarray, schema_names: Sequence[str]) -> Tensor:
    """Sum of per-branch cross-entropies over every sub-network that saw samples."""
    terms = []
    for domain in (Domain.ONLINE, Domain.OFFLINE):
        out = routed.outputs[domain]
        if out is None:
            continue
        rows = labels[routed.positions[domain]]
        for ci, name in enumerate(schema_names):
            terms.append(ad.softmax_cross_entropy(out.branch_logits[name], rows[:, ci]))
    total = Tensor(0.0)
    for t in terms:
        total = total + t
    return total


def rank_loss(routed: RoutedOutputs, triplets: Sequence[tuple[int, int, int]], cfg: RankingConfig) -> Tensor:
    if len(triplets) == 0:
        return Tensor(0.0)
    trip = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    feats = {}
    for domain in (Domain.ONLINE, Domain.OFFLINE):
        out = routed.outputs[domain]
        feats[domain] = ranking_feature(out, cfg.feature_spec) if out is not None else None
    if feats[Domain.OFFLINE] is None or feats[Domain.ONLINE] is None:
        raise ContractError("triplets need both offline anchors and online samples in the batch")
    a = ad.take_rows(feats[Domain.OFFLINE], routed.rows(Domain.OFFLINE, trip[:, 0]))
    b = ad.take_rows(feats[Domain.ONLINE], routed.rows(Domain.ONLINE, trip[:, 1]))
    c = ad.take_rows(feats[Domain.ONLINE], routed.rows(Domain.ONLINE, trip[:, 2]))
    return triplet_loss(a, b, c, cfg)


def loss_terms(routed: RoutedOutputs, labels, triplets, cfg: RankingConfig,
               schema_names: Sequence[str]) -> LossTerms:
    labels = np.asarray(labels, dtype=np.int64)
    attr = attribute_loss(routed, labels, schema_names) if cfg.attr_weight else Tensor(0.0)
    rank = rank_loss(routed, triplets, cfg) if cfg.rank_weight else Tensor(0.0)
    total = attr * cfg.attr_weight + rank * cfg.rank_weight
    return LossTerms(total, attr, rank)


def total_loss(routed: RoutedOutputs, labels, triplets, cfg: RankingConfig,
               schema_names: Sequence[str]) -> Tensor:
    """``attr_weight * sum(branch CE) + rank_weight * mean(triplet loss)``."""
    return loss_terms(routed, labels, triplets, cfg, schema_names).total


def calibrated_margin(anchor_feats: np.ndarray, positive_feats: np.ndarray,
                      base: float = 0.3, unit_scale: float = 1.0) -> float:
    """Heuristic: rescale ``base`` by the mean anchor/positive distance of a probe batch."""
    d = np.linalg.norm(np.asarray(anchor_feats) - np.asarray(positive_feats), axis=1)
    return float(base * d.mean() / unit_scale)
