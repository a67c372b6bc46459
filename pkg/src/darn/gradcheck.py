"""Central-difference checks for every primitive and for the full dual-network loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import MISSING, Tensor, finite_difference_errors
from .losses import RankingConfig, loss_terms, ranking_feature, triplet_loss
from .network import SubNetworkConfig, build_dual_network, route_batch
from .schema import DEFAULT_SCHEMA, AttributeSchema, Domain

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float
    coords: int = 0
    kinks: int = 0  # probes that crossed a ReLU/max-pool branch; excluded from the max

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(rng, shape, name, away_from_zero=False):
    x = rng.normal(size=shape)
    if away_from_zero:  # keep ReLU inputs off the kink by more than epsilon
        x = np.sign(x) * (0.1 + np.abs(x))
    return Tensor(x, requires_grad=True, name=name)


def _summarize(name, rows, seconds) -> CheckResult:
    smooth = [r[4] for r in rows if r[5]]
    return CheckResult(name, max(smooth, default=0.0), seconds, len(rows), len(rows) - len(smooth))


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """name -> (scalar loss closure, leaves).  Each loss contracts the output with fixed random weights."""
    cases = {}

    def case(name, leaves, build):
        w = {}

        def loss():
            out = build(*leaves)
            if out.ndim == 0:
                return out
            if "w" not in w:
                w["w"] = Tensor(rng.normal(size=out.shape))
            return ad.tsum(ad.mul(out, w["w"]))

        cases[name] = (loss, leaves)

    case("add", [_leaf(rng, (4, 5), "a"), _leaf(rng, (5,), "b")], ad.add)
    case("neg", [_leaf(rng, (3, 4), "a")], ad.neg)
    case("mul", [_leaf(rng, (4, 5), "a"), _leaf(rng, (4, 1), "b")], ad.mul)
    case("sum", [_leaf(rng, (3, 4), "a")], ad.tsum)
    case("mean", [_leaf(rng, (3, 4), "a")], ad.mean)
    case("relu", [_leaf(rng, (6, 7), "a", away_from_zero=True)], ad.relu)
    case("reshape", [_leaf(rng, (2, 3, 4), "a")], lambda a: ad.reshape(a, (6, 4)))
    case("flatten", [_leaf(rng, (2, 3, 2, 2), "a")], ad.flatten)
    case("concat", [_leaf(rng, (3, 2), "a"), _leaf(rng, (3, 5), "b")], lambda a, b: ad.concat([a, b]))
    case("split", [_leaf(rng, (3, 7), "a")],
         lambda a: ad.add(ad.tsum(ad.mul(ad.split(a, [3, 4])[0], ad.split(a, [3, 4])[0])),
                          ad.tsum(ad.split(a, [3, 4])[1])))
    case("column_slice", [_leaf(rng, (4, 6), "a")], lambda a: ad.column_slice(a, 1, 4))
    case("take_rows", [_leaf(rng, (5, 3), "a")], lambda a: ad.take_rows(a, [4, 0, 4, 2]))
    case("row_norm", [_leaf(rng, (4, 6), "a")], ad.row_norm)
    case("row_sq_norm", [_leaf(rng, (4, 6), "a")], ad.row_sq_norm)
    case("fully_connected", [_leaf(rng, (4, 6), "x"), _leaf(rng, (6, 3), "w"), _leaf(rng, (3,), "b")],
         ad.fully_connected)
    case("conv2d", [_leaf(rng, (2, 3, 6, 6), "x"), _leaf(rng, (4, 3, 3, 3), "w"), _leaf(rng, (4,), "b")],
         lambda x, w, b: ad.conv2d(x, w, b, stride=1, pad=1))
    case("conv2d_stride2", [_leaf(rng, (2, 2, 7, 7), "x"), _leaf(rng, (3, 2, 3, 3), "w"), _leaf(rng, (3,), "b")],
         lambda x, w, b: ad.conv2d(x, w, b, stride=2, pad=0))
    case("maxpool", [_leaf(rng, (2, 3, 6, 6), "x")], lambda x: ad.maxpool(x, 2, 2))
    case("adaptive_maxpool_3x3", [_leaf(rng, (2, 3, 5, 7), "x")], ad.adaptive_maxpool_3x3)
    labels = np.array([0, 3, MISSING, 1, 4])
    case("softmax_cross_entropy", [_leaf(rng, (5, 5), "logits")],
         lambda z: ad.softmax_cross_entropy(z, labels))
    # margin large enough that every triplet is active: the hinge is exercised away from its kink
    case("triplet_loss", [_leaf(rng, (4, 6), "a"), _leaf(rng, (4, 6), "b"), _leaf(rng, (4, 6), "c")],
         lambda a, b, c: triplet_loss(a, b, c, RankingConfig(margin=50.0)))
    return cases


def check_primitives(seed: int = 0, epsilon: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 1])
    out = []
    for name, (loss, leaves) in primitive_cases(rng).items():
        t0 = time.perf_counter()
        rows = finite_difference_errors(loss, leaves, epsilon, coords_per_param=None, rng=rng)
        out.append(_summarize(name, rows, time.perf_counter() - t0))
    return out


def check_full_loss(seed: int = 0, config: SubNetworkConfig | None = None,
                    schema: AttributeSchema = DEFAULT_SCHEMA, spec=("fc1", "c4", "c5"),
                    triplets: int = 2, coords_per_param: int = 6, epsilon: float = 1e-5,
                    input_hw=(16, 16)) -> CheckResult:
    """Attribute + ranking loss through both sub-networks, sampled coordinates of every parameter.

    The margin is set just above the largest ``dist(a,c) - dist(a,b)`` at the
    evaluation point so every triplet is active, while keeping the loss small:
    central-difference roundoff grows with the loss magnitude.
    """
    config = config or SubNetworkConfig()
    rng = np.random.default_rng([seed, 2])
    dual = build_dual_network(config, schema, seed, input_hw=input_hw)
    n = 3 * triplets
    images = rng.uniform(0.0, 1.0, size=(n, config.in_channels, *input_hw))
    domains = [Domain.OFFLINE] * triplets + [Domain.ONLINE] * (2 * triplets)
    labels = np.stack([rng.integers(0, card, size=n) for _, card in schema.categories], axis=1)
    labels[0, 0] = MISSING
    idx = np.arange(triplets)
    trip = np.stack([idx, idx + triplets, idx + 2 * triplets], axis=1)
    with ad.no_grad():
        routed = route_batch(dual, images, domains)
        f_on = ranking_feature(routed.outputs[Domain.ONLINE], spec).data
        f_off = ranking_feature(routed.outputs[Domain.OFFLINE], spec).data
    gap = np.linalg.norm(f_off - f_on[triplets:], axis=1) - np.linalg.norm(f_off - f_on[:triplets], axis=1)
    cfg = RankingConfig(margin=max(float(gap.max()), 0.0) + 1.0, feature_spec=tuple(spec))

    def loss():
        return loss_terms(route_batch(dual, images, domains), labels, trip, cfg, schema.names).total

    t0 = time.perf_counter()
    params = list(dual.parameters().values())
    rows = finite_difference_errors(loss, params, epsilon, coords_per_param, rng)
    return _summarize("darn_total_loss", rows, time.perf_counter() - t0)


def run_all(seed: int = 0, coords_per_param: int = 6) -> list[CheckResult]:
    return check_primitives(seed) + [check_full_loss(seed, coords_per_param=coords_per_param)]
