"""End-to-end glue: train a variant, extract features, index, evaluate, sweep.

The ablation ladder mirrors the baseline names used for this model family:
untrained features, AN (attributes only, one shared network), ARN (attributes
plus ranking, one shared network) and the dual network with FC1, FC1+C5 and
FC1+C4+C5 ranking features.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .evaluation import EvalReport, evaluate_results, top_k_accuracy
from .features import extract_matrix, pca_fit, pca_transform
from .losses import RankingConfig, normalize_spec
from .network import DualNetwork, SubNetworkConfig, build_dual_network, load_checkpoint
from .retrieval import Gallery, batch_query
from .synth import Dataset, SynthConfig, generate_in_memory, split
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

DEFAULT_K = (1, 5, 10, 20, 30, 40, 50)
DEFAULT_GALLERY_SIZES = (100, 200, 300, 400, 500)


@dataclass(frozen=True)
class Variant:
    name: str
    feature_spec: tuple[str, ...] = ("fc1",)
    shared: bool = False
    attr_weight: float = 1.0
    rank_weight: float = 1.0
    trained: bool = True
    checkpoint: str | None = None


LADDER = (
    Variant("untrained", ("fc1", "c4", "c5"), shared=True, trained=False),
    Variant("AN", ("fc1",), shared=True, rank_weight=0.0),
    Variant("ARN", ("fc1",), shared=True),
    Variant("DARN", ("fc1",)),
    Variant("DARN+C5", ("fc1", "c5")),
    Variant("DARN+C4-5", ("fc1", "c4", "c5")),
)


def variant_by_name(name: str) -> Variant:
    for v in LADDER:
        if v.name.lower() == name.lower():
            return v
    raise ConfigError(f"unknown variant {name!r}; choose from {[v.name for v in LADDER]}")


@dataclass(frozen=True)
class BenchmarkConfig:
    synth: SynthConfig = SynthConfig()
    net: SubNetworkConfig = SubNetworkConfig()
    train: TrainConfig = TrainConfig(epochs=60, learning_rate=0.005)
    margin: float = 0.3
    distance: str = "euclidean"
    train_frac: float = 0.8
    split_seed: int = 0
    pca_dim: int = 64
    k_values: tuple[int, ...] = DEFAULT_K
    gallery_sizes: tuple[int, ...] = DEFAULT_GALLERY_SIZES
    sweep_k: int = 20
    mirror_init: bool = True
    # dual variants spend their first epochs as one shared, attribute-only network,
    # then both sub-networks start from those weights (stand-in for a common
    # pre-trained model). Counted inside train.epochs, so every variant gets the same budget.
    shared_warmup_epochs: int = 45

    def validate(self) -> None:
        if not 0 <= self.shared_warmup_epochs <= self.train.epochs:
            raise ConfigError(f"shared_warmup_epochs must lie in [0, train.epochs={self.train.epochs}], "
                              f"got {self.shared_warmup_epochs}")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError(f"train_frac must lie in (0, 1), got {self.train_frac}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"] = self.synth.to_dict()
        return d


@dataclass
class QuerySet:
    """Gallery of every online rendering plus held-out offline queries."""

    gallery_samples: list
    query_samples: list
    query_ids: list[str]
    truth: dict[str, set]
    query_attrs: dict[str, np.ndarray]
    gallery_attrs: dict[str, np.ndarray]
    test_ids: list[str]


def make_query_set(dataset: Dataset, test: Dataset) -> QuerySet:
    qs, qids, truth, qattrs = [], [], {}, {}
    for it in test.items:
        for k, s in enumerate(it.offline):
            qid = f"{it.item_id}/offline{k}"
            qs.append(s)
            qids.append(qid)
            truth[qid] = {it.item_id}
            qattrs[qid] = it.attributes
    return QuerySet(
        dataset.online_samples(), qs, qids, truth, qattrs,
        {it.item_id: it.attributes for it in dataset.items}, test.item_ids,
    )


@dataclass
class VariantResult:
    name: str
    report: EvalReport
    sweep: dict[int, float]
    train_seconds: float = 0.0
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def increase_ratio(self) -> float:
        """Top-k accuracy gain from the largest to the smallest gallery, relative to the largest."""
        sizes = sorted(self.sweep)
        small, large = self.sweep[sizes[0]], self.sweep[sizes[-1]]
        return small / large - 1.0 if large > 0 else float("inf")

    @property
    def relative_drop(self) -> float:
        sizes = sorted(self.sweep)
        small, large = self.sweep[sizes[0]], self.sweep[sizes[-1]]
        return 1.0 - large / small if small > 0 else 0.0


def index_features(dual: DualNetwork, qset: QuerySet, spec, pca_dim: int):
    """PCA is fit on gallery (online) features and applied to both sides."""
    raw_g, _ = extract_matrix(dual, qset.gallery_samples, spec)
    raw_q, _ = extract_matrix(dual, qset.query_samples, spec)
    d = min(pca_dim, raw_g.shape[0] - 1, raw_g.shape[1])
    pca = pca_fit(raw_g, d)
    gallery = Gallery([s.item_id for s in qset.gallery_samples], pca_transform(pca, raw_g), qset.gallery_attrs)
    return gallery, pca_transform(pca, raw_q), pca


def gallery_size_sweep(gallery: Gallery, queries: np.ndarray, qset: QuerySet,
                       sizes: Sequence[int], k: int, seed: int) -> dict[int, float]:
    """Top-k accuracy on nested galleries: the query items plus a seeded prefix of distractors."""
    test = set(qset.test_ids)
    distractors = [g for g in gallery.ids if g not in test]
    order = np.random.default_rng([seed, 7]).permutation(len(distractors))
    distractors = [distractors[i] for i in order]
    out = {}
    for size in sizes:
        extra = size - len(qset.test_ids)
        if extra < 0 or extra > len(distractors):
            raise ConfigError(f"gallery size {size} incompatible with {len(qset.test_ids)} query items "
                              f"and {len(distractors)} distractors")
        sub = gallery.subset(list(qset.test_ids) + distractors[:extra])
        res = batch_query(sub, queries, k, qset.query_ids)
        out[size] = top_k_accuracy(res, qset.truth, k)
    return out


def evaluate_dual(dual: DualNetwork, qset: QuerySet, spec, cfg: BenchmarkConfig, seed: int = 0,
                  config_echo: dict | None = None) -> tuple[EvalReport, dict[int, float]]:
    gallery, queries, _ = index_features(dual, qset, spec, cfg.pca_dim)
    results = batch_query(gallery, queries, max(cfg.k_values), qset.query_ids)
    report = evaluate_results(results, qset.truth, qset.query_attrs, qset.gallery_attrs,
                              cfg.k_values, config_echo, len(gallery))
    sizes = [s for s in cfg.gallery_sizes if s <= len(gallery)]
    sweep = gallery_size_sweep(gallery, queries, qset, sizes, cfg.sweep_k, seed) if sizes else {}
    return report, sweep


def warm_start(dataset: Dataset, train_set: Dataset, cfg: BenchmarkConfig, seed: int,
               cache: dict | None = None, out_dir=None) -> dict[str, np.ndarray]:
    """Shop-network weights after ``shared_warmup_epochs`` of shared attribute-only training."""
    if cache is not None and seed in cache:
        return cache[seed]
    c, h, w = cfg.synth.image_size
    shared = build_dual_network(cfg.net, dataset.schema, seed, input_hw=(h, w), shared=True)
    rank_cfg = RankingConfig(cfg.margin, ("fc1",), cfg.distance, 1.0, 0.0)
    train(train_set, shared, replace(cfg.train, epochs=cfg.shared_warmup_epochs, seed=seed), rank_cfg,
          out_dir, extra={"variant": "warmup"})
    weights = {k: p.data.copy() for k, p in shared.shop_net.params.items()}
    if cache is not None:
        cache[seed] = weights
    return weights


def train_variant(variant: Variant, dataset: Dataset, train_set: Dataset, cfg: BenchmarkConfig,
                  seed: int, out_dir=None, warm_cache: dict | None = None) -> tuple[DualNetwork, list[float]]:
    """Build (or load) the variant's network and train it for ``cfg.train.epochs`` in total."""
    if variant.checkpoint is not None:
        path = Path(variant.checkpoint)
        if not path.exists():
            raise ConfigError(f"variant {variant.name}: checkpoint {path} does not exist")
        dual, _, _ = load_checkpoint(path)
        return dual, []
    spec = normalize_spec(variant.feature_spec)
    c, h, w = cfg.synth.image_size
    dual = build_dual_network(cfg.net, dataset.schema, seed, input_hw=(h, w), shared=variant.shared)
    if not variant.trained:
        return dual, []
    vdir = Path(out_dir) if out_dir is not None else None
    start = 0
    if not variant.shared and cfg.shared_warmup_epochs > 0:
        weights = warm_start(dataset, train_set, cfg, seed, warm_cache,
                             vdir / "warmup" if vdir is not None and warm_cache is None else None)
        for k, v in weights.items():
            dual.shop_net.params[k].data = v.copy()
        dual.mirror_init()
        start = cfg.shared_warmup_epochs
    elif cfg.mirror_init:
        dual.mirror_init()
    rank_cfg = RankingConfig(cfg.margin, spec, cfg.distance, variant.attr_weight, variant.rank_weight)
    tcfg = replace(cfg.train, seed=seed, epochs=cfg.train.epochs - start)
    result = train(train_set, dual, tcfg, rank_cfg, vdir, extra={"variant": variant.name}, start_epoch=start)
    return dual, result.epoch_losses


def run_variant(variant: Variant, dataset: Dataset, train_set: Dataset, qset: QuerySet,
                cfg: BenchmarkConfig, seed: int, out_dir=None, warm_cache: dict | None = None) -> VariantResult:
    spec = normalize_spec(variant.feature_spec)
    t0 = time.perf_counter()
    vdir = Path(out_dir) / f"{variant.name}_seed{seed}" if out_dir is not None else None
    dual, losses = train_variant(variant, dataset, train_set, cfg, seed, vdir, warm_cache)
    elapsed = time.perf_counter() - t0
    echo = {"variant": asdict(variant), "seed": seed}
    report, sweep = evaluate_dual(dual, qset, spec, cfg, seed, echo)
    log.info("%s seed %d: top-%d %.3f (%.1fs)", variant.name, seed, cfg.sweep_k,
             report.top_k_curve.get(cfg.sweep_k, float("nan")), elapsed)
    return VariantResult(variant.name, report, sweep, elapsed, losses)


@dataclass
class AblationTable:
    rows: dict[str, list[VariantResult]]  # variant name -> one result per seed

    def mean_top_k(self, name: str, k: int) -> float:
        return float(np.mean([r.report.top_k_curve[k] for r in self.rows[name]]))

    def mean_ndcg(self, name: str, k: int) -> float:
        return float(np.mean([r.report.ndcg_at_k[k] for r in self.rows[name]]))

    def mean_sweep(self, name: str) -> dict[int, float]:
        sizes = sorted(self.rows[name][0].sweep)
        return {s: float(np.mean([r.sweep[s] for r in self.rows[name]])) for s in sizes}

    def increase_ratio(self, name: str) -> float:
        sweep = self.mean_sweep(name)
        sizes = sorted(sweep)
        return sweep[sizes[0]] / sweep[sizes[-1]] - 1.0

    def to_dict(self) -> dict:
        out = {}
        for name, results in self.rows.items():
            k_values = sorted(results[0].report.top_k_curve)
            out[name] = {
                "top_k": {str(k): self.mean_top_k(name, k) for k in k_values},
                "ndcg": {str(k): self.mean_ndcg(name, k) for k in k_values},
                "sweep": {str(s): v for s, v in self.mean_sweep(name).items()},
                "per_seed_top_k": [{str(k): v for k, v in sorted(r.report.top_k_curve.items())} for r in results],
            }
        return out


def run_ablation(dataset: Dataset, variants: Sequence[Variant], cfg: BenchmarkConfig,
                 seeds: Sequence[int] = (0,), out_dir=None) -> AblationTable:
    """Train/evaluate every variant under every seed on one fixed dataset split."""
    cfg.validate()
    for v in variants:
        if v.checkpoint is not None and not Path(v.checkpoint).exists():
            raise ConfigError(f"variant {v.name}: checkpoint {v.checkpoint} does not exist")
    train_set, test_set = split(dataset, cfg.train_frac, cfg.split_seed)
    qset = make_query_set(dataset, test_set)
    rows: dict[str, list[VariantResult]] = {v.name: [] for v in variants}
    warm: dict = {}
    for seed in seeds:
        for v in variants:
            rows[v.name].append(run_variant(v, dataset, train_set, qset, cfg, seed, out_dir, warm))
        warm.clear()
    return AblationTable(rows)


def default_dataset(cfg: BenchmarkConfig) -> Dataset:
    return generate_in_memory(cfg.synth)
