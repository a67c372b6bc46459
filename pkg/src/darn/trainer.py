"""Triplet sampling, batch assembly, SGD with momentum and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DatasetIOError, NumericError, SamplingError
from .losses import RankingConfig, loss_terms
from .network import DualNetwork, route_batch, save_checkpoint
from .schema import Domain
from .synth import Dataset, Sample

log = logging.getLogger(__name__)

LOSS_LOG_HEADER = ("epoch", "step", "total", "attr", "rank")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_triplets: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 keeps only the final checkpoint

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_triplets < 1:
            raise ConfigError(f"batch_triplets must be >= 1, got {self.batch_triplets}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


@dataclass(frozen=True)
class Triplet:
    anchor: Sample
    positive: Sample
    negative: Sample

    def __post_init__(self):
        if self.anchor.domain is not Domain.OFFLINE:
            raise ContractError("triplet anchor must be an OFFLINE sample")
        if self.positive.domain is not Domain.ONLINE or self.negative.domain is not Domain.ONLINE:
            raise ContractError("triplet positive and negative must be ONLINE samples")
        if self.anchor.item_id != self.positive.item_id:
            raise ContractError(f"positive {self.positive.item_id} does not match anchor {self.anchor.item_id}")
        if self.negative.item_id == self.anchor.item_id:
            raise ContractError(f"negative shares the anchor id {self.anchor.item_id}")


def sample_triplets(pairs: Sequence[tuple[Sample, Sample]], online_pool: Sequence[Sample],
                    epoch: int, seed: int) -> list[Triplet]:
    """One triplet per (offline, online) pair with a uniformly drawn foreign negative.

    Negatives are rejection-resampled until their id differs from the pair's.
    The stream is keyed by ``(seed, epoch)``: negatives change between epochs
    while the run as a whole stays reproducible.
    """
    if len({s.item_id for s in online_pool}) < 2:
        raise SamplingError("online pool needs at least 2 distinct item ids to draw negatives")
    rng = np.random.default_rng([seed, epoch])
    n = len(online_pool)
    out = []
    for offline, online in pairs:
        while True:
            neg = online_pool[int(rng.integers(n))]
            if neg.item_id != offline.item_id:
                break
        out.append(Triplet(offline, online, neg))
    return out


class Batch(NamedTuple):
    images: np.ndarray
    domains: list[Domain]
    labels: np.ndarray
    triplets: np.ndarray  # [T, 3] batch positions (anchor, positive, negative)


def assemble_batch(triplets: Sequence[Triplet]) -> Batch:
    """Anchors first, then positives, then negatives."""
    samples = [t.anchor for t in triplets] + [t.positive for t in triplets] + [t.negative for t in triplets]
    t = len(triplets)
    idx = np.arange(t)
    return Batch(
        np.stack([s.image for s in samples]),
        [s.domain for s in samples],
        np.stack([s.attributes for s in samples]),
        np.stack([idx, idx + t, idx + 2 * t], axis=1),
    )


class SGD:
    """``v <- momentum * v - lr * g``; ``w <- w + v``."""

    def __init__(self, params: dict, learning_rate: float, momentum: float = 0.0,
                 velocity: dict[str, np.ndarray] | None = None):
        self.params = params
        self.lr = learning_rate
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
        if velocity:
            for k, v in velocity.items():
                self.velocity[k] = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.momentum * self.velocity[k] - self.lr * g
            self.velocity[k] = v
            p.data = p.data + v

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.velocity.items()}


class StepLoss(NamedTuple):
    total: float
    attr: float
    rank: float


def compute_loss(dual: DualNetwork, triplets: Sequence[Triplet], rank_cfg: RankingConfig):
    batch = assemble_batch(triplets)
    routed = route_batch(dual, batch.images, batch.domains)
    return loss_terms(routed, batch.labels, batch.triplets, rank_cfg, dual.schema.names)


def train_step(dual: DualNetwork, triplets: Sequence[Triplet], cfg: TrainConfig,
               rank_cfg: RankingConfig, optimizer: SGD | None = None) -> tuple[StepLoss, DualNetwork]:
    """One forward/backward/update; returns the loss measured before the update."""
    if len(triplets) == 0:
        raise ContractError("train_step needs a non-empty batch")
    if optimizer is None:
        optimizer = SGD(dual.parameters(), cfg.learning_rate, cfg.momentum)
    optimizer.zero_grad()
    terms = compute_loss(dual, triplets, rank_cfg)
    values = StepLoss(terms.total.item(), terms.attr.item(), terms.rank.item())
    if not np.isfinite(values.total):
        bad = [name for name, v in (("attr", values.attr), ("rank", values.rank)) if not np.isfinite(v)]
        raise NumericError(f"non-finite loss in term(s) {bad or ['total']}: {values}")
    ad.backward(terms.total)
    optimizer.step()
    return values, dual


@dataclass
class TrainResult:
    checkpoint: Path | None
    steps: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    optimizer: SGD | None = None


def epoch_batches(dataset: Dataset, epoch: int, cfg: TrainConfig) -> list[list[Triplet]]:
    triplets = sample_triplets(dataset.pairs(), dataset.online_samples(), epoch, cfg.seed)
    order = np.random.default_rng([cfg.seed, epoch, 1]).permutation(len(triplets))
    triplets = [triplets[i] for i in order]
    b = cfg.batch_triplets
    return [triplets[i : i + b] for i in range(0, len(triplets), b)]


def train(dataset: Dataset, dual: DualNetwork, cfg: TrainConfig, rank_cfg: RankingConfig,
          out_dir=None, extra: dict | None = None, optimizer: SGD | None = None,
          start_epoch: int = 0) -> TrainResult:
    """Run ``cfg.epochs`` epochs; writes ``loss_log.csv`` and checkpoints under ``out_dir``."""
    cfg.validate()
    rank_cfg.validate()
    optimizer = optimizer or SGD(dual.parameters(), cfg.learning_rate, cfg.momentum)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DatasetIOError(f"{out}: {exc.strerror or exc}") from exc
    header_extra = {"train": asdict(cfg), "ranking": asdict(rank_cfg), **(extra or {})}
    result = TrainResult(None, optimizer=optimizer)
    step = 0
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        losses = []
        for batch in epoch_batches(dataset, epoch, cfg):
            values, _ = train_step(dual, batch, cfg, rank_cfg, optimizer)
            result.steps.append((epoch, step, *values))
            losses.append(values.total)
            step += 1
        result.epoch_losses.append(float(np.mean(losses)) if losses else 0.0)
        log.info("epoch %d loss %.5f", epoch, result.epoch_losses[-1])
        if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_epoch{epoch + 1}.darn", dual, optimizer.state(),
                            {**header_extra, "epoch": epoch + 1})
    if out is not None:
        write_loss_log(out / "loss_log.csv", result.steps)
        result.checkpoint = out / "checkpoint.darn"
        save_checkpoint(result.checkpoint, dual, optimizer.state(),
                        {**header_extra, "epoch": start_epoch + cfg.epochs})
    return result


def write_loss_log(path, rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOSS_LOG_HEADER)
            for epoch, step, total, attr, rank in rows:
                w.writerow([epoch, step, repr(total), repr(attr), repr(rank)])
    except OSError as exc:
        raise DatasetIOError(f"{path}: {exc.strerror or exc}") from exc
