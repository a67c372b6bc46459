"""Exact Euclidean gallery search with deterministic tie-breaking."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import MISSING
from .errors import BuildError, ContractError, DatasetIOError, DimensionError
from .features import FeatureVector, load_features, save_features

log = logging.getLogger(__name__)

TIMING_EVERY = 1000


@dataclass
class RankedList:
    query_id: str
    entries: list[tuple[str, float]] = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return [g for g, _ in self.entries]

    @property
    def distances(self) -> list[float]:
        return [d for _, d in self.entries]


class Gallery:
    """Immutable N x d feature matrix keyed by unique ids."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray,
                 attributes: Mapping[str, Sequence[int]] | None = None):
        ids = [str(i) for i in ids]
        matrix = np.ascontiguousarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise BuildError(f"gallery matrix must be 2-d, got shape {matrix.shape}")
        if matrix.shape[0] != len(ids):
            raise BuildError(f"{len(ids)} ids for {matrix.shape[0]} rows")
        seen = set()
        for i in ids:
            if i in seen:
                raise BuildError(f"duplicate gallery id {i!r}")
            seen.add(i)
        self.ids = ids
        self.matrix = matrix
        self.matrix.setflags(write=False)
        self.attributes = {k: np.asarray(v, dtype=np.int64) for k, v in (attributes or {}).items()}
        # rank of each row's id in ascending id order; secondary sort key
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[sorted(range(len(ids)), key=ids.__getitem__)] = np.arange(len(ids))

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, ids: Sequence[str]) -> "Gallery":
        pos = {g: i for i, g in enumerate(self.ids)}
        rows = [pos[i] for i in ids]
        return Gallery([self.ids[r] for r in rows], self.matrix[rows],
                       {i: self.attributes[i] for i in ids if i in self.attributes})


def build(features: Sequence[FeatureVector], attrs: Mapping[str, Sequence[int]] | None = None,
          dim: int | None = None) -> Gallery:
    if not features:
        return Gallery([], np.zeros((0, dim or 0)), attrs)
    d = features[0].values.shape[0] if dim is None else dim
    for f in features:
        if f.values.ndim != 1 or f.values.shape[0] != d:
            raise BuildError(f"feature {f.item_id!r} has dimension {f.values.shape}, expected {d}")
    return Gallery([f.item_id for f in features], np.stack([f.values for f in features]), attrs)


def query(gallery: Gallery, q, k: int, query_id: str = "") -> RankedList:
    """Top ``min(k, N)`` rows by Euclidean distance; equal distances rank by ascending id."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if len(gallery) == 0:
        return RankedList(query_id, [])
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != gallery.dim:
        raise DimensionError(f"query has shape {q.shape}, gallery dimension is {gallery.dim}")
    diff = gallery.matrix - q
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.lexsort((gallery._id_rank, d2))[: min(k, len(gallery))]
    return RankedList(query_id, [(gallery.ids[i], float(np.sqrt(d2[i]))) for i in order])


def batch_query(gallery: Gallery, queries, k: int, query_ids: Sequence[str] | None = None,
                workers: int = 1) -> list[RankedList]:
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim == 1:
        queries = queries.reshape(1, -1)
    ids = list(query_ids) if query_ids is not None else [str(i) for i in range(len(queries))]
    if len(ids) != len(queries):
        raise ContractError(f"{len(ids)} query ids for {len(queries)} queries")

    def run(i):
        return query(gallery, queries[i], k, ids[i])

    start = time.perf_counter()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(len(queries))))
    else:
        results = []
        for i in range(len(queries)):
            results.append(run(i))
            if (i + 1) % TIMING_EVERY == 0:
                log.info("%d queries in %.3fs", i + 1, time.perf_counter() - start)
    log.debug("batch of %d queries took %.3fs", len(queries), time.perf_counter() - start)
    return results


def write_results_csv(path, results: Sequence[RankedList]) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query_id", "rank", "gallery_id", "distance"])
            for r in results:
                for rank, (gid, dist) in enumerate(r.entries, start=1):
                    w.writerow([r.query_id, rank, gid, repr(dist)])
    except OSError as exc:
        raise DatasetIOError(f"{path}: {exc.strerror or exc}") from exc


# persistence: feature file + <prefix>.attrs.json ---------------------------------


def save_attributes(path, attributes: Mapping[str, Sequence[int]], schema=None) -> None:
    payload = {
        "schema": schema.to_dict() if schema is not None else None,
        "attributes": {k: [None if v == MISSING else int(v) for v in vals] for k, vals in attributes.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_attributes(path) -> dict[str, np.ndarray]:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetIOError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise DatasetIOError(f"{path}: corrupt attribute file ({exc})") from exc
    return {
        k: np.array([MISSING if v is None else v for v in vals], dtype=np.int64)
        for k, vals in payload["attributes"].items()
    }


def save_gallery(prefix, gallery: Gallery, schema=None) -> None:
    prefix = Path(prefix)
    save_features(prefix, gallery.ids, gallery.matrix)
    save_attributes(prefix.with_name(prefix.name + ".attrs.json"), gallery.attributes, schema)


def load_gallery(prefix) -> Gallery:
    prefix = Path(prefix)
    ids, matrix = load_features(prefix)
    attrs_path = prefix.with_name(prefix.name + ".attrs.json")
    attrs = load_attributes(attrs_path) if attrs_path.exists() else {}
    return Gallery(ids, matrix, attrs)
