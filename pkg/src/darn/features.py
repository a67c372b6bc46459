"""Retrieval features: domain-routed extraction, per-layer L2 normalisation, PCA."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DatasetIOError, DimensionError
from .losses import feature_segments, normalize_spec
from .network import DualNetwork
from .schema import Domain
from .synth import Sample
from .tnsr import load_bundle, load_tensor, save_bundle, save_tensor

log = logging.getLogger(__name__)


@dataclass
class FeatureVector:
    item_id: str
    domain: Domain
    values: np.ndarray
    zero_segments: tuple[bool, ...] = ()


def l2_normalize_per_layer(segments: Sequence[np.ndarray]) -> tuple[np.ndarray, list[bool]]:
    """Scale each segment to unit norm and concatenate.

    All-zero segments stay zero; the returned flags mark them.
    """
    parts, flags = [], []
    for seg in segments:
        seg = np.asarray(seg, dtype=np.float64)
        norm = np.linalg.norm(seg)
        flags.append(norm == 0)
        parts.append(seg / norm if norm > 0 else np.zeros_like(seg))
    return np.concatenate(parts) if parts else np.zeros(0), flags


def normalize_rows_per_segment(matrix: np.ndarray, sizes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`l2_normalize_per_layer` on a ``[N, sum(sizes)]`` matrix."""
    out = np.array(matrix, dtype=np.float64, copy=True)
    flags = np.zeros((out.shape[0], len(sizes)), dtype=bool)
    start = 0
    for j, size in enumerate(sizes):
        block = out[:, start : start + size]
        norms = np.sqrt(np.einsum("ij,ij->i", block, block))
        flags[:, j] = norms == 0
        block /= np.where(norms > 0, norms, 1.0)[:, None]
        start += size
    return out, flags


@dataclass
class PcaModel:
    mean: np.ndarray  # [D]
    basis: np.ndarray  # [D, d], orthonormal columns
    variances: np.ndarray  # [d], non-increasing

    @property
    def d(self) -> int:
        return self.basis.shape[1]

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    def transform(self, v: np.ndarray) -> np.ndarray:
        return pca_transform(self, v)


def pca_fit(data: np.ndarray, d: int) -> PcaModel:
    """Principal axes of mean-centred data via a thin SVD.

    Variances use the unbiased (N-1) covariance.  Each basis column is signed so
    that its largest-magnitude coordinate is positive.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"pca_fit expects an N x D matrix, got shape {x.shape}")
    n, dim = x.shape
    if not 1 <= d <= min(n - 1, dim):
        raise ConfigError(f"PCA target dimension {d} must lie in [1, min(N-1, D)] = [1, {min(n - 1, dim)}]")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    basis = vt[:d].T.copy()
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.where(basis[pivots, np.arange(d)] < 0, -1.0, 1.0)
    basis *= signs
    variances = (s[:d] ** 2) / (n - 1)
    return PcaModel(mean, basis, variances)


def pca_transform(model: PcaModel, v: np.ndarray) -> np.ndarray:
    """``basis.T @ (v - mean)`` for a vector or each row of a matrix."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.input_dim:
        raise DimensionError(f"PCA expects dimension {model.input_dim}, got {v.shape[-1]}")
    return (v - model.mean) @ model.basis


def save_pca(path, model: PcaModel) -> None:
    save_bundle(path, {"format": "darn-pca", "d": model.d},
                {"mean": model.mean, "basis": model.basis, "variances": model.variances})


def load_pca(path) -> PcaModel:
    header, t = load_bundle(path)
    if header.get("format") != "darn-pca":
        raise DatasetIOError(f"{path}: not a PCA model")
    return PcaModel(t["mean"], t["basis"], t["variances"])


def segment_sizes(dual: DualNetwork, spec: Sequence[str]) -> list[int]:
    spec = normalize_spec(spec)
    stages = dual.config.conv_stages
    sizes = [dual.config.fc1_dim]
    if "c4" in spec:
        sizes.append(9 * stages[-2].filters)
    if "c5" in spec:
        sizes.append(9 * stages[-1].filters)
    return sizes


def raw_features(dual: DualNetwork, images: np.ndarray, domain, spec: Sequence[str],
                 batch_size: int = 128) -> np.ndarray:
    """Concatenated (unnormalised) ranking features from the domain's sub-network."""
    net = dual.net_for(domain)
    chunks = []
    with ad.no_grad():
        for i in range(0, images.shape[0], batch_size):
            segs = feature_segments(net.forward(images[i : i + batch_size]), spec)
            chunks.append(np.concatenate([s.data for s in segs], axis=1))
    if not chunks:
        return np.zeros((0, sum(segment_sizes(dual, spec))))
    return np.concatenate(chunks, axis=0)


def extract_matrix(dual: DualNetwork, samples: Sequence[Sample], spec: Sequence[str],
                   pca: PcaModel | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Features for ``samples`` in input order: ``(matrix, zero-segment flags)``."""
    sizes = segment_sizes(dual, spec)
    if pca is not None and pca.input_dim != sum(sizes):
        raise ConfigError(f"PCA was fit on {pca.input_dim}-d features but spec {list(spec)} gives {sum(sizes)}")
    domains = [Domain.parse(s.domain) for s in samples]
    matrix = np.zeros((len(samples), sum(sizes)))
    for domain in (Domain.ONLINE, Domain.OFFLINE):
        idx = [i for i, d in enumerate(domains) if d is domain]
        if idx:
            images = np.stack([samples[i].image for i in idx])
            matrix[idx] = raw_features(dual, images, domain, spec)
    matrix, flags = normalize_rows_per_segment(matrix, sizes)
    if flags.any():
        log.warning("%d feature segments were all-zero and left unnormalised", int(flags.sum()))
    if pca is not None:
        matrix = pca_transform(pca, matrix)
    return matrix, flags


def extract(dual: DualNetwork, samples: Sequence[Sample], spec: Sequence[str],
            pca: PcaModel | None = None) -> list[FeatureVector]:
    matrix, flags = extract_matrix(dual, samples, spec, pca)
    return [
        FeatureVector(s.item_id, Domain.parse(s.domain), matrix[i], tuple(bool(f) for f in flags[i]))
        for i, s in enumerate(samples)
    ]


# feature files: <prefix>.tnsr + <prefix>.ids.txt -------------------------------


def save_features(prefix, ids: Sequence[str], matrix: np.ndarray) -> None:
    prefix = Path(prefix)
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != len(ids):
        raise DimensionError(f"{len(ids)} ids for feature matrix of shape {matrix.shape}")
    save_tensor(prefix.with_name(prefix.name + ".tnsr"), matrix)
    with open(prefix.with_name(prefix.name + ".ids.txt"), "w", encoding="utf-8") as fh:
        for i in ids:
            fh.write(f"{i}\n")


def load_features(prefix) -> tuple[list[str], np.ndarray]:
    prefix = Path(prefix)
    matrix = load_tensor(prefix.with_name(prefix.name + ".tnsr"))
    ids_path = prefix.with_name(prefix.name + ".ids.txt")
    try:
        with open(ids_path, encoding="utf-8") as fh:
            ids = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    except FileNotFoundError as exc:
        raise DatasetIOError(f"{ids_path}: file not found") from exc
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.shape[0] != len(ids):
        raise DatasetIOError(f"{ids_path}: {len(ids)} ids for {matrix.shape[0]} feature rows")
    return ids, matrix
