"""Seeded paired shop/street image generator and the on-disk dataset format.

Every item gets one attribute value per schema category.  The clean ONLINE
rendering paints each category into its own horizontal band of a centred
garment (value -> colour + texture) and overlays a low-resolution per-item
print so that items sharing attributes stay distinguishable.  OFFLINE
renderings of the same item apply the domain-shift knobs: translation,
brightness, colour cast, background clutter and occlusion.

Layout on disk::

    manifest.json
    images/<item_id>_online.{tnsr,ppm}
    images/<item_id>_offline<k>.{tnsr,ppm}

TNSR files are authoritative; PPM (P6) copies are for eyeballing.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import MISSING
from .errors import ConfigError, DatasetIOError, ValidationError
from .schema import DEFAULT_SCHEMA, AttributeSchema, Domain
from .tnsr import load_tensor, save_tensor

MANIFEST_FORMAT = "darn-synth"
MANIFEST_VERSION = 1
BACKGROUND = 0.85
MIN_BAND_ROWS = 2


@dataclass(frozen=True)
class SynthConfig:
    item_count: int = 500
    schema: AttributeSchema = DEFAULT_SCHEMA
    image_size: tuple[int, int, int] = (3, 16, 16)
    brightness_jitter: float = 0.25
    color_cast: float = 0.1
    clutter_density: float = 0.5
    occlusion_prob: float = 0.5
    max_shift: int = 2
    offline_per_item: int = 1
    missing_fraction: float = 0.1
    print_strength: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        c, h, w = self.image_size
        if self.item_count < 1:
            raise ConfigError(f"item_count must be >= 1, got {self.item_count}")
        if c != 3:
            raise ConfigError(f"image_size: only 3-channel images are supported, got {c}")
        if self.brightness_jitter < 0 or self.color_cast < 0 or self.print_strength < 0:
            raise ConfigError("brightness_jitter, color_cast and print_strength must be >= 0")
        for name in ("clutter_density", "occlusion_prob", "missing_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if not 0 <= self.max_shift < min(h, w) / 4:
            raise ConfigError(f"max_shift must satisfy 0 <= s < min(H,W)/4 = {min(h, w) / 4}, got {self.max_shift}")
        if self.offline_per_item < 1:
            raise ConfigError("offline_per_item must be >= 1")
        top, bottom, _, _ = garment_box(h, w)
        if len(self.schema) * MIN_BAND_ROWS > bottom - top:
            raise ConfigError(
                f"schema has {len(self.schema)} categories but a {h}x{w} image only fits "
                f"{(bottom - top) // MIN_BAND_ROWS} attribute bands"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = self.schema.to_dict()
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "schema" in d:
            d["schema"] = AttributeSchema.from_dict(d["schema"])
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass
class Sample:
    item_id: str
    domain: Domain
    image: np.ndarray  # [C,H,W] in [0,1]
    attributes: np.ndarray  # per-category value index or MISSING


@dataclass
class Item:
    item_id: str
    attributes: np.ndarray
    online: Sample
    offline: list[Sample] = field(default_factory=list)


@dataclass
class Dataset:
    schema: AttributeSchema
    items: list[Item]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def item_ids(self) -> list[str]:
        return [it.item_id for it in self.items]

    def online_samples(self) -> list[Sample]:
        return [it.online for it in self.items]

    def offline_samples(self) -> list[Sample]:
        return [s for it in self.items for s in it.offline]

    def pairs(self) -> list[tuple[Sample, Sample]]:
        """(offline, online) pairs, one per offline rendering."""
        return [(s, it.online) for it in self.items for s in it.offline]

    def subset(self, item_ids: Sequence[str]) -> "Dataset":
        by_id = {it.item_id: it for it in self.items}
        return Dataset(self.schema, [by_id[i] for i in item_ids])


# rendering -------------------------------------------------------------------


def garment_box(h: int, w: int) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) of the garment area."""
    mh, mw = max(1, h // 8), max(1, (3 * w) // 16)
    return mh, h - mh, mw, w - mw


def band_rows(schema_len: int, h: int, w: int) -> list[tuple[int, int]]:
    top, bottom, _, _ = garment_box(h, w)
    edges = np.linspace(top, bottom, schema_len + 1).astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(schema_len)]


def value_color(category: int, value: int, cardinality: int) -> np.ndarray:
    hue = (value / cardinality + 0.137 * category) % 1.0
    sat = 0.9 if value % 2 == 0 else 0.55
    return np.array(colorsys.hsv_to_rgb(hue, sat, 0.85))


def value_texture(value: int, rows: int, cols: int) -> np.ndarray:
    """Multiplicative texture in (0, 1]: solid, vertical stripes or checker."""
    yy, xx = np.mgrid[0:rows, 0:cols]
    kind = value % 3
    if kind == 0:
        return np.ones((rows, cols))
    if kind == 1:
        return np.where(xx % 2 == 0, 1.0, 0.55)
    return np.where((xx + yy) % 2 == 0, 1.0, 0.55)


def render_online(attributes: Sequence[int], schema: AttributeSchema, print_field: np.ndarray,
                  size: tuple[int, int, int]) -> np.ndarray:
    """Clean shop rendering.  ``attributes`` must be the unmasked true values."""
    c, h, w = size
    img = np.full((c, h, w), BACKGROUND)
    top, bottom, left, right = garment_box(h, w)
    for ci, ((r0, r1), value) in enumerate(zip(band_rows(len(schema), h, w), attributes)):
        color = value_color(ci, value, schema.cardinalities[ci])
        tex = value_texture(value, r1 - r0, right - left)
        img[:, r0:r1, left:right] = color[:, None, None] * tex[None]
    img[:, top:bottom, left:right] += print_field
    return np.clip(img, 0.0, 1.0)


def render_offline(online: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    c, h, w = online.shape
    top, bottom, left, right = garment_box(h, w)
    s = cfg.max_shift
    dy, dx = (rng.integers(-s, s + 1, size=2) if s else (0, 0))
    gain = float(np.clip(1.0 + rng.normal(0.0, cfg.brightness_jitter), 0.3, 2.0)) if cfg.brightness_jitter else 1.0
    cast = rng.normal(0.0, cfg.color_cast, size=3) if cfg.color_cast else np.zeros(3)
    img = np.full_like(online, BACKGROUND)
    mask = np.zeros((h, w), dtype=bool)
    t, b, l, r = top + dy, bottom + dy, left + dx, right + dx
    img[:, t:b, l:r] = online[:, top:bottom, left:right]
    mask[t:b, l:r] = True
    if cfg.clutter_density:
        clutter = (rng.random((h, w)) < cfg.clutter_density) & ~mask
        noise = rng.random((c, h, w))
        img = np.where(clutter[None], noise, img)
    if cfg.occlusion_prob and rng.random() < cfg.occlusion_prob:
        oh, ow = max(1, h // 4), max(1, w // 4)
        oy = int(rng.integers(0, h - oh + 1))
        ox = int(rng.integers(0, w - ow + 1))
        img[:, oy : oy + oh, ox : ox + ow] = rng.random(3)[:, None, None]
    img = img * gain + cast[:, None, None]
    return np.clip(img, 0.0, 1.0)


def _print_field(rng: np.random.Generator, c: int, gh: int, gw: int, strength: float) -> np.ndarray:
    low = rng.uniform(-strength, strength, size=(c, (gh + 1) // 2, (gw + 1) // 2))
    return np.repeat(np.repeat(low, 2, axis=1), 2, axis=2)[:, :gh, :gw]


def sample_items(cfg: SynthConfig):
    """Yield ``(item_id, true attributes, labelled attributes, online, offline list)``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    c, h, w = cfg.image_size
    top, bottom, left, right = garment_box(h, w)
    ncat = len(cfg.schema)
    width = len(str(cfg.item_count - 1))
    for n in range(cfg.item_count):
        item_id = f"item{n:0{max(width, 5)}d}"
        true = np.array([rng.integers(0, k) for k in cfg.schema.cardinalities], dtype=np.int64)
        labels = true.copy()
        masked = rng.random(ncat) < cfg.missing_fraction
        if masked.all():
            masked[rng.integers(0, ncat)] = False
        labels[masked] = MISSING
        pf = _print_field(rng, c, bottom - top, right - left, cfg.print_strength)
        online = render_online(true, cfg.schema, pf, cfg.image_size)
        offline = [render_offline(online, cfg, rng) for _ in range(cfg.offline_per_item)]
        yield item_id, true, labels, online, offline


def write_ppm(path: Path, image: np.ndarray) -> None:
    c, h, w = image.shape
    pixels = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise DatasetIOError(f"{path}: not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def generate(cfg: SynthConfig, out_dir) -> dict:
    """Render the dataset into ``out_dir`` and return the manifest dict."""
    cfg.validate()
    out = Path(out_dir)
    img_dir = out / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"{img_dir}: {exc.strerror or exc}") from exc
    items = []
    for item_id, _true, labels, online, offline in sample_items(cfg):
        record = {
            "item_id": item_id,
            "attributes": [None if v == MISSING else int(v) for v in labels],
            "online": _write_image(out, f"{item_id}_online", online),
            "offline": [_write_image(out, f"{item_id}_offline{k}", im) for k, im in enumerate(offline)],
        }
        items.append(record)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "schema": cfg.schema.to_dict(),
        "config": cfg.to_dict(),
        "counts": {
            "items": len(items),
            "online": len(items),
            "offline": sum(len(r["offline"]) for r in items),
        },
        "items": items,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def _write_image(root: Path, stem: str, image: np.ndarray) -> dict:
    save_tensor(root / "images" / f"{stem}.tnsr", image)
    write_ppm(root / "images" / f"{stem}.ppm", image)
    return {"tnsr": f"images/{stem}.tnsr", "ppm": f"images/{stem}.ppm"}


def generate_in_memory(cfg: SynthConfig) -> Dataset:
    """Same content as :func:`generate` + :func:`load`, without touching disk."""
    items = []
    for item_id, _true, labels, online, offline in sample_items(cfg):
        items.append(_make_item(item_id, labels, online, offline))
    return Dataset(cfg.schema, items)


def _make_item(item_id, labels, online, offline) -> Item:
    labels = np.asarray(labels, dtype=np.int64)
    return Item(
        item_id,
        labels,
        Sample(item_id, Domain.ONLINE, online, labels),
        [Sample(item_id, Domain.OFFLINE, im, labels) for im in offline],
    )


# loading ---------------------------------------------------------------------


def normalize_image(image: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)


def load(manifest_path) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetIOError(f"{path}: file not found") from exc
    except json.JSONDecodeError as exc:
        raise DatasetIOError(f"{path}: corrupt manifest ({exc})") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValidationError(f"{path}: not a dataset manifest")
    schema = AttributeSchema.from_dict(manifest["schema"])
    root = path.parent
    items, seen = [], set()
    for rec in manifest["items"]:
        item_id = rec["item_id"]
        if item_id in seen:
            raise ValidationError(f"{path}: duplicate item_id {item_id!r}")
        seen.add(item_id)
        labels = [MISSING if v is None else int(v) for v in rec["attributes"]]
        try:
            schema.validate_labels(labels)
        except Exception as exc:
            raise ValidationError(f"{path}: item {item_id}: {exc}") from None
        if not rec.get("online") or not rec.get("offline"):
            raise ValidationError(f"{path}: item {item_id} needs 1 online and >= 1 offline rendering")
        online = normalize_image(load_tensor(root / rec["online"]["tnsr"]))
        offline = [normalize_image(load_tensor(root / o["tnsr"])) for o in rec["offline"]]
        items.append(_make_item(item_id, labels, online, offline))
    return Dataset(schema, items)


def split(dataset: Dataset, train_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Item-level split: no item contributes images to both sides."""
    if not 0.0 <= train_frac <= 1.0:
        raise ConfigError(f"train_frac must lie in [0, 1], got {train_frac}")
    ids = dataset.item_ids
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(train_frac * len(ids)))
    train_ids = sorted(ids[i] for i in order[:n_train])
    test_ids = sorted(ids[i] for i in order[n_train:])
    return dataset.subset(train_ids), dataset.subset(test_ids)


def with_overrides(cfg: SynthConfig, **kw) -> SynthConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
