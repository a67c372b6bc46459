import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from darn.autodiff import MISSING
from darn.errors import ConfigError, DatasetIOError, ValidationError
from darn.schema import AttributeSchema, Domain
from darn.synth import SynthConfig, generate, generate_in_memory, load, read_ppm, split

from probe import probe

NULL_SHIFT = dict(brightness_jitter=0.0, color_cast=0.0, clutter_density=0.0, occlusion_prob=0.0, max_shift=0)


def test_null_shift_is_identity():
    ds = generate_in_memory(SynthConfig(item_count=20, seed=4, **NULL_SHIFT))
    for it in ds.items:
        assert it.offline[0].image.tobytes() == it.online.image.tobytes()


def test_default_shift_changes_images(tiny_dataset):
    assert all(not np.array_equal(it.online.image, it.offline[0].image) for it in tiny_dataset.items)


def test_same_seed_byte_identical(tmp_path):
    cfg = SynthConfig(item_count=6, seed=11, offline_per_item=2)
    generate(cfg, tmp_path / "a")
    generate(cfg, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) == 1 + 6 * 3 * 2
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_disk_matches_memory(tmp_path):
    cfg = SynthConfig(item_count=5, seed=2)
    generate(cfg, tmp_path)
    disk, mem = load(tmp_path / "manifest.json"), generate_in_memory(cfg)
    assert disk.item_ids == mem.item_ids
    for a, b in zip(disk.items, mem.items):
        assert a.online.image.tobytes() == b.online.image.tobytes()
        assert a.offline[0].image.tobytes() == b.offline[0].image.tobytes()
        assert a.attributes.tolist() == b.attributes.tolist()
    ppm = read_ppm(tmp_path / "images" / f"{mem.item_ids[0]}_online.ppm")
    np.testing.assert_allclose(ppm, mem.items[0].online.image, atol=0.5 / 255 + 1e-12)


@settings(max_examples=15)
@given(st.integers(1, 12), st.integers(1, 3), st.floats(0, 1), st.integers(0, 2**32 - 1),
       st.lists(st.integers(2, 7), min_size=1, max_size=5))
def test_manifest_invariants(n, per, missing, seed, cards):
    schema = AttributeSchema(tuple((f"c{i}", c) for i, c in enumerate(cards)))
    ds = generate_in_memory(SynthConfig(item_count=n, schema=schema, offline_per_item=per,
                                        missing_fraction=missing, seed=seed))
    assert len(ds) == n and len(set(ds.item_ids)) == n
    for it in ds.items:
        assert it.online.domain is Domain.ONLINE and it.online.item_id == it.item_id
        assert len(it.offline) == per
        assert all(o.domain is Domain.OFFLINE and o.item_id == it.item_id for o in it.offline)
        schema.validate_labels(it.attributes)
        assert np.any(it.attributes != MISSING)
        for s in [it.online, *it.offline]:
            assert s.image.shape == (3, 16, 16)
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_missing_fraction_roughly_respected():
    ds = generate_in_memory(SynthConfig(item_count=400, seed=0))
    frac = np.mean(np.stack([it.attributes for it in ds.items]) == MISSING)
    assert 0.07 < frac < 0.13


def test_config_errors():
    with pytest.raises(ConfigError, match="bands"):
        generate_in_memory(SynthConfig(schema=AttributeSchema(tuple((f"c{i}", 2) for i in range(20)))))
    with pytest.raises(ConfigError, match="max_shift"):
        generate_in_memory(SynthConfig(max_shift=4))
    with pytest.raises(ConfigError):
        generate_in_memory(SynthConfig(occlusion_prob=1.5))
    with pytest.raises(ConfigError):
        generate_in_memory(SynthConfig(brightness_jitter=-0.1))


def test_split_properties(tiny_dataset):
    a, b = split(tiny_dataset, 0.75, 5)
    assert len(a) == 18 and len(b) == 6
    assert not set(a.item_ids) & set(b.item_ids)
    assert split(tiny_dataset, 0.75, 5)[1].item_ids == b.item_ids
    full, empty = split(tiny_dataset, 1.0, 0)
    assert len(full) == 24 and len(empty) == 0
    with pytest.raises(ConfigError):
        split(tiny_dataset, 1.5, 0)


@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_split_disjoint_over_seeds(seed, frac):
    ds = generate_in_memory(SynthConfig(item_count=10, seed=1))
    a, b = split(ds, frac, seed)
    assert not set(a.item_ids) & set(b.item_ids)
    assert sorted(a.item_ids + b.item_ids) == ds.item_ids


def test_load_errors(tmp_path):
    with pytest.raises(DatasetIOError, match="manifest.json"):
        load(tmp_path)
    cfg = SynthConfig(item_count=3, seed=0)
    generate(cfg, tmp_path / "d")
    (tmp_path / "d" / "images" / "item00001_online.tnsr").unlink()
    with pytest.raises(DatasetIOError, match="item00001_online.tnsr"):
        load(tmp_path / "d")

    generate(cfg, tmp_path / "e")
    m = json.loads((tmp_path / "e" / "manifest.json").read_text())
    m["items"][0]["attributes"][0] = 99
    (tmp_path / "e" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ValidationError, match="item00000"):
        load(tmp_path / "e")
    m["items"][0]["attributes"][0] = 0
    m["items"][1]["offline"] = []
    (tmp_path / "e" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ValidationError, match="item00001"):
        load(tmp_path / "e")
    (tmp_path / "e" / "manifest.json").write_text("{not json")
    with pytest.raises(DatasetIOError, match="corrupt"):
        load(tmp_path / "e")


# probe-classifier measurements on the default generator (500 items, first 400 train the probe).
# Frozen from the first generation: online held-out accuracy per category and offline accuracy.
FROZEN_ONLINE = [1.0, 1.0, 1.0, 1.0]
FROZEN_OFFLINE = [0.46, 0.49, 0.59, 0.63]


@pytest.fixture(scope="module")
def probe_results():
    return probe(SynthConfig(), n_train=400)


def test_attributes_recoverable(probe_results):
    for on, _ in probe_results:
        assert on >= 0.9
    np.testing.assert_allclose([r[0] for r in probe_results], FROZEN_ONLINE, atol=0.011)


def test_domain_gap(probe_results):
    on = np.mean([r[0] for r in probe_results])
    off = np.mean([r[1] for r in probe_results])
    assert on - off >= 0.15
    np.testing.assert_allclose([r[1] for r in probe_results], FROZEN_OFFLINE, atol=0.011)
