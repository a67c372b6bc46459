import csv
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from darn.autodiff import Tensor
from darn.errors import ConfigError, ContractError, NumericError, SamplingError
from darn.losses import RankingConfig
from darn.network import StageConfig, SubNetworkConfig, build_dual_network, load_checkpoint
from darn.schema import DEFAULT_SCHEMA, Domain
from darn.synth import Sample
from darn.trainer import (
    SGD, TrainConfig, Triplet, assemble_batch, epoch_batches, sample_triplets, train, train_step,
)

ON, OFF = Domain.ONLINE, Domain.OFFLINE
SMALL = SubNetworkConfig(
    conv_stages=(StageConfig(6, 3, 1, 0, pool=2), StageConfig(8, 3, 1, 0, pool=2), StageConfig(8, 3, 1, 0)),
    fc1_dim=24, fc2_dim=16, head_hidden_dim=8,
)


def _sample(item, domain, seed=0):
    rng = np.random.default_rng(seed)
    return Sample(str(item), domain, rng.uniform(size=(3, 16, 16)), np.zeros(len(DEFAULT_SCHEMA), dtype=np.int64))


def _pairs(ids):
    return [(_sample(i, OFF, k), _sample(i, ON, k + 100)) for k, i in enumerate(ids)]


def _dual(seed=0):
    return build_dual_network(SMALL, DEFAULT_SCHEMA, seed)


def test_two_id_pool_forces_other():
    pairs = _pairs(["a", "b"])
    pool = [p[1] for p in pairs]
    for epoch in range(20):
        for t in sample_triplets(pairs, pool, epoch, seed=1):
            assert t.negative.item_id == ("b" if t.anchor.item_id == "a" else "a")


def test_single_id_pool():
    pairs = _pairs(["a"])
    with pytest.raises(SamplingError):
        sample_triplets(pairs, [pairs[0][1], _sample("a", ON)], 0, 0)


def test_negative_frequencies_near_uniform():
    pairs = _pairs(["a", "b", "c", "d", "e"])
    pool = [p[1] for p in pairs]
    counts = Counter()
    for epoch in range(10_000):
        counts[sample_triplets(pairs[:1], pool, epoch, seed=3)[0].negative.item_id] += 1
    assert set(counts) == {"b", "c", "d", "e"}
    for k in counts:
        assert abs(counts[k] / 10_000 - 0.25) <= 0.05 * 0.25


def test_epochs_draw_different_negatives(tiny_dataset):
    pairs, pool = tiny_dataset.pairs(), tiny_dataset.online_samples()
    a = [t.negative.item_id for t in sample_triplets(pairs, pool, 0, 0)]
    b = [t.negative.item_id for t in sample_triplets(pairs, pool, 1, 0)]
    assert a != b
    assert a == [t.negative.item_id for t in sample_triplets(pairs, pool, 0, 0)]


@settings(max_examples=25)
@given(st.integers(2, 12), st.integers(0, 3), st.integers(0, 2**32 - 1), st.integers(0, 50))
def test_triplet_invariants(n_ids, extra_per, seed, epoch):
    ids = [f"i{k}" for k in range(n_ids)]
    pairs = _pairs(ids)
    # extra online renderings of existing ids make the pool non-uniform over ids
    pool = [p[1] for p in pairs] + [_sample(ids[k % n_ids], ON) for k in range(extra_per * 3)]
    trips = sample_triplets(pairs, pool, epoch, seed)
    assert len(trips) == len(pairs)
    for (off, on), t in zip(pairs, trips):
        assert t.anchor is off and t.positive is on
        assert t.negative.domain is ON and t.negative.item_id != off.item_id


def test_triplet_contract():
    a, b = _sample("x", OFF), _sample("x", ON)
    with pytest.raises(ContractError):
        Triplet(a, b, _sample("x", ON))
    with pytest.raises(ContractError):
        Triplet(b, b, _sample("y", ON))
    with pytest.raises(ContractError):
        Triplet(a, _sample("y", ON), _sample("z", ON))


def test_batch_layout(tiny_dataset):
    trips = sample_triplets(tiny_dataset.pairs()[:3], tiny_dataset.online_samples(), 0, 0)
    b = assemble_batch(trips)
    assert b.images.shape == (9, 3, 16, 16)
    assert b.domains == [OFF] * 3 + [ON] * 6
    assert b.triplets.tolist() == [[0, 3, 6], [1, 4, 7], [2, 5, 8]]


def test_hand_sgd():
    w = Tensor(np.array(1.0), requires_grad=True)
    opt = SGD({"w": w}, learning_rate=0.1, momentum=0.0)
    (w * w).backward()
    opt.step()
    assert w.data == pytest.approx(0.8, abs=1e-15)


def test_momentum_update():
    w = Tensor(np.array(1.0), requires_grad=True)
    opt = SGD({"w": w}, learning_rate=0.1, momentum=0.5)
    for _ in range(2):
        opt.zero_grad()
        (w * w).backward()
        opt.step()
    # v1 = -0.2, w1 = 0.8; v2 = 0.5*-0.2 - 0.1*1.6 = -0.26, w2 = 0.54
    assert w.data == pytest.approx(0.54, abs=1e-15)


def test_zero_weights_leave_parameters(tiny_dataset):
    dual = _dual()
    before = dual.state_dict()
    trips = sample_triplets(tiny_dataset.pairs()[:4], tiny_dataset.online_samples(), 0, 0)
    cfg = RankingConfig(attr_weight=0.0, rank_weight=0.0)
    train_step(dual, trips, TrainConfig(), cfg)
    after = dual.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_empty_batch():
    with pytest.raises(ContractError):
        train_step(_dual(), [], TrainConfig(), RankingConfig())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_overfit_fixed_set(tiny_dataset, seed):
    # plain SGD: with momentum 0.9 full-batch steps on ten triplets oscillate
    trips = sample_triplets(tiny_dataset.pairs()[:10], tiny_dataset.online_samples(), 0, 0)
    dual = build_dual_network(SubNetworkConfig(), DEFAULT_SCHEMA, seed)
    cfg = TrainConfig(learning_rate=0.02, momentum=0.0)
    opt = SGD(dual.parameters(), cfg.learning_rate, cfg.momentum)
    losses = [train_step(dual, trips, cfg, RankingConfig(), opt)[0].total for _ in range(200)]
    assert losses[-1] < 0.25 * losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_term(tiny_dataset):
    dual = _dual()
    dual.shop_net.params["head.color.out.b"].data[:] = np.inf
    trips = sample_triplets(tiny_dataset.pairs()[:2], tiny_dataset.online_samples(), 0, 0)
    with pytest.raises(NumericError, match="attr|rank"):
        train_step(dual, trips, TrainConfig(), RankingConfig())


def test_config_validation():
    for bad in (dict(batch_triplets=0), dict(learning_rate=0.0), dict(momentum=1.0), dict(epochs=-1)):
        with pytest.raises(ConfigError):
            train(None, _dual(), TrainConfig(**bad), RankingConfig())


def test_determinism_and_loss_log(tiny_dataset, tmp_path):
    cfg = TrainConfig(epochs=2, batch_triplets=8, seed=4)
    train(tiny_dataset, _dual(2), cfg, RankingConfig(), tmp_path / "a")
    train(tiny_dataset, _dual(2), cfg, RankingConfig(), tmp_path / "b")
    log_a = (tmp_path / "a" / "loss_log.csv").read_bytes()
    assert log_a == (tmp_path / "b" / "loss_log.csv").read_bytes()
    rows = list(csv.reader(log_a.decode().splitlines()))
    assert rows[0] == ["epoch", "step", "total", "attr", "rank"]
    assert len(rows) == 1 + 2 * 3  # 24 pairs / 8 per batch, 2 epochs
    assert [r[:2] for r in rows[1:4]] == [["0", "0"], ["0", "1"], ["0", "2"]]
    for r in rows[1:]:
        assert float(r[2]) == pytest.approx(float(r[3]) + float(r[4]))


def test_zero_epochs_writes_init(tiny_dataset, tmp_path):
    dual = _dual(3)
    init = dual.state_dict()
    res = train(tiny_dataset, dual, TrainConfig(epochs=0), RankingConfig(), tmp_path)
    back, extra, _ = load_checkpoint(res.checkpoint)
    assert extra["epoch"] == 0
    assert all(init[k].tobytes() == v.tobytes() for k, v in back.state_dict().items())


def test_periodic_checkpoints(tiny_dataset, tmp_path):
    train(tiny_dataset, _dual(), TrainConfig(epochs=2, checkpoint_every=1), RankingConfig(), tmp_path)
    assert {p.name for p in tmp_path.glob("*.darn")} == {
        "checkpoint_epoch1.darn", "checkpoint_epoch2.darn", "checkpoint.darn"}


def test_resume_matches_uninterrupted_step(tiny_dataset, tmp_path):
    cfg = TrainConfig(epochs=1, batch_triplets=8, seed=5)
    dual = _dual(4)
    res = train(tiny_dataset, dual, cfg, RankingConfig(), tmp_path)
    batch = epoch_batches(tiny_dataset, 1, cfg)[0]

    loaded, _, velocity = load_checkpoint(res.checkpoint)
    opt2 = SGD(loaded.parameters(), cfg.learning_rate, cfg.momentum, velocity)
    l1, _ = train_step(dual, batch, cfg, RankingConfig(), res.optimizer)
    l2, _ = train_step(loaded, batch, cfg, RankingConfig(), opt2)
    assert l1 == l2
    a, b = dual.state_dict(), loaded.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_smoothed_loss_non_increasing(tiny_dataset):
    res = train(tiny_dataset, _dual(6), TrainConfig(epochs=24, batch_triplets=8, learning_rate=0.005),
                RankingConfig())
    ma = np.convolve(res.epoch_losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(ma) <= 0), ma
