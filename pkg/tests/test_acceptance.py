"""End-to-end acceptance checks, one test group per numbered criterion.

Each check records a PASS/FAIL line that is repeated in the pytest terminal summary.
The synthetic benchmark (criteria 6 and 7) trains the full ablation ladder on three
seeds and takes roughly a quarter of an hour on one core.
"""

import json
import subprocess
import sys
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from darn.autodiff import MISSING, Tensor
from darn.features import pca_fit
from darn.losses import RankingConfig, loss_terms, triplet_loss
from darn.network import build_dual_network, load_checkpoint, route_batch, save_checkpoint
from darn.retrieval import Gallery, query
from darn.evaluation import ndcg_at_k, top_k_accuracy
from darn.schema import DEFAULT_SCHEMA, Domain
from darn.network import SubNetworkConfig

from test_evaluation import _instance, _ranked, oracle_ndcg, oracle_topk

ON, OFF = Domain.ONLINE, Domain.OFFLINE


def darn(*args, timeout=3600):
    return subprocess.run([sys.executable, "-m", "darn", *map(str, args)], capture_output=True, text=True,
                          timeout=timeout)


# 1 -------------------------------------------------------------------------

def test_c1_gradient_check(criterion):
    t0 = time.perf_counter()
    proc = darn("grad-check", "--seed", 7, "--threads", 1)
    seconds = time.perf_counter() - t0
    lines = proc.stdout.strip().splitlines()
    worst = float(lines[-1].split()[0].split("=")[1])
    names = {ln.split()[0] for ln in lines[:-1]}
    expected = {"add", "neg", "mul", "sum", "mean", "relu", "reshape", "flatten", "concat", "split",
                "column_slice", "take_rows", "row_norm", "row_sq_norm", "fully_connected", "conv2d",
                "conv2d_stride2", "maxpool", "adaptive_maxpool_3x3", "softmax_cross_entropy", "triplet_loss",
                "darn_total_loss"}
    criterion(1, names == expected, f"{len(names)} checks incl. full dual-network loss")
    criterion(1, proc.returncode == 0 and worst < 1e-4, f"max rel error {worst:.2e} < 1e-4")
    criterion(1, seconds < 120, f"runtime {seconds:.0f}s < 120s")


# 2 -------------------------------------------------------------------------

def test_c2_triplet_contract(criterion):
    def at(dab, dac):
        a = np.zeros(2)
        return triplet_loss(a, np.array([dab, 0.0]), np.array([0.0, dac]), RankingConfig(margin=0.3)).item()

    vals = (at(0.0, 0.5), at(0.4, 0.2), at(0.0, 0.0))
    criterion(2, vals[0] == 0.0 and vals[1] == 0.5 and vals[2] == 0.3, f"examples {vals}")

    rng = np.random.default_rng(2)
    zero = True
    for _ in range(200):
        a = rng.normal(size=6)
        b = a + rng.normal(scale=0.05, size=6)
        c = a + rng.normal(size=6) * 3 + 2
        if np.linalg.norm(a - c) <= np.linalg.norm(a - b) + 0.3:
            continue
        ts = [Tensor(v, requires_grad=True) for v in (a, b, c)]
        triplet_loss(*ts).backward()
        zero &= all(t.grad is None or not np.any(t.grad) for t in ts)
    criterion(2, zero, "inactive triplets give identically zero gradients")

    x = rng.normal(size=(10_000, 3, 8)) * rng.uniform(0.01, 5, size=(10_000, 1, 1))
    margins = rng.uniform(0.01, 2.0, size=10_000)
    worst = min(triplet_loss(t[0], t[1], t[2], RankingConfig(margin=m)).item() for t, m in zip(x, margins))
    criterion(2, worst >= 0.0, f"min loss over 10,000 random triples {worst:.3g} >= 0")


# 3 -------------------------------------------------------------------------

def _masking_grads(schema, dual, images, domains, labels, trip):
    dual.zero_grad()
    routed = route_batch(dual, images, domains)
    loss_terms(routed, labels, trip, RankingConfig(), schema.names).total.backward()
    return {k: (None if p.grad is None else p.grad.copy()) for k, p in dual.parameters().items()}


def test_c3_missing_attribute_masking(criterion):
    branch = "pattern"
    schema = DEFAULT_SCHEMA
    reduced = schema.without(branch)
    rng = np.random.default_rng(3)
    images = rng.uniform(size=(9, 3, 16, 16))
    domains = [OFF] * 3 + [ON] * 6
    labels = np.stack([rng.integers(0, c, 9) for c in schema.cardinalities], axis=1)
    labels[:, schema.names.index(branch)] = MISSING
    labels[4, 0] = MISSING
    trip = np.array([[0, 3, 6], [1, 4, 7], [2, 5, 8]])

    with threadpool_limits(1):
        full = build_dual_network(SubNetworkConfig(), schema, seed=11)
        small = build_dual_network(SubNetworkConfig(), reduced, seed=99)
        state = full.state_dict()
        small.load_state_dict({k: state[k] for k in small.state_dict()})
        g_full = _masking_grads(schema, full, images, domains, labels, trip)
        g_small = _masking_grads(reduced, small, images, domains, np.delete(labels, 1, axis=1), trip)

    in_branch = [k for k in g_full if f".head.{branch}." in k]
    zero = all(g_full[k] is None or not np.any(g_full[k]) for k in in_branch)
    criterion(3, zero and len(in_branch) == 8, f"{len(in_branch)} parameters of the masked branch have zero gradient")
    same = all(g_full[k].tobytes() == g_small[k].tobytes() for k in g_small)
    criterion(3, same and set(g_small) < set(g_full),
              f"{len(g_small)} remaining parameter gradients bitwise equal to the branch-free model")


# 4 -------------------------------------------------------------------------

def test_c4_oracle_equivalence(criterion):
    rng = np.random.default_rng(4)
    m = rng.normal(size=(1000, 8))
    ids = [f"g{i:04d}" for i in range(1000)]
    g = Gallery(ids, m)
    same = True
    for q in rng.normal(size=(50, 8)):
        ref = sorted(range(1000), key=lambda i: (float(np.sqrt(np.sum((m[i] - q) ** 2))), ids[i]))
        same &= query(g, q, 1000).ids == [ids[i] for i in ref]
    criterion(4, same, "50 queries x 1,000 rows identical to full-sort oracle")

    worst_var = worst_proj = 0.0
    for seed in range(5):
        x = np.random.default_rng(seed).normal(size=(20, 6)) * np.array([5, 3, 2, 1, 0.5, 0.1])
        model = pca_fit(x, 6)
        c = x - x.mean(axis=0)
        evals, evecs = np.linalg.eigh(c.T @ c / 19)
        order = np.argsort(evals)[::-1]
        ref = c @ evecs[:, order]
        got = model.transform(x)
        worst_var = max(worst_var, float(np.max(np.abs(model.variances - evals[order]))))
        signs = np.sign(np.sum(got * ref, axis=0))
        worst_proj = max(worst_proj, float(np.max(np.abs(got - ref * signs))))
    criterion(4, worst_var < 1e-8 and worst_proj < 1e-8,
              f"PCA variance err {worst_var:.1e}, projection err {worst_proj:.1e} (< 1e-8)")

    worst = 0.0
    for seed in range(100):
        rankings, truth, qattrs, gattrs = _instance(seed)
        res = [_ranked(q, ids) for q, ids in rankings]
        for k in (1, 3, 10):
            worst = max(worst, abs(ndcg_at_k(res, qattrs, gattrs, k) - oracle_ndcg(rankings, qattrs, gattrs, k)),
                        abs(top_k_accuracy(res, truth, k) - oracle_topk(rankings, truth, k)))
    criterion(4, worst < 1e-12, f"NDCG/top-k vs reference over 100 instances, max diff {worst:.1e}")


# 5 -------------------------------------------------------------------------

def test_c5_metric_sanity(criterion):
    rng = np.random.default_rng(5)
    n, k, nq = 100, 20, 5000
    gids = [f"g{i}" for i in range(n)]
    truth = {f"q{j}": {gids[rng.integers(n)]} for j in range(nq)}
    res = [_ranked(q, [gids[i] for i in rng.permutation(n)]) for q in truth]
    acc = top_k_accuracy(res, truth, k)
    sigma = np.sqrt((k / n) * (1 - k / n) / nq)
    criterion(5, abs(acc - k / n) < 3 * sigma, f"random top-{k} {acc:.4f} vs k/N {k / n:.2f} (3 sigma {3 * sigma:.4f})")

    gattrs = {f"g{i}": [int(v) for v in rng.integers(0, 3, 4)] for i in range(30)}
    q = {"q": [0, 1, 2, 0]}
    rel = {g: sum(a == b for a, b in zip(q["q"], v)) for g, v in gattrs.items()}
    order = sorted(gattrs, key=lambda g: (-rel[g], g))
    val = ndcg_at_k([_ranked("q", order)], q, gattrs, 10)
    criterion(5, val == 1.0, f"NDCG@10 of descending-relevance ranking = {val!r}")


# 6 + 7 ---------------------------------------------------------------------

# measured on the first full run of the default benchmark (3 seeds) and pinned
PINNED_DARN_C45_TOP20 = 0.717
PIN_TOL = 0.05


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablate")
    t0 = time.perf_counter()
    proc = darn("ablate", "--out", out, "--threads", 1)
    seconds = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr
    return json.loads((out / "ablation.json").read_text()), seconds


@pytest.mark.slow
def test_c6_benchmark_trend(benchmark, criterion):
    table, seconds = benchmark
    top = {name: row["top_k"]["20"] for name, row in table.items()}
    summary = ", ".join(f"{k} {v:.3f}" for k, v in top.items())
    full, base = top["DARN+C4-5"], top["untrained"]
    criterion(6, full >= 5 * 0.04 and full >= base + 0.10,
              f"(a) DARN+C4-5 top-20 {full:.3f} >= 0.20 and >= untrained {base:.3f} + 0.10")
    criterion(6, abs(full - PINNED_DARN_C45_TOP20) <= PIN_TOL,
              f"(a) pinned {PINNED_DARN_C45_TOP20:.3f} +/- {PIN_TOL}")
    criterion(6, top["DARN"] >= top["AN"] - 0.02 and top["DARN"] >= base + 0.10,
              f"(b) DARN {top['DARN']:.3f} vs AN {top['AN']:.3f} - 0.02 and untrained + 0.10  [{summary}]")
    criterion(6, seconds < 1800, f"end-to-end runtime {seconds:.0f}s < 1800s")


@pytest.mark.slow
def test_c7_gallery_size_sweep(benchmark, criterion):
    table, _ = benchmark
    for name in ("DARN", "untrained"):
        sweep = [table[name]["sweep"][str(s)] for s in (100, 200, 300, 400, 500)]
        mono = all(a >= b for a, b in zip(sweep, sweep[1:]))
        criterion(7, mono, f"{name} sweep non-increasing {[round(v, 3) for v in sweep]}")

    def drop(name):
        s = table[name]["sweep"]
        return 1.0 - s["500"] / s["100"]

    criterion(7, drop("DARN") <= drop("untrained"),
              f"relative drop DARN {drop('DARN'):.3f} <= untrained {drop('untrained'):.3f}")


# 8 -------------------------------------------------------------------------

def test_c8_determinism(tmp_path, criterion):
    data = tmp_path / "data"
    assert darn("gen-data", "--out", data, "--item-count", 60, "--seed", 8).returncode == 0
    # identical resolved configs (paths included): the second run reuses the first run's directories
    tr, ev = tmp_path / "train", tmp_path / "eval"
    outputs = []
    for _ in range(2):
        p = darn("train", "--data", data, "--out", tr, "--epochs", 3, "--warmup-epochs", 1,
                 "--feature-spec", "fc1,c4,c5", "--seed", 3, "--threads", 1)
        assert p.returncode == 0, p.stderr
        p = darn("evaluate", "--checkpoint", tr / "checkpoint.darn", "--data", data, "--out", ev,
                 "--feature-spec", "fc1,c4,c5", "--pca-dim", 16, "--gallery-sizes", "20,40,60", "--threads", 1)
        assert p.returncode == 0, p.stderr
        files = {f: (ev / f).read_bytes() for f in ("report.json", "report_topk.csv", "report_ndcg.csv", "sweep.csv")}
        files["loss_log.csv"] = (tr / "loss_log.csv").read_bytes()
        files["checkpoint.darn"] = (tr / "checkpoint.darn").read_bytes()
        outputs.append(files)
        for f in (ev / "report.json", tr / "loss_log.csv", tr / "checkpoint.darn"):
            f.unlink()
    criterion(8, outputs[0] == outputs[1], f"{len(outputs[0])} metric/log/checkpoint files byte-identical across two runs")

    (tmp_path / "ckpt.darn").write_bytes(outputs[0]["checkpoint.darn"])

    dual, _, velocity = load_checkpoint(tmp_path / "ckpt.darn")
    save_checkpoint(tmp_path / "again.darn", dual, velocity)
    back, _, v2 = load_checkpoint(tmp_path / "again.darn")
    same = all(dual.state_dict()[k].tobytes() == v.tobytes() for k, v in back.state_dict().items())
    same &= all(velocity[k].tobytes() == v2[k].tobytes() for k in velocity)
    criterion(8, same, "checkpoint save/load round trip bit-exact")
