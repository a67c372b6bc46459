"""Command-line entry point: ``darn <subcommand> [flags]``.

Configuration for every subcommand resolves as

    built-in defaults <- JSON file (--config) <- DARN_<KEY> environment <- flags

and the resolved result is written to ``<out>/config.json`` before any other
output.  Failures print one JSON line on stderr,
``{"error": <category>, "exit_code": <n>, "message": ...}``, and exit with the
category's code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable

from threadpoolctl import threadpool_limits

from .errors import ConfigError, DarnError, DatasetIOError
from .schema import Domain

log = logging.getLogger("darn")

ENV_PREFIX = "DARN_"

EXIT_CODES = {
    "check-failed": 1,
    "usage": 2,
    "config": 3,
    "io": 4,
    "validation": 5,
    "dimension": 6,
    "contract": 7,
    "numeric": 8,
    "build": 9,
    "sampling": 10,
    "label-range": 11,
    "error": 12,
    "internal": 70,
}


class UsageError(DarnError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage and exit 2 itself
        raise UsageError(message)


# ---------------------------------------------------------------------------
# option tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Opt:
    key: str
    type: Callable[[str], Any]
    default: Any
    help: str = ""
    required: bool = False


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(t) for t in text)
    return tuple(int(t) for t in str(text).replace(",", " ").split())


def _strs(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(str(t) for t in text)
    return tuple(t for t in str(text).replace(",", " ").split())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _path(text):
    return None if text is None else str(text)


COMMON = [
    Opt("seed", int, 0, "master seed; all randomness derives from it"),
    Opt("threads", int, 0, "BLAS/OpenMP thread cap (1 = fully deterministic, 0 = library default)"),
]

SYNTH = [
    Opt("item_count", int, 500),
    Opt("image_size", _ints, (3, 16, 16), "C,H,W"),
    Opt("brightness_jitter", float, 0.25),
    Opt("color_cast", float, 0.1),
    Opt("clutter_density", float, 0.5),
    Opt("occlusion_prob", float, 0.5),
    Opt("max_shift", int, 2),
    Opt("offline_per_item", int, 1),
    Opt("missing_fraction", float, 0.1),
    Opt("print_strength", float, 0.2),
]

SPLIT = [
    Opt("train_frac", float, 0.8),
    Opt("split_seed", int, 0),
]

RANKING = [
    Opt("margin", float, 0.3),
    Opt("feature_spec", _strs, ("fc1",), "subset of fc1,c4,c5 (fc1 required)"),
    Opt("distance", str, "euclidean", "euclidean or squared_euclidean"),
    Opt("attr_weight", float, 1.0),
    Opt("rank_weight", float, 1.0),
]

TRAINING = [
    Opt("epochs", int, 60),
    Opt("batch_triplets", int, 16),
    Opt("learning_rate", float, 0.005),
    Opt("momentum", float, 0.9),
    Opt("checkpoint_every", int, 0),
    Opt("shared", _bool, False, "one network for both domains (AN/ARN style)"),
    Opt("warmup_epochs", int, 45, "leading epochs trained as one shared attribute-only network (dual only)"),
]

EVAL = [
    Opt("pca_dim", int, 64),
    Opt("k_values", _ints, (1, 5, 10, 20, 30, 40, 50)),
    Opt("gallery_sizes", _ints, (100, 200, 300, 400, 500)),
    Opt("sweep_k", int, 20),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "gen-data": ("render a synthetic paired dataset", COMMON + SYNTH),
    "train": ("train a dual (or shared) network", COMMON + [
        Opt("data", _path, None, "dataset directory or manifest.json", required=True),
    ] + SPLIT + RANKING + TRAINING),
    "extract": ("compute normalised retrieval features", COMMON + [
        Opt("checkpoint", _path, None, required=True),
        Opt("data", _path, None, required=True),
        Opt("domain", str, "online", "online, offline"),
        Opt("subset", str, "all", "all, train or test items"),
        Opt("feature_spec", _strs, ("fc1",)),
        Opt("pca", _path, None, "apply a fitted PCA model"),
    ] + SPLIT),
    "index": ("fit PCA on gallery features and store the index", COMMON + [
        Opt("features", _path, None, "feature prefix written by extract", required=True),
        Opt("pca_dim", int, 64),
    ]),
    "query": ("rank a gallery for each query vector", COMMON + [
        Opt("gallery", _path, None, "index prefix written by index", required=True),
        Opt("queries", _path, None, "feature prefix, or a single .tnsr vector/matrix", required=True),
        Opt("pca", _path, None, "PCA model applied to the queries first"),
        Opt("k", int, 20),
    ]),
    "evaluate": ("top-k and NDCG of a checkpoint on the held-out items", COMMON + [
        Opt("checkpoint", _path, None, required=True),
        Opt("data", _path, None, required=True),
        Opt("feature_spec", _strs, ("fc1",)),
    ] + SPLIT + EVAL),
    "ablate": ("train and evaluate the variant ladder", COMMON + [
        Opt("data", _path, None, "dataset directory; generated in memory from defaults if omitted"),
        Opt("variants", _strs, ("untrained", "AN", "ARN", "DARN", "DARN+C5", "DARN+C4-5")),
        Opt("seeds", _ints, (0, 1, 2)),
    ] + [o for o in TRAINING if o.key not in ("shared", "checkpoint_every")]
      + [Opt("margin", float, 0.3), Opt("distance", str, "euclidean")] + SPLIT + EVAL),
    "grad-check": ("finite-difference check of every primitive and the full loss", COMMON + [
        Opt("coords_per_param", int, 6),
        Opt("epsilon", float, 1e-5),
    ]),
}

NO_OUT = {"grad-check", "query"}  # --out optional


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="darn", description="Dual attribute-aware ranking network, desk scale.")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="JSON file of option values")
        p.add_argument("--out", default=None, help="output directory")
        for o in opts:
            flag = "--" + o.key.replace("_", "-")
            if o.type is _bool:
                p.add_argument(flag, dest=o.key, default=None, nargs="?", const="true",
                               help=f"{o.help} (default {o.default})".strip())
            else:
                p.add_argument(flag, dest=o.key, default=None, help=f"{o.help} (default {o.default})".strip())
    return ap


def resolve(command: str, args: argparse.Namespace, env=None) -> dict[str, Any]:
    """defaults <- --config JSON <- DARN_<KEY> env <- flags."""
    env = os.environ if env is None else env
    opts = COMMANDS[command][1]
    file_values: dict = {}
    if args.config is not None:
        path = Path(args.config)
        try:
            file_values = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DatasetIOError(f"{path}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(file_values, dict):
            raise ConfigError(f"{path}: top level must be an object")
        known = {o.key for o in opts} | {"out"}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown keys for {command}: {unknown}")
    out: dict[str, Any] = {}
    for o in opts:
        raw, source = o.default, "default"
        if o.key in file_values:
            raw, source = file_values[o.key], "file"
        env_key = ENV_PREFIX + o.key.upper()
        if env_key in env:
            raw, source = env[env_key], "env"
        if getattr(args, o.key) is not None:
            raw, source = getattr(args, o.key), "flag"
        if raw is None:
            if o.required:
                raise UsageError(f"--{o.key.replace('_', '-')} is required")
            out[o.key] = None
            continue
        try:
            out[o.key] = o.type(raw) if source != "default" else raw
        except (TypeError, ValueError) as exc:
            if isinstance(exc, DarnError):
                raise
            raise ConfigError(f"{o.key}: cannot parse {raw!r} from {source} ({exc})") from None
    out["out"] = args.out if args.out is not None else file_values.get("out")
    if command not in NO_OUT and out["out"] is None:
        raise UsageError("--out is required")
    if out["threads"] < 0:
        raise ConfigError(f"threads must be >= 0, got {out['threads']}")
    return out


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _prepare_out(cfg: dict, command: str) -> Path | None:
    if cfg["out"] is None:
        return None
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"{out}: {exc.strerror or exc}") from None
    write_json(out / "config.json", {"command": command, **{k: _jsonable(v) for k, v in cfg.items()}})
    return out


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DatasetIOError(f"{p}: {what} not found")
    return p


# ---------------------------------------------------------------------------
# config builders
# ---------------------------------------------------------------------------


def _synth_config(cfg):
    from .synth import SynthConfig

    sc = SynthConfig(**{o.key: cfg[o.key] for o in SYNTH}, seed=cfg["seed"])
    sc = replace(sc, image_size=tuple(sc.image_size))
    if len(sc.image_size) != 3:
        raise ConfigError(f"image_size needs 3 values C,H,W, got {sc.image_size}")
    sc.validate()
    return sc


def _ranking_config(cfg):
    from .losses import RankingConfig

    return RankingConfig(cfg["margin"], tuple(cfg["feature_spec"]), cfg["distance"],
                         cfg["attr_weight"], cfg["rank_weight"])


def _benchmark_config(cfg, synth=None):
    from .pipeline import BenchmarkConfig
    from .trainer import TrainConfig

    b = BenchmarkConfig()
    train_cfg = TrainConfig(
        epochs=cfg.get("epochs", b.train.epochs),
        batch_triplets=cfg.get("batch_triplets", b.train.batch_triplets),
        learning_rate=cfg.get("learning_rate", b.train.learning_rate),
        momentum=cfg.get("momentum", b.train.momentum),
        seed=cfg["seed"],
        checkpoint_every=cfg.get("checkpoint_every") or 0,
    )
    train_cfg.validate()
    fields = dict(train=train_cfg, train_frac=cfg["train_frac"], split_seed=cfg["split_seed"])
    for key in ("margin", "distance", "pca_dim", "k_values", "gallery_sizes", "sweep_k"):
        if key in cfg:
            fields[key] = tuple(cfg[key]) if isinstance(cfg[key], tuple) else cfg[key]
    if "warmup_epochs" in cfg:
        # the warm-up is part of the epoch budget; a shorter run simply has a shorter warm-up
        fields["shared_warmup_epochs"] = min(cfg["warmup_epochs"], train_cfg.epochs)
    if synth is not None:
        fields["synth"] = synth
    b = replace(b, **fields)
    b.validate()
    return b


def _load_dataset(path):
    from .synth import load

    return load(_require_file(path, "dataset"))


def _data_synth(dataset, base=None):
    """Image size of a loaded dataset expressed as a SynthConfig (only the shape is used)."""
    from .synth import SynthConfig

    first = dataset.items[0].online.image if dataset.items else None
    size = tuple(first.shape) if first is not None else (3, 16, 16)
    return replace(base or SynthConfig(), image_size=size, schema=dataset.schema)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg) -> int:
    from .synth import generate

    sc = _synth_config(cfg)
    out = _prepare_out(cfg, "gen-data")
    manifest = generate(sc, out)
    print(f"wrote {manifest['counts']['items']} items to {out / 'manifest.json'}")
    return 0


def cmd_train(cfg) -> int:
    from .pipeline import Variant, train_variant
    from .synth import split

    if cfg["warmup_epochs"] < 0:
        raise ConfigError("warmup_epochs must be >= 0")
    dataset = _load_dataset(cfg["data"])
    rank_cfg = _ranking_config(cfg)
    bench = _benchmark_config(cfg, _data_synth(dataset))
    if cfg["shared"]:
        bench = replace(bench, shared_warmup_epochs=0)
    if not 0.0 < cfg["train_frac"] <= 1.0:
        raise ConfigError(f"train_frac must lie in (0, 1], got {cfg['train_frac']}")
    train_set, test_set = split(dataset, cfg["train_frac"], cfg["split_seed"])
    if len(train_set) == 0:
        raise ConfigError("training split is empty")
    variant = Variant("cli", rank_cfg.feature_spec, cfg["shared"], rank_cfg.attr_weight, rank_cfg.rank_weight)
    out = _prepare_out(cfg, "train")
    write_json(out / "split.json", {"train": train_set.item_ids, "test": test_set.item_ids})
    bench = replace(bench, margin=rank_cfg.margin, distance=rank_cfg.distance)
    _, losses = train_variant(variant, dataset, train_set, bench, cfg["seed"], out)
    print(f"checkpoint {out / 'checkpoint.darn'}; final epoch loss {losses[-1] if losses else float('nan'):.6f}")
    return 0


def _subset_samples(dataset, cfg):
    from .synth import split

    if cfg["subset"] not in ("all", "train", "test"):
        raise ConfigError(f"subset must be all, train or test, got {cfg['subset']!r}")
    domain = Domain.parse(cfg["domain"]) if not isinstance(cfg["domain"], Domain) else cfg["domain"]
    if cfg["subset"] != "all":
        train_set, test_set = split(dataset, cfg["train_frac"], cfg["split_seed"])
        dataset = train_set if cfg["subset"] == "train" else test_set
    if domain is Domain.ONLINE:
        return dataset, dataset.online_samples(), [it.item_id for it in dataset.items]
    samples, ids = [], []
    for it in dataset.items:
        for k, s in enumerate(it.offline):
            samples.append(s)
            ids.append(f"{it.item_id}/offline{k}")
    return dataset, samples, ids


def cmd_extract(cfg) -> int:
    from .features import extract_matrix, load_pca, save_features
    from .losses import normalize_spec
    from .network import load_checkpoint
    from .retrieval import save_attributes

    spec = normalize_spec(cfg["feature_spec"])
    ckpt = _require_file(cfg["checkpoint"], "checkpoint")
    pca = load_pca(_require_file(cfg["pca"], "PCA model")) if cfg["pca"] else None
    dual, _, _ = load_checkpoint(ckpt)
    dataset = _load_dataset(cfg["data"])
    dataset, samples, ids = _subset_samples(dataset, cfg)
    matrix, _ = extract_matrix(dual, samples, spec, pca)
    out = _prepare_out(cfg, "extract")
    save_features(out / "features", ids, matrix)
    save_attributes(out / "features.attrs.json", {i: s.attributes for i, s in zip(ids, samples)}, dataset.schema)
    print(f"{len(ids)} x {matrix.shape[1]} features -> {out / 'features.tnsr'}")
    return 0


def cmd_index(cfg) -> int:
    from .features import load_features, pca_fit, pca_transform, save_pca
    from .retrieval import Gallery, load_attributes, save_gallery

    prefix = Path(cfg["features"])
    ids, matrix = load_features(prefix)
    attrs_path = prefix.with_name(prefix.name + ".attrs.json")
    attrs = load_attributes(attrs_path) if attrs_path.exists() else {}
    pca = pca_fit(matrix, cfg["pca_dim"])
    gallery = Gallery(ids, pca_transform(pca, matrix), attrs)
    out = _prepare_out(cfg, "index")
    save_gallery(out / "gallery", gallery)
    save_pca(out / "pca.darn", pca)
    print(f"indexed {len(gallery)} rows at d={gallery.dim} -> {out / 'gallery.tnsr'}")
    return 0


def _load_queries(path):
    from .features import load_features
    from .tnsr import load_tensor

    p = Path(path)
    if p.suffix == ".tnsr":
        m = load_tensor(p)
        m = m.reshape(1, -1) if m.ndim == 1 else m
        return [f"q{i}" for i in range(m.shape[0])], m
    return load_features(p)


def cmd_query(cfg) -> int:
    from .features import load_pca, pca_transform
    from .retrieval import batch_query, load_gallery, write_results_csv

    if cfg["k"] < 1:
        raise ConfigError(f"k must be >= 1, got {cfg['k']}")
    gallery = load_gallery(cfg["gallery"])
    qids, queries = _load_queries(cfg["queries"])
    if cfg["pca"]:
        queries = pca_transform(load_pca(_require_file(cfg["pca"], "PCA model")), queries)
    results = batch_query(gallery, queries, cfg["k"], qids)
    out = _prepare_out(cfg, "query")
    if out is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["query_id", "rank", "gallery_id", "distance"])
        for r in results:
            for rank, (gid, dist) in enumerate(r.entries, start=1):
                w.writerow([r.query_id, rank, gid, repr(dist)])
    else:
        write_results_csv(out / "results.csv", results)
    return 0


def _write_sweep(path: Path, sweep: dict[int, float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gallery_size", "accuracy"])
        for size, acc in sorted(sweep.items()):
            w.writerow([size, repr(acc)])


def cmd_evaluate(cfg) -> int:
    from .losses import normalize_spec
    from .network import load_checkpoint
    from .pipeline import evaluate_dual, make_query_set
    from .synth import split

    spec = normalize_spec(cfg["feature_spec"])
    ckpt = _require_file(cfg["checkpoint"], "checkpoint")
    dataset = _load_dataset(cfg["data"])
    bench = _benchmark_config(cfg, _data_synth(dataset))
    dual, _, _ = load_checkpoint(ckpt)
    _, test_set = split(dataset, cfg["train_frac"], cfg["split_seed"])
    if len(test_set) == 0:
        raise ConfigError("test split is empty; lower --train-frac")
    qset = make_query_set(dataset, test_set)
    echo = {"checkpoint": str(ckpt), "feature_spec": list(spec)}
    report, sweep = evaluate_dual(dual, qset, spec, bench, cfg["seed"], echo)
    out = _prepare_out(cfg, "evaluate")
    report.write(out, "report")
    _write_sweep(out / "sweep.csv", sweep)
    k = bench.sweep_k
    print(f"top-{k} {report.top_k_curve.get(k, float('nan')):.4f}  ndcg@{k} {report.ndcg_at_k.get(k, float('nan')):.4f}")
    return 0


def cmd_ablate(cfg) -> int:
    from .pipeline import AblationTable, default_dataset, run_ablation, variant_by_name

    variants = [variant_by_name(n) for n in cfg["variants"]]
    if not cfg["seeds"]:
        raise ConfigError("at least one seed is required")
    if cfg["warmup_epochs"] < 0:
        raise ConfigError("warmup_epochs must be >= 0")
    if cfg["data"] is not None:
        dataset = _load_dataset(cfg["data"])
        bench = _benchmark_config(cfg, _data_synth(dataset))
    else:
        bench = _benchmark_config(cfg)
        dataset = default_dataset(bench)
    out = _prepare_out(cfg, "ablate")
    table: AblationTable = run_ablation(dataset, variants, bench, cfg["seeds"], out)
    write_json(out / "ablation.json", table.to_dict())
    k = bench.sweep_k
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", f"top{k}", f"ndcg{k}", "increase_ratio"])
        for v in variants:
            w.writerow([v.name, repr(table.mean_top_k(v.name, k)), repr(table.mean_ndcg(v.name, k)),
                        repr(table.increase_ratio(v.name))])
    for v in variants:
        print(f"{v.name:<12} top-{k} {table.mean_top_k(v.name, k):.3f}  ndcg@{k} {table.mean_ndcg(v.name, k):.3f}")
    return 0


def cmd_grad_check(cfg) -> int:
    from .gradcheck import TOLERANCE, check_full_loss, check_primitives

    if not 0 < cfg["epsilon"] <= 1e-2:
        raise ConfigError(f"epsilon must lie in (0, 1e-2], got {cfg['epsilon']}")
    if cfg["coords_per_param"] < 1:
        raise ConfigError("coords_per_param must be >= 1")
    out = _prepare_out(cfg, "grad-check")
    t0 = time.perf_counter()
    results = check_primitives(cfg["seed"], cfg["epsilon"])
    results.append(check_full_loss(cfg["seed"], coords_per_param=cfg["coords_per_param"], epsilon=cfg["epsilon"]))
    worst = max(r.max_rel_error for r in results)
    for r in results:
        print(f"{r.name:<24} max_rel_error={r.max_rel_error:.3e} coords={r.coords} kinks_skipped={r.kinks}")
    print(f"max_rel_error={worst:.6e} tolerance={TOLERANCE:g} seconds={time.perf_counter() - t0:.1f}")
    if out is not None:
        write_json(out / "grad_check.json", {
            "max_rel_error": worst,
            "checks": [{"name": r.name, "max_rel_error": r.max_rel_error, "coords": r.coords, "kinks": r.kinks}
                       for r in results],
        })
    return 0 if worst < TOLERANCE else EXIT_CODES["check-failed"]


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "extract": cmd_extract,
    "index": cmd_index,
    "query": cmd_query,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


def _fail(category: str, message: str) -> int:
    code = EXIT_CODES.get(category, EXIT_CODES["error"])
    line = json.dumps({"error": category, "exit_code": code, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = resolve(args.command, args)
        limits = threadpool_limits(cfg["threads"]) if cfg["threads"] > 0 else contextlib.nullcontext()
        with limits:
            return HANDLERS[args.command](cfg)
    except DarnError as exc:
        return _fail(exc.category, str(exc))
    except FileNotFoundError as exc:
        return _fail("io", f"{exc.filename}: file not found")
    except KeyboardInterrupt:
        return _fail("internal", "interrupted")


if __name__ == "__main__":
    sys.exit(main())
