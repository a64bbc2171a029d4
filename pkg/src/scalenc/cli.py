"""Command-line entry point: ``scalenc <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgio
from . import handcrafted, selection
from .autodiff.checkpoint import CheckpointError, load_checkpoint
from .backbone import ConfigError, EncoderConfig, SResNet
from .benchmark import (
    BenchmarkConfig,
    RunManifest,
    code_hash,
    format_table,
    objects_fingerprint,
    run_benchmark,
    run_cell,
)
from .dataio import (
    DataError,
    SyntheticSpec,
    dataset_fingerprint,
    generate_synthetic,
    load_crop_archive,
    load_objects,
    save_crop_archive,
    split,
)
from .evaluation import knn_accuracy, linear_accuracy
from .training import embed
from .visualize import visualize_weights

log = logging.getLogger("scalenc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _settings(args) -> dict[str, str]:
    values = cfgio.parse_file(args.config) if args.config else {}
    values.update(cfgio.parse_overrides(args.set))
    if args.seed is not None:
        values["seeds"] = str(args.seed)
    return values


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _bench_config(args, **forced) -> BenchmarkConfig:
    values = _settings(args)
    values.update({k: str(v) for k, v in forced.items()})
    return cfgio.build(BenchmarkConfig, values)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    values = _settings(args)
    if "seeds" in values:
        values["seed"] = values.pop("seeds")
    spec = cfgio.build(SyntheticSpec, values)
    root = generate_synthetic(spec, _out_dir(args))
    print(f"wrote {root} fingerprint={dataset_fingerprint(root)}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    objects = load_objects(args.data)
    out = _out_dir(args) / "crops.zip"
    save_crop_archive(out, objects)
    print(f"{len(objects)} objects -> {out} fingerprint={dataset_fingerprint(args.data)}")
    return EXIT_OK


def cmd_extract_features(args) -> int:
    objects = load_crop_archive(args.archive)
    matrix, flags = handcrafted.feature_matrix(objects)
    out = _out_dir(args)
    ids = [f"{s}:{i}" for s, i in zip(objects.slide_ids, objects.instance_ids)]
    handcrafted.write_feature_csv(out / "features.csv", ids, matrix)
    (out / "schema.json").write_text(json.dumps(handcrafted.schema(), indent=1))
    flagged = [f"{oid}: {'; '.join(f)}" for oid, f in zip(ids, flags) if f]
    if flagged:
        (out / "warnings.txt").write_text("\n".join(flagged) + "\n")
    print(f"{len(ids)} objects x {matrix.shape[1]} features -> {out / 'features.csv'} ({len(flagged)} flagged)")
    return EXIT_OK


def cmd_select_features(args) -> int:
    cfg = _bench_config(args)
    objects = load_crop_archive(args.archive)
    if objects.labels is None:
        raise DataError("feature selection needs labelled objects")
    if args.features:
        _, X = handcrafted.read_feature_csv(args.features)
        if len(X) != len(objects):
            raise DataError(f"{args.features} has {len(X)} rows for {len(objects)} objects")
    else:
        X, _ = handcrafted.feature_matrix(objects)
    (tr, va), warnings = split(objects.slide_ids, (1 - cfg.val_fraction, cfg.val_fraction),
                               seed=int(cfg.seeds[0]), labels=objects.labels)
    report = selection.select_best(X, objects.labels, (tr, va), slack=cfg.selection_slack,
                                   mode=cfg.selection_mode)
    out = _out_dir(args)
    report.write_csv(out / "selection.csv", names=handcrafted.FEATURE_NAMES)
    (out / "selected.txt").write_text("\n".join(handcrafted.FEATURE_NAMES[i] for i in report.best) + "\n")
    for row in report.rows():
        print(f"{row['candidate']:<13} size={row['size']:<3} nll={row['nll']:.4f} acc={row['accuracy']:.3f}")
    print(f"chosen: {report.best_name} ({len(report.best)} features)")
    return EXIT_OK


def _single_cell(args, method: str, variant: str) -> int:
    cfg = _bench_config(args, methods=method, variants=variant)
    if args.train_archive:
        cfg.train_archive, cfg.test_archive = args.train_archive, args.test_archive
    from .benchmark import load_data

    data = load_data(cfg)
    out = _out_dir(args)
    start = time.perf_counter()
    seed = int(cfg.seeds[0])
    res = run_cell(method, variant, seed, data, cfg, out)
    manifest = RunManifest(cfg.to_dict(), code_hash(), [seed],
                           objects_fingerprint(data.train) + ":" + objects_fingerprint(data.test))
    manifest.rows.append({"method": method, "variant": variant, "seed": seed, "linear_acc": res["linear_acc"],
                          "knn_acc": res["knn_acc"], "best_epoch": res["best_epoch"], "status": "ok", "error": "",
                          "seconds": round(time.perf_counter() - start, 3)})
    manifest.warnings.extend(res.get("warnings", []))
    manifest.wall_clock = round(time.perf_counter() - start, 3)
    manifest.write(out)
    print(f"{method}/{variant} seed {seed}: linear {res['linear_acc']:.4f} knn {res['knn_acc']:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _single_cell(args, args.method, args.variant)


def cmd_eval(args) -> int:
    arrays, meta = load_checkpoint(args.checkpoint)
    if "config" not in meta:
        raise ConfigError(f"{args.checkpoint} does not record an encoder config")
    enc = EncoderConfig(**meta["config"])
    model = SResNet(enc)
    model.load_state_dict(arrays)
    model.eval()
    train_objs, test_objs = load_crop_archive(args.train_archive), load_crop_archive(args.test_archive)
    if train_objs.labels is None or test_objs.labels is None:
        raise DataError("evaluation needs labelled archives")
    tr = embed(model, train_objs.images, train_objs.sizes)
    te = embed(model, test_objs.images, test_objs.sizes)
    if not (np.all(np.isfinite(tr)) and np.all(np.isfinite(te))):
        raise FloatingPointError("non-finite embeddings")
    lin = linear_accuracy(tr, train_objs.labels, te, test_objs.labels, normalize=args.normalize)
    knn = knn_accuracy(tr, train_objs.labels, te, test_objs.labels, k=args.k, normalize=args.normalize)
    result = {"checkpoint": str(args.checkpoint), "linear_acc": lin, "knn_acc": knn, "k": args.k}
    if args.out_dir:
        (_out_dir(args) / "eval.json").write_text(json.dumps(result, indent=2))
    print(f"linear {lin:.4f} knn {knn:.4f}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _bench_config(args)
    if args.train_archive:
        cfg.train_archive, cfg.test_archive = args.train_archive, args.test_archive
    cfg.out_dir = str(_out_dir(args))
    manifest, cells = run_benchmark(cfg)
    print(format_table(cells))
    print(f"wall clock {manifest.wall_clock:.1f}s; outputs in {cfg.out_dir}")
    failed = [r for r in manifest.rows if r["status"] != "ok"]
    if failed and len(failed) == len(manifest.rows):
        if all(r["error"].startswith("FloatingPointError") for r in failed):
            return EXIT_NUMERIC
    return EXIT_OK


def cmd_visualize_weights(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    visualize_weights(args.checkpoint, out, scale=args.scale)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--out-dir", required=out_required, help="output directory")


def _archives(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument("--train-archive", required=required, help="prepared training crops (zip)")
    p.add_argument("--test-archive", required=required, help="prepared test crops (zip)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalenc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic multi-scale dataset")
    _common(p)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("prepare", help="crop objects from a dataset directory into an archive")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory in the generic format")
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("extract-features", help="compute the 68 handcrafted features")
    _common(p)
    p.add_argument("--archive", required=True)
    p.set_defaults(fn=cmd_extract_features)

    p = sub.add_parser("select-features", help="stepwise feature selection")
    _common(p)
    p.add_argument("--archive", required=True)
    p.add_argument("--features", help="feature CSV from extract-features (recomputed if omitted)")
    p.set_defaults(fn=cmd_select_features)

    p = sub.add_parser("train", help="train one encoder and evaluate it")
    _common(p)
    _archives(p)
    p.add_argument("--method", default="supervised", choices=("supervised", "bt", "moco", "random", "manual"))
    p.add_argument("--variant", default="plain", choices=("plain", "size", "sdcl", "sdcl+size"))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="linear and kNN accuracy of a checkpoint")
    _common(p, out_required=False)
    _archives(p, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--normalize", action="store_true", help="L2-normalise embeddings first")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("benchmark", help="run the method x variant x seed grid")
    _common(p)
    _archives(p)
    p.set_defaults(fn=cmd_benchmark)

    p = sub.add_parser("visualize-weights", help="PNG grid of first-layer kernels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--scale", type=int, default=8)
    p.set_defaults(fn=cmd_visualize_weights)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
