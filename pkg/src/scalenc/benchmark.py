"""Method x variant x seed grid, per-cell metrics, manifests and the results table."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import handcrafted, selection
from .augment import AugmentConfig
from .autodiff import no_grad
from .autodiff.nn import BatchNorm
from .backbone import VARIANTS, ConfigError, EncoderConfig, SResNet
from .dataio import ObjectSet, SyntheticSpec, split, synthetic_objects
from .evaluation import knn_accuracy, linear_accuracy
from .training import TrainConfig, embed, to_nchw, train

log = logging.getLogger(__name__)

METHODS = ("manual", "supervised", "bt", "moco", "random")
NO_VARIANT = "-"


@dataclass
class BenchmarkConfig:
    methods: tuple = ("supervised",)
    variants: tuple = ("plain",)
    seeds: tuple = (0,)
    # data: paths to crop archives, or synthetic sets generated on the fly
    train_archive: str | None = None
    test_archive: str | None = None
    synth_train: int = 2000
    synth_test: int = 500
    synth_seed: int = 0
    val_fraction: float = 0.2
    # encoder
    block_widths: tuple = (32, 64, 128)
    block_depths: tuple = (3, 4, 3)
    size_mode: str = "standardized"
    # optimisation
    epochs: int = 100
    supervised_epochs: int | None = None
    ssl_epochs: int | None = None
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-5
    augment: bool = True
    bt_lambda: float = 5e-3
    moco_queue: int = 4096
    moco_tau: float = 0.07
    moco_momentum: float = 0.999
    # evaluation
    knn_k: int = 50
    probe_steps: int = 500
    val_linear: bool = True
    selection_slack: float = 0.05
    selection_mode: str = "tolerance"
    out_dir: str | None = None

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; expected one of {tuple(VARIANTS)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")

    def cells(self) -> list[tuple[str, str, int]]:
        out = []
        for m in self.methods:
            variants = (NO_VARIANT,) if m == "manual" else self.variants
            for v in variants:
                for s in self.seeds:
                    out.append((m, v, int(s)))
        return out

    def encoder(self, variant: str, num_classes: int) -> EncoderConfig:
        widths = tuple(int(w) for w in self.block_widths)
        return EncoderConfig.for_variant(
            variant, block_widths=widths, block_depths=tuple(int(d) for d in self.block_depths),
            stem_width=widths[0], embedding_dim=widths[-1], num_classes=num_classes, size_mode=self.size_mode,
        )

    def epochs_for(self, method: str) -> int:
        if method == "supervised" and self.supervised_epochs is not None:
            return self.supervised_epochs
        if method in ("bt", "moco") and self.ssl_epochs is not None:
            return self.ssl_epochs
        return self.epochs

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def code_hash(root: Path | None = None) -> str:
    """Git-style hash of the package sources: blob SHA-1 per file, then SHA-1 of the listing."""
    root = Path(root or Path(__file__).parent)
    listing = []
    for path in sorted(root.rglob("*.py")):
        data = path.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        listing.append(f"{blob} {path.relative_to(root).as_posix()}")
    return hashlib.sha1("\n".join(listing).encode()).hexdigest()


def objects_fingerprint(objects: ObjectSet) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(objects.images, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(objects.sizes, dtype=np.float64).tobytes())
    if objects.labels is not None:
        h.update(objects.labels.astype(np.int64).tobytes())
    return h.hexdigest()


METRIC_FIELDS = ("method", "variant", "seed", "linear_acc", "knn_acc", "best_epoch", "seconds", "status", "error")


@dataclass
class RunManifest:
    config: dict
    code_version: str
    seeds: list[int]
    dataset_fingerprint: str
    rows: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    warnings: list[str] = field(default_factory=list)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(asdict(self), indent=2, default=_jsonable))
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: row.get(k, "") for k in METRIC_FIELDS})


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class Cell:
    method: str
    variant: str
    n: int
    linear_mean: float
    linear_std: float
    knn_mean: float
    knn_std: float
    failed: int = 0

    @property
    def single_seed(self) -> bool:
        return self.n == 1


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def aggregate(rows: list[dict]) -> list[Cell]:
    """Mean and sample standard deviation per (method, variant), in first-seen order."""
    keys = []
    for r in rows:
        k = (r["method"], r["variant"])
        if k not in keys:
            keys.append(k)
    cells = []
    for m, v in keys:
        group = [r for r in rows if (r["method"], r["variant"]) == (m, v)]
        ok = [r for r in group if r["status"] == "ok"]
        lm, ls = _mean_std([r["linear_acc"] for r in ok])
        km, ks = _mean_std([r["knn_acc"] for r in ok])
        cells.append(Cell(m, v, len(ok), lm, ls, km, ks, len(group) - len(ok)))
    return cells


TABLE_FIELDS = ("method", "variant", "n_seeds", "linear_mean", "linear_std", "knn_mean", "knn_std",
                "single_seed", "failed")


def write_table_csv(path, cells: list[Cell]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_FIELDS)
        for c in cells:
            w.writerow([c.method, c.variant, c.n, f"{100 * c.linear_mean:.2f}", f"{100 * c.linear_std:.2f}",
                        f"{100 * c.knn_mean:.2f}", f"{100 * c.knn_std:.2f}", int(c.single_seed), c.failed])


def format_table(cells: list[Cell]) -> str:
    """Accuracies in percent as mean ± std; '*' marks single-seed cells."""
    header = f"{'method':<12}{'variant':<12}{'linear':>16}{'kNN':>16}{'seeds':>7}"
    lines = [header, "-" * len(header)]
    for c in cells:
        mark = "*" if c.single_seed else ""
        lin = f"{100 * c.linear_mean:.1f} ± {100 * c.linear_std:.1f}{mark}"
        knn = f"{100 * c.knn_mean:.1f} ± {100 * c.knn_std:.1f}{mark}"
        fail = f"  ({c.failed} failed)" if c.failed else ""
        lines.append(f"{c.method:<12}{c.variant:<12}{lin:>16}{knn:>16}{c.n:>7}{fail}")
    if any(c.single_seed for c in cells):
        lines.append("* single seed: std reported as 0")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkData:
    train: ObjectSet
    test: ObjectSet
    num_classes: int
    _features: dict = field(default_factory=dict)

    def features(self, which: str) -> np.ndarray:
        if which not in self._features:
            objs = self.train if which == "train" else self.test
            self._features[which] = handcrafted.feature_matrix(objs)[0]
        return self._features[which]


def load_data(cfg: BenchmarkConfig) -> BenchmarkData:
    from .dataio import load_crop_archive

    if cfg.train_archive:
        tr = load_crop_archive(cfg.train_archive)
        if not cfg.test_archive:
            raise ConfigError("train_archive given without test_archive")
        te = load_crop_archive(cfg.test_archive)
    else:
        tr = synthetic_objects(SyntheticSpec(n_objects=cfg.synth_train, seed=cfg.synth_seed, prefix="train"))
        te = synthetic_objects(SyntheticSpec(n_objects=cfg.synth_test, seed=cfg.synth_seed + 10_000, prefix="test"))
    if tr.labels is None or te.labels is None:
        raise ConfigError("benchmark data must be labelled")
    num_classes = int(max(tr.labels.max(), te.labels.max())) + 1
    return BenchmarkData(tr, te, num_classes)


def recalibrate_bn(model: SResNet, images: np.ndarray, sizes: np.ndarray, batch_size: int = 128) -> None:
    """Replace BN running statistics with the average batch statistics over ``images``."""
    bns = [m for m in model.modules() if isinstance(m, BatchNorm)]
    saved = [bn.momentum for bn in bns]
    model.train()
    with no_grad():
        for i, lo in enumerate(range(0, len(images), batch_size)):
            hi = min(lo + batch_size, len(images))
            if hi - lo < 2:
                break
            for bn in bns:
                bn.momentum = 1.0 / (i + 1)
            model(to_nchw(images[lo:hi]), sizes[lo:hi])
    for bn, m in zip(bns, saved):
        bn.momentum = m
    model.eval()


def _train_val(data: BenchmarkData, cfg: BenchmarkConfig, seed: int):
    (tr_idx, va_idx), warnings = split(data.train.slide_ids, (1 - cfg.val_fraction, cfg.val_fraction),
                                       seed=seed, labels=data.train.labels)
    return tr_idx, va_idx, warnings


def run_manual(data: BenchmarkData, cfg: BenchmarkConfig, seed: int) -> dict:
    tr_idx, va_idx, warnings = _train_val(data, cfg, seed)
    X = data.features("train")
    y = data.train.labels
    report = selection.select_best(X, y, (tr_idx, va_idx), slack=cfg.selection_slack, mode=cfg.selection_mode)
    chosen = report.best
    Xt, Xs = X[tr_idx][:, chosen], data.features("test")[:, chosen]
    yt, ys = y[tr_idx], data.test.labels
    if not chosen:
        acc = float(np.mean(ys == np.bincount(yt).argmax()))
        return {"linear_acc": acc, "knn_acc": acc, "best_epoch": 0, "warnings": warnings,
                "selected": []}
    mu, sd = Xt.mean(axis=0), Xt.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Xt, Xs = (Xt - mu) / sd, (Xs - mu) / sd
    return {
        "linear_acc": linear_accuracy(Xt, yt, Xs, ys, steps=cfg.probe_steps),
        "knn_acc": knn_accuracy(Xt, yt, Xs, ys, k=cfg.knn_k),
        "best_epoch": 0,
        "warnings": warnings + report.warnings,
        "selected": [handcrafted.FEATURE_NAMES[i] for i in chosen],
    }


def _test_metrics(model, train: ObjectSet, test: ObjectSet, cfg: BenchmarkConfig) -> tuple[float, float]:
    tr = embed(model, train.images, train.sizes)
    te = embed(model, test.images, test.sizes)
    if not (np.all(np.isfinite(tr)) and np.all(np.isfinite(te))):
        raise FloatingPointError("non-finite embeddings")
    lin = linear_accuracy(tr, train.labels, te, test.labels, steps=cfg.probe_steps)
    knn = knn_accuracy(tr, train.labels, te, test.labels, k=cfg.knn_k)
    return lin, knn


def run_encoder(method: str, variant: str, data: BenchmarkData, cfg: BenchmarkConfig, seed: int,
                out_dir: Path | None = None) -> dict:
    tr_idx, va_idx, warnings = _train_val(data, cfg, seed)
    train_set, val_set = data.train.subset(tr_idx), data.train.subset(va_idx)
    enc = cfg.encoder(variant, data.num_classes)
    if method == "random":
        model = SResNet(enc, seed=seed)
        recalibrate_bn(model, train_set.images, train_set.sizes, cfg.batch_size)
        best_epoch = 0
    else:
        tcfg = TrainConfig(
            method=method, encoder=enc, epochs=cfg.epochs_for(method), batch_size=cfg.batch_size, lr=cfg.lr,
            weight_decay=cfg.weight_decay, seed=seed, bt_lambda=cfg.bt_lambda, moco_queue=cfg.moco_queue,
            moco_tau=cfg.moco_tau, moco_momentum=cfg.moco_momentum,
            augment=AugmentConfig() if cfg.augment else None, knn_k=cfg.knn_k, probe_steps=cfg.probe_steps,
            eval_linear=cfg.val_linear, out_dir=str(out_dir) if out_dir else None,
        )
        result = train(train_set, val_set, tcfg)
        model, best_epoch = result.model, result.best_epoch
        warnings = warnings + result.warnings
    lin, knn = _test_metrics(model, train_set, data.test, cfg)
    return {"linear_acc": lin, "knn_acc": knn, "best_epoch": best_epoch, "warnings": warnings}


def run_cell(method: str, variant: str, seed: int, data: BenchmarkData, cfg: BenchmarkConfig,
             out_dir: Path | None = None) -> dict:
    if method == "manual":
        return run_manual(data, cfg, seed)
    return run_encoder(method, variant, data, cfg, seed, out_dir)


def run_benchmark(cfg: BenchmarkConfig, data: BenchmarkData | None = None) -> tuple[RunManifest, list[Cell]]:
    """Run every cell; a failing cell is recorded and the rest continue."""
    start = time.perf_counter()
    data = data or load_data(cfg)
    fingerprint = hashlib.sha256(
        (objects_fingerprint(data.train) + objects_fingerprint(data.test)).encode()).hexdigest()
    manifest = RunManifest(cfg.to_dict(), code_hash(), [int(s) for s in cfg.seeds], fingerprint)
    out = Path(cfg.out_dir) if cfg.out_dir else None
    for method, variant, seed in cfg.cells():
        t0 = time.perf_counter()
        row = {"method": method, "variant": variant, "seed": seed}
        cell_dir = out / "cells" / f"{method}_{variant.replace('+', '_')}_{seed}" if out else None
        try:
            res = run_cell(method, variant, seed, data, cfg, cell_dir)
            row.update(linear_acc=res["linear_acc"], knn_acc=res["knn_acc"], best_epoch=res["best_epoch"],
                       status="ok", error="")
            manifest.warnings.extend(f"{method}/{variant}/{seed}: {w}" for w in res.get("warnings", []))
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
            log.error("cell %s/%s/%d failed: %s", method, variant, seed, exc)
            log.debug(traceback.format_exc())
            row.update(linear_acc=float("nan"), knn_acc=float("nan"), best_epoch=-1, status="failed",
                       error=f"{type(exc).__name__}: {exc}")
        row["seconds"] = round(time.perf_counter() - t0, 3)
        manifest.rows.append(row)
        log.info("cell %s/%s/%d: %s", method, variant, seed, row)
    manifest.wall_clock = round(time.perf_counter() - start, 3)
    cells = aggregate(manifest.rows)
    if out:
        manifest.write(out)
        write_table_csv(out / "table.csv", cells)
        (out / "table.txt").write_text(format_table(cells) + "\n")
    return manifest, cells
