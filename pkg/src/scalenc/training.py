"""Supervised, Barlow Twins and MoCo training of the SResNet encoder."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, augment_batch
from .autodiff import functional as F
from .autodiff.checkpoint import save_checkpoint
from .autodiff.nn import Module
from .autodiff.optim import Adam
from .autodiff.tensor import Tensor, concat, no_grad
from .backbone import Classifier, EncoderConfig, ProjectionHead, SResNet
from .evaluation import knn_accuracy, linear_accuracy, select_model

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_correlation(zA: Tensor, zB: Tensor, center: bool = False) -> Tensor:
    """C_ij = sum_b zA_bi zB_bj / (||zA_:i|| ||zB_:j||)."""
    if zA.shape != zB.shape or zA.ndim != 2:
        raise ValueError(f"embedding batches must share an (N, d) shape, got {zA.shape} and {zB.shape}")
    if center:
        zA = zA - zA.mean(axis=0, keepdims=True)
        zB = zB - zB.mean(axis=0, keepdims=True)
    for name, z in (("zA", zA), ("zB", zB)):
        norms = np.sqrt((z.data.astype(np.float64) ** 2).sum(axis=0))
        dead = np.flatnonzero(norms == 0)
        if dead.size:
            raise ValueError(f"{name} has an all-zero embedding column at dimension {int(dead[0])}")
    nA = (zA * zA).sum(axis=0, keepdims=True).sqrt()
    nB = (zB * zB).sum(axis=0, keepdims=True).sqrt()
    return (zA / nA).T @ (zB / nB)


def bt_loss(zA: Tensor, zB: Tensor, lam: float = 5e-3, center: bool = False) -> Tensor:
    """sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2."""
    if lam <= 0:
        raise ValueError(f"redundancy weight must be > 0, got {lam}")
    if zA.shape[0] < 2:
        raise ValueError("Barlow Twins loss needs at least 2 samples")
    c = cross_correlation(zA, zB, center)
    d = c.shape[0]
    eye = np.eye(d, dtype=c.dtype)
    on = ((1.0 - (c * eye).sum(axis=1)) ** 2).sum()
    off = ((c * (1.0 - eye)) ** 2).sum()
    return on + off * lam


def moco_loss(q: Tensor, k_pos: Tensor, queue: np.ndarray, tau: float = 0.07) -> Tensor:
    """InfoNCE of each query against its positive key and every queued negative, averaged."""
    queue = np.asarray(queue)
    if queue.size == 0:
        raise ValueError("MoCo queue is empty; push at least one batch of keys first")
    pos = (q * k_pos).sum(axis=1, keepdims=True)
    neg = q @ Tensor(queue.T.astype(q.dtype), dtype=q.dtype)
    logits = concat([pos, neg], axis=1) * (1.0 / tau)
    return F.cross_entropy(logits, np.zeros(q.shape[0], dtype=np.int64))


@dataclass
class MoCoState:
    capacity: int = 4096
    tau: float = 0.07
    momentum: float = 0.999
    queue: np.ndarray | None = None

    def __len__(self) -> int:
        return 0 if self.queue is None else len(self.queue)

    def push(self, keys: np.ndarray) -> None:
        keys = np.asarray(keys, dtype=np.float32)
        norms = np.linalg.norm(keys, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("queued keys must be L2-normalised")
        q = keys if self.queue is None else np.concatenate([self.queue, keys], axis=0)
        self.queue = q[-self.capacity :]


def momentum_update(query: Module, key: Module, m: float) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q, parameters and BN buffers alike."""
    for (_, pk), (_, pq) in zip(key.named_parameters(), query.named_parameters()):
        pk.data = (m * pk.data + (1.0 - m) * pq.data).astype(pk.dtype)
    for (_, bk), (_, bq) in zip(key.named_buffers(), query.named_buffers()):
        bk[...] = m * bk + (1.0 - m) * bq


# ---------------------------------------------------------------------------
# configuration and bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    method: str = "supervised"  # supervised | bt | moco
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 0
    bt_lambda: float = 5e-3
    bt_center: bool = False
    proj_hidden: int = 256
    proj_out: int = 256
    moco_tau: float = 0.07
    moco_queue: int = 4096
    moco_momentum: float = 0.999
    moco_projection: bool = True
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    knn_k: int = 50
    probe_steps: int = 500
    eval_linear: bool = True
    out_dir: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_linear_acc: float
    val_knn_acc: float


@dataclass
class TrainResult:
    model: SResNet
    history: list[EpochRecord]
    best_epoch: int
    head: Module | None = None
    warnings: list[str] = field(default_factory=list)
    extra: object = None
    step_losses: list[float] = field(default_factory=list)


HISTORY_FIELDS = ("epoch", "train_loss", "val_linear_acc", "val_knn_acc")


def write_history(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for rec in history:
            w.writerow([rec.epoch, f"{rec.train_loss:.8g}", f"{rec.val_linear_acc:.6f}", f"{rec.val_knn_acc:.6f}"])


def to_nchw(images: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2)))


def embed(model: SResNet, images: np.ndarray, sizes, batch_size: int = 256) -> np.ndarray:
    """Eval-mode embeddings of (N, 32, 32, 3) images."""
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for lo in range(0, len(images), batch_size):
            s = None if sizes is None else np.asarray(sizes)[lo : lo + batch_size]
            out.append(model(to_nchw(images[lo : lo + batch_size]), s).data)
    model.train(was_training)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.embedding_dim), np.float32)


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        idx = order[lo : lo + batch_size]
        if len(idx) >= min_size:
            yield idx


def _validate(model, train, val, cfg: TrainConfig) -> tuple[float, float]:
    if val is None or train.labels is None or val.labels is None:
        return float("nan"), float("nan")
    tr = embed(model, train.images, train.sizes)
    va = embed(model, val.images, val.sizes)
    knn = knn_accuracy(tr, train.labels, va, val.labels, k=cfg.knn_k)
    lin = linear_accuracy(tr, train.labels, va, val.labels, steps=cfg.probe_steps) if cfg.eval_linear else float("nan")
    return lin, knn


def _params(*modules):
    named = []
    for prefix, m in modules:
        named.extend((f"{prefix}.{n}", p) for n, p in m.named_parameters())
    return named


def _run(cfg: TrainConfig, train, val, step_fn, modules, extra_state=None) -> TrainResult:
    """Shared epoch loop: checkpoint each epoch, keep the state with the best val kNN."""
    model = modules[0][1]
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(_params(*modules), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: list[EpochRecord] = []
    step_losses: list[float] = []
    states = []
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    min_batch = 4 if cfg.method == "bt" else 2
    for epoch in range(1, cfg.epochs + 1):
        for _, m in modules:
            m.train()
        losses = []
        for idx in _batches(len(train.images), cfg.batch_size, rng, min_batch):
            loss = step_fn(idx, rng)
            if loss is None:
                continue
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if not np.isfinite(losses[-1]):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
        lin, knn = _validate(model, train, val, cfg)
        step_losses.extend(losses)
        rec = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"), lin, knn)
        history.append(rec)
        log.info("epoch %d loss %.4f val_lin %.4f val_knn %.4f", epoch, rec.train_loss, lin, knn)
        states.append(copy.deepcopy(model.state_dict()))
        if out_dir:
            save_checkpoint(out_dir / f"epoch_{epoch:03d}.ckpt", model.state_dict(),
                            {"epoch": epoch, "config": cfg.encoder.to_dict()})
    if val is not None and not any(np.isnan(r.val_knn_acc) for r in history):
        best = select_model(history)
    else:
        best = len(history) - 1
    model.load_state_dict(states[best])
    if out_dir:
        write_history(out_dir / "history.csv", history)
        save_checkpoint(out_dir / "best.ckpt", model.state_dict(),
                        {"epoch": history[best].epoch, "config": cfg.encoder.to_dict()})
    return TrainResult(model, history, history[best].epoch, step_losses=step_losses)


def _views(train, idx, rng, cfg: TrainConfig):
    imgs, sizes = train.images[idx], train.sizes[idx]
    if cfg.augment is not None:
        imgs, sizes = augment_batch(imgs, sizes, rng, cfg.augment)
    return to_nchw(imgs), sizes


def train_supervised(train, val, cfg: TrainConfig) -> TrainResult:
    if train.labels is None:
        raise ValueError("supervised training needs labels")
    num_classes = cfg.encoder.num_classes or int(train.labels.max()) + 1
    warnings = []
    missing = sorted(set(range(num_classes)) - set(np.unique(train.labels).tolist()))
    if missing:
        warnings.append(f"classes {missing} absent from the training split")
        log.warning(warnings[-1])
    model = SResNet(cfg.encoder, seed=cfg.seed)
    head = Classifier(cfg.encoder.embedding_dim, num_classes, rng=np.random.default_rng(cfg.seed + 2))

    def step(idx, rng):
        x, sizes = _views(train, idx, rng, cfg)
        return F.cross_entropy(head(model(x, sizes)), train.labels[idx])

    result = _run(cfg, train, val, step, [("encoder", model), ("classifier", head)])
    result.head = head
    result.warnings = warnings
    return result


def train_bt(train, val, cfg: TrainConfig) -> TrainResult:
    if cfg.batch_size < 4:
        raise ValueError("Barlow Twins needs a batch size of at least 4")
    model = SResNet(cfg.encoder, seed=cfg.seed)
    head = ProjectionHead(cfg.encoder.embedding_dim, cfg.proj_hidden, cfg.proj_out,
                          rng=np.random.default_rng(cfg.seed + 2))

    def step(idx, rng):
        xa, sa = _views(train, idx, rng, cfg)
        xb, sb = _views(train, idx, rng, cfg)
        n = len(idx)
        # both views share one forward pass so BN sees the same statistics for each
        z = head(model(F.concat([xa, xb], axis=0), np.concatenate([sa, sb], axis=0)))
        return bt_loss(z[:n], z[n:], cfg.bt_lambda, cfg.bt_center)

    result = _run(cfg, train, val, step, [("encoder", model), ("projector", head)])
    result.head = head
    return result


def train_moco(train, val, cfg: TrainConfig) -> TrainResult:
    model = SResNet(cfg.encoder, seed=cfg.seed)
    head = (ProjectionHead(cfg.encoder.embedding_dim, cfg.proj_hidden, cfg.proj_out,
                           rng=np.random.default_rng(cfg.seed + 2)) if cfg.moco_projection else None)
    key_model = copy.deepcopy(model)
    key_head = copy.deepcopy(head)
    state = MoCoState(cfg.moco_queue, cfg.moco_tau, cfg.moco_momentum)

    def project(enc, hd, x, s):
        z = enc(x, s)
        z = hd(z) if hd is not None else z
        return F.l2_normalize(z, axis=1)

    def step(idx, rng):
        xq, sq = _views(train, idx, rng, cfg)
        xk, sk = _views(train, idx, rng, cfg)
        momentum_update(model, key_model, state.momentum)
        if head is not None:
            momentum_update(head, key_head, state.momentum)
        with no_grad():
            k = project(key_model, key_head, xk, sk).data
        if len(state) == 0:
            state.push(k)
            return None
        q = project(model, head, xq, sq)
        loss = moco_loss(q, Tensor(k), state.queue, state.tau)
        state.push(k)
        return loss

    modules = [("encoder", model)] + ([("projector", head)] if head is not None else [])
    result = _run(cfg, train, val, step, modules)
    result.head = head
    result.extra = state
    return result


TRAINERS = {"supervised": train_supervised, "bt": train_bt, "moco": train_moco}


def train(train_set, val_set, cfg: TrainConfig) -> TrainResult:
    try:
        fn = TRAINERS[cfg.method]
    except KeyError:
        raise ValueError(f"unknown training method {cfg.method!r}") from None
    return fn(train_set, val_set, cfg)
