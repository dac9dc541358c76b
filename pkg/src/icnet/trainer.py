"""SGD training loop, evaluation, metrics logging and the ICCK checkpoint format."""

import csv
import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from icnet import autograd as ag
from icnet.datasets import augment_batch
from icnet.models import from_description
from icnet.tensor_core import NonFiniteError, resolve_dtype


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the model."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    lr_steps: tuple = ()
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    dtype: str = "f64"
    record_wall_time: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        self.lr_steps = tuple(int(s) for s in self.lr_steps)
        try:
            resolve_dtype(self.dtype)
        except TypeError as exc:
            raise ValueError(str(exc)) from None

    def lr_at(self, epoch):
        drops = sum(1 for s in self.lr_steps if epoch >= s)
        return self.lr * self.lr_factor**drops


def sgd_step(params, velocity, lr, momentum=0.9, weight_decay=1e-4):
    """Heavy-ball SGD with L2 decay folded into the gradient.

    ``v <- momentum * v + (g + weight_decay * p)`` then ``p <- p - lr * v``.
    Parameters without a gradient are treated as having a zero gradient.
    """
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise NonFiniteError(f"gradient of {name} has {bad} non-finite entries")
        dt = p.value.dtype.type
        step = g + dt(weight_decay) * p.value
        v = velocity.get(name)
        v = step if v is None else dt(momentum) * v + step
        velocity[name] = v
        p.value = p.value - dt(lr) * v
    return velocity


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    top1: float
    lam: float = 0.0
    alpha: float = 0.0
    lr: float = 0.0
    wall_ms: float = 0.0


METRIC_COLUMNS = ["epoch", "split", "loss", "top1", "lambda", "alpha", "lr", "wall_ms"]


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


class MetricsWriter:
    """Writes ``metrics.csv`` and a JSON-lines mirror, flushing after every row."""

    def __init__(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.csv_path = out / "metrics.csv"
        self.jsonl_path = out / "metrics.jsonl"
        self._csv = open(self.csv_path, "w", newline="")
        self._jsonl = open(self.jsonl_path, "w")
        self._writer = csv.writer(self._csv, lineterminator="\n")
        self._writer.writerow(METRIC_COLUMNS)

    def write(self, rec):
        row = [rec.epoch, rec.split, rec.loss, rec.top1, rec.lam, rec.alpha, rec.lr, rec.wall_ms]
        self._writer.writerow([_fmt(v) for v in row])
        self._jsonl.write(json.dumps(dict(zip(METRIC_COLUMNS, row))) + "\n")
        self._csv.flush()
        self._jsonl.flush()

    def close(self):
        self._csv.close()
        self._jsonl.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        for k in METRIC_COLUMNS[2:]:
            r[k] = float(r[k])
    return rows


def cross_entropy_loss(model, xb, yb, progress):
    logits = model.forward(xb, training=True)
    return ag.cross_entropy(logits, yb), logits


def evaluate(model, dataset, batch_size=256):
    """Mean cross-entropy and top-1 accuracy in evaluation mode.

    Ties in the logits go to the lowest class index.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = model.logits(dataset.x.astype(model.dtype, copy=False), batch_size)
    with ag.no_grad():
        loss = ag.cross_entropy(logits, dataset.y).item()
    top1 = float((logits.argmax(axis=1) == dataset.y).mean())
    return loss, top1


@dataclass
class TrainResult:
    records: list
    velocity: dict
    epochs_run: int
    extra: dict = field(default_factory=dict)


def train(
    model,
    train_set,
    cfg,
    eval_set=None,
    loss_fn=cross_entropy_loss,
    on_epoch_start=None,
    lambda_at=None,
    writer=None,
):
    """Train ``model`` in place with mini-batch SGD.

    ``loss_fn(model, xb, yb, progress)`` returns ``(loss Variable, logits)``.
    ``on_epoch_start(epoch, progress)`` may adjust the model (alpha schedules).
    Shuffling and augmentation draws are pure functions of ``(cfg.seed, epoch)``.
    """
    n = len(train_set)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if train_set.num_classes != model.spec.num_classes:
        raise ValueError(f"dataset has {train_set.num_classes} classes, model {model.spec.num_classes}")
    params = model.trainable_parameters()
    velocity = {}
    records = []
    x_all = train_set.x.astype(model.dtype, copy=False)
    for epoch in range(cfg.epochs):
        progress = epoch / (cfg.epochs - 1) if cfg.epochs > 1 else 1.0
        if on_epoch_start is not None:
            on_epoch_start(epoch, progress)
        lr = cfg.lr_at(epoch)
        lam = lambda_at(progress) if lambda_at is not None else 0.0
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = x_all[idx]
            if train_set.augment:
                xb = augment_batch(xb, cfg.seed, epoch, idx)
            yb = train_set.y[idx]
            for p in params.values():
                p.grad = None
            loss, logits = loss_fn(model, xb, yb, progress)
            lv = loss.item()
            if not math.isfinite(lv):
                raise DivergenceError(f"non-finite loss {lv} at epoch {epoch}, batch starting {start}")
            loss.backward()
            sgd_step(params, velocity, lr, cfg.momentum, cfg.weight_decay)
            loss_sum += lv * len(idx)
            correct += int((logits.value.argmax(axis=1) == yb).sum())
        wall = (time.perf_counter() - t0) * 1000.0 if cfg.record_wall_time else 0.0
        alpha = model.mean_alpha()
        rows = [MetricsRecord(epoch, "train", loss_sum / n, correct / n, lam, alpha, lr, wall)]
        if eval_set is not None:
            el, et = evaluate(model, eval_set)
            rows.append(MetricsRecord(epoch, "test", el, et, lam, alpha, lr, 0.0))
        for r in rows:
            records.append(r)
            if writer is not None:
                writer.write(r)
    return TrainResult(records, velocity, cfg.epochs)


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"ICCK"
VERSION = 1
_DTYPE_TAGS = {"float32": 0, "float64": 1, "int64": 2, "uint8": 3}
_TAG_DTYPES = {v: np.dtype(k).newbyteorder("<") for k, v in _DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    spec_hash: str
    meta: dict
    tensors: dict


def _pack_str(s):
    b = s.encode()
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(ckpt):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(_pack_str(ckpt.spec_hash))
    buf.write(_pack_str(json.dumps(ckpt.meta, sort_keys=True)))
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        if arr.dtype.name not in _DTYPE_TAGS:
            raise CheckpointError(f"cannot store dtype {arr.dtype} ({name})")
        buf.write(_pack_str(name))
        buf.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype.name], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    return buf.getvalue()


class _Reader:
    def __init__(self, blob):
        self.blob, self.pos = blob, 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode()


def decode_checkpoint(blob):
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an ICCK checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    spec_hash = r.string()
    meta = json.loads(r.string())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = r.string()
        tag, ndim = r.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{ndim}Q")
        (nbytes,) = r.unpack("<Q")
        dt = _TAG_DTYPES[tag]
        if nbytes != int(np.prod(shape)) * dt.itemsize:
            raise CheckpointError(f"payload size mismatch for {name}")
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(spec_hash, meta, tensors)


def make_checkpoint(model, velocity=None, epoch=0, seed=0, extra=None):
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    for k, v in (velocity or {}).items():
        tensors[f"opt/{k}"] = v
    meta = {"description": model.describe(), "epoch": epoch, "seed": seed, **(extra or {})}
    return Checkpoint(model.spec_hash(), meta, tensors)


def save_checkpoint(path, model, velocity=None, epoch=0, seed=0, extra=None):
    blob = encode_checkpoint(make_checkpoint(model, velocity, epoch, seed, extra))
    Path(path).write_bytes(blob)
    return blob


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def restore(ckpt, model=None):
    """Load a checkpoint into ``model`` (or a model rebuilt from its description).

    Returns ``(model, velocity)``. A model whose architecture hash differs is rejected.
    """
    if model is None:
        model = from_description(ckpt.meta["description"], seed=ckpt.meta.get("seed", 0))
    if model.spec_hash() != ckpt.spec_hash:
        raise CheckpointError("checkpoint architecture hash does not match the model")
    state = {k[6:]: v for k, v in ckpt.tensors.items() if k.startswith("param/")}
    model.load_state_dict(state)
    velocity = {k[4:]: v for k, v in ckpt.tensors.items() if k.startswith("opt/")}
    return model, velocity


def config_dict(cfg):
    d = asdict(cfg)
    d["lr_steps"] = list(d["lr_steps"])
    return d
