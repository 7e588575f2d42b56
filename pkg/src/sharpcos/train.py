"""Adam + one-cycle training loop, per-epoch telemetry and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from . import layers as L
from . import tensor as T
from .data import AugmentationConfig, Dataset, augment, iterate_batches
from .errors import CheckpointError, NonFiniteError
from .models import LayerVariantConfig, ModelDescriptor, Net, build_model

log = logging.getLogger(__name__)

TELEMETRY_HEADER = ["epoch", "train_loss", "train_acc", "test_loss", "test_acc",
                    "train_time_s", "eval_time_s"]


# -- optimiser -----------------------------------------------------------------
@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params, **kwargs) -> OptimizerState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kwargs)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray | None],
              state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    A missing gradient counts as zero. The weight-decay term is L2-style
    (added to the gradient) and is zero by default.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        g = g + state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: list[L.Parameter], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.state = OptimizerState.for_params([p.data for p in self.params], beta1=betas[0],
                                               beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, lr)


@dataclass
class OneCycleSchedule:
    """Cosine warm-up to ``max_lr`` then cosine decay to ``max_lr / final_div_factor``."""

    total_steps: int
    max_lr: float = 0.01
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 < self.pct_start < 1.0:
            raise ValueError("pct_start must lie in (0, 1)")

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_factor

    @property
    def final_lr(self) -> float:
        return self.max_lr / self.final_div_factor

    @property
    def peak_step(self) -> float:
        return self.pct_start * self.total_steps

    def __call__(self, step: float) -> float:
        return onecycle_lr(step, self)


def _anneal_cos(start: float, end: float, frac: float) -> float:
    return end + (start - end) / 2.0 * (math.cos(math.pi * frac) + 1.0)


def onecycle_lr(step: float, schedule: OneCycleSchedule) -> float:
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    peak = schedule.peak_step
    if step <= peak:
        return _anneal_cos(schedule.initial_lr, schedule.max_lr, step / peak)
    frac = (step - peak) / (schedule.total_steps - peak)
    return _anneal_cos(schedule.max_lr, schedule.final_lr, frac)


# -- telemetry -----------------------------------------------------------------
@dataclass
class LayerNorms:
    w_norm: float
    g_norm: float | None
    p: np.ndarray | None = None
    q: float | None = None


def track_norms(model: Net) -> dict[str, LayerNorms]:
    """Weight/gradient L2 norms of every weighted layer, plus p and q snapshots."""
    out = {}
    for name, m in model.telemetry_layers():
        w = m.weight
        g = None if w.grad is None else float(np.linalg.norm(w.grad))
        p = m.p_values() if isinstance(m, L.SharpCosSim2d | L.SharpenedSDP2d) \
            and not isinstance(m, L.CosSim2d) else None
        q = float(m.q.data[0]) if isinstance(m, L.SharpCosSim2d) else None
        out[name] = LayerNorms(float(np.linalg.norm(w.data)), g, p, q)
    return out


@dataclass
class ExperimentRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    train_time_s: float
    eval_time_s: float
    steps: int = 0
    norms: dict[str, LayerNorms] = field(default_factory=dict)

    def columns(self) -> dict[str, object]:
        row = {k: getattr(self, k) for k in TELEMETRY_HEADER}
        for name, n in self.norms.items():
            row[f"{name}.w_norm"] = n.w_norm
            row[f"{name}.g_norm"] = n.g_norm
            if n.p is not None:
                for k, v in enumerate(n.p):
                    row[f"{name}.p[{k}]"] = float(v)
            if n.q is not None:
                row[f"{name}.q"] = n.q
        return row


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class TelemetryWriter:
    """Streams one CSV row per epoch; the header is fixed by the first row."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.header: list[str] | None = None

    def write(self, record: ExperimentRecord) -> None:
        row = record.columns()
        if self.header is None:
            self.header = list(row)
            with open(self.path, "w", encoding="utf-8", newline="") as fh:
                fh.write(",".join(self.header) + "\n")
        with open(self.path, "a", encoding="utf-8", newline="") as fh:
            fh.write(",".join(_fmt(row.get(k)) for k in self.header) + "\n")
            fh.flush()


def telemetry_columns(model: Net) -> list[str]:
    """The CSV header a run of ``model`` will produce."""
    rec = ExperimentRecord(0, 0, 0, 0, 0, 0, 0, norms=track_norms(model))
    return list(rec.columns())


def read_telemetry(path: str | Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# -- checkpoints -----------------------------------------------------------------
MAGIC = b"SCSCKPT\x00"
VERSION = 1


def _entries(model: Net):
    for name, p in model.named_parameters():
        yield 0, name, p.data
    for name, b in model.named_buffers():
        yield 1, name, b


def save_checkpoint(model: Net, descriptor: ModelDescriptor, path: str | Path,
                    extra: dict | None = None) -> None:
    """Binary checkpoint: header, named float64 little-endian blobs, sha256 trailer."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(descriptor.digest())
    meta = json.dumps({"descriptor": json.loads(descriptor.to_json()), "extra": extra or {}},
                      sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    entries = list(_entries(model))
    buf.write(struct.pack("<I", len(entries)))
    for kind, name, arr in entries:
        raw = name.encode()
        buf.write(struct.pack("<BI", kind, len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = buf.getvalue()
    tmp = Path(path).with_suffix(".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


@dataclass
class Checkpoint:
    digest: bytes
    descriptor: dict
    extra: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    @property
    def config(self) -> LayerVariantConfig:
        return LayerVariantConfig.from_dict(self.descriptor["config"])


def read_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    body, trailer = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    try:
        pos = 8
        (version,) = struct.unpack_from("<I", body, pos)
        pos += 4
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        digest = body[pos:pos + 32]
        pos += 32
        (mlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos:pos + mlen])
        pos += mlen
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        params, buffers = {}, {}
        for _ in range(count):
            kind, nlen = struct.unpack_from("<BI", body, pos)
            pos += 5
            name = body[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape)
            pos += nbytes
            (params if kind == 0 else buffers)[name] = arr.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    return Checkpoint(digest, meta["descriptor"], meta["extra"], params, buffers)


def load_into(model: Net, ckpt: Checkpoint) -> None:
    named = dict(model.named_parameters())
    if set(named) != set(ckpt.params):
        raise CheckpointError("parameter names do not match the model")
    for name, p in named.items():
        if p.shape != ckpt.params[name].shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.data[...] = ckpt.params[name]
    for name, b in model.named_buffers():
        b[...] = ckpt.buffers[name]


def restore_model(path: str | Path, dtype=np.float64) -> tuple[Net, ModelDescriptor, Checkpoint]:
    """Rebuild the model recorded in a checkpoint and load its weights."""
    ckpt = read_checkpoint(path)
    try:
        cfg = ckpt.config
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad model config ({exc})") from None
    model, desc = build_model(cfg, dtype=dtype)
    if desc.digest() != ckpt.digest:
        raise CheckpointError(f"{path}: model descriptor hash mismatch")
    load_into(model, ckpt)
    return model, desc, ckpt


# -- training loop -----------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    max_lr: float = 0.01
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    weight_decay: float = 0.0
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    shuffle: bool = True
    seed: int = 0
    record_times: bool = True
    eval_batch_size: int = 500
    stop_at_train_acc: float | None = None   # end early once train accuracy reaches this


@dataclass
class TrainResult:
    records: list[ExperimentRecord]
    steps: int
    checkpoints: dict[str, Path]
    best_test_acc: float | None


def evaluate(model: Net, ds: Dataset, batch_size: int = 500, dtype=np.float64
             ) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode."""
    model.eval()
    total_loss, correct = 0.0, 0
    with T.no_grad():
        for idx in iterate_batches(len(ds), batch_size):
            logits = model(ds.images[idx].astype(dtype, copy=False))
            total_loss += F.cross_entropy(logits, ds.labels[idx]).item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == ds.labels[idx]))
    n = max(len(ds), 1)
    return total_loss / n, correct / n


def predict(model: Net, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    model.eval()
    out = []
    with T.no_grad():
        for idx in iterate_batches(len(images), batch_size):
            out.append(np.argmax(model(images[idx]).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train(model: Net, train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig,
          descriptor: ModelDescriptor | None = None, out_dir: str | Path | None = None,
          epochs: int | None = None) -> TrainResult:
    """Train ``model`` and emit one :class:`ExperimentRecord` per epoch.

    With ``out_dir`` set, ``telemetry.csv`` is appended and flushed after every
    epoch and ``init.ckpt``, ``best.ckpt`` and ``final.ckpt`` are written.
    A non-finite training loss aborts with :class:`NonFiniteError` naming the
    first layer whose activation went non-finite.
    """
    epochs = cfg.epochs if epochs is None else epochs
    dtype = model.parameters()[0].dtype
    out = Path(out_dir) if out_dir is not None else None
    if out is not None and descriptor is None:
        raise ValueError("descriptor is required when writing checkpoints")
    ckpts: dict[str, Path] = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpts["init"] = out / "init.ckpt"
        save_checkpoint(model, descriptor, ckpts["init"], {"epoch": 0})
    writer = TelemetryWriter(out / "telemetry.csv") if out is not None else None

    steps_per_epoch = math.ceil(len(train_ds) / cfg.batch_size)
    schedule = OneCycleSchedule(max(epochs * steps_per_epoch, 1), cfg.max_lr, cfg.pct_start,
                                cfg.div_factor, cfg.final_div_factor)
    opt = Adam(model.parameters(), weight_decay=cfg.weight_decay)
    shuffle_rng, aug_rng = (np.random.default_rng(s)
                            for s in np.random.SeedSequence(cfg.seed).spawn(2))
    records: list[ExperimentRecord] = []
    best = None
    for epoch in range(1, epochs + 1):
        model.train()
        t0 = time.perf_counter()
        loss_sum, correct = 0.0, 0
        for idx in iterate_batches(len(train_ds), cfg.batch_size,
                                   shuffle_rng if cfg.shuffle else None):
            xb = augment(train_ds.images[idx], cfg.augment, aug_rng).astype(dtype, copy=False)
            yb = train_ds.labels[idx]
            opt.zero_grad()
            logits = model(xb)
            loss = F.cross_entropy(logits, yb)
            if not np.isfinite(loss.item()):
                where = model.find_finite_violation(xb) or "loss"
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch}, step {opt.state.step + 1}; "
                    f"first non-finite activation in layer {where!r}", where=where)
            loss.backward()
            opt.step(schedule(opt.state.step))
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
        train_time = time.perf_counter() - t0

        t1 = time.perf_counter()
        test_loss, test_acc = evaluate(model, test_ds, cfg.eval_batch_size, dtype)
        eval_time = time.perf_counter() - t1
        if not cfg.record_times:
            train_time = eval_time = 0.0
        rec = ExperimentRecord(epoch, loss_sum / len(train_ds), correct / len(train_ds),
                               test_loss, test_acc, train_time, eval_time,
                               steps=opt.state.step, norms=track_norms(model))
        T.assert_finite(np.array([rec.train_loss]), "train_loss")
        records.append(rec)
        log.info("epoch %d: train_loss=%.4f train_acc=%.4f test_acc=%.4f (%.1fs)",
                 epoch, rec.train_loss, rec.train_acc, rec.test_acc, train_time)
        if writer is not None:
            writer.write(rec)
        if best is None or test_acc > best:
            best = test_acc
            if out is not None:
                ckpts["best"] = out / "best.ckpt"
                save_checkpoint(model, descriptor, ckpts["best"], {"epoch": epoch})
        if cfg.stop_at_train_acc is not None and rec.train_acc >= cfg.stop_at_train_acc:
            break
    if out is not None and records:
        ckpts["final"] = out / "final.ckpt"
        save_checkpoint(model, descriptor, ckpts["final"], {"epoch": records[-1].epoch})
    return TrainResult(records, opt.state.step, ckpts, best)
