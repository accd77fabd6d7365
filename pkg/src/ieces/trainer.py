"""Optimisation loop: Adam with decoupled weight decay over encoder + classifier,
per-step template re-encoding without gradient, checkpoints and validation.

Randomness is derived from ``(seed, step)`` rather than carried in a stateful
generator, so a run resumed from a checkpoint draws exactly the same batches,
augmentations and negative classes as an uninterrupted one.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, compose_augment
from .classifier import ClassifierParams, build_classifier, class_loss, predict_batch
from .encoder import EncoderConfig, EncoderParams, EncodeTrace, build_encoder, encode, encode_batched, param_count
from .siamese import (EMA_MODE, SiameseConfig, TemplateCodebook, combined_loss, contrastive_loss_batch,
                      encode_templates, pair_indices)
from .tensor import Tensor

LOG_HEADER = "epoch\tbatch\tL\tL_sim\tL_class\tval_acc"
CHECKPOINT_MAGIC = b"IECESNET"
CHECKPOINT_VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
JSON_CODE = 2  # UTF-8 JSON blob, used for the single "meta" section
DTYPES = {"float32": np.float32, "float64": np.float64}


# ---------------------------------------------------------------------------
# configuration and model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 2e-7
    batch_size: int = 64
    epochs: int = 10
    patience: int = 3
    rel_tol: float = 1e-4
    seed: int = 0
    ckpt_interval: int = 20
    dtype: str = "float32"
    max_steps: int | None = None
    debug: bool = False
    siamese: SiameseConfig = field(default_factory=SiameseConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1 or self.ckpt_interval < 1:
            raise ValueError("batch size and checkpoint interval must be >= 1")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")
        if self.dtype not in DTYPES:
            raise ValueError(f"floating mode must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    @property
    def alpha(self) -> float:
        return self.siamese.alpha

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        siamese = SiameseConfig(**d.pop("siamese", {}))
        aug = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("augment", {}).items()}
        return cls(siamese=siamese, augment=AugmentConfig(**aug), **d)


@dataclass
class Model:
    encoder: EncoderParams
    classifier: ClassifierParams

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.tensors, **self.classifier.tensors}

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes

    @property
    def dtype(self) -> np.dtype:
        return self.encoder.dtype

    def param_count(self) -> int:
        return param_count(self.parameters())


def build_model(num_classes: int, config: EncoderConfig | None = None, seed: int = 0, dtype=None) -> Model:
    config = config or EncoderConfig()
    enc = build_encoder(config, seed=seed, dtype=dtype)
    cls = build_classifier(num_classes, config.code_length, seed=seed + 1, dtype=dtype)
    return Model(enc, cls)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float, wd: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    """One bias-corrected Adam update, in place on ``params``.

    Weight decay is decoupled: ``p <- p - lr*wd*p`` happens before the moment step.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None or np.shape(g) != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {np.shape(g)}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is not None and m.shape != p.shape:
            raise ValueError(f"moment for {name!r} has shape {m.shape}, parameter has {p.shape}")
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        if wd:
            p.data -= (lr * wd) * p.data
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
    state.t = t
    return state


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

class NumericalAbort(RuntimeError):
    """Loss or gradient went non-finite; ``last_good`` names the newest usable checkpoint."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message if last_good is None else f"{message} (last good checkpoint: {last_good})")
        self.last_good = last_good


@dataclass(frozen=True)
class StepResult:
    loss: float
    sim: float
    cls: float
    pairs: int


def _step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, stream])


def augment_batch(images, config: AugmentConfig, seed: int, step: int) -> np.ndarray:
    """Independently augmented copies of ``images`` (per-image seeds from seed, step, index)."""
    return np.stack([compose_augment(im, config, seed=[seed, step, 1000 + i]).pixels
                     for i, im in enumerate(images)])


def recorded_passes(loss: Tensor, model: Model) -> int:
    """Number of encoder forward passes that the gradient record of ``loss`` contains."""
    first = model.encoder["stem.conv1.weight"]
    return sum(any(p is first for p in node._parents) for node in T.record(loss))


def compute_loss(model: Model, pixels: np.ndarray, labels, codebook: TemplateCodebook,
                 siamese: SiameseConfig, rng, trace: EncodeTrace | None = None):
    """(L, L_sim, L_class, sample codes, pair count) for one prepared batch.

    ``codebook`` holds constant template codes; they enter the graph as plain arrays.
    """
    labels = np.asarray(labels, dtype=np.int64)
    codes = encode(model.encoder, pixels, trace, role="sample")
    rows, classes, gammas = pair_indices(labels, codebook.num_classes, siamese.negatives, rng)
    anchors = codebook.codes[classes].astype(model.dtype, copy=False)
    l_sim = contrastive_loss_batch(T.take(codes, rows), anchors, gammas, siamese.margin)
    l_cls = class_loss(model.classifier, codes, labels)
    return combined_loss(l_sim, l_cls, siamese.alpha), l_sim, l_cls, codes, len(rows)


def train_step(batch, model: Model, templates, config: TrainConfig, state: OptimizerState, step: int,
               codebook: TemplateCodebook | None = None, trace: EncodeTrace | None = None):
    """Augment, encode, pair, back-propagate and update once.

    In template mode the templates are re-encoded (without gradient) unless a
    ``codebook`` is passed in; in EMA mode ``codebook`` holds the running
    prototypes and is returned updated.  Returns ``(StepResult, codebook)``.
    """
    if not batch:
        raise ValueError("empty batch")
    sc = config.siamese
    labels = np.array([im.class_id for im in batch], dtype=np.int64)
    if codebook is None:
        codebook = encode_templates(model.encoder, templates, trace)
    if np.any(labels >= codebook.num_classes):
        raise ValueError(f"batch holds classes without templates: {sorted(set(labels[labels >= codebook.num_classes]))}")
    pixels = augment_batch(batch, config.augment, config.seed, step)
    params = model.parameters()
    for p in params.values():
        p.zero_grad()
    loss, l_sim, l_cls, codes, pairs = compute_loss(model, pixels, labels, codebook, sc,
                                                     _step_rng(config.seed, step, 2), trace)
    if not math.isfinite(loss.item()):
        raise NumericalAbort(f"non-finite loss {loss.item()} at step {step}")
    if config.debug and recorded_passes(loss, model) != 1:
        raise AssertionError("template encoding entered the gradient record")
    T.backward(loss, params.values())
    grads = {name: p.grad for name, p in params.items()}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericalAbort(f"non-finite gradient at step {step}")
    adam_step(params, grads, state, config.lr, config.weight_decay)
    if sc.mode == EMA_MODE:
        # running prototypes follow the (pre-update) sample codes of their class
        new = codebook.copy()
        for c in np.unique(labels):
            mean_code = codes.data[labels == c].astype(np.float64).mean(axis=0)
            new.codes[c] = sc.ema_decay * new.codes[c] + (1.0 - sc.ema_decay) * mean_code
        codebook = new
    return StepResult(loss.item(), l_sim.item(), l_cls.item(), pairs), codebook


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(Exception):
    code = 10


class CheckpointFormatError(CheckpointError):
    code = 11


class CheckpointChecksumError(CheckpointError):
    code = 12


class CheckpointVersionError(CheckpointError):
    code = 13


class CheckpointTruncatedError(CheckpointError):
    code = 14


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    params: dict[str, np.ndarray]
    optimizer: OptimizerState
    train_config: dict
    rng: dict  # {"seed": s, "step": t}; all draws derive from these
    progress: dict = field(default_factory=dict)
    codebook: np.ndarray | None = None
    version: int = CHECKPOINT_VERSION

    @property
    def num_classes(self) -> int:
        return self.params["classifier.weight"].shape[0]


def snapshot(model: Model, state: OptimizerState, config: TrainConfig, step: int,
             progress: dict | None = None, codebook: TemplateCodebook | None = None) -> Checkpoint:
    params = {k: v.data.copy() for k, v in model.parameters().items()}
    opt = OptimizerState({k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()}, state.t)
    return Checkpoint(model.encoder.config, params, opt, config.to_dict(), {"seed": config.seed, "step": step},
                      dict(progress or {}), None if codebook is None else codebook.codes.copy())


def model_from_checkpoint(ckpt: Checkpoint, dtype=None) -> Model:
    dtype = np.dtype(dtype) if dtype is not None else ckpt.params["head.fc.weight"].dtype
    enc = {k: Tensor(v.astype(dtype), requires_grad=True, name=k)
           for k, v in ckpt.params.items() if not k.startswith("classifier.")}
    cls = ClassifierParams(Tensor(ckpt.params["classifier.weight"].astype(dtype), requires_grad=True,
                                  name="classifier.weight"),
                           Tensor(ckpt.params["classifier.bias"].astype(dtype), requires_grad=True,
                                  name="classifier.bias"))
    return Model(EncoderParams(ckpt.encoder_config, enc), cls)


def _section(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise CheckpointFormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    return _raw_section(name, arr.shape, code, np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _raw_section(name: str, dims, code: int, payload: bytes) -> bytes:
    key = name.encode("utf-8")
    head = struct.pack("<H", len(key)) + key + struct.pack("<B", len(dims))
    head += b"".join(struct.pack("<I", d) for d in dims)
    return head + struct.pack("<B", code) + payload


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    sections = []
    meta = {"encoder_config": asdict(ckpt.encoder_config), "train_config": ckpt.train_config,
            "rng": ckpt.rng, "progress": ckpt.progress, "optimizer_t": ckpt.optimizer.t}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    sections.append(_raw_section("meta", (len(blob),), JSON_CODE, blob))
    for name, arr in ckpt.params.items():
        sections.append(_section(f"param/{name}", arr))
    for name, arr in ckpt.optimizer.m.items():
        sections.append(_section(f"adam.m/{name}", arr))
    for name, arr in ckpt.optimizer.v.items():
        sections.append(_section(f"adam.v/{name}", arr))
    if ckpt.codebook is not None:
        sections.append(_section("codebook", ckpt.codebook))
    body = CHECKPOINT_MAGIC + struct.pack("<II", ckpt.version, len(sections)) + b"".join(sections)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointTruncatedError(f"checkpoint truncated: need {n} bytes at offset {self.pos}, "
                                           f"{self.end - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_sections(buf: bytes, count: int):
    rd = _Reader(buf, len(buf) - 4)
    rd.pos = 16
    meta, tensors = None, {}
    for _ in range(count):
        (n,) = rd.unpack("<H")
        name = rd.take(n).decode("utf-8")
        (rank,) = rd.unpack("<B")
        dims = rd.unpack(f"<{rank}I") if rank else ()
        (code,) = rd.unpack("<B")
        if code == JSON_CODE:
            meta = json.loads(rd.take(int(np.prod(dims))).decode("utf-8"))
            continue
        if code not in (0, 1):
            raise CheckpointFormatError(f"section {name!r} has unknown dtype code {code}")
        dt = np.dtype("<f4" if code == 0 else "<f8")
        raw = rd.take(int(np.prod(dims, dtype=np.int64)) * dt.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if rd.pos != rd.end:
        raise CheckpointFormatError(f"{rd.end - rd.pos} stray bytes after the last section")
    return meta, tensors


def decode_checkpoint(buf: bytes, dtype=None) -> Checkpoint:
    if len(buf) < 16 + 4:
        raise CheckpointTruncatedError(f"checkpoint truncated: only {len(buf)} bytes")
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"not a checkpoint (magic {buf[:8]!r})")
    version, count = struct.unpack("<II", buf[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unknown checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    crc_ok = struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    try:
        meta, tensors = _read_sections(buf, count)
    except CheckpointTruncatedError:
        raise
    except (CheckpointFormatError, UnicodeDecodeError, ValueError) as exc:
        if not crc_ok:
            raise CheckpointChecksumError("checkpoint checksum mismatch") from None
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"malformed checkpoint section: {exc}") from None
    if not crc_ok:
        raise CheckpointChecksumError("checkpoint checksum mismatch")
    if meta is None:
        raise CheckpointFormatError("checkpoint has no meta section")
    if dtype is not None:
        dtype = np.dtype(dtype)
        if dtype.itemsize < 8 and any(v.dtype.itemsize == 8 for v in tensors.values()):
            raise CheckpointFormatError("refusing to narrow a 64-bit checkpoint")
        tensors = {k: v.astype(dtype) for k, v in tensors.items()}
    group = lambda prefix: {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    opt = OptimizerState(group("adam.m/"), group("adam.v/"), int(meta["optimizer_t"]))
    return Checkpoint(EncoderConfig.from_dict(meta["encoder_config"]), group("param/"), opt,
                      meta["train_config"], meta["rng"], meta["progress"], tensors.get("codebook"), version)


def load_checkpoint(path, dtype=None) -> Checkpoint:
    """Read and verify a checkpoint; ``dtype=float64`` widens a 32-bit one exactly."""
    return decode_checkpoint(Path(path).read_bytes(), dtype)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

class ResumeError(ValueError):
    pass


@dataclass
class TrainResult:
    model: Model
    checkpoint: Path
    log: Path
    steps: int
    epochs_run: int
    stopped: str  # "epochs", "converged", "max_steps"
    val_history: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def accuracy(model: Model, images) -> float:
    if not images:
        return float("nan")
    pixels = np.stack([im.pixels for im in images])
    pred, _ = predict_batch(model.classifier, encode_batched(model.encoder, pixels))
    return float(np.mean(pred == np.array([im.class_id for im in images])))


def converged(epoch_losses: list[float], patience: int, rel_tol: float) -> bool:
    """True once the best loss of the last ``patience`` epochs beats the earlier best by < rel_tol (relative)."""
    if len(epoch_losses) <= patience:
        return False
    before = min(epoch_losses[:-patience])
    recent = min(epoch_losses[-patience:])
    return (before - recent) / max(abs(before), 1e-300) < rel_tol


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def train(split, templates, config: TrainConfig, out_dir, resume=None, init_seed: int | None = None,
          encoder_config: EncoderConfig | None = None, trace: EncodeTrace | None = None) -> TrainResult:
    """Run the epoch loop, writing ``train.log`` and ``ckpt_*.bin`` / ``best.bin`` / ``last.bin`` into ``out_dir``.

    ``resume`` is a checkpoint path; the run continues at the recorded batch
    position with identical randomness.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = DTYPES[config.dtype]
    num_classes = split.num_classes
    if len(templates) != num_classes:
        raise ValueError(f"{len(templates)} templates for {num_classes} classes")
    train_set = list(split.train)
    log_path = out / "train.log"
    saved: list[Path] = []

    with T.precision(dtype):
        if resume is not None:
            ckpt = load_checkpoint(resume)
            if ckpt.num_classes != num_classes:
                raise ResumeError(f"checkpoint has {ckpt.num_classes} classes, dataset has {num_classes}")
            prog = ckpt.progress
            if prog.get("train_size") not in (None, len(train_set)):
                raise ResumeError(f"checkpoint was trained on {prog['train_size']} images, dataset has {len(train_set)}")
            model = model_from_checkpoint(ckpt, dtype)
            state = OptimizerState({k: v.astype(dtype) for k, v in ckpt.optimizer.m.items()},
                                   {k: v.astype(dtype) for k, v in ckpt.optimizer.v.items()}, ckpt.optimizer.t)
            step = int(ckpt.rng["step"])
            epoch, batch_pos = int(prog.get("epoch", 0)), int(prog.get("batch", 0))
            epoch_losses = list(prog.get("epoch_losses", []))
            epoch_sum, epoch_count = float(prog.get("epoch_sum", 0.0)), int(prog.get("epoch_count", 0))
            best_val = prog.get("best_val")
            val_history = list(prog.get("val_history", []))
            codebook = None if ckpt.codebook is None else TemplateCodebook(ckpt.codebook)
            mode = "a"
        else:
            model = build_model(num_classes, encoder_config, seed=config.seed if init_seed is None else init_seed,
                                dtype=dtype)
            state = OptimizerState()
            step = epoch = batch_pos = epoch_count = 0
            epoch_losses, val_history = [], []
            epoch_sum, best_val, codebook = 0.0, None, None
            mode = "w"

        def progress():
            return {"epoch": epoch, "batch": batch_pos, "epoch_losses": epoch_losses, "epoch_sum": epoch_sum,
                    "epoch_count": epoch_count, "best_val": best_val, "val_history": val_history,
                    "train_size": len(train_set), "num_classes": num_classes}

        def save(name: str) -> Path:
            path = save_checkpoint(out / name, snapshot(model, state, config, step, progress(), codebook))
            saved.append(path)
            return path

        last_good = None
        stopped = "epochs"
        with open(log_path, mode, encoding="utf-8") as log:
            if mode == "w":
                log.write(LOG_HEADER + "\n")
                if config.epochs == 0:
                    last = save("last.bin")
                    return TrainResult(model, last, log_path, 0, 0, "epochs", [], saved)
                last_good = save("init.bin")
            if config.siamese.mode == EMA_MODE and codebook is None:
                codebook = encode_templates(model.encoder, templates, trace)
            n_batches = math.ceil(len(train_set) / config.batch_size)
            while epoch < config.epochs:
                order = np.random.default_rng([config.seed, epoch, 7]).permutation(len(train_set))
                per_epoch = config.siamese.refresh == "epoch" and config.siamese.mode != EMA_MODE
                if per_epoch and (batch_pos == 0 or codebook is None):
                    codebook = encode_templates(model.encoder, templates, trace)
                while batch_pos < n_batches:
                    if config.max_steps is not None and step >= config.max_steps:
                        stopped = "max_steps"
                        break
                    idx = order[batch_pos * config.batch_size:(batch_pos + 1) * config.batch_size]
                    batch = [train_set[i] for i in idx]
                    try:
                        res, cb = train_step(batch, model, templates, config, state, step, codebook, trace)
                    except NumericalAbort as exc:
                        raise NumericalAbort(str(exc), last_good) from None
                    if config.siamese.mode == EMA_MODE:
                        codebook = cb
                    step += 1
                    batch_pos += 1
                    epoch_sum += res.loss * len(batch)
                    epoch_count += len(batch)
                    val = "-"
                    if batch_pos == n_batches:
                        acc = accuracy(model, split.val)
                        val_history.append(acc)
                        val = _fmt(acc)
                    log.write(f"{epoch}\t{step}\t{_fmt(res.loss)}\t{_fmt(res.sim)}\t{_fmt(res.cls)}\t{val}\n")
                    log.flush()
                    if batch_pos == n_batches:
                        epoch_losses.append(epoch_sum / epoch_count)
                        epoch += 1
                        batch_pos, epoch_sum, epoch_count = 0, 0.0, 0
                        acc = val_history[-1]
                        if not math.isnan(acc) and (best_val is None or acc > best_val):
                            best_val = acc
                            last_good = save("best.bin")
                    if step % config.ckpt_interval == 0:
                        last_good = save(f"ckpt_{step:06d}.bin")
                    if batch_pos == 0:
                        break  # epoch finished
                if stopped == "max_steps":
                    break
                if converged(epoch_losses, config.patience, config.rel_tol):
                    stopped = "converged"
                    break
        last = save("last.bin")
    return TrainResult(model, last, log_path, step, len(epoch_losses), stopped, val_history, saved)


def with_alpha(config: TrainConfig, alpha: float) -> TrainConfig:
    return replace(config, siamese=replace(config.siamese, alpha=alpha))
