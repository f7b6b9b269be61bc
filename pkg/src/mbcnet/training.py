"""Adam, the seeded training loop with validation early stopping, and checkpoints.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"MBCNETCK"
    version    u32
    schema     32 bytes  sha256 of schema + groups + model architecture
    meta_len   u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    n_tensors  u32, then per tensor:
        name_len u16, name (UTF-8), rows u64, cols u64, rows*cols float64
    trailer    4 bytes   b"END!", then u32 CRC32 of every preceding byte
"""
import copy
import hashlib
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .cooperation import CoopConfig, transform_deviation, variant_total_loss
from .errors import (
    ConfigError,
    CorruptCheckpointError,
    CheckpointVersionError,
    NonFiniteGradientError,
    SchemaMismatchError,
)
from .features import check_batch
from .metrics import auc, logloss

log = logging.getLogger(__name__)

MAGIC = b"MBCNETCK"
FORMAT_VERSION = 1
TRAILER = b"END!"


@dataclass
class TrainConfig:
    batch_size: int = 512
    max_epochs: int = 10
    patience: int = 2
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 1
    wallclock: bool = False

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("train.patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("train.max_epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.log_every < 1:
            raise ConfigError("train.log_every must be >= 1")
        return self


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """In-place bias-corrected Adam update. Aborts on a non-finite gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    schema_hash: str
    params: dict
    optimizer: AdamState
    meta: dict = field(default_factory=dict)
    best_params: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def best_val_auc(self):
        return self.meta.get("best_val_auc")


def architecture_hash(model):
    blob = json.dumps(
        {
            "schema": [asdict(f) for f in model.schema.fields],
            "groups": [[n, list(m)] for n, m in model.groups.groups],
            "model": {k: v for k, v in asdict(model.config).items() if k != "profile"},
        },
        sort_keys=True,
        default=list,
    )
    return hashlib.sha256(blob.encode()).hexdigest()


def _pack_tensor(name, arr):
    arr = np.ascontiguousarray(nx.as_matrix(arr), dtype="<f8")
    raw = name.encode()
    return struct.pack("<H", len(raw)) + raw + struct.pack("<QQ", *arr.shape) + arr.tobytes()


def checkpoint_bytes(ckpt):
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"adam.m/{k}", v) for k, v in ckpt.optimizer.m.items()]
    tensors += [(f"adam.v/{k}", v) for k, v in ckpt.optimizer.v.items()]
    tensors += [(f"best/{k}", v) for k, v in ckpt.best_params.items()]
    opt = ckpt.optimizer
    meta = dict(ckpt.meta)
    meta["optimizer"] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step}
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    body = bytearray(MAGIC)
    body += struct.pack("<I", ckpt.version)
    body += bytes.fromhex(ckpt.schema_hash)
    body += struct.pack("<I", len(meta_raw)) + meta_raw
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        body += _pack_tensor(name, arr)
    body += TRAILER
    body += struct.pack("<I", zlib.crc32(body))
    return bytes(body)


def checkpoint_save(path, ckpt):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data, expected_hash=None):
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpointError("not a checkpoint: bad magic bytes")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    if len(data) < len(TRAILER) + 4 or data[-8:-4] != TRAILER:
        raise CorruptCheckpointError("truncated checkpoint: missing trailer")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptCheckpointError("checkpoint checksum mismatch")
    schema_hash = r.take(32).hex()
    if expected_hash is not None and schema_hash != expected_hash:
        raise SchemaMismatchError(
            f"checkpoint schema hash {schema_hash[:12]} does not match configuration {expected_hash[:12]}"
        )
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable checkpoint metadata: {exc}") from None
    (count,) = r.unpack("<I")
    groups = {"param": {}, "adam.m": {}, "adam.v": {}, "best": {}}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        rows, cols = r.unpack("<QQ")
        arr = np.frombuffer(r.take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise CorruptCheckpointError(f"unknown tensor record {name!r}")
        groups[kind][key] = arr
    if r.take(len(TRAILER)) != TRAILER:
        raise CorruptCheckpointError("trailing garbage in checkpoint")
    o = meta.pop("optimizer")
    opt = AdamState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"], groups["adam.m"], groups["adam.v"])
    return Checkpoint(schema_hash, groups["param"], opt, meta, groups["best"], version)


def checkpoint_load(path, expected_hash=None):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return checkpoint_from_bytes(data, expected_hash)


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    best_params: dict
    best_val_auc: float
    checkpoint: Checkpoint
    epochs_run: int
    steps: int
    stopped_early: bool
    history: list = field(default_factory=list)


def model_head(model):
    """Head whose AUC is the model's headline metric."""
    return "fusion" if "fusion" in model.heads else model.branches[0]


def evaluate_heads(model, params, batch):
    probs, _ = model.predict(params, batch)
    out = {}
    for h, p in probs.items():
        out[h] = {"auc": auc(p, batch.labels), "logloss": logloss(p, batch.labels)}
    return out


class _Clock:
    """Logical timestamps (a record counter); wall-clock time only on request."""

    def __init__(self, seq=0, wallclock=False):
        self.seq = seq
        self.wallclock = wallclock

    def stamp(self):
        self.seq += 1
        if self.wallclock:
            import time

            return {"timestamp": self.seq, "wall_time": time.time()}
        return {"timestamp": self.seq}


def train_step(model, params, batch, coop, state):
    tape = nx.Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    outputs = model.forward(leaves, batch)
    loss, parts = variant_total_loss(coop.variant, outputs, batch.labels, leaves, model.branches, coop)
    tape.backward(loss)
    adam_step(params, {k: leaves[k].grad for k in params}, state)
    return parts


def train(model, train_data, val_data, config, coop=None, sink=None, resume=None, on_step=None, max_steps=None):
    """Train ``model`` and return a :class:`TrainResult` holding the best parameters.

    ``sink`` receives one dict per metrics record. ``on_step(step, make_ckpt)``
    is invoked after every optimizer step; ``make_ckpt()`` snapshots the full
    training state so it can be resumed bit-for-bit via ``resume``.
    ``max_steps`` truncates training (used to interrupt runs in tests).
    """
    coop = (coop or CoopConfig()).validate()
    config.validate()
    check_batch(train_data.take(np.arange(min(train_data.size, 2))), model.schema)
    check_batch(val_data.take(np.arange(min(val_data.size, 2))), model.schema)
    if len(model.branches) < 2 and (coop.alpha > 0 or coop.beta > 0):
        log.info("single-branch model: cooperation terms disabled")
    arch = architecture_hash(model)
    sink = sink or (lambda rec: None)
    rng = np.random.default_rng([config.seed, 1])

    if resume is None:
        params = model.init_params(config.seed)
        state = AdamState(config.lr, config.beta1, config.beta2, config.eps)
        epoch, offset, global_step = 0, 0, 0
        best_auc, bad_epochs, best_params = -math.inf, 0, {}
        epoch_rng_state = rng.bit_generator.state
        clock = _Clock(0, config.wallclock)
    else:
        if resume.schema_hash != arch:
            raise SchemaMismatchError("resume checkpoint was produced by a different architecture")
        params = {k: v.copy() for k, v in resume.params.items()}
        state = copy.deepcopy(resume.optimizer)
        m = resume.meta
        epoch, offset, global_step = m["epoch"], m["offset"], m["global_step"]
        best_auc = m["best_val_auc"] if m["best_val_auc"] is not None else -math.inf
        bad_epochs = m["bad_epochs"]
        best_params = {k: v.copy() for k, v in resume.best_params.items()}
        epoch_rng_state = _decode_rng(m["epoch_rng_state"])
        clock = _Clock(m["seq"], config.wallclock)

    def snapshot():
        meta = {
            "epoch": epoch,
            "offset": offset,
            "global_step": global_step,
            "best_val_auc": None if best_auc == -math.inf else best_auc,
            "bad_epochs": bad_epochs,
            "epoch_rng_state": _encode_rng(epoch_rng_state),
            "seq": clock.seq,
            "seed": config.seed,
        }
        return Checkpoint(
            arch,
            {k: v.copy() for k, v in params.items()},
            copy.deepcopy(state),
            meta,
            {k: v.copy() for k, v in best_params.items()},
        )

    history = []
    stopped = False
    n = train_data.size
    while epoch < config.max_epochs:
        rng.bit_generator.state = epoch_rng_state
        order = rng.permutation(n)
        after_perm_state = rng.bit_generator.state
        while offset < n:
            if max_steps is not None and global_step >= max_steps:
                return _result(snapshot(), best_params, best_auc, epoch, global_step, False, history)
            batch = train_data.take(order[offset : offset + config.batch_size])
            parts = train_step(model, params, batch, coop, state)
            offset += batch.size
            global_step += 1
            if global_step % config.log_every == 0:
                rec = {
                    **clock.stamp(),
                    "phase": "train",
                    "epoch": epoch,
                    "step": global_step,
                    "loss": parts.total,
                    "l_ctr": parts.l_ctr,
                    "l_bct": parts.l_bct,
                    "l_mdr": parts.l_mdr,
                    "n_selected": parts.n_selected,
                }
                for pair, dev in transform_deviation(params, model.branches).items():
                    rec[f"w_dev.{pair}"] = dev
                sink(rec)
            if on_step is not None:
                on_step(global_step, snapshot)
        # epoch complete: validate
        heads = evaluate_heads(model, params, val_data)
        val_auc = heads[model_head(model)]["auc"]
        improved = val_auc > best_auc
        if improved:
            best_auc = val_auc
            best_params = {k: v.copy() for k, v in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
        rec = {**clock.stamp(), "phase": "val", "epoch": epoch, "step": global_step, "auc": val_auc,
               "logloss": heads[model_head(model)]["logloss"], "improved": improved}
        for h, mvals in heads.items():
            rec[f"auc.{h}"] = mvals["auc"]
            rec[f"logloss.{h}"] = mvals["logloss"]
        sink(rec)
        history.append(rec)
        log.info("epoch %d: val auc %.5f (best %.5f)", epoch, val_auc, best_auc)
        epoch += 1
        offset = 0
        epoch_rng_state = after_perm_state
        if bad_epochs >= config.patience:
            stopped = True
            break
    return _result(snapshot(), best_params, best_auc, epoch, global_step, stopped, history)


def _result(ckpt, best_params, best_auc, epochs, steps, stopped, history):
    return TrainResult(best_params or ckpt.params, best_auc, ckpt, epochs, steps, stopped, history)


def _encode_rng(state):
    return json.loads(json.dumps(state))


def _decode_rng(state):
    return state
