"""Optimization loop: Adamax with linear warm-up and per-epoch exponential
decay, a constant-rate fine-tuning phase, gradient clipping, divergence
guard and bit-exact checkpoint/resume.

DFCK checkpoint layout (little-endian):

    magic "DFCK" | version u32
    | records: name_len u32, name utf8, dtype u8 (0=f32, 1=f64),
               rank u8, extents u64 x rank, raw payload
    | terminating record with name_len = 0
    | config text: byte length u32, utf8 payload
    | rng state:  byte length u32, utf8 JSON payload

Records are written in sorted name order and the config/rng texts are
canonical, so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    import contextlib

    def threadpool_limits(limits=None):
        return contextlib.nullcontext()

from .config import config_from_text, config_to_text
from .errors import (
    DataFormatError,
    NumericDomainError,
    NumericError,
    TrainingError,
)
from .evaluation import LN2
from .model import FlowModel

CKPT_MAGIC = b"DFCK"
CKPT_VERSION = 1

DIVERGENCE_BPD = 30.0


class Adamax(object):
    """theta <- theta - lr/(1 - beta1^t) * m / (u + eps) with
    m <- beta1*m + (1-beta1)*g and u <- max(beta2*u, |g|)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.u = {}

    def step(self, params, grads, lr, t):
        if t < 1:
            raise TrainingError("adamax step counter must be >= 1")
        for name, p in params.items():
            g = grads[name]
            if not np.isfinite(g).all():
                raise TrainingError("non-finite gradient", stage=name)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.u[name] = np.zeros_like(p.data)
            m = self.m[name]
            u = self.u[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            np.maximum(self.beta2 * u, np.abs(g), out=u)
            p.data = p.data - (lr / (1 - self.beta1**t)) * m / (u + self.eps)

    def state_arrays(self):
        out = {}
        for name, arr in self.m.items():
            out[f"opt.m.{name}"] = arr
        for name, arr in self.u.items():
            out[f"opt.u.{name}"] = arr
        return out

    def load_state_arrays(self, arrays, dtype):
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                self.m[key[6:]] = arr.astype(dtype, copy=True)
            elif key.startswith("opt.u."):
                self.u[key[6:]] = arr.astype(dtype, copy=True)


def lr_at(step, epoch, cfg):
    """Learning rate at a global step / epoch pair; the fine-tune phase
    (epochs at index >= cfg.epochs) overrides with a constant rate."""
    if step < 0 or epoch < 0:
        raise TrainingError("counters must be >= 0")
    if epoch >= cfg.epochs:
        return cfg.finetune_lr
    warm = 1.0 if cfg.warmup_steps == 0 else min(1.0, step / cfg.warmup_steps)
    return cfg.lr * warm * cfg.decay_factor**epoch


def global_norm(grads):
    total = 0.0
    for g in grads.values():
        total += float((g.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_gradients(grads, max_norm):
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
        return max_norm, norm
    return norm, norm


# ---------------------------------------------------------------------------
# checkpoint format


def _dtype_code(dtype):
    if dtype == np.float32:
        return 0
    if dtype == np.float64:
        return 1
    raise DataFormatError(f"checkpoint cannot store dtype {dtype}")


def checkpoint_bytes(model, optimizer, train_config, step, epoch, rng):
    arrays = {name: arr.astype(np.float32) if arr.dtype == np.uint8 else arr
              for name, arr in model.state_arrays().items()}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = _dtype_code(arr.dtype)
        name_b = name.encode()
        out.append(struct.pack("<I", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    out.append(struct.pack("<I", 0))  # record terminator
    cfg_text = config_to_text(
        model.config, train_config, state={"step": step, "epoch": epoch}
    ).encode()
    out.append(struct.pack("<I", len(cfg_text)))
    out.append(cfg_text)
    rng_text = json.dumps(rng.bit_generator.state, sort_keys=True, default=int).encode()
    out.append(struct.pack("<I", len(rng_text)))
    out.append(rng_text)
    return b"".join(out)


@dataclass
class Checkpoint:
    arrays: dict
    flow_config: object
    train_config: object
    step: int
    epoch: int
    rng_state: dict

    def restore_rng(self):
        rng = np.random.default_rng(0)
        rng.bit_generator.state = self.rng_state
        return rng


def parse_checkpoint(blob):
    off = 0

    def need(n, what):
        nonlocal off
        if off + n > len(blob):
            raise DataFormatError(f"truncated checkpoint reading {what}", offset=off)
        piece = blob[off : off + n]
        off += n
        return piece

    if need(4, "magic") != CKPT_MAGIC:
        raise DataFormatError(f"bad magic, expected {CKPT_MAGIC!r}", offset=0)
    (version,) = struct.unpack("<I", need(4, "version"))
    if version != CKPT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", offset=4)
    arrays = {}
    while True:
        (name_len,) = struct.unpack("<I", need(4, "record name length"))
        if name_len == 0:
            break
        name = need(name_len, "record name").decode()
        code, rank = struct.unpack("<BB", need(2, "record dtype/rank"))
        shape = struct.unpack(f"<{rank}Q", need(8 * rank, "record extents"))
        dtype = np.float32 if code == 0 else np.float64
        if code not in (0, 1):
            raise DataFormatError(f"unknown dtype code {code}", offset=off - 2)
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype().itemsize
        arrays[name] = np.frombuffer(
            need(n_bytes, f"payload of '{name}'"), dtype=dtype
        ).reshape(shape).copy()
    (cfg_len,) = struct.unpack("<I", need(4, "config length"))
    cfg_text = need(cfg_len, "config text").decode()
    (rng_len,) = struct.unpack("<I", need(4, "rng state length"))
    rng_state = json.loads(need(rng_len, "rng state").decode())
    if off != len(blob):
        raise DataFormatError("trailing bytes after checkpoint", offset=off)
    flow_config, train_config, state = config_from_text(cfg_text)
    state = state or {"step": 0, "epoch": 0}
    return Checkpoint(arrays, flow_config, train_config, state["step"],
                      state["epoch"], rng_state)


def save_checkpoint(path, model, optimizer, train_config, step, epoch, rng):
    blob = checkpoint_bytes(model, optimizer, train_config, step, epoch, rng)
    with open(path, "wb") as f:
        f.write(blob)
    return blob


def load_checkpoint(path):
    with open(path, "rb") as f:
        return parse_checkpoint(f.read())


def model_from_checkpoint(ckpt, dtype=np.float32):
    model = FlowModel(ckpt.flow_config, dtype=dtype)
    model_keys = {n for n in model.state_arrays()}
    model.load_state_arrays({k: v for k, v in ckpt.arrays.items() if k in model_keys})
    opt = Adamax()
    opt.load_state_arrays(
        {k: v for k, v in ckpt.arrays.items() if k.startswith("opt.")}, dtype
    )
    return model, opt


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: object
    metrics: list
    checkpoint: bytes
    steps_run: int


def _epoch_permutation(seed, epoch, n):
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1000 + epoch)))
    return rng.permutation(n)


def train(model, images, cfg, out_dir=None, resume=None, checkpoint_every=0,
          on_step=None):
    """Minimize the mean negative likelihood bound (single MC sample).

    ``resume`` is a Checkpoint; training continues bit-exactly from it.
    Logs per-step bpd, gradient norm and the min |s| of the 1x1
    convolutions. Divergence (bpd > 30 or non-finite values) aborts with
    the last good checkpoint attached to the raised TrainingError.
    """
    cfg.validate()
    images = np.asarray(images)
    n = images.shape[0]
    dims = int(np.prod(images.shape[1:]))
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_epochs = cfg.epochs + cfg.finetune_epochs
    total_steps = total_epochs * steps_per_epoch
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    opt = Adamax()
    step = 0
    if resume is not None:
        model.load_state_arrays(
            {k: v for k, v in resume.arrays.items() if not k.startswith("opt.")}
        )
        opt.load_state_arrays(
            {k: v for k, v in resume.arrays.items() if k.startswith("opt.")},
            model.dtype,
        )
        step = resume.step
        rng = resume.restore_rng()
    else:
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2718)))

    tape = model.tape()
    params = tape.parameters
    metrics = []
    model.train()
    last_good = checkpoint_bytes(model, opt, cfg, step, step // steps_per_epoch, rng)

    with threadpool_limits(limits=1):
        while step < total_steps:
            epoch = step // steps_per_epoch
            index = step % steps_per_epoch
            perm = _epoch_permutation(cfg.seed, epoch, n)
            batch_idx = perm[index * cfg.batch_size : (index + 1) * cfg.batch_size]
            batch = images[batch_idx]
            if cfg.hflip:
                flips = rng.random(batch.shape[0]) < 0.5
                batch = batch.copy()
                batch[flips] = batch[flips][:, :, :, ::-1]
            lr = lr_at(step, epoch, cfg)

            try:
                bound, _ = model.bound_terms(batch, rng)
            except (NumericError, NumericDomainError) as err:
                raise TrainingError(
                    f"non-finite forward at step {step}: {err}",
                    stage=f"step{step}", last_checkpoint=last_good,
                ) from err
            loss = (-bound).mean()
            bpd = float(loss.item()) / (dims * LN2)
            if not math.isfinite(bpd) or bpd > DIVERGENCE_BPD:
                raise TrainingError(
                    f"divergence at step {step}: bpd {bpd:.3f}",
                    stage=f"step{step}", last_checkpoint=last_good,
                )
            grads = tape.gradients(loss)
            try:
                clipped_norm, raw_norm = clip_gradients(grads, cfg.grad_clip_norm)
                opt.step(params, grads, lr, t=step + 1)
            except TrainingError as err:
                err.last_checkpoint = last_good
                raise
            step += 1
            entry = {
                "step": step,
                "epoch": epoch,
                "lr": lr,
                "bpd": bpd,
                "grad_norm": raw_norm,
                "min_abs_s": model.min_conv_scale(),
            }
            metrics.append(entry)
            if on_step is not None:
                on_step(entry)
            end_of_epoch = step % steps_per_epoch == 0
            if end_of_epoch or (checkpoint_every and step % checkpoint_every == 0):
                last_good = checkpoint_bytes(
                    model, opt, cfg, step, step // steps_per_epoch, rng
                )
                if out_dir is not None and checkpoint_every and (
                    step % checkpoint_every == 0
                ):
                    path = os.path.join(out_dir, f"checkpoint_{step:06d}.dfck")
                    with open(path, "wb") as f:
                        f.write(last_good)

    final = checkpoint_bytes(model, opt, cfg, step, step // steps_per_epoch, rng)
    if out_dir is not None:
        with open(os.path.join(out_dir, "checkpoint.dfck"), "wb") as f:
            f.write(final)
        with open(os.path.join(out_dir, "metrics.jsonl"), "w") as f:
            for entry in metrics:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        with open(os.path.join(out_dir, "config.txt"), "w") as f:
            f.write(config_to_text(model.config, cfg))
    return TrainResult(model=model, metrics=metrics, checkpoint=final,
                       steps_run=step)
