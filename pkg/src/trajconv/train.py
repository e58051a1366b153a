"""ADE-loss training loop and the binary checkpoint format."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable

import numpy as np

from . import ndmath as nm
from .data import SampleArrays
from .models import ModelSpec, ParamStore, build_model, forward_fn
from .ndmath import AdamState, adam_step, lr_schedule
from .prep import AugmentConfig, augment_arrays, neighbor_offsets, normalize_arrays, target_positions
from .social import SocialConfig, encode_offsets

log = logging.getLogger(__name__)

PRESETS = {
    "eth_ucy": {"epochs": 60, "base_lr": 0.005, "gamma": 0.5, "step_size": 17},
    "trajnet": {"epochs": 250, "base_lr": 0.005, "gamma": 0.75, "step_size": 35},
}

_SHUFFLE_STREAM = 0x5EED


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "eth_ucy"
    epochs: int = 60
    base_lr: float = 0.005
    gamma: float = 0.5
    step_size: int = 17
    batch_size: int = 64
    norm_mode: str = "tobs"
    augment: tuple[str, ...] = ()
    noise_sigma: float = 0.05
    model: ModelSpec = field(default_factory=ModelSpec)
    seed: int = 0

    @classmethod
    def from_preset(cls, preset: str = "eth_ucy", **overrides) -> "TrainConfig":
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        values = dict(PRESETS[preset], preset=preset)
        values.update({k: v for k, v in overrides.items() if v is not None})
        if "augment" in values:
            values["augment"] = tuple(sorted(set(values["augment"])))
        return cls(**values)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig.from_names(self.augment, self.noise_sigma, self.seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["augment"] = list(self.augment)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelSpec.from_dict(d["model"])
        d["augment"] = tuple(d.get("augment", ()))
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def social_features(obs_n: np.ndarray, neighbors_n: np.ndarray, norm_mode: str, cfg: SocialConfig) -> np.ndarray | None:
    if cfg.kind == "none":
        return None
    return encode_offsets(neighbor_offsets(obs_n, neighbors_n, norm_mode), cfg).astype(np.float32)


def prepare_batch(arrays: SampleArrays, idx: np.ndarray, config: TrainConfig, epoch: int | None = None):
    """Normalize (and, when ``epoch`` is given, augment) a batch.

    Returns float32 ``(obs, target, social)``; ``target`` is None for
    unlabeled samples.
    """
    obs, fut, nb = arrays.obs[idx], arrays.future[idx], arrays.neighbors[idx]
    obs_n, tgt, nb_n, _ = normalize_arrays(obs, fut, nb, config.norm_mode)
    if epoch is not None:
        obs_n, tgt, nb_n = augment_arrays(obs_n, tgt, nb_n, arrays.neighbor_counts[idx], idx, epoch,
                                          config.augment_config())
    social = social_features(obs_n, nb_n, config.norm_mode, config.model.social)
    return obs_n.astype(np.float32), None if tgt is None else tgt.astype(np.float32), social


def batch_loss(spec: ModelSpec, params: ParamStore, obs, target, social, norm_mode: str, train: bool = True):
    pred = forward_fn(spec)(params, obs, social, train=train)
    tgt = nm.NdArray(target, dtype=pred.data.dtype)
    return nm.mean_euclidean(target_positions(pred, norm_mode), target_positions(tgt, norm_mode))


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ParamStore
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    version: int = 1

    @property
    def spec(self) -> ModelSpec:
        return self.config.model

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()


def _batches(n: int, batch_size: int, perm: np.ndarray, drop_singleton: bool):
    for b0 in range(0, n, batch_size):
        idx = perm[b0:b0 + batch_size]
        if drop_singleton and len(idx) < 2:
            continue
        yield idx


def train_run(config: TrainConfig, train_samples: SampleArrays, resume: Checkpoint | None = None,
              on_epoch: Callable[[dict], None] | None = None) -> tuple[Checkpoint, list[dict]]:
    """Minimize mean ADE over shuffled mini-batches for ``config.epochs`` epochs.

    Shuffling and augmentation are derived from ``(seed, epoch)`` so a run
    resumed from a checkpoint reproduces the uninterrupted run.
    """
    n = len(train_samples)
    if n == 0:
        raise ValueError("empty training set")
    if not train_samples.labeled:
        raise ValueError("training samples must be labeled")
    spec = config.model
    if resume is not None:
        if resume.config.model != spec:
            raise ValueError("checkpoint model spec differs from config")
        params, adam, start = resume.params, resume.adam, resume.epoch
    else:
        params, _ = build_model(spec, config.seed)
        adam, start = AdamState(), 0
    drop = spec.family in ("conv1d", "conv2d") and spec.uses_batchnorm
    history = []
    for epoch in range(start, config.epochs):
        lr = lr_schedule(epoch, config.base_lr, config.gamma, config.step_size)
        perm = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, _SHUFFLE_STREAM])).permutation(n)
        total, count = 0.0, 0
        for b, idx in enumerate(_batches(n, config.batch_size, perm, drop)):
            obs, target, social = prepare_batch(train_samples, idx, config, epoch)
            params.zero_grad()
            loss = batch_loss(spec, params, obs, target, social, config.norm_mode)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            nm.backward(loss, list(params.params.values()))
            adam_step(params.arrays(), params.grads(), adam, lr)
            total += value * len(idx)
            count += len(idx)
        params.zero_grad()
        row = {"epoch": epoch, "lr": lr, "train_loss": total / max(count, 1)}
        history.append(row)
        log.info("epoch %d lr %.6g loss %.5f", epoch, lr, row["train_loss"])
        if on_epoch is not None:
            on_epoch(row)
    return Checkpoint(config, params, adam, max(start, config.epochs)), history


def write_loss_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss"])
        w.writeheader()
        for r in rows:
            w.writerow({"epoch": r["epoch"], "lr": repr(float(r["lr"])), "train_loss": repr(float(r["train_loss"]))})


# checkpoint format ---------------------------------------------------------------------
#
# magic(8) | version u32 | header_len u32 | header json | n_tensors u32 |
# tensors: name_len u16, name, kind u8, ndim u8, dims u32*ndim, float32 data |
# sha256 of everything before (32)

MAGIC = b"TRJCKPT\x00"
FORMAT_VERSION = 1
_KINDS = {"param": 0, "bn_mean": 1, "bn_var": 2, "adam_m": 3, "adam_v": 4}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def _tensor_entries(ckpt: Checkpoint):
    for name, p in ckpt.params.params.items():
        yield name, "param", p.data
    for name, s in ckpt.params.buffers.items():
        yield name, "bn_mean", s.mean
        yield name, "bn_var", s.var
    for name in ckpt.params.params:
        if name in ckpt.adam.m:
            yield name, "adam_m", ckpt.adam.m[name]
            yield name, "adam_v", ckpt.adam.v[name]


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "fingerprint": ckpt.fingerprint,
        "adam": {"t": ckpt.adam.t, "beta1": ckpt.adam.beta1, "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
        "batchnorm": {n: {"momentum": s.momentum, "eps": s.eps} for n, s in ckpt.params.buffers.items()},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
    buf.write(hb)
    entries = list(_tensor_entries(ckpt))
    buf.write(struct.pack("<I", len(entries)))
    for name, kind, arr in entries:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _KINDS[kind], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, sink: str | Path | BinaryIO) -> None:
    data = checkpoint_bytes(ckpt)
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(data)
    else:
        sink.write(data)


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data, self.off, self.end = data, 0, end

    def take(self, n: int) -> bytes:
        if self.off + n > self.end:
            raise CorruptCheckpointError(f"checkpoint truncated at offset {self.off} (needed {n} more bytes)")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint: bad magic at offset 0")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version > FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is newer than supported {FORMAT_VERSION}")
    if version < 1:
        raise CheckpointVersionError(f"invalid checkpoint format version {version}")
    if len(data) < len(MAGIC) + 8 + 32:
        raise CorruptCheckpointError(f"checkpoint truncated at offset {len(data)}")
    end = len(data) - 32
    r = _Reader(data, end)
    r.take(len(MAGIC) + 4)
    try:
        (hlen,) = r.unpack("<I")
        header = json.loads(r.take(hlen).decode("utf-8"))
        config = TrainConfig.from_dict(header["config"])
        (count,) = r.unpack("<I")
        tensors = []
        for _ in range(count):
            (nlen,) = r.unpack("<H")
            name = r.take(nlen).decode("utf-8")
            kind, ndim = r.unpack("<BB")
            shape = r.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
            tensors.append((name, _KIND_NAMES[kind], arr))
    except CorruptCheckpointError:
        raise
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"malformed checkpoint near offset {r.off}: {exc}") from exc
    if r.off != end:
        raise CorruptCheckpointError(f"unexpected trailing bytes at offset {r.off}")
    if hashlib.sha256(data[:end]).digest() != data[end:]:
        raise CorruptCheckpointError(f"checksum mismatch (payload ends at offset {end})")

    params = ParamStore()
    a = header["adam"]
    adam = AdamState(beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], t=a["t"])
    bn_cfg = header.get("batchnorm", {})
    for name, kind, arr in tensors:
        if kind == "param":
            params.add(name, arr.copy())
        elif kind in ("bn_mean", "bn_var"):
            if name not in params.buffers:
                c = bn_cfg.get(name, {})
                params.buffers[name] = nm.BatchNormState(arr.shape[0], c.get("momentum", 0.1), c.get("eps", 1e-5))
            setattr(params.buffers[name], "mean" if kind == "bn_mean" else "var", arr.copy())
        elif kind == "adam_m":
            adam.m[name] = arr.copy()
        else:
            adam.v[name] = arr.copy()
    return Checkpoint(config, params, adam, int(header["epoch"]), version)


def load_checkpoint(source: str | Path | BinaryIO | bytes) -> Checkpoint:
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    else:
        data = source.read()
    return checkpoint_from_bytes(data)
