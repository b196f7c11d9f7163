"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"SKMGTCKP"  u32 version  u32 header_len  header (UTF-8 JSON)
    repeated tensor blocks:
        u16 name_len  name  u8 tag_len  tag ("f32" | "f64")  u8 ndim  u32 * ndim dims
        raw little-endian values
    u32 crc32 of everything before it

The header carries both configs, the epoch counter, best validation accuracy,
Adam step count and the dropout generator state.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import MGTConfig, ModelParams, param_shapes, init_params
from .training import AdamState, TrainConfig, TrainState

MAGIC = b"SKMGTCKP"
FORMAT_VERSION = 1
_TAGS = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TAG_OF = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class CheckpointError(ValueError):
    pass


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    tag = _TAG_OF.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"cannot store dtype {arr.dtype} for {name}")
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(tag)) + tag.encode()
    head += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()


def _decode_tensors(buf: bytes, offset: int, end: int) -> dict[str, np.ndarray]:
    out = {}
    try:
        while offset < end:
            (nlen,) = struct.unpack_from("<H", buf, offset)
            offset += 2
            name = buf[offset:offset + nlen].decode("utf-8")
            offset += nlen
            (tlen,) = struct.unpack_from("<B", buf, offset)
            offset += 1
            tag = buf[offset:offset + tlen].decode()
            offset += tlen
            (ndim,) = struct.unpack_from("<B", buf, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, offset)
            offset += 4 * ndim
            dt = _TAGS[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if offset + nbytes > end:
                raise CheckpointError(f"truncated data for tensor {name}")
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape).copy()
            offset += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt tensor section: {exc}") from None
    return out


def save_checkpoint(path: str | Path, state: TrainState, tcfg: TrainConfig) -> None:
    params = state.params
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": params.cfg.to_dict(),
        "train_config": tcfg.to_dict(),
        "epoch": state.epoch,
        "best_val_acc": state.best_val_acc,
        "best_epoch": state.best_epoch,
        "adam_step": state.adam.step,
        "rng_state": state.rng.bit_generator.state,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hb)), hb]
    for name, t in params.items():
        parts.append(_encode_tensor("param/" + name, t.data))
    for name, arr in params.buffers().items():
        parts.append(_encode_tensor("buffer/" + name, arr))
    for name in state.adam.m:
        parts.append(_encode_tensor("adam.m/" + name, state.adam.m[name]))
        parts.append(_encode_tensor("adam.v/" + name, state.adam.v[name]))
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_header(path: str | Path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    return json.loads(buf[16:16 + hlen].decode("utf-8"))


def load_checkpoint(path: str | Path, expected: MGTConfig | None = None) -> tuple[TrainState, TrainConfig]:
    """Restore a :class:`TrainState`; ``expected`` checks the stored model shape."""
    buf = Path(path).read_bytes()
    if len(buf) < 20 or buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    header = read_header(path)
    hlen = struct.unpack_from("<I", buf, 12)[0]
    tensors = _decode_tensors(buf, 16 + hlen, len(buf) - 4)

    cfg = MGTConfig.from_dict(header["model_config"])
    tcfg = TrainConfig(**header["train_config"])
    if expected is not None:
        want, have = param_shapes(expected), param_shapes(cfg)
        if want != have:
            diff = sorted(set(want.items()) ^ set(have.items()))[:4]
            raise CheckpointError(f"{path}: checkpoint does not match the configured model, e.g. {diff}")

    dtype = ad.dtype_for(tcfg.precision)
    params = init_params(cfg, np.random.default_rng(0), dtype)
    for name, t in params.items():
        key = "param/" + name
        if key not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tensors[key].shape != t.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tensors[key].shape}, expected {t.shape}")
        t.data = tensors[key].astype(dtype, copy=False)
    try:
        params.load_buffers({k[len("buffer/"):]: v for k, v in tensors.items() if k.startswith("buffer/")})
        adam = AdamState({n: tensors["adam.m/" + n] for n, _ in params.items()},
                         {n: tensors["adam.v/" + n] for n, _ in params.items()},
                         step=header["adam_step"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing entry {exc}") from None
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = header["rng_state"]
    state = TrainState(params, adam, rng, header["epoch"], header["best_val_acc"], header["best_epoch"])
    return state, tcfg
