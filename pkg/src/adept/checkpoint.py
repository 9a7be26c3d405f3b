"""Binary checkpoint container for the base model and/or the HSM.

Layout (all integers little-endian)::

    b"ADPT"  u32 version  u32 n_sections
    repeated: 4-byte tag  u64 payload_length  payload
    u32 CRC32 of every preceding byte

Section ``MDL0`` holds the model config (7 x u32: n_layers, d_hidden, d_qkv,
n_heads, vocab_size, max_seq, ffn_mult) followed by the tensor block.
Section ``HSM0`` holds ``u32 d_hidden, u8 variant, u8 activation`` and then
the tensor block. Section ``CLS0`` holds a classifier head as ``u32 d_hidden,
u32 n_classes, u8 pooling`` and a tensor block with ``w`` and ``b``. A tensor block is ``u32 count`` then, per tensor in the
fixed order of ``named_arrays()``: ``u16 name_len, name (utf-8), u8 ndim,
ndim x u32 dims, float64 data``.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, CheckpointError, ConfigMismatch, VersionMismatch
from .hsm import ACTIVATIONS, VARIANTS, HSMWeights, hsm_from_arrays
from .model import Model, ModelConfig, model_from_arrays
from .runtime import ClassifierHead

MAGIC = b"ADPT"
FORMAT_VERSION = 1
_POOLINGS = ("last", "mean")
_CONFIG_FIELDS = ("n_layers", "d_hidden", "d_qkv", "n_heads", "vocab_size", "max_seq", "ffn_mult")


@dataclass
class Checkpoint:
    model: Model | None = None
    hsm: HSMWeights | None = None
    config: ModelConfig | None = None
    head: ClassifierHead | None = None


def _write_tensors(buf: io.BytesIO, arrays) -> None:
    items = list(arrays)
    buf.write(struct.pack("<I", len(items)))
    for name, a in items:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_tensors(view: memoryview, off: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off : off + n]).decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(shape)
        off += 8 * size
        out[name] = arr
    return out, off


def dumps(model: Model | None = None, hsm: HSMWeights | None = None, head: ClassifierHead | None = None) -> bytes:
    if model is None and hsm is None and head is None:
        raise CheckpointError("nothing to save")
    sections = []
    if model is not None:
        p = io.BytesIO()
        p.write(struct.pack("<7I", *(getattr(model.config, f) for f in _CONFIG_FIELDS)))
        _write_tensors(p, model.named_arrays())
        sections.append((b"MDL0", p.getvalue()))
    if hsm is not None:
        p = io.BytesIO()
        p.write(struct.pack("<IBB", hsm.d_hidden, VARIANTS.index(hsm.variant), ACTIVATIONS.index(hsm.activation)))
        _write_tensors(p, hsm.named_arrays())
        sections.append((b"HSM0", p.getvalue()))
    if head is not None:
        p = io.BytesIO()
        p.write(struct.pack("<IIB", head.w.shape[0], head.w.shape[1], _POOLINGS.index(head.pooling)))
        _write_tensors(p, [("w", head.w), ("b", head.b)])
        sections.append((b"CLS0", p.getvalue()))
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", FORMAT_VERSION, len(sections)))
    for tag, payload in sections:
        out.write(tag)
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(data: bytes, expect_config: ModelConfig | None = None) -> Checkpoint:
    if len(data) < 16:
        raise ChecksumMismatch("checkpoint is truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch("CRC32 does not match; file is corrupt or truncated")
    if body[:4] != MAGIC:
        raise CheckpointError("not an ADPT checkpoint")
    version, n_sections = struct.unpack_from("<II", body, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, this build reads {FORMAT_VERSION}")
    view = memoryview(body)
    off = 12
    ck = Checkpoint()
    try:
        for _ in range(n_sections):
            tag = bytes(view[off : off + 4])
            (length,) = struct.unpack_from("<Q", view, off + 4)
            off += 12
            end = off + length
            if tag == b"MDL0":
                cfg = ModelConfig(**dict(zip(_CONFIG_FIELDS, struct.unpack_from("<7I", view, off))))
                if expect_config is not None and cfg != expect_config:
                    raise ConfigMismatch(f"checkpoint holds {cfg}, expected {expect_config}")
                arrays, _ = _read_tensors(view, off + 28)
                ck.config = cfg
                ck.model = model_from_arrays(cfg, arrays).freeze()
            elif tag == b"HSM0":
                d, vcode, acode = struct.unpack_from("<IBB", view, off)
                if expect_config is not None and d != expect_config.d_hidden:
                    raise ConfigMismatch(f"HSM width {d} != d_hidden {expect_config.d_hidden}")
                arrays, _ = _read_tensors(view, off + 6)
                ck.hsm = hsm_from_arrays(arrays, VARIANTS[vcode], ACTIVATIONS[acode])
            elif tag == b"CLS0":
                d, c, pcode = struct.unpack_from("<IIB", view, off)
                if expect_config is not None and d != expect_config.d_hidden:
                    raise ConfigMismatch(f"classifier width {d} != d_hidden {expect_config.d_hidden}")
                arrays, _ = _read_tensors(view, off + 9)
                if arrays["w"].shape != (d, c) or arrays["b"].shape != (c,):
                    raise CheckpointError("classifier tensors disagree with their header")
                ck.head = ClassifierHead(arrays["w"], arrays["b"], _POOLINGS[pcode])
            else:
                raise CheckpointError(f"unknown section {tag!r}")
            off = end
    except (struct.error, IndexError, KeyError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from e
    if ck.model is not None and ck.hsm is not None and ck.hsm.d_hidden != ck.model.config.d_hidden:
        raise ConfigMismatch("HSM width differs from the model in the same file")
    if ck.model is not None and ck.head is not None and ck.head.w.shape[0] != ck.model.config.d_hidden:
        raise ConfigMismatch("classifier width differs from the model in the same file")
    return ck


def save_checkpoint(
    path: str | os.PathLike,
    model: Model | None = None,
    hsm: HSMWeights | None = None,
    head: ClassifierHead | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(model, hsm, head))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike, expect_config: ModelConfig | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    return loads(data, expect_config)
