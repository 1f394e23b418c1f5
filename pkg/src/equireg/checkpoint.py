"""Versioned binary weight checkpoints.

Layout (all integers little-endian)::

    b"EQRGCKPT"  u32 version  u32 section count
    per section: u8 kind (0 array, 1 text)  u16 name length  name (utf-8)
        array: u32 ndim, u32 dims..., float64 payload
        text:  u32 byte length, utf-8 payload
    u32 CRC32 of everything above

Arrays round-trip bit-exactly.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .equinet import EncoderConfig, EquiNet
from .global_register import OccupancyDecoder
from .local_register import FineWeights

MAGIC = b"EQRGCKPT"
VERSION = 1
_ARRAY, _TEXT = 0, 1


class CorruptCheckpoint(ValueError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


def dumps(arrays: dict, texts: dict | None = None) -> bytes:
    texts = texts or {}
    out = [MAGIC, struct.pack("<II", VERSION, len(arrays) + len(texts))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8")  # tobytes() is C order; keeps 0-d shape
        key = name.encode()
        out.append(struct.pack("<BH", _ARRAY, len(key)) + key)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(a.tobytes())
    for name in sorted(texts):
        key, body = name.encode(), texts[name].encode()
        out.append(struct.pack("<BH", _TEXT, len(key)) + key + struct.pack("<I", len(body)) + body)
    blob = b"".join(out)
    return blob + struct.pack("<I", zlib.crc32(blob))


def loads(blob: bytes):
    """Inverse of :func:`dumps`; returns (arrays, texts)."""
    if len(blob) < len(MAGIC) + 12 or not blob.startswith(MAGIC):
        raise CorruptCheckpoint("bad magic or truncated header")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint("checksum mismatch")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CorruptCheckpoint("truncated section")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(body):
            raise CorruptCheckpoint("truncated section")
        pos += n
        return body[pos - n:pos]

    version, count = take("<II")
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
    arrays, texts = {}, {}
    for _ in range(count):
        kind, klen = take("<BH")
        name = take_bytes(klen).decode()
        if kind == _ARRAY:
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I")
            n = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(take_bytes(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        elif kind == _TEXT:
            (length,) = take("<I")
            texts[name] = take_bytes(length).decode()
        else:
            raise CorruptCheckpoint(f"unknown section kind {kind}")
    if pos != len(body):
        raise CorruptCheckpoint("trailing bytes after last section")
    return arrays, texts


@dataclass
class Model:
    net: EquiNet | None = None
    decoder: OccupancyDecoder | None = None
    fine: FineWeights | None = None


def save_model(path, model: Model):
    arrays, texts = {}, {}
    if model.net is not None:
        arrays.update({f"enc/{k}": v for k, v in model.net.params.items()})
        texts["encoder_config"] = json.dumps(asdict(model.net.cfg), sort_keys=True)
    if model.decoder is not None:
        arrays.update({f"dec/{k}": v for k, v in model.decoder.params.items()})
    if model.fine is not None:
        arrays.update({f"fine/{k}": v for k, v in model.fine.params.items()})
    with open(path, "wb") as fh:
        fh.write(dumps(arrays, texts))


def load_model(path) -> Model:
    try:
        with open(path, "rb") as fh:
            arrays, texts = loads(fh.read())
    except FileNotFoundError as exc:
        raise MissingCheckpoint(str(path)) from exc

    def part(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    model = Model()
    enc = part("enc/")
    if enc:
        if "encoder_config" not in texts:
            raise CorruptCheckpoint("encoder weights without encoder_config")
        model.net = EquiNet(EncoderConfig(**json.loads(texts["encoder_config"])), enc)
    if part("dec/"):
        model.decoder = OccupancyDecoder(part("dec/"))
    if part("fine/"):
        model.fine = FineWeights(part("fine/"))
    return model
