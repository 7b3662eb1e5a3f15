"""Little-endian wire format for compressed embedding messages.

Header (31 bytes)::

    magic  "CV"    2
    version u8     1
    codec   u8     1   0 none, 1 scalar, 2 lattice2d, 3 topk
    round   u32    4
    party   u16    2
    B       u32    4
    P_m     u32    4
    b       u8     1
    key     u64    8   dither key
    crc32   u32    4   over the preceding header bytes and the body

Body, bit-packed LSB-first and padded to a byte boundary:

* none: float64 values, row-major
* scalar: q-bit level indices, row-major
* lattice2d: 2b-bit codeword indices per pair, row-major over (pair row, column)
* topk: per column, k index fields of ceil(log2 P_m) bits then k float32 values
"""

from __future__ import annotations

import math
import struct
import zlib

import numpy as np

from .compressors import (
    CompressedEmbedding,
    CompressorSpec,
    index_bits,
    lattice_dither,
    lattice_reconstruct,
    scalar_dither,
    scalar_reconstruct,
    topk_count,
    topk_reconstruct,
    _pairs_layout,
)

MAGIC = b"CV"
VERSION = 1
_HEAD = struct.Struct("<2sBBIHIIBQ")
HEADER_BYTES = _HEAD.size + 4


class WireError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def pack_fields(values: np.ndarray, width: int) -> np.ndarray:
    """Bit array (uint8 0/1) holding each value in ``width`` bits, LSB first."""
    v = np.asarray(values, dtype=np.uint64).reshape(-1)
    shifts = np.arange(width, dtype=np.uint64)
    return ((v[:, None] >> shifts) & np.uint64(1)).astype(np.uint8).reshape(-1)


def unpack_fields(bits: np.ndarray, width: int, count: int) -> np.ndarray:
    b = bits[: width * count].reshape(count, width).astype(np.uint64)
    return (b << np.arange(width, dtype=np.uint64)).sum(axis=1, dtype=np.uint64)


def body_bits(spec: CompressorSpec, P: int, B: int) -> int:
    if spec.is_identity:
        return 64 * P * B
    if spec.kind == "scalar":
        return P * B * spec.bits
    if spec.kind == "lattice2d":
        return _pairs_layout(P) * B * 2 * spec.bits
    return B * topk_count(P, spec) * (32 + index_bits(P))


def message_bytes(spec: CompressorSpec, P: int, B: int) -> int:
    return HEADER_BYTES + math.ceil(body_bits(spec, P, B) / 8)


def _body(msg: CompressedEmbedding) -> bytes:
    spec = msg.spec
    P, B = msg.shape
    if spec.is_identity:
        return np.ascontiguousarray(msg.codes[0], dtype="<f8").tobytes()
    if spec.kind == "scalar":
        bits = pack_fields(msg.codes[0], spec.bits)
    elif spec.kind == "lattice2d":
        bits = pack_fields(msg.codes[0], 2 * spec.bits)
    else:
        rows, values = msg.codes
        k = rows.shape[0]
        w = index_bits(P)
        idx_bits = pack_fields(rows.T, w).reshape(B, k * w)
        val_bits = pack_fields(values.T.astype("<f4").view("<u4"), 32).reshape(B, k * 32)
        bits = np.concatenate([idx_bits, val_bits], axis=1).reshape(-1)
    return np.packbits(bits, bitorder="little").tobytes()


def encode_wire(msg: CompressedEmbedding) -> bytes:
    spec = msg.spec
    P, B = msg.shape
    head = _HEAD.pack(
        MAGIC, VERSION, spec.codec_id, msg.round, msg.party, B, P, min(spec.bits, 32), msg.key
    )
    body = _body(msg)
    crc = zlib.crc32(body, zlib.crc32(head))
    return head + struct.pack("<I", crc) + body


def decode_wire(buf: bytes, spec: CompressorSpec) -> CompressedEmbedding:
    """Parse a message produced by :func:`encode_wire` under the agreed ``spec``.

    Range limits and top-k selection parameters are session configuration and
    are not carried in the header.
    """
    buf = bytes(buf)
    if len(buf) < HEADER_BYTES:
        raise WireError(f"truncated header: {len(buf)} of {HEADER_BYTES} bytes", len(buf))
    magic, version, codec, rnd, party, B, P, b, key = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise WireError(f"unsupported version {version}", 2)
    if codec > 3:
        raise WireError(f"unknown codec id {codec}", 3)
    (crc,) = struct.unpack_from("<I", buf, _HEAD.size)
    if codec != spec.codec_id:
        raise WireError(f"codec id {codec} does not match session codec {spec.codec_id}", 3)
    if not spec.is_identity and b != spec.bits:
        raise WireError(f"bits field {b} does not match session bits {spec.bits}", 20)
    if B == 0 or P == 0:
        raise WireError(f"empty message shape {P}x{B}", 8 if B == 0 else 14)
    need = math.ceil(body_bits(spec, P, B) / 8)
    have = len(buf) - HEADER_BYTES
    if have < need:
        raise WireError(f"truncated body: {have} of {need} bytes", len(buf))
    if have > need:
        raise WireError(f"{have - need} trailing bytes after body", HEADER_BYTES + need)
    body = buf[HEADER_BYTES:]
    if zlib.crc32(body, zlib.crc32(buf[: _HEAD.size])) != crc:
        raise WireError("checksum mismatch", _HEAD.size)

    if spec.is_identity:
        vals = np.frombuffer(body, dtype="<f8").reshape(P, B).astype(np.float64)
        rec, codes = vals.copy(), (vals.copy(),)
    else:
        bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8), bitorder="little")
        if spec.kind == "scalar":
            idx = unpack_fields(bits, spec.bits, P * B).reshape(P, B)
            if spec.bits < 64 and np.any(idx >= 2**spec.bits):
                raise WireError("level index out of range", HEADER_BYTES)
            rec = scalar_reconstruct(idx, scalar_dither(key, (P, B), spec), spec)
            codes = (idx,)
        elif spec.kind == "lattice2d":
            npr = _pairs_layout(P)
            idx = unpack_fields(bits, 2 * spec.bits, npr * B).reshape(npr, B)
            rec = lattice_reconstruct(idx, lattice_dither(key, npr * B, spec), spec, P)
            codes = (idx,)
        else:
            k = topk_count(P, spec)
            w = index_bits(P)
            per_col = k * (w + 32)
            cols = bits[: per_col * B].reshape(B, per_col)
            rows = np.stack([unpack_fields(cols[j, : k * w], w, k) for j in range(B)], axis=1)
            raw = np.stack(
                [unpack_fields(cols[j, k * w :], 32, k) for j in range(B)], axis=1
            ).astype("<u4")
            values = raw.view("<f4")
            if np.any(rows >= P):
                raise WireError("top-k row index out of range", HEADER_BYTES)
            rec = topk_reconstruct(rows, values, P)
            codes = (rows, values)
    if spec.is_identity:
        paper = 32 * P * B
    elif spec.kind == "topk":
        paper = B * topk_count(P, spec) * 32
    else:
        paper = body_bits(spec, P, B)
    return CompressedEmbedding(
        reconstructed=rec,
        payload_bits=body_bits(spec, P, B),
        paper_bits=paper,
        error_sq_fro=None,
        spec=spec,
        key=key,
        codes=codes,
        round=rnd,
        party=party,
    )
