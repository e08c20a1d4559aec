"""Asymmetric groupwise INT2/INT4 codec and packed buffer layouts.

Two layouts exist, mirroring the dual-precision cache buffers:

* per-channel key pages — indexed by (page, head); INT2 codes for all
  ``G`` tokens of a page, channel-major, one (scale, zero) pair per channel;
* per-token blocks — indexed by (token, head); codes for all ``d`` channels
  of one token, split into ``d/G`` groups each with its own (scale, zero).

Scales and zero offsets are stored as little-endian float16 inside the
uint8 payload; codes are packed below the byte boundary, little-endian
within each byte. Byte-level worked examples live in LAYOUT.md.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

GROUP_SIZE = 32
PARAM_BYTES = 2  # float16 per scale / zero offset


def _narrow16(x):
    """Round to float16 precision, keep float32 dtype for arithmetic."""
    return np.asarray(x, dtype=np.float32).astype(np.float16).astype(np.float32)


def _round_half_away(x):
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def _group_params(mins, maxs, bitwidth):
    """Narrowed (scale, zero) per group; scale 0 flags a constant group."""
    levels = (1 << bitwidth) - 1
    zeros = _narrow16(mins)
    scales = _narrow16((np.asarray(maxs, dtype=np.float32) - mins) / levels)
    return scales, zeros


def _encode_with(values, scales, zeros, bitwidth):
    """Quantize ``values`` against broadcastable narrowed params."""
    levels = (1 << bitwidth) - 1
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = _round_half_away((values - zeros) / scales)
    codes = np.where(scales > 0, raw, 0.0)
    return np.clip(codes, 0, levels).astype(np.uint8)


@dataclass
class QuantGroup:
    """One quantization group: codes plus its affine parameters."""

    codes: np.ndarray
    scale: float
    zero_offset: float
    bitwidth: int
    group_len: int


def quantize_group(values, bitwidth: int) -> QuantGroup:
    """Asymmetric round-to-nearest quantization of one group.

    zero_offset is the group minimum, scale spans the range over
    ``2^b - 1`` levels; both are narrowed to float16 precision before the
    codes are computed, so reconstruction only ever sees storable params.
    A constant group gets scale 0 and all-zero codes (exact reconstruction).
    """
    if bitwidth not in (2, 4):
        raise ValidationError(f"unsupported bitwidth {bitwidth}")
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 1 or values.size == 0:
        raise ValidationError("values must be a non-empty 1-D vector")
    if not np.all(np.isfinite(values)):
        raise ValidationError("values must be finite")
    scale, zero = _group_params(values.min(), values.max(), bitwidth)
    codes = _encode_with(values, scale, zero, bitwidth)
    return QuantGroup(
        codes=codes,
        scale=float(scale),
        zero_offset=float(zero),
        bitwidth=bitwidth,
        group_len=values.size,
    )


def dequantize_group(group: QuantGroup) -> np.ndarray:
    scale = _narrow16(group.scale)
    zero = _narrow16(group.zero_offset)
    return group.codes.astype(np.float32) * scale + zero


def pack_codes(codes, bitwidth: int) -> bytes:
    """Pack sub-byte codes little-endian within each byte.

    Code i occupies bits [i*b mod 8, i*b mod 8 + b) of byte floor(i*b/8).
    """
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bitwidth)):
        raise ValidationError(f"code out of range for {bitwidth}-bit packing")
    per_byte = 8 // bitwidth
    padded = np.zeros(-(-codes.size // per_byte) * per_byte, dtype=np.int64)
    padded[: codes.size] = codes
    shifts = bitwidth * np.arange(per_byte, dtype=np.int64)
    packed = (padded.reshape(-1, per_byte) << shifts).sum(axis=1)
    return packed.astype(np.uint8).tobytes()


def unpack_codes(data: bytes, bitwidth: int, n: int) -> np.ndarray:
    per_byte = 8 // bitwidth
    if len(data) != -(-n * bitwidth // 8):
        raise ValidationError("packed byte length does not match code count")
    raw = np.frombuffer(data, dtype=np.uint8)
    shifts = bitwidth * np.arange(per_byte, dtype=np.uint8)
    mask = (1 << bitwidth) - 1
    codes = (raw[:, None] >> shifts) & mask
    return codes.reshape(-1)[:n].astype(np.uint8)


def key_page_payload_bytes(head_dim: int, group_len: int = GROUP_SIZE) -> int:
    return head_dim * group_len * 2 // 8 + head_dim * 2 * PARAM_BYTES


def token_block_payload_bytes(head_dim: int, bitwidth: int, group_len: int = GROUP_SIZE) -> int:
    return head_dim * bitwidth // 8 + (head_dim // group_len) * 2 * PARAM_BYTES


@dataclass
class KeyPageBlock:
    """Packed per-channel INT2 keys for one (page, head).

    Payload: channel-major INT2 codes for all ``group_len`` tokens
    (contiguous per channel), followed by interleaved float16
    (scale, zero) pairs, one per channel.
    """

    payload: bytes
    head_dim: int
    group_len: int = GROUP_SIZE


@dataclass
class TokenBlock:
    """Packed per-token codes for one (token, head).

    Payload: packed codes for all ``head_dim`` channels, followed by
    interleaved float16 (scale, zero) pairs, one per ``group_len``-channel
    group.
    """

    payload: bytes
    head_dim: int
    bitwidth: int
    group_len: int = GROUP_SIZE


def encode_key_page_int2(keys, group_len: int = GROUP_SIZE) -> KeyPageBlock:
    """Encode a full page of keys per-channel at INT2.

    ``keys`` is [group_len, d]: one row per token. Each channel's
    ``group_len`` values form one quantization group, so a high-magnitude
    outlier channel cannot disturb any other channel's codes.
    """
    keys = np.asarray(keys, dtype=np.float32)
    if keys.ndim != 2 or keys.shape[0] != group_len:
        raise ValidationError(f"expected exactly {group_len} token rows, got shape {keys.shape}")
    if not np.all(np.isfinite(keys)):
        raise ValidationError("keys must be finite")
    d = keys.shape[1]
    scales, zeros = _group_params(keys.min(axis=0), keys.max(axis=0), 2)
    codes = _encode_with(keys, scales, zeros, 2)  # [G, d]
    packed = pack_codes(codes.T.reshape(-1), 2)  # channel-major
    params = np.stack([scales, zeros], axis=1).astype("<f2").tobytes()
    return KeyPageBlock(payload=packed + params, head_dim=d, group_len=group_len)


def decode_key_page_int2(block: KeyPageBlock) -> np.ndarray:
    d, g = block.head_dim, block.group_len
    code_bytes = d * g * 2 // 8
    codes = unpack_codes(block.payload[:code_bytes], 2, d * g).reshape(d, g)
    params = np.frombuffer(block.payload[code_bytes:], dtype="<f2").astype(np.float32)
    scales, zeros = params.reshape(d, 2).T
    return (codes.astype(np.float32) * scales[:, None] + zeros[:, None]).T


def encode_token_block(vec, bitwidth: int, group_len: int = GROUP_SIZE) -> TokenBlock:
    """Encode one token's channels in per-token groups of ``group_len``."""
    vec = np.asarray(vec, dtype=np.float32)
    if vec.ndim != 1 or vec.size % group_len != 0:
        raise ValidationError(
            f"head dim {vec.shape} not divisible by group size {group_len}"
        )
    if not np.all(np.isfinite(vec)):
        raise ValidationError("values must be finite")
    groups = vec.reshape(-1, group_len)
    scales, zeros = _group_params(groups.min(axis=1), groups.max(axis=1), bitwidth)
    codes = _encode_with(groups, scales[:, None], zeros[:, None], bitwidth)
    packed = pack_codes(codes.reshape(-1), bitwidth)
    params = np.stack([scales, zeros], axis=1).astype("<f2").tobytes()
    return TokenBlock(payload=packed + params, head_dim=vec.size, bitwidth=bitwidth, group_len=group_len)


def encode_token_blocks(mat, bitwidth: int, group_len: int = GROUP_SIZE) -> list[TokenBlock]:
    """Encode many tokens at once; identical payloads to encode_token_block.

    Each token's codes occupy whole bytes (d*b/8 is integral), so the whole
    matrix can be packed in one shot and sliced per row.
    """
    mat = np.asarray(mat, dtype=np.float32)
    if mat.ndim != 2 or mat.shape[1] % group_len != 0:
        raise ValidationError(f"expected [n, d] with d divisible by {group_len}")
    if not np.all(np.isfinite(mat)):
        raise ValidationError("values must be finite")
    n, d = mat.shape
    groups = mat.reshape(n, d // group_len, group_len)
    scales, zeros = _group_params(groups.min(-1), groups.max(-1), bitwidth)
    codes = _encode_with(groups, scales[..., None], zeros[..., None], bitwidth)
    packed = pack_codes(codes.reshape(-1), bitwidth)
    code_bytes = d * bitwidth // 8
    params = np.stack([scales, zeros], axis=2).astype("<f2")
    return [
        TokenBlock(
            payload=packed[i * code_bytes : (i + 1) * code_bytes] + params[i].tobytes(),
            head_dim=d,
            bitwidth=bitwidth,
            group_len=group_len,
        )
        for i in range(n)
    ]


def decode_token_blocks(blocks: list[TokenBlock]) -> np.ndarray:
    """Decode homogeneous token blocks into an [n, d] array."""
    if not blocks:
        raise ValidationError("no blocks to decode")
    d, b, g = blocks[0].head_dim, blocks[0].bitwidth, blocks[0].group_len
    if any((blk.head_dim, blk.bitwidth, blk.group_len) != (d, b, g) for blk in blocks):
        raise ValidationError("blocks must share dims and bitwidth")
    n = len(blocks)
    raw = np.frombuffer(b"".join(blk.payload for blk in blocks), dtype=np.uint8)
    rows = raw.reshape(n, -1)
    code_bytes = d * b // 8
    codes = unpack_codes(rows[:, :code_bytes].tobytes(), b, n * d).reshape(n, -1, g)
    params = rows[:, code_bytes:].tobytes()
    scales, zeros = (
        np.frombuffer(params, dtype="<f2").astype(np.float32).reshape(n, -1, 2)
        .transpose(2, 0, 1)
    )
    out = codes.astype(np.float32) * scales[..., None] + zeros[..., None]
    return out.reshape(n, d)


def decode_token_block(block: TokenBlock) -> np.ndarray:
    d, b, g = block.head_dim, block.bitwidth, block.group_len
    code_bytes = d * b // 8
    codes = unpack_codes(block.payload[:code_bytes], b, d).reshape(-1, g)
    params = np.frombuffer(block.payload[code_bytes:], dtype="<f2").astype(np.float32)
    scales, zeros = params.reshape(-1, 2).T
    return (codes.astype(np.float32) * scales[:, None] + zeros[:, None]).reshape(-1)
