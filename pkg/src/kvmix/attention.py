"""Reference attention paths.

Three flavors, all CPU/numpy, float32 arithmetic:

* dense full-precision attention with numerically stable softmax,
* selective-quantization replay (quantize chosen rows through the
  production codec, then run dense attention) used by calibration,
* a flash-decoding path over contiguous bitwidth-homogeneous splits of a
  partitioned page table, merged via online log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .quant import GROUP_SIZE, _encode_with, _group_params
from .tags import N_TAG_CODES


def _expand_kv(x, n_heads):
    """Repeat KV heads for grouped-query attention (h -> h // ratio)."""
    n_kv = x.shape[1]
    if n_heads % n_kv != 0:
        raise ValidationError(f"n_heads {n_heads} not a multiple of n_kv_heads {n_kv}")
    return np.repeat(x, n_heads // n_kv, axis=1)


def attention_full(q, k, v, scale=None, causal=False, return_probs=False):
    """Dense softmax attention.

    q: [n_q, n_heads, d]; k, v: [N, n_kv_heads, d]. With ``causal`` the
    queries are aligned to the last n_q key positions. Returns
    [n_q, n_heads, d] (plus the probability tensor when asked).
    """
    q = np.asarray(q, dtype=np.float32)
    k = np.asarray(k, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3 or k.shape != v.shape:
        raise ValidationError("Q/K/V must be rank-3 with matching K/V shapes")
    if q.shape[2] != k.shape[2]:
        raise ValidationError("Q and K head dims differ")
    n_q, n_heads, d = q.shape
    n_keys = k.shape[0]
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    k_e = _expand_kv(k, n_heads)
    v_e = _expand_kv(v, n_heads)
    logits = np.einsum("qhd,nhd->hqn", q, k_e) * np.float32(scale)
    if causal:
        offset = n_keys - n_q
        if offset < 0:
            raise ValidationError("causal attention needs n_q <= N")
        mask = np.arange(n_keys)[None, :] > (offset + np.arange(n_q))[:, None]
        logits = np.where(mask[None, :, :], np.float32(-np.inf), logits)
    logits -= logits.max(axis=2, keepdims=True)
    weights = np.exp(logits)
    probs = weights / weights.sum(axis=2, keepdims=True)
    out = np.einsum("hqn,nhd->qhd", probs, v_e)
    if return_probs:
        return out, probs
    return out


def output_mse(o_ref, o_test) -> float:
    """Mean over positions and heads of the squared L2 output error."""
    o_ref = np.asarray(o_ref, dtype=np.float64)
    o_test = np.asarray(o_test, dtype=np.float64)
    if o_ref.shape != o_test.shape:
        raise ValidationError("output shapes differ")
    return float(((o_ref - o_test) ** 2).sum(axis=-1).mean())


def output_mse_per_head(o_ref, o_test) -> np.ndarray:
    """Per-head mean over positions of the squared L2 output error."""
    o_ref = np.asarray(o_ref, dtype=np.float64)
    o_test = np.asarray(o_test, dtype=np.float64)
    if o_ref.shape != o_test.shape:
        raise ValidationError("output shapes differ")
    return ((o_ref - o_test) ** 2).sum(axis=-1).mean(axis=0)


def _fake_quant_per_token(x, bitwidth, group_len):
    """Quantize-dequantize rows per token; bit-exact with the codec."""
    shape = x.shape
    groups = x.reshape(*shape[:-1], shape[-1] // group_len, group_len)
    scales, zeros = _group_params(groups.min(-1), groups.max(-1), bitwidth)
    codes = _encode_with(groups, scales[..., None], zeros[..., None], bitwidth)
    out = codes.astype(np.float32) * scales[..., None] + zeros[..., None]
    return out.reshape(shape)


def _fake_quant_keys_per_channel(k_page):
    """INT2 per-channel keys over one page; groups run across tokens."""
    scales, zeros = _group_params(k_page.min(0), k_page.max(0), 2)
    codes = _encode_with(k_page, scales, zeros, 2)
    return codes.astype(np.float32) * scales + zeros


def apply_mixed_quantization(k, v, row_bits, group_len: int = GROUP_SIZE):
    """Replace KV rows by their quantize-dequantize images.

    ``row_bits`` holds 0 (leave full precision), 2, or 4 per row. INT2 rows
    are grouped, in sequence order, into pages of ``group_len``; full pages
    get per-channel INT2 keys and per-token INT2 values, the residual rows
    fall back to the per-token INT4 path, matching the pool's routing.
    """
    k = np.array(k, dtype=np.float32)
    v = np.array(v, dtype=np.float32)
    bits = np.asarray(row_bits)
    if bits.shape != (k.shape[0],):
        raise ValidationError("row_bits length must match the token dimension")
    if not np.all(np.isin(bits, (0, 2, 4))):
        raise ValidationError("row bitwidths must be 0, 2, or 4")
    idx2 = np.flatnonzero(bits == 2)
    n_full = (idx2.size // group_len) * group_len
    for page in idx2[:n_full].reshape(-1, group_len):
        k[page] = _fake_quant_keys_per_channel(k[page])
        v[page] = _fake_quant_per_token(v[page], 2, group_len)
    idx4 = np.concatenate([np.flatnonzero(bits == 4), idx2[n_full:]])
    if idx4.size:
        k[idx4] = _fake_quant_per_token(k[idx4], 4, group_len)
        v[idx4] = _fake_quant_per_token(v[idx4], 4, group_len)
    return k, v


def attention_selective_quant(
    q, k, v, tags, target: int, bitwidth: int,
    scale=None, causal=False, group_len: int = GROUP_SIZE,
):
    """Replay attention with only tag ``target`` rows quantized at ``bitwidth``."""
    if not 0 <= int(target) < N_TAG_CODES:
        raise ValidationError(f"unknown tag code {target}")
    tags = np.asarray(tags)
    if tags.shape != (np.asarray(k).shape[0],):
        raise ValidationError("tags length must match the token dimension")
    bits = np.where(tags == int(target), bitwidth, 0)
    kq, vq = apply_mixed_quantization(k, v, bits, group_len=group_len)
    return attention_full(q, kq, vq, scale=scale, causal=causal)


@dataclass
class SplitPartial:
    """Per-split attention state for one query head."""

    acc: np.ndarray  # sum of exp(logit - max_logit) * v, [d]
    lse: float  # max_logit + log(sum of exp(logit - max_logit))
    max_logit: float


def merge_partials(parts: Sequence[SplitPartial]) -> np.ndarray:
    """Numerically stable, association-order-invariant combination."""
    if not parts:
        raise ValidationError("cannot merge an empty partial list")
    m = max(p.max_logit for p in parts)
    acc = np.zeros_like(parts[0].acc, dtype=np.float32)
    z = np.float32(0.0)
    for p in parts:
        w = np.float32(np.exp(p.max_logit - m))
        acc += p.acc * w
        z += np.float32(np.exp(p.lse - m))
    return acc / z


def _split_partial(q_head, k_rows, v_rows, scale):
    logits = (k_rows @ q_head) * np.float32(scale)
    mx = float(logits.max())
    w = np.exp(logits - np.float32(mx))
    return SplitPartial(acc=w @ v_rows, lse=mx + float(np.log(w.sum())), max_logit=mx)


def flash_decode(q, page_table, pool_view, split_len: int = 128, scale=None):
    """Single-query decode attention over a partitioned page table.

    The table's INT2 addresses must all precede the INT4 ones; the split
    boundaries then never straddle the precision boundary, so each split
    decodes through a single dequantization path. Partials are merged with
    online log-sum-exp; the result matches dense attention over the fully
    dequantized KV within float32 tolerance.
    """
    q = np.asarray(q, dtype=np.float32)
    if q.ndim != 2:
        raise ValidationError("q must be [n_heads, d]")
    n_heads, d = q.shape
    entries = list(page_table.entries)
    if not entries:
        raise ValidationError("empty page table")
    if split_len < 1:
        raise ValidationError("split_len must be >= 1")
    is_int2 = [pool_view.is_int2(a) for a in entries]
    boundary = sum(is_int2)
    if any(is_int2[boundary:]):
        raise ValidationError("page table not partitioned: INT4 address precedes INT2")

    n_kv_heads = pool_view.n_kv_heads
    if n_heads % n_kv_heads != 0:
        raise ValidationError("n_heads not a multiple of the pool's n_kv_heads")
    ratio = n_heads // n_kv_heads
    if scale is None:
        scale = 1.0 / np.sqrt(d)

    splits = []
    for lo, hi in ((0, boundary), (boundary, len(entries))):
        for start in range(lo, hi, split_len):
            splits.append(entries[start : min(start + split_len, hi)])

    partials: list[list[SplitPartial]] = [[] for _ in range(n_heads)]
    for chunk in splits:
        if not chunk:
            continue
        k_rows, v_rows = pool_view.gather(chunk)  # [m, n_kv_heads, d]
        for h in range(n_heads):
            kv = h // ratio
            partials[h].append(_split_partial(q[h], k_rows[:, kv, :], v_rows[:, kv, :], scale))
    return np.stack([merge_partials(parts) for parts in partials])
