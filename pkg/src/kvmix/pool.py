"""Dual-precision paged KV store.

INT2 and INT4 slots share one address space split by a startup offset:
addresses below the offset are INT2 (whole pages of ``page_size`` tokens),
addresses at or above it are INT4 (individual tokens). Each region has its
own LIFO free list and the two allocators never exchange state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ValidationError
from .quant import (
    GROUP_SIZE,
    KeyPageBlock,
    TokenBlock,
    decode_key_page_int2,
    decode_token_block,
    decode_token_blocks,
    encode_key_page_int2,
    encode_token_block,
    encode_token_blocks,
    key_page_payload_bytes,
    token_block_payload_bytes,
)


@dataclass(frozen=True)
class SlotAddress:
    index: int


@dataclass
class PageTable:
    """Per-request ordered slot list; one address per cached token."""

    request_id: str
    entries: list[SlotAddress] = field(default_factory=list)
    partitioned: bool = False


@dataclass(frozen=True)
class PoolConfig:
    total_slots: int
    offset: int  # slots below are INT2, at/above are INT4
    n_layers: int
    n_kv_heads: int
    head_dim: int
    page_size: int = GROUP_SIZE

    def __post_init__(self):
        if not 0 <= self.offset <= self.total_slots:
            raise ValidationError("offset must lie within [0, total_slots]")
        if self.offset % self.page_size != 0:
            raise ValidationError("INT2 region must be whole pages")
        if self.head_dim % self.page_size != 0:
            raise ValidationError("head_dim must be divisible by the page size")


def init_pool(
    avg_bitwidth: float,
    total_slots: int,
    n_layers: int,
    n_kv_heads: int,
    head_dim: int,
    page_size: int = GROUP_SIZE,
) -> PoolConfig:
    """Derive the region split from a calibrated average bitwidth.

    An average of B bits over a {2,4} menu pins the INT2 token fraction to
    (4 - B) / 2; the offset is that fraction of the slots, rounded down to
    a whole page.
    """
    if not 2.0 <= avg_bitwidth <= 4.0:
        raise ValidationError(f"average bitwidth {avg_bitwidth} outside [2, 4]")
    if total_slots < 2 * page_size:
        raise ValidationError("pool needs at least two pages of slots")
    int2_fraction = (4.0 - avg_bitwidth) / 2.0
    # The epsilon keeps exactly representable fractions (0.65 * 3200 = 2080)
    # from flooring to the previous page after float round-off.
    ideal = int2_fraction * total_slots + 1e-6
    offset = int(ideal) // page_size * page_size
    return PoolConfig(
        total_slots=total_slots,
        offset=offset,
        n_layers=n_layers,
        n_kv_heads=n_kv_heads,
        head_dim=head_dim,
        page_size=page_size,
    )


class MixedPrecisionPool:
    """Paged KV store with independent INT2-page and INT4-slot allocators."""

    def __init__(self, config: PoolConfig):
        self.config = config
        g = config.page_size
        n_pages = config.offset // g
        # LIFO stacks; initialized so the lowest addresses are handed out first.
        self._free_pages = list(range((n_pages - 1) * g, -g, -g)) if n_pages else []
        self._free_int4 = list(range(config.total_slots - 1, config.offset - 1, -1))
        self._tables: dict[str, PageTable] = {}
        self._owner: dict[int, str] = {}  # live slot index -> request id
        self._key_pages: dict[tuple[int, int, int], KeyPageBlock] = {}
        self._k_tokens: dict[tuple[int, int, int], TokenBlock] = {}
        self._v_tokens: dict[tuple[int, int, int], TokenBlock] = {}

    # -- address helpers ---------------------------------------------------

    def is_int2(self, address: SlotAddress) -> bool:
        return address.index < self.config.offset

    def _page_start(self, index: int) -> int:
        return index // self.config.page_size * self.config.page_size

    # -- allocation --------------------------------------------------------

    def alloc(self, request_id: str, per_token_bitwidths) -> PageTable:
        """Route tokens to the two allocators; residual INT2 tokens go INT4.

        INT2 tokens are grouped into full pages in sequence order; the
        leftover ones (fewer than a page) take the per-token INT4 path.
        Returns the page table with one address per token in token order.
        """
        if request_id in self._tables:
            raise ValidationError(f"request {request_id!r} already live")
        bits = np.asarray(per_token_bitwidths)
        if not np.all(np.isin(bits, (2, 4))):
            raise ValidationError("per-token bitwidths must be 2 or 4")
        g = self.config.page_size
        idx2 = np.flatnonzero(bits == 2)
        n_pages = idx2.size // g
        paged = idx2[: n_pages * g]
        int4_tokens = sorted(set(np.flatnonzero(bits == 4)) | set(idx2[n_pages * g :]))
        if n_pages > len(self._free_pages):
            raise CapacityError(
                f"INT2 region exhausted: need {n_pages} pages, "
                f"{len(self._free_pages)} free", region="int2",
            )
        if len(int4_tokens) > len(self._free_int4):
            raise CapacityError(
                f"INT4 region exhausted: need {len(int4_tokens)} slots, "
                f"{len(self._free_int4)} free", region="int4",
            )
        addresses: dict[int, int] = {}
        for p in range(n_pages):
            start = self._free_pages.pop()
            for j, token in enumerate(paged[p * g : (p + 1) * g]):
                addresses[int(token)] = start + j
        for token in int4_tokens:
            addresses[int(token)] = self._free_int4.pop()
        for slot in addresses.values():
            self._owner[slot] = request_id
        table = PageTable(
            request_id=request_id,
            entries=[SlotAddress(addresses[t]) for t in range(bits.size)],
        )
        self._tables[request_id] = table
        return table

    def free(self, request_id: str) -> None:
        table = self._tables.pop(request_id, None)
        if table is None:
            raise ValidationError(f"unknown or already-freed request {request_id!r}")
        pages = set()
        for addr in table.entries:
            slot = addr.index
            del self._owner[slot]
            if slot < self.config.offset:
                pages.add(self._page_start(slot))
                for layer in range(self.config.n_layers):
                    for head in range(self.config.n_kv_heads):
                        self._v_tokens.pop((slot, layer, head), None)
            else:
                self._free_int4.append(slot)
                for layer in range(self.config.n_layers):
                    for head in range(self.config.n_kv_heads):
                        self._k_tokens.pop((slot, layer, head), None)
                        self._v_tokens.pop((slot, layer, head), None)
        for start in sorted(pages, reverse=True):
            self._free_pages.append(start)
            for layer in range(self.config.n_layers):
                for head in range(self.config.n_kv_heads):
                    self._key_pages.pop((start, layer, head), None)

    def partition(self, table: PageTable) -> PageTable:
        """Stable partition: all INT2 addresses first. Idempotent."""
        if not table.partitioned:
            int2 = [a for a in table.entries if self.is_int2(a)]
            int4 = [a for a in table.entries if not self.is_int2(a)]
            table.entries = int2 + int4
            table.partitioned = True
        return table

    # -- data plane ----------------------------------------------------------

    def write_page(self, page_start: int, keys, values, layer: int, head: int) -> None:
        """Write one full INT2 page (all G tokens) for one (layer, head)."""
        g = self.config.page_size
        if page_start >= self.config.offset or page_start % g != 0:
            raise ValidationError(f"{page_start} is not an INT2 page start")
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        if keys.shape != (g, self.config.head_dim) or values.shape != keys.shape:
            raise ValidationError(
                f"partial or misshaped INT2 page write: got {keys.shape}, "
                f"need ({g}, {self.config.head_dim})"
            )
        self._key_pages[(page_start, layer, head)] = encode_key_page_int2(keys, group_len=g)
        for j, block in enumerate(encode_token_blocks(values, 2, group_len=g)):
            self._v_tokens[(page_start + j, layer, head)] = block

    def write_token(self, address: SlotAddress, k, v, layer: int, head: int) -> None:
        """Write one INT4 token for one (layer, head)."""
        slot = address.index
        if slot < self.config.offset:
            raise ValidationError(
                "INT2 slots are written page-at-a-time via write_page"
            )
        g = self.config.page_size
        self._k_tokens[(slot, layer, head)] = encode_token_block(k, 4, group_len=g)
        self._v_tokens[(slot, layer, head)] = encode_token_block(v, 4, group_len=g)

    def write_prefill(self, table: PageTable, keys, values) -> None:
        """Store a whole request's prefill KV.

        keys/values: [n_layers, N, n_kv_heads, d], token order matching the
        table (which must not be partitioned yet).
        """
        if table.partitioned:
            raise ValidationError("write_prefill requires token-ordered entries")
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        cfg = self.config
        g = cfg.page_size
        int2_tokens = [t for t, a in enumerate(table.entries) if self.is_int2(a)]
        for layer in range(cfg.n_layers):
            for head in range(cfg.n_kv_heads):
                for i in range(0, len(int2_tokens), g):
                    run = int2_tokens[i : i + g]
                    start = table.entries[run[0]].index
                    self.write_page(
                        start,
                        keys[layer, run, head, :],
                        values[layer, run, head, :],
                        layer,
                        head,
                    )
        int4_tokens = [t for t, a in enumerate(table.entries) if not self.is_int2(a)]
        if int4_tokens:
            for layer in range(cfg.n_layers):
                for head in range(cfg.n_kv_heads):
                    k_blocks = encode_token_blocks(keys[layer, int4_tokens, head, :], 4, g)
                    v_blocks = encode_token_blocks(values[layer, int4_tokens, head, :], 4, g)
                    for t, kb, vb in zip(int4_tokens, k_blocks, v_blocks):
                        slot = table.entries[t].index
                        self._k_tokens[(slot, layer, head)] = kb
                        self._v_tokens[(slot, layer, head)] = vb

    def read_slot(self, address: SlotAddress, layer: int, head: int):
        """Decode one token's (k, v) for one (layer, head)."""
        slot = address.index
        if slot not in self._owner:
            raise ValidationError(f"slot {slot} is not live")
        if slot < self.config.offset:
            start = self._page_start(slot)
            page = self._key_pages.get((start, layer, head))
            vblk = self._v_tokens.get((slot, layer, head))
            if page is None or vblk is None:
                raise ValidationError(f"slot {slot} read before write")
            k = decode_key_page_int2(page)[slot - start]
        else:
            kblk = self._k_tokens.get((slot, layer, head))
            vblk = self._v_tokens.get((slot, layer, head))
            if kblk is None or vblk is None:
                raise ValidationError(f"slot {slot} read before write")
            k = decode_token_block(kblk)
        return k, decode_token_block(vblk)

    def append_decode_token(self, request_id: str, k, v) -> SlotAddress:
        """Append one generated token to the INT4 pool and the page table.

        k/v: [n_layers, n_kv_heads, d]. The table must already be
        partitioned (decode phase); the INT4 suffix simply grows.
        """
        table = self._tables.get(request_id)
        if table is None:
            raise ValidationError(f"unknown request {request_id!r}")
        if not table.partitioned:
            raise ValidationError("partition the page table before decoding")
        if not self._free_int4:
            raise CapacityError("INT4 region exhausted during decode", region="int4")
        k = np.asarray(k, dtype=np.float32)
        v = np.asarray(v, dtype=np.float32)
        slot = self._free_int4.pop()
        self._owner[slot] = request_id
        addr = SlotAddress(slot)
        for layer in range(self.config.n_layers):
            for head in range(self.config.n_kv_heads):
                self.write_token(addr, k[layer, head], v[layer, head], layer, head)
        table.entries.append(addr)
        return addr

    # -- views and accounting ------------------------------------------------

    def view(self, layer: int) -> "PoolView":
        return PoolView(self, layer)

    def table(self, request_id: str) -> PageTable:
        return self._tables[request_id]

    def live_counts(self) -> tuple[int, int]:
        int2 = sum(1 for s in self._owner if s < self.config.offset)
        return int2, len(self._owner) - int2

    def free_counts(self) -> tuple[int, int]:
        return len(self._free_pages) * self.config.page_size, len(self._free_int4)

    def parameter_overhead_bytes(self) -> int:
        """Bytes spent on stored float16 scales/zeros across live blocks."""
        cfg = self.config
        per_group_params = 4  # one float16 (scale, zero) pair
        key_page_params = cfg.head_dim * per_group_params
        token_params = (cfg.head_dim // cfg.page_size) * per_group_params
        return (
            len(self._key_pages) * key_page_params
            + (len(self._k_tokens) + len(self._v_tokens)) * token_params
        )

    def stats(self) -> dict:
        cfg = self.config
        live2, live4 = self.live_counts()
        free2, free4 = self.free_counts()
        live_total = live2 + live4
        realized = (2 * live2 + 4 * live4) / live_total if live_total else None
        return {
            "total_slots": cfg.total_slots,
            "offset": cfg.offset,
            "page_size": cfg.page_size,
            "int2": {"total": cfg.offset, "live": live2, "free": free2},
            "int4": {"total": cfg.total_slots - cfg.offset, "live": live4, "free": free4},
            "parameter_overhead_bytes": self.parameter_overhead_bytes(),
            "realized_avg_bitwidth": realized,
        }

    def check_invariants(self) -> None:
        """Conservation, region consistency, and aliasing checks (test hook)."""
        cfg = self.config
        free2, free4 = self.free_counts()
        live2, live4 = self.live_counts()
        if live2 + free2 != cfg.offset:
            raise AssertionError("INT2 slot conservation violated")
        if live4 + free4 != cfg.total_slots - cfg.offset:
            raise AssertionError("INT4 slot conservation violated")
        if len(set(self._free_pages)) != len(self._free_pages):
            raise AssertionError("duplicate pages on the free list")
        if len(set(self._free_int4)) != len(self._free_int4):
            raise AssertionError("duplicate slots on the INT4 free list")
        for start in self._free_pages:
            for j in range(cfg.page_size):
                if start + j in self._owner:
                    raise AssertionError("free page aliases a live slot")
        for slot in self._free_int4:
            if slot in self._owner:
                raise AssertionError("free INT4 slot aliases a live slot")
        seen: set[int] = set()
        for table in self._tables.values():
            for addr in table.entries:
                if addr.index in seen:
                    raise AssertionError("slot referenced by two page tables")
                seen.add(addr.index)
                if self._owner.get(addr.index) != table.request_id:
                    raise AssertionError("owner map out of sync with page tables")


class PoolView:
    """Read-only, single-layer window used by the flash-decode path."""

    def __init__(self, pool: MixedPrecisionPool, layer: int):
        self._pool = pool
        self.layer = layer

    @property
    def n_kv_heads(self) -> int:
        return self._pool.config.n_kv_heads

    def is_int2(self, address: SlotAddress) -> bool:
        return self._pool.is_int2(address)

    def gather(self, addresses):
        """Decode K, V for the addressed tokens: two [m, n_kv_heads, d] arrays.

        INT2 key pages are decoded once per page per head; per-token blocks
        are decoded in one batch per head.
        """
        pool, cfg, layer = self._pool, self._pool.config, self.layer
        m = len(addresses)
        slots = [a.index for a in addresses]
        for slot in slots:
            if slot not in pool._owner:
                raise ValidationError(f"dangling slot address {slot}")
        int2_rows = [i for i, a in enumerate(addresses) if pool.is_int2(a)]
        int2_set = set(int2_rows)
        int4_rows = [i for i in range(m) if i not in int2_set]
        k_out = np.empty((m, cfg.n_kv_heads, cfg.head_dim), dtype=np.float32)
        v_out = np.empty_like(k_out)

        def fetch(store, slot, head):
            block = store.get((slot, layer, head))
            if block is None:
                raise ValidationError(f"slot {slot} read before write")
            return block

        for head in range(cfg.n_kv_heads):
            page_cache: dict[int, np.ndarray] = {}
            for i in int2_rows:
                slot = slots[i]
                start = pool._page_start(slot)
                if start not in page_cache:
                    page_cache[start] = decode_key_page_int2(
                        fetch(pool._key_pages, start, head)
                    )
                k_out[i, head] = page_cache[start][slot - start]
            if int4_rows:
                k_out[int4_rows, head] = decode_token_blocks(
                    [fetch(pool._k_tokens, slots[i], head) for i in int4_rows]
                )
                v_out[int4_rows, head] = decode_token_blocks(
                    [fetch(pool._v_tokens, slots[i], head) for i in int4_rows]
                )
            if int2_rows:
                v_out[int2_rows, head] = decode_token_blocks(
                    [fetch(pool._v_tokens, slots[i], head) for i in int2_rows]
                )
        return k_out, v_out


def bytes_per_token(
    head_dim: int, n_layers: int, n_kv_heads: int, bitwidth: int,
    group_len: int = GROUP_SIZE,
) -> float:
    """Stored bytes per cached token (K + V, params included).

    For INT2 the per-channel key page cost is amortized over its
    ``group_len`` tokens.
    """
    if bitwidth == 2:
        key = key_page_payload_bytes(head_dim, group_len) / group_len
        value = token_block_payload_bytes(head_dim, 2, group_len)
    elif bitwidth == 4:
        key = token_block_payload_bytes(head_dim, 4, group_len)
        value = token_block_payload_bytes(head_dim, 4, group_len)
    else:
        raise ValidationError(f"unsupported bitwidth {bitwidth}")
    return n_layers * n_kv_heads * (key + value)


def baseline_bytes_per_token(
    head_dim: int, n_layers: int, n_kv_heads: int, bytes_per_element: int = 2
) -> int:
    """16-bit-per-element uncompressed K + V footprint of one token."""
    return n_layers * n_kv_heads * head_dim * 2 * bytes_per_element


def capacity_tokens(
    total_bytes: float, avg_bitwidth: float, head_dim: int, n_layers: int,
    n_kv_heads: int, group_len: int = GROUP_SIZE,
) -> int:
    """Token capacity of a byte budget at the given average bitwidth."""
    f2 = (4.0 - avg_bitwidth) / 2.0
    per_token = f2 * bytes_per_token(head_dim, n_layers, n_kv_heads, 2, group_len) + (
        1.0 - f2
    ) * bytes_per_token(head_dim, n_layers, n_kv_heads, 4, group_len)
    return int(total_bytes // per_token)
