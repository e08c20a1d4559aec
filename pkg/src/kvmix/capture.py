"""KV capture format: per-layer Q/K/V tensors plus per-token tags.

A capture is a directory holding ``manifest.json`` (dims, tag array,
format version, blob inventory) and one raw little-endian float32 blob per
tensor. The format is deliberately dependency-free and bit-exact so
captures can be produced and consumed across languages.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .quant import GROUP_SIZE
from .tags import N_TAG_CODES
from .traces import Trace

FORMAT_VERSION = 1


@dataclass
class LayerCapture:
    """Q/K/V tensors hooked from one layer for one request."""

    q: np.ndarray  # [n_query, n_heads, d]
    k: np.ndarray  # [N, n_kv_heads, d]
    v: np.ndarray  # [N, n_kv_heads, d]


@dataclass
class KVCapture:
    request_id: str
    layers: list[LayerCapture]
    tags: np.ndarray  # [N] int tag codes
    head_dim: int
    group_len: int = GROUP_SIZE
    source_trace: str | None = field(default=None)

    @property
    def n_tokens(self) -> int:
        return int(self.layers[0].k.shape[0])

    @property
    def n_heads(self) -> int:
        return int(self.layers[0].q.shape[1])

    @property
    def n_kv_heads(self) -> int:
        return int(self.layers[0].k.shape[1])

    def validate(self) -> None:
        if not self.layers:
            raise ValidationError("capture has no layers")
        if self.head_dim % self.group_len != 0:
            raise ValidationError(
                f"head_dim {self.head_dim} not divisible by group size {self.group_len}"
            )
        n = self.n_tokens
        if self.tags.shape != (n,):
            raise ValidationError(f"tags length {self.tags.shape} != token count {n}")
        if self.tags.size and (self.tags.min() < 0 or self.tags.max() >= N_TAG_CODES):
            raise ValidationError("tag codes out of range")
        for i, layer in enumerate(self.layers):
            for name, t, heads in (("q", layer.q, None), ("k", layer.k, None), ("v", layer.v, None)):
                if t.ndim != 3 or t.shape[2] != self.head_dim:
                    raise ValidationError(f"layer {i} tensor {name} has bad shape {t.shape}")
            if layer.k.shape != layer.v.shape or layer.k.shape[0] != n:
                raise ValidationError(f"layer {i} K/V shapes inconsistent")
            if layer.q.shape[1] % layer.k.shape[1] != 0:
                raise ValidationError(
                    f"layer {i}: n_heads {layer.q.shape[1]} not a multiple of "
                    f"n_kv_heads {layer.k.shape[1]}"
                )


def generate_synthetic_capture(
    trace: Trace,
    tags,
    n_layers: int,
    n_heads: int,
    n_kv_heads: int,
    head_dim: int,
    seed: int,
    group_len: int = GROUP_SIZE,
) -> KVCapture:
    """Draw reproducible Q/K/V tensors standing in for real forward hooks.

    K channels get log-uniform scale multipliers in [0.5, 4.0] so some
    channels carry high-magnitude outliers; that spread is what makes
    per-channel key quantization measurably better than per-token at INT2.
    """
    tags = np.asarray(tags, dtype=np.int64)
    n = len(trace)
    if tags.shape != (n,):
        raise ValidationError(f"tags length {tags.shape[0]} != trace length {n}")
    if head_dim % group_len != 0:
        raise ValidationError(f"head_dim {head_dim} not divisible by group size {group_len}")
    if n_heads % n_kv_heads != 0:
        raise ValidationError(f"n_heads {n_heads} not a multiple of n_kv_heads {n_kv_heads}")
    rng = np.random.default_rng(seed)
    layers = []
    for _ in range(n_layers):
        k_scales = np.exp(
            rng.uniform(math.log(0.5), math.log(4.0), size=(n_kv_heads, head_dim))
        ).astype(np.float32)
        q = rng.standard_normal((n, n_heads, head_dim), dtype=np.float32)
        k = rng.standard_normal((n, n_kv_heads, head_dim), dtype=np.float32) * k_scales
        v = rng.standard_normal((n, n_kv_heads, head_dim), dtype=np.float32)
        layers.append(LayerCapture(q=q, k=k, v=v))
    capture = KVCapture(
        request_id=trace.request_id,
        layers=layers,
        tags=tags,
        head_dim=head_dim,
        group_len=group_len,
        source_trace=trace.request_id,
    )
    capture.validate()
    return capture


def _blob_name(layer: int, tensor: str) -> str:
    return f"layer_{layer:03d}_{tensor}.f32le"


def save_capture(capture: KVCapture, path) -> None:
    capture.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    blobs = []
    for i, layer in enumerate(capture.layers):
        for tensor in ("q", "k", "v"):
            arr = np.ascontiguousarray(getattr(layer, tensor), dtype="<f4")
            name = _blob_name(i, tensor)
            (root / name).write_bytes(arr.tobytes())
            blobs.append({"file": name, "shape": list(arr.shape), "byte_length": arr.nbytes})
    manifest = {
        "format_version": FORMAT_VERSION,
        "request_id": capture.request_id,
        "head_dim": capture.head_dim,
        "group_len": capture.group_len,
        "n_layers": len(capture.layers),
        "tags": [int(t) for t in capture.tags],
        "source_trace": capture.source_trace,
        "blobs": blobs,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_capture(path) -> KVCapture:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"unsupported capture format version {manifest.get('format_version')!r}"
        )
    blob_index = {b["file"]: b for b in manifest["blobs"]}

    def read_blob(name):
        meta = blob_index.get(name)
        if meta is None:
            raise ValidationError(f"manifest missing blob entry {name}")
        raw = (root / name).read_bytes()
        if len(raw) != meta["byte_length"]:
            raise ValidationError(
                f"blob {name}: {len(raw)} bytes on disk, manifest says {meta['byte_length']}"
            )
        expected = int(np.prod(meta["shape"])) * 4
        if meta["byte_length"] != expected:
            raise ValidationError(f"blob {name}: byte length inconsistent with shape")
        return np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).astype(np.float32)

    layers = [
        LayerCapture(
            q=read_blob(_blob_name(i, "q")),
            k=read_blob(_blob_name(i, "k")),
            v=read_blob(_blob_name(i, "v")),
        )
        for i in range(manifest["n_layers"])
    ]
    capture = KVCapture(
        request_id=manifest["request_id"],
        layers=layers,
        tags=np.asarray(manifest["tags"], dtype=np.int64),
        head_dim=manifest["head_dim"],
        group_len=manifest.get("group_len", GROUP_SIZE),
        source_trace=manifest.get("source_trace"),
    )
    capture.validate()
    return capture
