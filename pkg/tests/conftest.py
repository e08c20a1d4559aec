import numpy as np
import pytest

from kvmix import default_template, generate_synthetic_capture, tag_tokens
from kvmix.capture import KVCapture, LayerCapture
from kvmix.tags import TriTag, tag_to_code


@pytest.fixture
def template():
    return default_template()


def dense_attention_f64(q, k, v, scale=None, causal=False):
    """Independent high-precision oracle: explicit loops, 64-bit accumulation."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n_q, n_heads, d = q.shape
    n_keys, n_kv, _ = k.shape
    ratio = n_heads // n_kv
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    out = np.zeros((n_q, n_heads, d))
    offset = n_keys - n_q
    for i in range(n_q):
        for h in range(n_heads):
            kv = h // ratio
            limit = offset + i + 1 if causal else n_keys
            logits = np.array([k[j, kv] @ q[i, h] * scale for j in range(limit)])
            logits -= logits.max()
            w = np.exp(logits)
            w /= w.sum()
            for j in range(limit):
                out[i, h] += w[j] * v[j, kv]
    return out


def make_capture(
    seed=0,
    n_tokens=96,
    tag_codes=(0, 1, 2),
    n_layers=1,
    n_heads=2,
    n_kv_heads=1,
    head_dim=32,
    request_id=None,
):
    """Capture with hand-assigned tags in contiguous equal runs."""
    rng = np.random.default_rng(seed)
    tags = np.array(
        [tag_codes[i * len(tag_codes) // n_tokens] for i in range(n_tokens)]
    )
    layers = []
    for _ in range(n_layers):
        k_scales = np.exp(rng.uniform(-0.7, 1.4, (n_kv_heads, head_dim))).astype(np.float32)
        layers.append(
            LayerCapture(
                q=rng.standard_normal((n_tokens, n_heads, head_dim), dtype=np.float32),
                k=rng.standard_normal((n_tokens, n_kv_heads, head_dim), dtype=np.float32)
                * k_scales,
                v=rng.standard_normal((n_tokens, n_kv_heads, head_dim), dtype=np.float32),
            )
        )
    capture = KVCapture(
        request_id=request_id or f"test-{seed}",
        layers=layers,
        tags=tags,
        head_dim=head_dim,
    )
    capture.validate()
    return capture


def synthetic_capture_from_trace(seed, n_turns=3, **dims):
    from kvmix import generate_synthetic_trace

    template = default_template()
    trace = generate_synthetic_trace(seed, n_turns, template)
    tags = tag_tokens(trace, template)
    defaults = dict(n_layers=1, n_heads=2, n_kv_heads=1, head_dim=32)
    defaults.update(dims)
    return generate_synthetic_capture(trace, tags, seed=seed, **defaults)


def code(temporal, modal, semantic):
    return tag_to_code(TriTag(temporal, modal, semantic))
