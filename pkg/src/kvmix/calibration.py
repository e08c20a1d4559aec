"""Per-tag sensitivity calibration from KV captures.

For every (layer, request, head, tag, bitwidth) we quantize only that tag's
KV rows, replay attention against the full-precision reference, and record
the output MSE. Raw distortions are then aggregated max-across-heads,
mean-across-requests, sum-across-layers, and paired with per-tag token
counts to form the sensitivity table the allocator consumes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median_low

import numpy as np

from .attention import (
    attention_full,
    attention_selective_quant,
    output_mse,
    output_mse_per_head,
)
from .capture import KVCapture
from .errors import ValidationError
from .tags import semantic_of_code

logger = logging.getLogger(__name__)

BITWIDTHS = (2, 4)

# Distortions below this are measurement noise at zero; clamped before the
# D(2) >= D(4) monotonicity comparison.
ZERO_CLAMP = 1e-12


@dataclass
class RawDistortion:
    """Raw per-(layer, request, head, tag, bitwidth) output MSE values."""

    entries: dict[tuple[int, str, int, int, int], float] = field(default_factory=dict)

    def layers(self) -> list[int]:
        return sorted({key[0] for key in self.entries})

    def tags(self) -> list[int]:
        return sorted({key[3] for key in self.entries})


@dataclass
class SensitivityTable:
    """Aggregated distortions D[(tag, b)] and token counts N[tag]."""

    distortion: dict[tuple[int, int], float]
    counts: dict[int, int]
    budget_hint: float | None = None

    def tags(self) -> list[int]:
        return sorted(self.counts)

    def validate(self) -> None:
        tags = set(self.counts)
        if {k for k, _ in self.distortion} != tags:
            raise ValidationError("distortion and count tag sets differ")
        if len(self.distortion) != 2 * len(tags):
            raise ValidationError("expected exactly two distortion entries per tag")
        if any(n < 1 for n in self.counts.values()):
            raise ValidationError("token counts must be >= 1")

    def to_json(self) -> dict:
        return {
            "tags": [
                {
                    "code": code,
                    "D2": self.distortion[(code, 2)],
                    "D4": self.distortion[(code, 4)],
                    "N": self.counts[code],
                }
                for code in self.tags()
            ],
            "budget": self.budget_hint,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SensitivityTable":
        distortion = {}
        counts = {}
        for row in obj["tags"]:
            code = int(row["code"])
            distortion[(code, 2)] = float(row["D2"])
            distortion[(code, 4)] = float(row["D4"])
            counts[code] = int(row["N"])
        table = cls(distortion=distortion, counts=counts, budget_hint=obj.get("budget"))
        table.validate()
        return table


def save_table(table: SensitivityTable, path) -> None:
    Path(path).write_text(json.dumps(table.to_json(), sort_keys=True, indent=1))


def load_table(path) -> SensitivityTable:
    return SensitivityTable.from_json(json.loads(Path(path).read_text()))


def measure_raw(captures: list[KVCapture], bitwidths=BITWIDTHS) -> RawDistortion:
    """Selective-quantization replay over every layer, tag, and bitwidth."""
    raw = RawDistortion()
    for capture in captures:
        capture.validate()
        active = sorted(set(int(t) for t in capture.tags))
        for layer_idx, layer in enumerate(capture.layers):
            ref = attention_full(layer.q, layer.k, layer.v, causal=True)
            for tag in active:
                for b in bitwidths:
                    replayed = attention_selective_quant(
                        layer.q, layer.k, layer.v, capture.tags, tag, b,
                        causal=True, group_len=capture.group_len,
                    )
                    per_head = output_mse_per_head(ref, replayed)
                    for h, mse in enumerate(per_head):
                        raw.entries[(layer_idx, capture.request_id, h, tag, b)] = float(mse)
    return raw


def aggregate(raw: RawDistortion) -> dict[tuple[int, int], float]:
    """Max across heads, mean across requests, sum across layers.

    Requests where a tag never occurs simply do not contribute to that
    tag's mean. A tag that appears in some layer with no requests at all is
    excluded with a warning (cannot happen for well-formed captures, where
    a request's tags are shared across its layers).
    """
    if not raw.entries:
        raise ValidationError("no raw distortion entries to aggregate")
    # (layer, tag, b) -> request -> head -> mse
    nested: dict[tuple[int, int, int], dict[str, dict[int, float]]] = {}
    for (layer, request, head, tag, b), mse in raw.entries.items():
        nested.setdefault((layer, tag, b), {}).setdefault(request, {})[head] = mse

    result: dict[tuple[int, int], float] = {}
    for tag in raw.tags():
        for b in BITWIDTHS:
            layer_terms = []
            for layer in raw.layers():
                per_request = nested.get((layer, tag, b))
                if not per_request:
                    logger.warning(
                        "tag %d bitwidth %d present in no requests at layer %d; excluded",
                        tag, b, layer,
                    )
                    continue
                head_maxes = [max(heads.values()) for heads in per_request.values()]
                layer_terms.append(sum(head_maxes) / len(head_maxes))
            result[(tag, b)] = float(sum(layer_terms))
    return result


def estimate_counts(tag_arrays) -> dict[int, int]:
    """Per-tag token counts for the budget constraint.

    inst-semantic tags are shared across requests under prefix caching, so
    their count is the lower median of per-request counts over the requests
    where the tag occurs; every other tag sums across all requests.
    """
    per_request: list[dict[int, int]] = []
    for arr in tag_arrays:
        counts: dict[int, int] = {}
        for code in np.asarray(arr).tolist():
            counts[code] = counts.get(code, 0) + 1
        per_request.append(counts)
    if not per_request:
        raise ValidationError("need at least one tag array")

    all_tags = sorted({t for counts in per_request for t in counts})
    estimates: dict[int, int] = {}
    for tag in all_tags:
        observed = [counts[tag] for counts in per_request if tag in counts]
        if semantic_of_code(tag) == "inst":
            estimates[tag] = int(median_low(observed))
        else:
            estimates[tag] = int(sum(observed))
    return estimates


def clamp_small(value: float, threshold: float = ZERO_CLAMP) -> float:
    return 0.0 if abs(value) < threshold else value


def joint_replay_mse(capture: KVCapture, bits_map: dict[int, int]) -> float:
    """Output MSE with every tag quantized at its allocated bitwidth.

    The quality score used by the budget sweep: mean over layers of the
    causal-replay attention output MSE against full precision.
    """
    from .attention import apply_mixed_quantization  # local to avoid cycle noise

    try:
        bits = np.array([bits_map[int(t)] for t in capture.tags])
    except KeyError as exc:
        raise ValidationError(f"allocation missing tag {exc}") from exc
    total = 0.0
    for layer in capture.layers:
        ref = attention_full(layer.q, layer.k, layer.v, causal=True)
        kq, vq = apply_mixed_quantization(layer.k, layer.v, bits, group_len=capture.group_len)
        replayed = attention_full(layer.q, kq, vq, causal=True)
        total += output_mse(ref, replayed)
    return total / len(capture.layers)


def build_table(captures: list[KVCapture], budget_hint: float | None = None) -> SensitivityTable:
    """Full calibration pipeline: measure, aggregate, count."""
    raw = measure_raw(captures)
    distortion = aggregate(raw)
    counts = estimate_counts([c.tags for c in captures])
    table = SensitivityTable(distortion=distortion, counts=counts, budget_hint=budget_hint)
    table.validate()
    return table
