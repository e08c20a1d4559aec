"""Triaxial token tagging driven purely by chat-template structure.

Every prefill token gets a (temporal, modal, semantic) tag in one
left-to-right scan over the token IDs; no model inference, no content
understanding. Tags are carried around as compact integer codes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import TemplateStructureError, ValidationError
from .traces import TemplateDescriptor, Trace

TEMPORAL = ("older", "turn_m2", "turn_m1", "current")
MODAL = ("text", "image")
SEMANTIC = ("inst", "user", "assistant", "reasoning", "tool_call", "obs", "delim")

N_TAG_CODES = len(TEMPORAL) * len(MODAL) * len(SEMANTIC)  # 56

_TEMPORAL_IDX = {name: i for i, name in enumerate(TEMPORAL)}
_MODAL_IDX = {name: i for i, name in enumerate(MODAL)}
_SEMANTIC_IDX = {name: i for i, name in enumerate(SEMANTIC)}


@dataclass(frozen=True)
class TriTag:
    temporal: str
    modal: str
    semantic: str

    def __post_init__(self):
        if self.temporal not in _TEMPORAL_IDX:
            raise ValidationError(f"unknown temporal value {self.temporal!r}")
        if self.modal not in _MODAL_IDX:
            raise ValidationError(f"unknown modal value {self.modal!r}")
        if self.semantic not in _SEMANTIC_IDX:
            raise ValidationError(f"unknown semantic value {self.semantic!r}")


def tag_to_code(tag: TriTag) -> int:
    """Encode as temporal*14 + modal*7 + semantic, range 0..55."""
    return (
        _TEMPORAL_IDX[tag.temporal] * (len(MODAL) * len(SEMANTIC))
        + _MODAL_IDX[tag.modal] * len(SEMANTIC)
        + _SEMANTIC_IDX[tag.semantic]
    )


def code_to_tag(code: int) -> TriTag:
    if not 0 <= code < N_TAG_CODES:
        raise ValidationError(f"tag code {code} out of range 0..{N_TAG_CODES - 1}")
    temporal, rest = divmod(code, len(MODAL) * len(SEMANTIC))
    modal, semantic = divmod(rest, len(SEMANTIC))
    return TriTag(TEMPORAL[temporal], MODAL[modal], SEMANTIC[semantic])


def semantic_of_code(code: int) -> str:
    return code_to_tag(code).semantic


def tag_tokens(trace: Trace, template: TemplateDescriptor) -> list[int]:
    """Assign every token a tag code in a single scan.

    Role markers, message delimiters, and think/tool_call brackets are
    tagged delim; content inherits the enclosing role or bracket. A turn
    starts at each user role-begin marker; the system prompt (and anything
    before the first user message) is temporally older. Structural
    violations raise with the offending position.
    """
    begin_role = {tid: role for role, tid in template.role_begin_ids.items()}
    end_id = template.role_end_id
    delim_ids = template.delimiter_ids

    role: str | None = None
    in_think = False
    in_tool_call = False
    turn = 0
    # (semantic, modal, turn-index) per token; temporal resolved afterwards
    scratch: list[tuple[str, str, int]] = []

    for pos, tid in enumerate(trace.token_ids):
        modal = "text"
        if tid in begin_role:
            if role is not None:
                raise TemplateStructureError("role-begin inside an open message", pos)
            role = begin_role[tid]
            if role == "user":
                turn += 1
            semantic = "delim"
        elif tid == end_id:
            if role is None:
                raise TemplateStructureError("role-end without an open message", pos)
            if in_think or in_tool_call:
                raise TemplateStructureError("role-end inside an open bracket", pos)
            role = None
            semantic = "delim"
        elif tid == template.think_open_id:
            if role is None:
                raise TemplateStructureError("think-open outside a message", pos)
            if in_think or in_tool_call:
                raise TemplateStructureError("nested or overlapping think bracket", pos)
            in_think = True
            semantic = "delim"
        elif tid == template.think_close_id:
            if not in_think:
                raise TemplateStructureError("unmatched think-close", pos)
            in_think = False
            semantic = "delim"
        elif tid == template.tool_call_open_id:
            if role is None:
                raise TemplateStructureError("tool_call-open outside a message", pos)
            if in_tool_call or in_think:
                raise TemplateStructureError("nested or overlapping tool_call bracket", pos)
            in_tool_call = True
            semantic = "delim"
        elif tid == template.tool_call_close_id:
            if not in_tool_call:
                raise TemplateStructureError("unmatched tool_call-close", pos)
            in_tool_call = False
            semantic = "delim"
        elif tid in delim_ids:
            semantic = "delim"
        else:
            if tid == template.image_token_id:
                modal = "image"
            if in_think:
                semantic = "reasoning"
            elif in_tool_call:
                semantic = "tool_call"
            elif role == "system":
                semantic = "inst"
            elif role == "user":
                semantic = "user"
            elif role == "assistant":
                semantic = "assistant"
            elif role == "tool":
                semantic = "obs"
            else:
                semantic = "delim"
        scratch.append((semantic, modal, turn))

    if role is not None or in_think or in_tool_call:
        raise TemplateStructureError("unterminated message or bracket", len(trace.token_ids))

    n_turns = turn
    codes: list[int] = []
    for semantic, modal, token_turn in scratch:
        if token_turn == 0:
            temporal = "older"
        else:
            dist = n_turns - token_turn
            temporal = ("current", "turn_m1", "turn_m2")[dist] if dist <= 2 else "older"
        codes.append(tag_to_code(TriTag(temporal, modal, semantic)))
    return codes


@dataclass
class ActiveTagSet:
    """Tag codes observed at least once, with their token counts."""

    counts: dict[int, int]

    @property
    def tags(self) -> list[int]:
        return sorted(self.counts)

    def total(self) -> int:
        return sum(self.counts.values())


def collect_active_tags(tag_arrays: Iterable[Sequence[int]]) -> ActiveTagSet:
    counts: dict[int, int] = {}
    for arr in tag_arrays:
        for code in arr:
            code = int(code)
            if not 0 <= code < N_TAG_CODES:
                raise ValidationError(f"tag code {code} out of range")
            counts[code] = counts.get(code, 0) + 1
    return ActiveTagSet(counts=counts)
