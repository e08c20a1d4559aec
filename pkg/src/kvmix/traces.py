"""Portable trace and chat-template data formats plus synthetic generators.

A trace is just a request id and a flat token-id sequence; all structure
(roles, thinking/tool brackets, image runs) is carried by special token IDs
described in a :class:`TemplateDescriptor`. Real tokenizers are out of scope:
token IDs are opaque integers.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError

REQUIRED_ROLES = ("system", "user", "assistant", "tool")


@dataclass(frozen=True)
class TemplateDescriptor:
    """Special-token IDs that drive structural tagging.

    All IDs must be pairwise distinct; ``role_begin_ids`` must cover at
    least system/user/assistant/tool.
    """

    role_begin_ids: dict[str, int]
    role_end_id: int
    think_open_id: int
    think_close_id: int
    tool_call_open_id: int
    tool_call_close_id: int
    image_token_id: int
    delimiter_ids: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        for role in REQUIRED_ROLES:
            if role not in self.role_begin_ids:
                raise ValidationError(f"template missing role-begin id for {role!r}")
        object.__setattr__(self, "delimiter_ids", frozenset(self.delimiter_ids))
        ids = list(self.role_begin_ids.values()) + [
            self.role_end_id,
            self.think_open_id,
            self.think_close_id,
            self.tool_call_open_id,
            self.tool_call_close_id,
            self.image_token_id,
            *self.delimiter_ids,
        ]
        if len(set(ids)) != len(ids):
            raise ValidationError("special token IDs must be pairwise distinct")

    def special_ids(self) -> set[int]:
        return set(self.role_begin_ids.values()) | {
            self.role_end_id,
            self.think_open_id,
            self.think_close_id,
            self.tool_call_open_id,
            self.tool_call_close_id,
            self.image_token_id,
        } | set(self.delimiter_ids)

    def to_json(self) -> dict:
        return {
            "role_begin_ids": dict(self.role_begin_ids),
            "role_end_id": self.role_end_id,
            "think_open_id": self.think_open_id,
            "think_close_id": self.think_close_id,
            "tool_call_open_id": self.tool_call_open_id,
            "tool_call_close_id": self.tool_call_close_id,
            "image_token_id": self.image_token_id,
            "delimiter_ids": sorted(self.delimiter_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TemplateDescriptor":
        try:
            return cls(
                role_begin_ids={k: int(v) for k, v in obj["role_begin_ids"].items()},
                role_end_id=int(obj["role_end_id"]),
                think_open_id=int(obj["think_open_id"]),
                think_close_id=int(obj["think_close_id"]),
                tool_call_open_id=int(obj["tool_call_open_id"]),
                tool_call_close_id=int(obj["tool_call_close_id"]),
                image_token_id=int(obj["image_token_id"]),
                delimiter_ids=frozenset(int(x) for x in obj.get("delimiter_ids", ())),
            )
        except KeyError as exc:
            raise ValidationError(f"template descriptor missing field {exc}") from exc


def default_template() -> TemplateDescriptor:
    """Fixed descriptor used by the synthetic generators and tests."""
    return TemplateDescriptor(
        role_begin_ids={"system": 1, "user": 2, "assistant": 3, "tool": 4},
        role_end_id=5,
        think_open_id=6,
        think_close_id=7,
        tool_call_open_id=8,
        tool_call_close_id=9,
        image_token_id=10,
        delimiter_ids=frozenset({11}),
    )


@dataclass(frozen=True)
class Trace:
    """One prefill request: an id plus its token-id sequence."""

    request_id: str
    token_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))

    def __len__(self) -> int:
        return len(self.token_ids)

    def to_json(self) -> dict:
        return {"request_id": self.request_id, "token_ids": list(self.token_ids)}

    @classmethod
    def from_json(cls, obj: dict) -> "Trace":
        try:
            return cls(request_id=str(obj["request_id"]), token_ids=tuple(obj["token_ids"]))
        except KeyError as exc:
            raise ValidationError(f"trace missing field {exc}") from exc


def save_trace(trace: Trace, path) -> None:
    Path(path).write_text(json.dumps(trace.to_json(), sort_keys=True, indent=1))


def load_trace(path) -> Trace:
    return Trace.from_json(json.loads(Path(path).read_text()))


def save_template(template: TemplateDescriptor, path) -> None:
    Path(path).write_text(json.dumps(template.to_json(), sort_keys=True, indent=1))


def load_template(path) -> TemplateDescriptor:
    return TemplateDescriptor.from_json(json.loads(Path(path).read_text()))


def generate_synthetic_trace(
    seed: int,
    n_turns: int,
    template: TemplateDescriptor | None = None,
    include_images: bool = False,
    request_id: str | None = None,
) -> Trace:
    """Build a structurally valid multi-turn agentic trace.

    Each turn holds a user message and an assistant reply; the assistant may
    open a think span and a tool_call span, and every tool call is followed
    by a tool-role observation message. Image-token runs appear only inside
    observation messages, and only when ``include_images`` is set (a tool
    call is then forced every turn so observations exist).
    """
    if n_turns < 1:
        raise ValidationError("n_turns must be >= 1")
    template = template or default_template()
    rng = random.Random(seed)
    base = max(template.special_ids()) + 1

    def prose(lo, hi):
        return [rng.randrange(base, base + 500) for _ in range(rng.randint(lo, hi))]

    tokens: list[int] = []
    begin = template.role_begin_ids
    end = template.role_end_id

    tokens += [begin["system"], *prose(6, 14), end]
    for _ in range(n_turns):
        tokens += [begin["user"], *prose(4, 10), end]
        tokens.append(begin["assistant"])
        if rng.random() < 0.6:
            tokens += [template.think_open_id, *prose(4, 9), template.think_close_id]
        tokens += prose(3, 8)
        calls_tool = include_images or rng.random() < 0.5
        if calls_tool:
            tokens += [template.tool_call_open_id, *prose(3, 6), template.tool_call_close_id]
        tokens.append(end)
        if calls_tool:
            obs = prose(4, 9)
            if include_images:
                pos = rng.randrange(len(obs) + 1)
                obs[pos:pos] = [template.image_token_id] * rng.randint(2, 6)
            tokens += [begin["tool"], *obs, end]
    rid = request_id if request_id is not None else f"synthetic-{seed:04d}"
    return Trace(request_id=rid, token_ids=tuple(tokens))
