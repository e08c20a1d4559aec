import json

import pytest

from kvmix.errors import ValidationError
from kvmix.traces import (
    TemplateDescriptor,
    Trace,
    default_template,
    generate_synthetic_trace,
    load_template,
    load_trace,
    save_template,
    save_trace,
)


class TestTemplateDescriptor:
    def test_missing_role_rejected(self, template):
        with pytest.raises(ValidationError):
            TemplateDescriptor(
                role_begin_ids={"system": 1, "user": 2, "assistant": 3},
                role_end_id=5,
                think_open_id=6,
                think_close_id=7,
                tool_call_open_id=8,
                tool_call_close_id=9,
                image_token_id=10,
            )

    def test_duplicate_ids_rejected(self, template):
        with pytest.raises(ValidationError):
            TemplateDescriptor(
                role_begin_ids={"system": 1, "user": 2, "assistant": 3, "tool": 4},
                role_end_id=5,
                think_open_id=5,
                think_close_id=7,
                tool_call_open_id=8,
                tool_call_close_id=9,
                image_token_id=10,
            )

    def test_json_roundtrip(self, template, tmp_path):
        path = tmp_path / "template.json"
        save_template(template, path)
        assert load_template(path) == template

    def test_from_json_missing_field(self):
        with pytest.raises(ValidationError):
            TemplateDescriptor.from_json({"role_begin_ids": {}})

    def test_special_ids_complete(self, template):
        ids = template.special_ids()
        assert template.role_end_id in ids
        assert template.image_token_id in ids
        assert set(template.delimiter_ids) <= ids


class TestTrace:
    def test_json_roundtrip(self, tmp_path):
        trace = Trace(request_id="r", token_ids=(1, 2, 3))
        path = tmp_path / "trace.json"
        save_trace(trace, path)
        assert load_trace(path) == trace

    def test_file_is_plain_json(self, tmp_path):
        trace = Trace(request_id="r", token_ids=(1, 2))
        path = tmp_path / "trace.json"
        save_trace(trace, path)
        obj = json.loads(path.read_text())
        assert obj == {"request_id": "r", "token_ids": [1, 2]}

    def test_len(self):
        assert len(Trace(request_id="r", token_ids=(1, 2, 3))) == 3


class TestGenerator:
    def test_deterministic(self, template):
        assert generate_synthetic_trace(5, 3, template) == generate_synthetic_trace(5, 3, template)

    def test_seeds_differ(self, template):
        a = generate_synthetic_trace(1, 3, template)
        b = generate_synthetic_trace(2, 3, template)
        assert a.token_ids != b.token_ids

    def test_turn_count(self, template):
        for n_turns in (1, 2, 5):
            trace = generate_synthetic_trace(0, n_turns, template)
            users = sum(1 for t in trace.token_ids if t == template.role_begin_ids["user"])
            assert users == n_turns

    def test_rejects_zero_turns(self, template):
        with pytest.raises(ValidationError):
            generate_synthetic_trace(0, 0, template)

    def test_images_only_in_observations(self, template):
        trace = generate_synthetic_trace(4, 3, template, include_images=True)
        img = template.image_token_id
        assert img in trace.token_ids
        role = None
        for t in trace.token_ids:
            for name, rid in template.role_begin_ids.items():
                if t == rid:
                    role = name
            if t == img:
                assert role == "tool"

    def test_brackets_balanced(self, template):
        pairs = (
            (template.think_open_id, template.think_close_id),
            (template.tool_call_open_id, template.tool_call_close_id),
        )
        for seed in range(8):
            trace = generate_synthetic_trace(seed, 3, template)
            for open_id, close_id in pairs:
                depth = 0
                for t in trace.token_ids:
                    if t == open_id:
                        depth += 1
                        assert depth == 1
                    elif t == close_id:
                        depth -= 1
                        assert depth == 0
                assert depth == 0
