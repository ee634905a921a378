"""Instruction records and their JSONL serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path


@dataclass
class ChatSample:
    input: str
    output: str
    category: str
    text: str | None = None

    def validate(self):
        if not self.input or not self.output:
            raise ValueError("input and output must be non-empty")
        if not self.category:
            raise ValueError("category must be non-empty")


def sample_from_obj(obj: dict, line_no: int | None = None) -> ChatSample:
    where = f" at line {line_no}" if line_no is not None else ""
    if not isinstance(obj, dict):
        raise ValueError(f"expected a JSON object{where}")
    allowed = {"input", "output", "category", "text"}
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)}{where}")
    for key in ("input", "output", "category"):
        if key not in obj or not isinstance(obj[key], str) or not obj[key]:
            raise ValueError(f"missing or empty '{key}'{where}")
    text = obj.get("text")
    if text is not None and not isinstance(text, str):
        raise ValueError(f"'text' must be a string{where}")
    return ChatSample(obj["input"], obj["output"], obj["category"], text)


def build_samples(doc, rules, taxonomy) -> list[ChatSample]:
    """Instantiate every prompt rule for each categorized section, in order.

    Sections that match no category (or have empty bodies) are dropped.
    """
    from .taxonomy import categorize

    out = []
    for section in doc.sections:
        if not section.body.strip():
            continue
        slug = categorize(section.heading_text, section.body, taxonomy)
        if slug is None:
            continue
        for template in rules.templates:
            prompt = template.format(
                heading_text=section.heading_text,
                heading_number=section.heading_number,
                number=doc.number,
                title=doc.title,
            )
            out.append(ChatSample(prompt, section.body, slug))
    return out


def load_samples(path) -> list[ChatSample]:
    """Read a JSONL dataset, validating every line; errors carry line numbers."""
    samples = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"invalid JSON at line {i}: {exc}") from exc
            samples.append(sample_from_obj(obj, line_no=i))
    return samples


def save_samples(path, samples: list[ChatSample]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            obj = {"input": s.input, "output": s.output, "category": s.category}
            if s.text is not None:
                obj["text"] = s.text
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
