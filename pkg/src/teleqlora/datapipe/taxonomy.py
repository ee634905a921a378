"""Use-case taxonomy and keyword-based section categorization.

The 20 categories and their keyword seeds live in a versioned JSON config so
generated corpora are reproducible. Matching is lowercased exact-substring
with word boundaries; the category with the most keyword occurrences wins,
ties going to the lexicographically smallest slug.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources

EXPECTED_CATEGORY_COUNT = 20


@dataclass(frozen=True)
class UseCaseCategory:
    id: str
    display_name: str
    keywords: tuple[str, ...]


@dataclass(frozen=True)
class PromptRuleSet:
    templates: tuple[str, ...]


def _default_rules_text() -> str:
    return resources.files("teleqlora.data").joinpath("pipeline_rules.json").read_text("utf-8")


def load_rules_config(path=None) -> tuple[list[UseCaseCategory], PromptRuleSet]:
    """Load taxonomy + prompt rules from a JSON file (packaged default if None)."""
    if path is None:
        raw = json.loads(_default_rules_text())
    else:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    unknown = set(raw) - {"categories", "prompt_rules"}
    if unknown:
        raise ValueError(f"unknown keys in rules config: {sorted(unknown)}")
    categories = [
        UseCaseCategory(c["id"], c["display_name"], tuple(c["keywords"]))
        for c in raw["categories"]
    ]
    if len(categories) != EXPECTED_CATEGORY_COUNT:
        raise ValueError(
            f"taxonomy must have exactly {EXPECTED_CATEGORY_COUNT} categories, got {len(categories)}"
        )
    if len({c.id for c in categories}) != len(categories):
        raise ValueError("duplicate category slugs")
    rules = PromptRuleSet(tuple(raw["prompt_rules"]))
    if not rules.templates:
        raise ValueError("prompt_rules must be non-empty")
    return categories, rules


def default_taxonomy() -> list[UseCaseCategory]:
    return load_rules_config()[0]


def _keyword_pattern(keyword: str) -> re.Pattern:
    return re.compile(r"(?<!\w)" + re.escape(keyword.lower()) + r"(?!\w)")


def categorize(heading: str, body: str, taxonomy: list[UseCaseCategory]) -> str | None:
    """Slug of the best-scoring category, or None when nothing matches."""
    if len(taxonomy) != EXPECTED_CATEGORY_COUNT:
        raise ValueError(f"taxonomy must have exactly {EXPECTED_CATEGORY_COUNT} categories")
    text = f"{heading}\n{body}".lower()
    best_slug, best_score = None, 0
    for cat in sorted(taxonomy, key=lambda c: c.id):
        score = sum(len(_keyword_pattern(kw).findall(text)) for kw in cat.keywords)
        if score > best_score:
            best_slug, best_score = cat.id, score
    return best_slug
