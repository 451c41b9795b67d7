"""Prefix and translation baselines.

The prefix baseline returns the first n units of the target-language article,
where n is the language's average description length rounded half-up (words,
or characters for character-unit languages). The translation baseline
translates an existing description from the highest-resource other language;
it is not applicable when no other language has one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

from .corpus import ArticleText, CHARACTER_UNIT, Entity, Language, normalize_text


class TranslationError(RuntimeError):
    """The translator itself failed (distinct from the baseline being inapplicable)."""


def round_half_up(value: float) -> int:
    return math.floor(value + 0.5)


def prefix_description(
    article: ArticleText | None,
    language: Language,
    average_length: float,
) -> str | None:
    """First n units of the article; None when the article is missing."""
    if article is None:
        return None
    n = max(1, round_half_up(average_length))
    text = normalize_text(article.first_paragraph)
    if language.length_unit == CHARACTER_UNIT:
        return text[:n]
    return " ".join(text.split()[:n])


class TranslatorInterface(Protocol):
    def translate(self, text: str, source: str, target: str) -> str: ...


class ToyTranslator:
    """Deterministic token-dictionary translator for offline experiments.

    Tokens absent from a dictionary pass through unchanged.
    """

    def __init__(self, tables: Mapping[tuple[str, str], Mapping[str, str]]):
        self.tables = {pair: dict(mapping) for pair, mapping in tables.items()}

    def translate(self, text: str, source: str, target: str) -> str:
        if source == target:
            return normalize_text(text)
        table = self.tables.get((source, target))
        if table is None:
            raise TranslationError(f"no dictionary for {source}->{target}")
        return " ".join(table.get(tok, tok) for tok in normalize_text(text).split())

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for (src, tgt) in sorted(self.tables):
                fh.write(
                    json.dumps(
                        {"src_lang": src, "tgt_lang": tgt, "map": dict(sorted(self.tables[(src, tgt)].items()))},
                        ensure_ascii=False,
                        sort_keys=True,
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path: str | Path) -> "ToyTranslator":
        tables: dict[tuple[str, str], dict[str, str]] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                raw = json.loads(line)
                tables[(raw["src_lang"], raw["tgt_lang"])] = raw["map"]
        return cls(tables)


def translation_source(
    entity: Entity,
    target: str,
    resource_ranking: Mapping[str, float],
) -> str | None:
    """Highest-resource language (by article count) with a description, excluding the target."""
    candidates = [lang for lang in entity.description_languages() if lang != target]
    if not candidates:
        return None
    return min(candidates, key=lambda lang: (-resource_ranking.get(lang, 0.0), lang))


def translation_description(
    entity: Entity,
    target: str,
    translator: TranslatorInterface,
    resource_ranking: Mapping[str, float],
) -> str | None:
    """Translate the chosen source description into the target language.

    Returns None when inapplicable (no other-language description); translator
    failures propagate as :class:`TranslationError`.
    """
    source = translation_source(entity, target, resource_ranking)
    if source is None:
        return None
    return translator.translate(entity.descriptions[source], source, target)


def resource_ranking_from_stats(article_counts: Mapping[str, int]) -> dict[str, float]:
    return {lang: float(count) for lang, count in article_counts.items()}


def translation_applicability(corpus_entities, target_languages=None) -> float:
    """Fraction of (entity, target) evaluation cases with >= 1 other-language description."""
    total = 0
    applicable = 0
    for entity in corpus_entities:
        languages = target_languages or entity.description_languages()
        for target in languages:
            if target not in entity.descriptions:
                continue
            total += 1
            if any(lang != target for lang in entity.descriptions):
                applicable += 1
    return applicable / total if total else 0.0
