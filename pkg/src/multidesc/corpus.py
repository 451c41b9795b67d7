"""Corpus data model, ingestion, statistics, splits, and a synthetic generator.

A corpus maps entity ids to :class:`Entity` records. Each entity carries
per-language article first paragraphs, per-language human descriptions, and
semantic type ids. Entities are admitted only if at least one language has
both an article and a description.

The JSONL corpus format is one object per line:
    {"id": str, "articles": {lang: str}, "descriptions": {lang: str}, "types": [str]}
"""

from __future__ import annotations

import json
import logging
import random
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

logger = logging.getLogger(__name__)

WORD_UNIT = "word"
CHARACTER_UNIT = "character"

_PARAGRAPH_BREAK = re.compile(r"\n\s*\n")


class CorpusError(ValueError):
    """Structural problem in a corpus file (bad JSON, duplicate ids, bad config)."""


@dataclass(frozen=True)
class Language:
    """A configured language: short code plus the unit used for length stats."""

    code: str
    length_unit: str = WORD_UNIT

    def __post_init__(self) -> None:
        if not self.code:
            raise CorpusError("language code must be nonempty")
        if self.length_unit not in (WORD_UNIT, CHARACTER_UNIT):
            raise CorpusError(f"unknown length_unit {self.length_unit!r} for {self.code!r}")


@dataclass(frozen=True)
class ArticleText:
    language: str
    first_paragraph: str


@dataclass(frozen=True)
class DescriptionText:
    language: str
    text: str
    source: str = "human"  # human | model | baseline


@dataclass
class Entity:
    """A language-independent concept linking articles and descriptions."""

    id: str
    articles: dict[str, str] = field(default_factory=dict)
    descriptions: dict[str, str] = field(default_factory=dict)
    type_ids: list[str] = field(default_factory=list)

    def article(self, language: str) -> ArticleText:
        return ArticleText(language, self.articles[language])

    def description(self, language: str) -> DescriptionText:
        return DescriptionText(language, self.descriptions[language])

    def article_languages(self) -> list[str]:
        return sorted(self.articles)

    def description_languages(self) -> list[str]:
        return sorted(self.descriptions)

    def is_admissible(self) -> bool:
        """True when at least one language has both an article and a description."""
        return any(lang in self.descriptions for lang in self.articles)


Corpus = dict[str, Entity]


def normalize_text(text: str) -> str:
    """Unicode NFC, collapse internal whitespace, trim."""
    return " ".join(unicodedata.normalize("NFC", text).split())


def first_paragraph(text: str) -> str:
    """Extract and normalize the first paragraph (text before the first blank line)."""
    head = _PARAGRAPH_BREAK.split(unicodedata.normalize("NFC", text), maxsplit=1)[0]
    return " ".join(head.split())


def load_language_config(path: str | Path) -> list[Language]:
    """Read a JSON list of {"code", "length_unit"} objects."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    languages = [Language(item["code"], item.get("length_unit", WORD_UNIT)) for item in raw]
    codes = [lang.code for lang in languages]
    if len(set(codes)) != len(codes):
        raise CorpusError("duplicate language codes in config")
    return languages


def load_corpus(path: str | Path, config: Iterable[Language]) -> Corpus:
    """Load a JSONL corpus, validating per-entity invariants.

    Entities that fail the admission rule (no language with both an article and
    a description) are skipped with a warning; structural problems (malformed
    JSON, unknown language codes, duplicate ids) raise :class:`CorpusError`.
    """
    known = {lang.code for lang in config}
    corpus: Corpus = {}
    seen_lines: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            entity_id = raw.get("id")
            if not isinstance(entity_id, str) or not entity_id:
                raise CorpusError(f"line {lineno}: missing or invalid 'id'")
            if entity_id in seen_lines:
                raise CorpusError(
                    f"line {lineno}: duplicate id {entity_id!r} (first seen on line "
                    f"{seen_lines[entity_id]})"
                )
            seen_lines[entity_id] = lineno

            articles = {}
            for lang, text in (raw.get("articles") or {}).items():
                if lang not in known:
                    raise CorpusError(f"line {lineno}: unknown language code {lang!r}")
                para = first_paragraph(text)
                if para:
                    articles[lang] = para
                else:
                    logger.warning("line %d: empty article for %s/%s dropped", lineno, entity_id, lang)
            descriptions = {}
            for lang, text in (raw.get("descriptions") or {}).items():
                if lang not in known:
                    raise CorpusError(f"line {lineno}: unknown language code {lang!r}")
                norm = normalize_text(text)
                if norm:
                    descriptions[lang] = norm
                else:
                    logger.warning("line %d: empty description for %s/%s dropped", lineno, entity_id, lang)

            entity = Entity(
                id=entity_id,
                articles=articles,
                descriptions=descriptions,
                type_ids=[str(t) for t in (raw.get("types") or [])],
            )
            if not entity.is_admissible():
                logger.warning(
                    "line %d: entity %r rejected: no language has both an article and a description",
                    lineno,
                    entity_id,
                )
                continue
            corpus[entity_id] = entity
    return corpus


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entity_id in sorted(corpus):
            ent = corpus[entity_id]
            fh.write(
                json.dumps(
                    {
                        "id": ent.id,
                        "articles": dict(sorted(ent.articles.items())),
                        "descriptions": dict(sorted(ent.descriptions.items())),
                        "types": list(ent.type_ids),
                    },
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# Statistics


@dataclass
class LanguageStats:
    article_count: int
    missing_description_count: int
    missing_fraction: float
    avg_description_length: float | None


def description_length(text: str, language: Language) -> int:
    """Length in the language's unit: whitespace tokens, or characters."""
    if language.length_unit == CHARACTER_UNIT:
        return len(text)
    return len(text.split())


def compute_language_stats(corpus: Corpus, config: Iterable[Language]) -> dict[str, LanguageStats]:
    """Per-language article counts, missing-description rates, and mean description length.

    An article "misses" a description when the entity has an article but no
    description in that language. Average length runs over all descriptions
    present in the language, in the configured unit.
    """
    if not corpus:
        raise CorpusError("empty corpus")
    stats: dict[str, LanguageStats] = {}
    for lang in config:
        articles = 0
        missing = 0
        lengths: list[int] = []
        for ent in corpus.values():
            if lang.code in ent.articles:
                articles += 1
                if lang.code not in ent.descriptions:
                    missing += 1
            if lang.code in ent.descriptions:
                lengths.append(description_length(ent.descriptions[lang.code], lang))
        stats[lang.code] = LanguageStats(
            article_count=articles,
            missing_description_count=missing,
            missing_fraction=missing / articles if articles else 0.0,
            avg_description_length=sum(lengths) / len(lengths) if lengths else None,
        )
    return stats


@dataclass
class CoverageDistribution:
    """Histogram over the number of languages covering each entity."""

    article_histogram: dict[int, int]
    description_histogram: dict[int, int]
    article_multilingual_fraction: float
    description_multilingual_fraction: float


def language_coverage_distribution(corpus: Corpus) -> CoverageDistribution:
    if not corpus:
        raise CorpusError("empty corpus")
    art_hist: dict[int, int] = {}
    desc_hist: dict[int, int] = {}
    for ent in corpus.values():
        art_hist[len(ent.articles)] = art_hist.get(len(ent.articles), 0) + 1
        desc_hist[len(ent.descriptions)] = desc_hist.get(len(ent.descriptions), 0) + 1
    n = len(corpus)
    return CoverageDistribution(
        article_histogram=dict(sorted(art_hist.items())),
        description_histogram=dict(sorted(desc_hist.items())),
        article_multilingual_fraction=sum(c for k, c in art_hist.items() if k >= 2) / n,
        description_multilingual_fraction=sum(c for k, c in desc_hist.items() if k >= 2) / n,
    )


@dataclass
class OverlapStats:
    jaccard: float | None
    exact_copy_fraction: float | None


def wikidata_overlap_stats(
    descriptions_a: Mapping[tuple[str, str], str],
    descriptions_b: Mapping[tuple[str, str], str],
) -> dict[str, OverlapStats]:
    """Per-language key overlap (Jaccard) and exact-copy rate between two description sets.

    Inputs are keyed by (entity id, language code). Exact copies are counted
    over keys present in both, comparing whitespace-normalized strings.
    """
    languages = {lang for _, lang in descriptions_a} | {lang for _, lang in descriptions_b}
    out: dict[str, OverlapStats] = {}
    for lang in sorted(languages):
        keys_a = {eid for eid, l in descriptions_a if l == lang}
        keys_b = {eid for eid, l in descriptions_b if l == lang}
        union = keys_a | keys_b
        if not union:
            out[lang] = OverlapStats(None, None)
            continue
        both = keys_a & keys_b
        jaccard = len(both) / len(union)
        if both:
            copies = sum(
                1
                for eid in both
                if normalize_text(descriptions_a[(eid, lang)]) == normalize_text(descriptions_b[(eid, lang)])
            )
            copy_fraction = copies / len(both)
        else:
            copy_fraction = None
        out[lang] = OverlapStats(jaccard, copy_fraction)
    return out


# ---------------------------------------------------------------------------
# Splits and training-instance sampling


@dataclass
class SplitSpec:
    train_ids: list[str]
    valid_ids: list[str]
    test_ids: list[str]
    seed: int

    def __post_init__(self) -> None:
        sets = [set(self.train_ids), set(self.valid_ids), set(self.test_ids)]
        total = sum(len(s) for s in sets)
        if len(sets[0] | sets[1] | sets[2]) != total:
            raise CorpusError("split ids are not pairwise disjoint")

    def to_json(self) -> str:
        return json.dumps(
            {
                "train_ids": self.train_ids,
                "valid_ids": self.valid_ids,
                "test_ids": self.test_ids,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        raw = json.loads(text)
        return cls(raw["train_ids"], raw["valid_ids"], raw["test_ids"], raw["seed"])


def build_splits(corpus: Corpus, sizes: Mapping[str, int], seed: int) -> SplitSpec:
    """Sample disjoint train/valid/test id sets uniformly without replacement."""
    n_train = int(sizes.get("train", 0))
    n_valid = int(sizes.get("valid", 0))
    n_test = int(sizes.get("test", 0))
    if min(n_train, n_valid, n_test) < 0:
        raise CorpusError("split sizes must be nonnegative")
    ids = sorted(corpus)
    needed = n_train + n_valid + n_test
    if needed > len(ids):
        raise CorpusError(f"requested {needed} entities but corpus has only {len(ids)}")
    rng = random.Random(seed)
    rng.shuffle(ids)
    return SplitSpec(
        train_ids=sorted(ids[:n_train]),
        valid_ids=sorted(ids[n_train : n_train + n_valid]),
        test_ids=sorted(ids[n_train + n_valid : needed]),
        seed=seed,
    )


def sample_training_instance(entity: Entity, rng: random.Random) -> tuple[Entity, str]:
    """Pick a target language uniformly among the entity's description languages."""
    languages = entity.description_languages()
    if not languages:
        raise CorpusError(f"entity {entity.id!r} has no description to train on")
    return entity, rng.choice(languages)


# ---------------------------------------------------------------------------
# Synthetic corpus generator


@dataclass
class SyntheticSpec:
    """Parameters of the deterministic synthetic corpus.

    Descriptions follow the per-language template "<type word> <of> <attribute word>",
    and articles embed the entity token, the attribute word, and (unless
    ``type_in_article`` is off) the type word, so the correct description is a
    learnable function of article text plus type id. Setting ``type_in_article``
    to False yields the type-critical variant in which the first description
    token is recoverable only from the type id.

    Missing rates may be a single float applied to every language or a
    per-language mapping.
    """

    n_entities: int
    languages: list[str]
    vocab_size: int  # size of the shared attribute-word pool
    n_types: int
    seed: int
    missing_article_rate: float | dict[str, float] = 0.0
    missing_description_rate: float | dict[str, float] = 0.0
    type_in_article: bool = True

    def __post_init__(self) -> None:
        if self.n_entities <= 0 or self.vocab_size <= 0 or self.n_types <= 0 or not self.languages:
            raise CorpusError("synthetic spec parameters must be positive")

    def language_config(self) -> list[Language]:
        return [Language(code) for code in self.languages]


def _rate(rates: float | dict[str, float], lang: str) -> float:
    if isinstance(rates, dict):
        return rates.get(lang, 0.0)
    return rates


def _type_word(type_index: int, lang: str) -> str:
    return f"{lang}type{type_index}"


def _attr_word(attr_index: int, lang: str) -> str:
    return f"{lang}attr{attr_index}"


def _connective(lang: str) -> str:
    return f"of{lang}"


def synthetic_article(spec: SyntheticSpec, entity_index: int, type_index: int, attr_index: int, lang: str) -> str:
    head = f"ent{entity_index} isa{lang}"
    kind = _type_word(type_index, lang) if spec.type_in_article else f"item{lang}"
    return f"{head} {kind} from{lang} {_attr_word(attr_index, lang)} place{lang}"


def synthetic_description(type_index: int, attr_index: int, lang: str) -> str:
    return f"{_type_word(type_index, lang)} {_connective(lang)} {_attr_word(attr_index, lang)}"


def generate_synthetic_corpus(spec: SyntheticSpec) -> Corpus:
    """Build a deterministic synthetic corpus exercising all three input signals.

    Every entity receives one type id. Per language, articles and descriptions
    are dropped independently at the configured rates. When the drops would
    leave an entity inadmissible (no language with both an article and a
    description), one language is repaired; the repair is rare for moderate
    rates, keeping empirical missing rates at their configured values.
    """
    rng = random.Random(spec.seed)
    corpus: Corpus = {}
    for i in range(spec.n_entities):
        type_index = rng.randrange(spec.n_types)
        attr_index = rng.randrange(spec.vocab_size)
        has_article = {
            lang: rng.random() >= _rate(spec.missing_article_rate, lang) for lang in spec.languages
        }
        has_description = {
            lang: rng.random() >= _rate(spec.missing_description_rate, lang) for lang in spec.languages
        }
        if not any(has_article[lang] and has_description[lang] for lang in spec.languages):
            anchor = rng.choice(spec.languages)
            has_article[anchor] = True
            has_description[anchor] = True
        articles = {}
        descriptions = {}
        for lang in spec.languages:
            if has_article[lang]:
                articles[lang] = synthetic_article(spec, i, type_index, attr_index, lang)
            if has_description[lang]:
                descriptions[lang] = synthetic_description(type_index, attr_index, lang)
        entity_id = f"E{i}"
        corpus[entity_id] = Entity(
            id=entity_id,
            articles=articles,
            descriptions=descriptions,
            type_ids=[f"T{type_index}"],
        )
    return corpus


def synthetic_token_map(spec: SyntheticSpec, src: str, tgt: str) -> dict[str, str]:
    """Token-for-token bijection between two synthetic languages (toy translator data)."""
    mapping: dict[str, str] = {}
    for t in range(spec.n_types):
        mapping[_type_word(t, src)] = _type_word(t, tgt)
    for a in range(spec.vocab_size):
        mapping[_attr_word(a, src)] = _attr_word(a, tgt)
    mapping[_connective(src)] = _connective(tgt)
    for stem in ("isa", "from", "place", "item"):
        mapping[f"{stem}{src}"] = f"{stem}{tgt}"
    for i in range(spec.n_entities):
        mapping[f"ent{i}"] = f"ent{i}"
    return mapping


# ---------------------------------------------------------------------------
# Exact-match deduplication


@dataclass
class DedupResult:
    surviving_ids: list[str]
    eliminated_ids: list[str]
    eliminated_fraction: float


def dedup_key(text: str) -> str:
    return normalize_text(text).casefold()


def dedup_exact_matches(generated: Mapping[str, str], gold: Mapping[str, str]) -> DedupResult:
    """Drop ids whose generated text equals the gold text up to case and whitespace."""
    shared = sorted(set(generated) & set(gold))
    eliminated = [eid for eid in shared if dedup_key(generated[eid]) == dedup_key(gold[eid])]
    surviving = [eid for eid in shared if dedup_key(generated[eid]) != dedup_key(gold[eid])]
    fraction = len(eliminated) / len(shared) if shared else 0.0
    return DedupResult(surviving, eliminated, fraction)
