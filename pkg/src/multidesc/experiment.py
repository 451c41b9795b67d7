"""Experiment plumbing: batch generation for models and baselines, scoring
against gold descriptions, and report assembly for the pipeline commands."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import analysis
from .baselines import ToyTranslator, prefix_description, translation_description
from .corpus import Corpus, Language, compute_language_stats
from .generator import TrainedModel, generate
from .metric import Embedder, ScoreRecord, corpus_average, similarity


@dataclass
class GenerationRecord:
    entity_id: str
    language: str
    text: str
    terminated: bool
    logprob: float | None

    def to_json(self) -> dict:
        return {
            "id": self.entity_id,
            "lang": self.language,
            "text": self.text,
            "terminated": self.terminated,
            "logprob": self.logprob,
        }


def evaluation_pairs(corpus: Corpus, ids: Sequence[str]) -> list[tuple[str, str]]:
    """Test cases: every (entity, language) with a gold description."""
    return [
        (eid, lang)
        for eid in sorted(ids)
        for lang in corpus[eid].description_languages()
    ]


def generate_with_model(
    trained: TrainedModel, corpus: Corpus, ids: Sequence[str], decode: str = "greedy"
) -> list[GenerationRecord]:
    out = []
    for eid, lang in evaluation_pairs(corpus, ids):
        result = generate(trained, corpus[eid], lang, decode=decode)
        out.append(GenerationRecord(eid, lang, result.text, result.terminated, result.logprob))
    return out


def generate_prefix_baseline(
    corpus: Corpus, ids: Sequence[str], config: Sequence[Language]
) -> list[GenerationRecord]:
    """Prefix baseline; instances without a target-language article are skipped."""
    stats = compute_language_stats(corpus, config)
    by_code = {lang.code: lang for lang in config}
    out = []
    for eid, lang in evaluation_pairs(corpus, ids):
        entity = corpus[eid]
        if lang not in entity.articles or lang not in by_code:
            continue
        avg = stats[lang].avg_description_length
        if avg is None:
            continue
        text = prefix_description(entity.article(lang), by_code[lang], avg)
        out.append(GenerationRecord(eid, lang, text, True, None))
    return out


def generate_translation_baseline(
    corpus: Corpus,
    ids: Sequence[str],
    translator: ToyTranslator,
    resource_ranking: Mapping[str, float],
) -> tuple[list[GenerationRecord], float]:
    """Translation baseline plus its applicability fraction over the test cases."""
    out = []
    total = 0
    for eid, lang in evaluation_pairs(corpus, ids):
        total += 1
        text = translation_description(corpus[eid], lang, translator, resource_ranking)
        if text is None:
            continue
        out.append(GenerationRecord(eid, lang, text, True, None))
    return out, (len(out) / total if total else 0.0)


def drop_truncated(records: Iterable[GenerationRecord]) -> tuple[list[GenerationRecord], float]:
    records = list(records)
    surviving = [r for r in records if r.terminated]
    dropped = (len(records) - len(surviving)) / len(records) if records else 0.0
    return surviving, dropped


def score_generations(
    system: str,
    records: Iterable[GenerationRecord],
    corpus: Corpus,
    embedder: Embedder,
    weighting: str = "uniform",
    idf: Mapping[str, float] | None = None,
) -> list[ScoreRecord]:
    out = []
    for rec in records:
        gold = corpus[rec.entity_id].descriptions.get(rec.language)
        if gold is None or not rec.text.strip():
            continue
        value = similarity(rec.text, gold, embedder, weighting=weighting, idf=idf)
        out.append(ScoreRecord(rec.entity_id, rec.language, system, value))
    return out


# ---------------------------------------------------------------------------
# Report assembly


def aggregate_report(records: Sequence[ScoreRecord]) -> dict:
    """Per-language score means plus the pairwise model-comparison table."""
    summary = corpus_average(records)
    systems = sorted({r.system for r in records})
    report: dict = {
        "per_language_mean": summary.per_language_mean,
        "systems": systems,
    }
    if len(systems) >= 2:
        outcomes = analysis.build_outcomes(records, systems)
        try:
            pairwise = analysis.pairwise_comparison(outcomes)
        except analysis.AnalysisError as exc:
            # comparison graph degenerate (e.g. one system never wins):
            # keep the means, record why the pairwise table is absent
            report["pairwise_error"] = str(exc)
        else:
            report["pairwise"] = {
                "systems": pairwise.systems,
                "probabilities": pairwise.probabilities.tolist(),
                "p_values": pairwise.p_values.tolist(),
                "significant": pairwise.significant.tolist(),
                "wins": outcomes.wins.tolist(),
                "ties": outcomes.ties.tolist(),
            }
    return report


def render_score_table_csv(report: dict) -> str:
    """Per-language means: one row per system, one column per language."""
    languages = sorted({lang for means in report["per_language_mean"].values() for lang in means})
    lines = ["system," + ",".join(languages)]
    for system in report["systems"]:
        means = report["per_language_mean"].get(system, {})
        cells = [f"{means[lang]:.4f}" if lang in means else "" for lang in languages]
        lines.append(system + "," + ",".join(cells))
    return "\n".join(lines) + "\n"


def render_pairwise_csv(report: dict) -> str:
    """Pairwise win probabilities; significant cells (sign test p < 0.05) carry '*'."""
    pw = report["pairwise"]
    systems = pw["systems"]
    lines = ["system," + ",".join(systems)]
    for i, system in enumerate(systems):
        cells = []
        for j in range(len(systems)):
            if i == j:
                cells.append("")
                continue
            star = "*" if pw["significant"][i][j] else ""
            cells.append(f"{pw['probabilities'][i][j]:.3f}{star}")
        lines.append(system + "," + ",".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# JSONL helpers


def write_generations(records: Sequence[GenerationRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def read_generations(path: str | Path) -> list[GenerationRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                raw = json.loads(line)
                out.append(
                    GenerationRecord(raw["id"], raw["lang"], raw["text"], raw["terminated"], raw["logprob"])
                )
    return out


def write_scores(records: Sequence[ScoreRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {"id": rec.entity_id, "lang": rec.language, "system": rec.system, "score": rec.score},
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )


def read_scores(path: str | Path) -> list[ScoreRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                raw = json.loads(line)
                out.append(ScoreRecord(raw["id"], raw["lang"], raw["system"], raw["score"]))
    return out
