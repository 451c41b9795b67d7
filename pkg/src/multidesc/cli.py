"""Command-line pipeline binding the toolkit into reproducible experiments.

Commands compose through files: each reads its predecessors' outputs and
writes its results plus a manifest (arguments, input/output digests, seeds,
package version) into the output directory. Re-running a command on identical
inputs produces byte-identical outputs.

Exit codes: 0 success, 2 validation/usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, analysis, baselines, corpus as corpus_mod, experiment, generator, metric, service as service_mod
from .corpus import Language, load_corpus, load_language_config
from .encoding import TypeEmbeddingTable


class CliError(Exception):
    def __init__(self, message: str, exit_code: int = 2):
        super().__init__(message)
        self.exit_code = exit_code


def _require(path: str | Path, produced_by: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing input {p}; run `{produced_by}` first")
    return p


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, arguments: dict, inputs: list[Path], outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "arguments": {k: v for k, v in sorted(arguments.items()) if k not in ("func",)},
        "config_hash": hashlib.sha256(
            json.dumps(arguments, sort_keys=True, default=str).encode()
        ).hexdigest(),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {Path(p).name: _sha256(Path(p)) for p in outputs},
        "version": __version__,
    }
    (out_dir / f"{command}_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_corpus_and_config(args):
    config = load_language_config(_require(args.languages, "synth"))
    corpus = load_corpus(_require(args.corpus, "synth"), config)
    if not corpus:
        raise CliError(f"corpus {args.corpus} contains no admissible entities")
    return corpus, config


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    languages = args.languages.split(",")
    spec = corpus_mod.SyntheticSpec(
        n_entities=args.entities,
        languages=languages,
        vocab_size=args.vocab_size,
        n_types=args.types,
        seed=args.seed,
        missing_article_rate=args.missing_articles,
        missing_description_rate=args.missing_descriptions,
        type_in_article=not args.type_critical,
    )
    corpus = corpus_mod.generate_synthetic_corpus(spec)
    corpus_path = out / "corpus.jsonl"
    corpus_mod.save_corpus(corpus, corpus_path)
    lang_path = out / "languages.json"
    lang_path.write_text(
        json.dumps([{"code": c, "length_unit": "word"} for c in languages], sort_keys=True)
    )
    translator_path = out / "translator.jsonl"
    tables = {
        (src, tgt): corpus_mod.synthetic_token_map(spec, src, tgt)
        for src in languages
        for tgt in languages
        if src != tgt
    }
    baselines.ToyTranslator(tables).save(translator_path)
    spec_path = out / "synth_spec.json"
    spec_path.write_text(json.dumps(asdict(spec), sort_keys=True))
    _write_manifest(out, "synth", vars(args), [], [corpus_path, lang_path, translator_path, spec_path])
    return 0


def cmd_stats(args) -> int:
    out = _out_dir(args)
    corpus, config = _load_corpus_and_config(args)
    stats = corpus_mod.compute_language_stats(corpus, config)
    lines = ["language,articles,missing_descriptions,missing_pct,avg_description_length"]
    for lang in config:
        s = stats[lang.code]
        avg = "" if s.avg_description_length is None else f"{s.avg_description_length:.4f}"
        lines.append(
            f"{lang.code},{s.article_count},{s.missing_description_count},"
            f"{100 * s.missing_fraction:.2f},{avg}"
        )
    stats_path = out / "stats.csv"
    stats_path.write_text("\n".join(lines) + "\n")
    coverage = corpus_mod.language_coverage_distribution(corpus)
    coverage_path = out / "coverage.json"
    coverage_path.write_text(
        json.dumps(
            {
                "article_histogram": coverage.article_histogram,
                "description_histogram": coverage.description_histogram,
                "article_multilingual_fraction": coverage.article_multilingual_fraction,
                "description_multilingual_fraction": coverage.description_multilingual_fraction,
            },
            sort_keys=True,
        )
    )
    _write_manifest(out, "stats", vars(args), [Path(args.corpus), Path(args.languages)], [stats_path, coverage_path])
    return 0


def cmd_split(args) -> int:
    out = _out_dir(args)
    corpus, _ = _load_corpus_and_config(args)
    spec = corpus_mod.build_splits(
        corpus, {"train": args.train, "valid": args.valid, "test": args.test}, args.seed
    )
    split_path = out / "splits.json"
    split_path.write_text(spec.to_json())
    _write_manifest(out, "split", vars(args), [Path(args.corpus)], [split_path])
    return 0


def _load_splits(path) -> corpus_mod.SplitSpec:
    return corpus_mod.SplitSpec.from_json(_require(path, "split").read_text())


def cmd_train(args) -> int:
    out = _out_dir(args)
    corpus, _ = _load_corpus_and_config(args)
    splits = _load_splits(args.splits)
    config = generator.named_config(args.system, seed=args.seed)
    hyper = generator.TrainingConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        early_stop_exact_match=args.early_stop_em,
        early_stop_check_every=args.check_every,
    )
    type_table = TypeEmbeddingTable.load(args.type_table) if args.type_table else None
    trained = generator.train(
        corpus, splits.train_ids, config, hyper, valid_ids=splits.valid_ids, type_table=type_table
    )
    model_path = out / f"model_{args.system}.json"
    generator.save_checkpoint(trained, model_path)
    _write_manifest(
        out, "train", vars(args), [Path(args.corpus), Path(args.splits)], [model_path]
    )
    return 0


def cmd_generate(args) -> int:
    out = _out_dir(args)
    corpus, config = _load_corpus_and_config(args)
    splits = _load_splits(args.splits)
    ids = getattr(splits, f"{args.split}_ids")
    if args.model:
        trained = generator.load_checkpoint(_require(args.model, "train"))
        system = args.system or Path(args.model).stem.removeprefix("model_")
        records = experiment.generate_with_model(trained, corpus, ids)
    elif args.baseline == "prefix":
        system = args.system or "prefix"
        records = experiment.generate_prefix_baseline(corpus, ids, config)
    elif args.baseline == "translation":
        if not args.translator:
            raise CliError("translation baseline requires --translator")
        translator = baselines.ToyTranslator.load(_require(args.translator, "synth"))
        stats = corpus_mod.compute_language_stats(corpus, config)
        ranking = {code: float(stats[code].article_count) for code in stats}
        system = args.system or "translation"
        records, applicability = experiment.generate_translation_baseline(corpus, ids, translator, ranking)
    else:
        raise CliError("pass --model PATH or --baseline prefix|translation")
    gen_path = out / f"generations_{system}.jsonl"
    experiment.write_generations(records, gen_path)
    arguments = vars(args) | {"resolved_system": system}
    if args.baseline == "translation":
        arguments["applicability"] = applicability
    inputs = [Path(args.corpus), Path(args.splits)] + ([Path(args.model)] if args.model else [])
    _write_manifest(out, "generate", arguments, inputs, [gen_path])
    return 0


def cmd_score(args) -> int:
    out = _out_dir(args)
    corpus, _ = _load_corpus_and_config(args)
    trained = generator.load_checkpoint(_require(args.embedder_model, "train"))
    embedder = generator.description_embedder(trained)
    idf = None
    if args.weighting == "idf":
        from .encoding import tokenize

        idf = metric.compute_idf(
            [tokenize(text) for ent in corpus.values() for text in ent.descriptions.values()]
        )
    all_scores: list[metric.ScoreRecord] = []
    dropped_fractions = {}
    for gen_path in args.generations:
        path = _require(gen_path, "generate")
        system = path.stem.removeprefix("generations_")
        records = experiment.read_generations(path)
        if not args.keep_truncated:
            records, dropped = experiment.drop_truncated(records)
            dropped_fractions[system] = dropped
        all_scores.extend(
            experiment.score_generations(system, records, corpus, embedder, args.weighting, idf)
        )
    if not all_scores:
        raise CliError("no scorable generations; run `generate` first")
    score_path = out / "scores.jsonl"
    experiment.write_scores(all_scores, score_path)
    _write_manifest(
        out,
        "score",
        vars(args) | {"dropped_truncated": dropped_fractions},
        [Path(p) for p in args.generations],
        [score_path],
    )
    return 0


def cmd_aggregate(args) -> int:
    out = _out_dir(args)
    scores = experiment.read_scores(_require(args.scores, "score"))
    if not scores:
        raise CliError(f"score table {args.scores} is empty; run `score` first")
    report = experiment.aggregate_report(scores)
    report_path = out / "aggregate.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    table_scores = out / "table_scores.csv"
    table_scores.write_text(experiment.render_score_table_csv(report))
    outputs = [report_path, table_scores]
    if "pairwise" in report:
        table_pairwise = out / "table_pairwise.csv"
        table_pairwise.write_text(experiment.render_pairwise_csv(report))
        outputs.append(table_pairwise)
    _write_manifest(out, "aggregate", vars(args), [Path(args.scores)], outputs)
    return 0


def cmd_propensity(args) -> int:
    out = _out_dir(args)
    corpus, _ = _load_corpus_and_config(args)
    lang = args.lang
    examples = [
        (ent.articles[lang], lang in ent.descriptions)
        for ent in corpus.values()
        if lang in ent.articles
    ]
    if not examples:
        raise CliError(f"no articles in language {lang!r}")
    model = analysis.train_propensity(examples, seed=args.seed)
    scores = [
        rec
        for rec in experiment.read_scores(_require(args.scores, "score"))
        if rec.system == args.system and rec.language == lang
    ]
    if not scores:
        raise CliError(f"no scores for system {args.system!r} in {lang!r}; run `score` first")
    rows = []
    for rec in scores:
        ent = corpus.get(rec.entity_id)
        if ent is None or lang not in ent.articles:
            continue
        p = analysis.clip_propensity(model.predict_proba(ent.articles[lang]))
        rows.append({"id": rec.entity_id, "score": rec.score, "propensity": p,
                     "weight": analysis.propensity_weight(p)})
    if not rows:
        raise CliError("no scored instances with articles to weight")
    unweighted = float(np.mean([r["score"] for r in rows]))
    weighted = analysis.weighted_mean([r["score"] for r in rows], [r["weight"] for r in rows])
    strata = analysis.stratify([(r["propensity"], r["score"]) for r in rows], n_bins=args.bins)
    payload = {
        "system": args.system,
        "language": lang,
        "n_instances": len(rows),
        "unweighted_mean": unweighted,
        "weighted_mean": weighted,
        "strata": [asdict(s) for s in strata],
        "records": rows,
    }
    prop_path = out / "propensity.json"
    prop_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    _write_manifest(out, "propensity", vars(args), [Path(args.corpus), Path(args.scores)], [prop_path])
    return 0


def cmd_sample_eval(args) -> int:
    out = _out_dir(args)
    corpus, _ = _load_corpus_and_config(args)
    lang = args.lang
    generations = {
        rec.entity_id: rec
        for rec in experiment.read_generations(_require(args.generations, "generate"))
        if rec.language == lang
    }
    scores = {
        rec.entity_id: rec.score
        for rec in experiment.read_scores(_require(args.scores, "score"))
        if rec.system == args.system and rec.language == lang
    }
    surviving, truncated_dropped = experiment.drop_truncated(generations.values())
    generated_texts = {rec.entity_id: rec.text for rec in surviving}
    gold_texts = {
        eid: corpus[eid].descriptions[lang]
        for eid in generated_texts
        if eid in corpus and lang in corpus[eid].descriptions
    }
    dedup = corpus_mod.dedup_exact_matches(
        {eid: generated_texts[eid] for eid in gold_texts}, gold_texts
    )
    candidates = {eid: scores[eid] for eid in dedup.surviving_ids if eid in scores}
    if not candidates:
        raise CliError("no candidates after deduplication and truncation filtering")
    rng = np.random.default_rng(args.seed)
    if args.diverse and args.type_table:
        table = TypeEmbeddingTable.load(args.type_table)
        sampled = _diverse_stratified_sample(candidates, corpus, table, args.per_bin, args.bins, rng)
    else:
        sampled = analysis.stratified_sample_by_metric(candidates, args.per_bin, args.bins, rng)
    items = [
        {
            "entity_id": eid,
            "snippet": corpus[eid].articles.get(lang) or next(iter(corpus[eid].articles.values())),
            "model_description": generated_texts[eid],
            "human_description": gold_texts[eid],
            "score": candidates[eid],
        }
        for eid in sampled
    ]
    items_path = out / "eval_items.jsonl"
    with open(items_path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item, ensure_ascii=False, sort_keys=True) + "\n")
    pool_ids = [eid for eid in sorted(gold_texts) if eid not in set(sampled)] or sorted(gold_texts)
    pool_pick = rng.choice(len(pool_ids), size=min(len(pool_ids), 50), replace=False)
    honeypot_path = out / "honeypots.jsonl"
    with open(honeypot_path, "w", encoding="utf-8") as fh:
        for k in sorted(pool_pick):
            eid = pool_ids[int(k)]
            fh.write(
                json.dumps(
                    {
                        "entity_id": eid,
                        "snippet": corpus[eid].articles.get(lang) or next(iter(corpus[eid].articles.values())),
                        "true_description": gold_texts[eid],
                    },
                    ensure_ascii=False,
                    sort_keys=True,
                )
                + "\n"
            )
    arguments = vars(args) | {
        "truncated_dropped": truncated_dropped,
        "dedup_eliminated_fraction": dedup.eliminated_fraction,
    }
    _write_manifest(
        out,
        "sample-eval",
        arguments,
        [Path(args.corpus), Path(args.generations), Path(args.scores)],
        [items_path, honeypot_path],
    )
    return 0


def _diverse_stratified_sample(candidates, corpus, table, per_bin, n_bins, rng) -> list[str]:
    """Score deciles with k-means++ far-apart selection inside each bin."""
    from .encoding import type_representation

    ids = sorted(candidates)
    values = np.array([candidates[i] for i in ids])
    edges = np.quantile(values, np.linspace(0, 1, n_bins + 1))
    sampled: list[str] = []
    for b in range(n_bins):
        upper_ok = values < edges[b + 1] if b < n_bins - 1 else values <= edges[b + 1]
        members = [i for i, keep in zip(ids, (values >= edges[b]) & upper_ok) if keep]
        if len(members) < per_bin:
            raise CliError(f"score bin {b} has {len(members)} members, cannot sample {per_bin}")
        points = np.stack([type_representation(corpus[eid], table) for eid in members])
        picked = analysis.kmeanspp_sample(points, per_bin, rng)
        sampled.extend(members[k] for k in picked)
    return sampled


ENTRY_QUESTIONS = {
    "en": service_mod.EntryQuestion(
        "Which of these words is an English word?", ["maison", "house", "casa"], 1
    ),
    "de": service_mod.EntryQuestion(
        "Welches dieser Woerter ist ein deutsches Wort?", ["house", "maison", "Haus"], 2
    ),
    "ro": service_mod.EntryQuestion(
        "Care dintre aceste cuvinte este un cuvant romanesc?", ["casa", "house", "Haus"], 0
    ),
    "hi": service_mod.EntryQuestion(
        "Inme se kaun sa shabd hindi ka hai?", ["paani", "water", "agua"], 0
    ),
}


def load_eval_items(path) -> list[service_mod.EvalItemSource]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                raw = json.loads(line)
                items.append(
                    service_mod.EvalItemSource(
                        raw["entity_id"], raw["snippet"], raw["model_description"],
                        raw["human_description"], raw.get("score"),
                    )
                )
    return items


def load_honeypots(path) -> list[service_mod.HoneypotSource]:
    pool = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                raw = json.loads(line)
                pool.append(
                    service_mod.HoneypotSource(raw["entity_id"], raw["snippet"], raw["true_description"])
                )
    return pool


def cmd_serve(args) -> int:
    items = load_eval_items(_require(args.items, "sample-eval"))
    pool = load_honeypots(_require(args.honeypots, "sample-eval"))
    question = ENTRY_QUESTIONS.get(
        args.language,
        service_mod.EntryQuestion(f"Pick option 2 ({args.language})", ["one", "two", "three"], 1),
    )
    svc = service_mod.RatingService(args.log)
    if args.campaign not in svc.campaigns:
        campaign = service_mod.create_campaign(
            args.campaign, items, args.language, pool, args.seed, question
        )
        svc.install_campaign(campaign)
    server = service_mod.serve(svc, host=args.host, port=args.port, static_dir=args.static)
    actual_port = server.server_address[1]
    print(f"rating service listening on http://{args.host}:{actual_port}", file=sys.stderr)
    try:
        if args.duration is not None:
            time.sleep(args.duration)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        svc.close()
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    aggregate = json.loads(_require(args.aggregate, "aggregate").read_text())
    sections = ["# Experiment report", "", "## Per-language mean similarity scores", ""]
    sections.append("```\n" + experiment.render_score_table_csv(aggregate).strip() + "\n```")
    if "pairwise" in aggregate:
        sections += [
            "",
            "## Pairwise win probabilities (Bradley-Terry; * = sign test p < 0.05)",
            "",
            "```\n" + experiment.render_pairwise_csv(aggregate).strip() + "\n```",
        ]
    elif "pairwise_error" in aggregate:
        sections += ["", f"Pairwise comparison unavailable: {aggregate['pairwise_error']}"]
    inputs = [Path(args.aggregate)]
    if args.human:
        human = json.loads(_require(args.human, "serve").read_text())
        inputs.append(Path(args.human))
        sections += ["", "## Human evaluation", ""]
        fraction = human.get("model_win_fraction")
        ci = human.get("wilson_95") or [None, None]
        if fraction is not None:
            sections.append(
                f"- model preferred on {100 * fraction:.1f}% of items "
                f"[{100 * ci[0]:.1f}%, {100 * ci[1]:.1f}%]"
            )
        if human.get("fleiss_kappa") is not None:
            sections.append(f"- rater agreement (Fleiss' kappa): {human['fleiss_kappa']:.3f}")
        sections.append(f"- excluded workers: {len(human.get('excluded_workers', []))}")
    report_path = out / "report.md"
    report_path.write_text("\n".join(sections) + "\n")
    _write_manifest(out, "report", vars(args), inputs, [report_path])
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multidesc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--entities", type=int, default=500)
    p.add_argument("--languages", default="en,de,ro")
    p.add_argument("--vocab-size", type=int, default=12)
    p.add_argument("--types", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--missing-articles", type=float, default=0.2)
    p.add_argument("--missing-descriptions", type=float, default=0.3)
    p.add_argument("--type-critical", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="corpus statistics table")
    p.add_argument("--corpus", required=True)
    p.add_argument("--languages", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="build train/valid/test splits")
    p.add_argument("--corpus", required=True)
    p.add_argument("--languages", required=True)
    p.add_argument("--train", type=int, required=True)
    p.add_argument("--valid", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one model configuration")
    p.add_argument("--corpus", required=True)
    p.add_argument("--languages", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--system", choices=generator.ABLATION_NAMES, default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--early-stop-em", type=float, default=None)
    p.add_argument("--check-every", type=int, default=10)
    p.add_argument("--type-table", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode descriptions for a split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--languages", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--split", choices=["train", "valid", "test"], default="test")
    p.add_argument("--model", default=None)
    p.add_argument("--baseline", choices=["prefix", "translation"], default=None)
    p.add_argument("--translator", default=None)
    p.add_argument("--system", default=None, help="system name override for outputs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("score", help="similarity-score generations against gold")
    p.add_argument("--corpus", required=True)
    p.add_argument("--languages", required=True)
    p.add_argument("--embedder-model", required=True, help="checkpoint supplying token embeddings")
    p.add_argument("--generations", nargs="+", required=True)
    p.add_argument("--weighting", choices=["uniform", "idf"], default="uniform")
    p.add_argument("--keep-truncated", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("aggregate", help="per-language means and pairwise comparison")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("propensity", help="propensity-weighted score analysis")
    p.add_argument("--corpus", required=True)
    p.add_argument("--languages", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--system", required=True)
    p.add_argument("--lang", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_propensity)

    p = sub.add_parser("sample-eval", help="build the human-evaluation item set")
    p.add_argument("--corpus", required=True)
    p.add_argument("--languages", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--generations", required=True)
    p.add_argument("--system", required=True)
    p.add_argument("--lang", required=True)
    p.add_argument("--per-bin", type=int, default=10)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--diverse", action="store_true", help="k-means++ selection inside score bins")
    p.add_argument("--type-table", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_eval)

    p = sub.add_parser("serve", help="run the rating service")
    p.add_argument("--items", required=True)
    p.add_argument("--honeypots", required=True)
    p.add_argument("--language", default="en")
    p.add_argument("--campaign", default="campaign1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--static", default=None, help="directory of UI files to serve at /")
    p.add_argument("--duration", type=float, default=None, help="serve for N seconds, then exit")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="assemble the final report")
    p.add_argument("--aggregate", required=True)
    p.add_argument("--human", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (corpus_mod.CorpusError, generator.GenerationError, analysis.AnalysisError,
            metric.MetricError, service_mod.ServiceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
