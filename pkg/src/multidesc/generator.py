"""Autoregressive description decoder, training loop, and constrained decoding.

Five model configurations share one architecture: the full model (articles in
all languages, pooled cross-language descriptions, type vector), three
ablations dropping descriptions and/or types, and a monolingual variant that
sees only the query-language article.
"""

from __future__ import annotations

import json
import math
import random
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Corpus, Entity, dedup_key, sample_training_instance
from .encoding import (
    BOS,
    EOS,
    PAD,
    EncodedArticle,
    EncodingError,
    FeedForward,
    MultiHeadAttention,
    TextEncoder,
    TypeEmbeddingTable,
    Vocabulary,
    build_vocab,
    pool_descriptions,
    select_query_language,
    sinusoidal_positions,
    tokenize,
    type_representation,
)
from .fusion import ContextAssembler, DecoderContext, FusionBlock, FusedArticle, assemble_decoder_context, fuse_articles

ABLATION_NAMES = ("full", "no_desc", "no_types", "no_desc_types", "monolingual")


class GenerationError(ValueError):
    pass


@dataclass
class ModelConfig:
    use_desc: bool = True
    use_types: bool = True
    monolingual: bool = False
    d_model: int = 64
    d_k: int = 64
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    d_desc: int = 32
    desc_heads: int = 2
    desc_layers: int = 2
    d_t: int = 16
    max_positions: int = 64
    max_output_tokens: int = 16
    freeze_desc_encoder: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_k != self.d_model:
            raise GenerationError("decoder context requires d_k == d_model")
        if self.max_output_tokens < 1:
            raise GenerationError("max_output_tokens must be >= 1")


def named_config(name: str, **overrides) -> ModelConfig:
    """One of the five standard configurations, with optional field overrides."""
    presets = {
        "full": {},
        "no_desc": {"use_desc": False},
        "no_types": {"use_types": False},
        "no_desc_types": {"use_desc": False, "use_types": False},
        "monolingual": {"use_desc": False, "use_types": False, "monolingual": True},
    }
    if name not in presets:
        raise GenerationError(f"unknown configuration {name!r}; choose from {ABLATION_NAMES}")
    return ModelConfig(**{**presets[name], **overrides})


# ---------------------------------------------------------------------------
# Decoder


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.ff = FeedForward(d_model, 4 * d_model)
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.ln3 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, context: torch.Tensor, context_mask: torch.Tensor) -> torch.Tensor:
        x = self.ln1(x + self.self_attn(x, x, causal=True))
        x = self.ln2(x + self.cross_attn(x, context, key_mask=context_mask))
        return self.ln3(x + self.ff(x))


class TransformerDecoder(nn.Module):
    """Causal decoder with joint cross-attention over the assembled context;
    the output head is weight-tied to the token embedding."""

    def __init__(self, embedding: nn.Embedding, n_heads: int, n_layers: int, max_positions: int):
        super().__init__()
        self.embedding = embedding
        d_model = embedding.embedding_dim
        self.register_buffer("positions", sinusoidal_positions(max_positions, d_model))
        self.layers = nn.ModuleList(DecoderLayer(d_model, n_heads) for _ in range(n_layers))
        self.scale = math.sqrt(d_model)

    def forward(self, ids: torch.Tensor, context: torch.Tensor, context_mask: torch.Tensor) -> torch.Tensor:
        t = ids.shape[1]
        x = self.embedding(ids) * self.scale + self.positions[:t]
        for layer in self.layers:
            x = layer(x, context, context_mask)
        return x @ self.embedding.weight.T


class DescriptionModel(nn.Module):
    """All trainable pieces: shared token embedding, article and description
    encoders, fusion block, context assembler, and decoder."""

    def __init__(self, vocab_size: int, n_languages: int, config: ModelConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(vocab_size, config.d_model, padding_idx=PAD)
        self.article_encoder = TextEncoder(
            self.token_embedding, config.n_heads, config.encoder_layers, config.max_positions
        )
        self.desc_embedding = nn.Embedding(vocab_size, config.d_desc, padding_idx=PAD)
        self.desc_encoder = TextEncoder(
            self.desc_embedding, config.desc_heads, config.desc_layers, config.max_positions
        )
        self.fusion = FusionBlock(config.d_model, config.d_k)
        self.assembler = ContextAssembler(config.d_model, config.d_desc, config.d_t, n_languages)
        self.decoder = TransformerDecoder(
            self.token_embedding, config.n_heads, config.decoder_layers, config.max_positions
        )
        if config.freeze_desc_encoder:
            for param in self.desc_encoder.parameters():
                param.requires_grad_(False)


def build_model(vocab: Vocabulary, config: ModelConfig) -> DescriptionModel:
    torch.manual_seed(config.seed)
    return DescriptionModel(len(vocab), len(vocab.language_codes), config)


@dataclass
class TrainedModel:
    model: DescriptionModel
    vocab: Vocabulary
    config: ModelConfig
    type_table: TypeEmbeddingTable
    train_log: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Context construction (shared by training and decoding)


@dataclass
class PreparedInstance:
    entity: Entity
    target_language: str
    query_language: str


def build_contexts(trained: TrainedModel, instances: Sequence[PreparedInstance]) -> list[DecoderContext]:
    """Build decoder contexts for a batch, sharing one encoder pass per modality."""
    model, vocab, config = trained.model, trained.vocab, trained.config
    fusion_languages: list[list[str]] = []
    article_jobs: list[tuple[int, str, list[int]]] = []
    for idx, inst in enumerate(instances):
        langs = [inst.query_language] if config.monolingual else inst.entity.article_languages()
        if inst.query_language not in langs:
            raise GenerationError(
                f"query language {inst.query_language!r} has no article for {inst.entity.id!r}"
            )
        fusion_languages.append(langs)
        for lang in langs:
            tokens = tokenize(inst.entity.articles[lang])
            if not tokens:
                raise EncodingError(f"article {inst.entity.id}/{lang} tokenizes to nothing")
            article_jobs.append((idx, lang, vocab.encode(tokens)[: config.max_positions]))

    encoded_list = model.article_encoder.encode_batch([ids for _, _, ids in article_jobs])
    encoded_by_instance: list[dict[str, torch.Tensor]] = [{} for _ in instances]
    for (idx, lang, _), matrix in zip(article_jobs, encoded_list):
        encoded_by_instance[idx][lang] = matrix

    contexts: list[DecoderContext] = []
    for idx, inst in enumerate(instances):
        encoded = [EncodedArticle(lang, encoded_by_instance[idx][lang]) for lang in fusion_languages[idx]]
        fused = fuse_articles(encoded, inst.query_language, model.fusion)
        pooled = (
            pool_descriptions(inst.entity, inst.target_language, model.desc_encoder, vocab)
            if config.use_desc
            else None
        )
        type_vec = (
            torch.from_numpy(type_representation(inst.entity, trained.type_table))
            if config.use_types
            else None
        )
        contexts.append(
            assemble_decoder_context(
                fused,
                pooled,
                type_vec,
                vocab.language_index(inst.target_language),
                model.assembler,
                use_desc=config.use_desc,
                use_types=config.use_types,
            )
        )
    return contexts


def _pad_contexts(contexts: Sequence[DecoderContext]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = [c.matrix.shape[0] for c in contexts]
    l_max = max(lengths)
    d = contexts[0].matrix.shape[1]
    dtype = contexts[0].matrix.dtype
    padded = torch.zeros(len(contexts), l_max, d, dtype=dtype)
    mask = torch.zeros(len(contexts), l_max, dtype=torch.bool)
    for row, ctx in enumerate(contexts):
        padded[row, : lengths[row]] = ctx.matrix
        mask[row, : lengths[row]] = True
    return padded, mask


def target_token_ids(vocab: Vocabulary, text: str, max_positions: int) -> list[int]:
    """Decoder supervision: description tokens followed by the end symbol."""
    ids = vocab.encode(tokenize(text))
    return ids[: max_positions - 2] + [EOS]


def batch_loss(trained: TrainedModel, instances: Sequence[PreparedInstance]) -> torch.Tensor:
    """Per-instance teacher-forced negative log-likelihood (token-summed)."""
    for inst in instances:
        if inst.target_language not in inst.entity.descriptions:
            raise GenerationError(
                f"entity {inst.entity.id!r} has no ground-truth description in "
                f"{inst.target_language!r}"
            )
    contexts = build_contexts(trained, instances)
    context, context_mask = _pad_contexts(contexts)
    targets = [
        target_token_ids(trained.vocab, inst.entity.descriptions[inst.target_language],
                         trained.config.max_positions)
        for inst in instances
    ]
    s_max = max(len(y) for y in targets)
    inputs = torch.full((len(instances), s_max), PAD, dtype=torch.long)
    labels = torch.full((len(instances), s_max), PAD, dtype=torch.long)
    for row, y in enumerate(targets):
        seq = [BOS] + y
        inputs[row, : len(y)] = torch.tensor(seq[:-1], dtype=torch.long)
        labels[row, : len(y)] = torch.tensor(y, dtype=torch.long)
    logits = trained.model.decoder(inputs, context, context_mask)
    flat = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), reduction="none")
    token_nll = flat.reshape(labels.shape)
    return (token_nll * (labels != PAD)).sum(dim=1)


def training_loss(
    trained: TrainedModel,
    entity: Entity,
    target_language: str,
    query_language: str | None = None,
) -> torch.Tensor:
    """Negative log-likelihood of the ground-truth description under teacher forcing."""
    if query_language is None:
        query_language = select_query_language(
            entity, target_language, "infer", _fallback_rng(trained.config.seed, entity.id)
        )
    return batch_loss(trained, [PreparedInstance(entity, target_language, query_language)])[0]


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainingConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 3e-4
    grad_clip: float = 1.0
    vocab_max_size: int = 20_000
    early_stop_exact_match: float | None = None
    early_stop_check_every: int = 10
    threads: int = 1


def _corpus_languages(corpus: Corpus) -> list[str]:
    langs: set[str] = set()
    for ent in corpus.values():
        langs.update(ent.articles)
        langs.update(ent.descriptions)
    return sorted(langs)


def train(
    corpus: Corpus,
    train_ids: Sequence[str],
    config: ModelConfig,
    hyper: TrainingConfig | None = None,
    valid_ids: Sequence[str] = (),
    type_table: TypeEmbeddingTable | None = None,
) -> TrainedModel:
    """Train a model configuration; deterministic given the config seed.

    Each epoch draws one instance per training entity (uniform target language
    among its descriptions, uniform query language among its articles) and
    minimizes teacher-forced NLL with Adam under gradient-norm clipping.
    """
    hyper = hyper or TrainingConfig()
    if not train_ids:
        raise GenerationError("empty training split")
    torch.set_num_threads(hyper.threads)
    vocab = build_vocab(corpus, hyper.vocab_max_size, _corpus_languages(corpus))
    if type_table is None:
        all_types = {t for ent in corpus.values() for t in ent.type_ids}
        type_table = TypeEmbeddingTable.random(sorted(all_types) or ["<none>"], config.d_t, config.seed)
    model = build_model(vocab, config)
    trained = TrainedModel(model, vocab, config, type_table)
    optimizer = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad], lr=hyper.learning_rate
    )
    sample_rng = random.Random(config.seed * 1_000_003 + 17)
    valid_instances = _validation_instances(corpus, valid_ids, config.seed)

    for epoch in range(hyper.epochs):
        order = sorted(train_ids)
        random.Random(config.seed * 7_919 + epoch).shuffle(order)
        epoch_losses: list[float] = []
        for start in range(0, len(order), hyper.batch_size):
            batch_entities = [corpus[eid] for eid in order[start : start + hyper.batch_size]]
            instances = []
            for entity in batch_entities:
                _, target = sample_training_instance(entity, sample_rng)
                query = select_query_language(entity, target, "train", sample_rng)
                instances.append(PreparedInstance(entity, target, query))
            optimizer.zero_grad()
            losses = batch_loss(trained, instances)
            loss = losses.mean()
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged at epoch {epoch}: non-finite loss {loss.item()!r}"
                )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), hyper.grad_clip)
            optimizer.step()
            epoch_losses.append(float(loss.item()))
        entry: dict = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses))}
        if valid_instances:
            entry["valid_loss"] = _validation_loss(trained, valid_instances)
        check_now = (epoch + 1) % hyper.early_stop_check_every == 0 or epoch + 1 == hyper.epochs
        if hyper.early_stop_exact_match is not None and valid_instances and check_now:
            report = evaluate_exact_match(trained, corpus, list(valid_ids))
            entry["valid_exact_match"] = report.fraction
            trained.train_log.append(entry)
            if report.fraction >= hyper.early_stop_exact_match:
                break
        else:
            trained.train_log.append(entry)
    return trained


def _validation_instances(corpus: Corpus, valid_ids: Sequence[str], seed: int) -> list[PreparedInstance]:
    rng = random.Random(seed * 999_983 + 3)
    instances = []
    for eid in sorted(valid_ids):
        entity = corpus[eid]
        _, target = sample_training_instance(entity, rng)
        query = select_query_language(entity, target, "infer", rng)
        instances.append(PreparedInstance(entity, target, query))
    return instances


def _validation_loss(trained: TrainedModel, instances: Sequence[PreparedInstance]) -> float:
    with torch.no_grad():
        losses = []
        for start in range(0, len(instances), 64):
            losses.append(batch_loss(trained, instances[start : start + 64]))
        return float(torch.cat(losses).mean().item())


# ---------------------------------------------------------------------------
# Decoding


@dataclass
class GenerationResult:
    entity_id: str
    target_language: str
    tokens: list[str]
    text: str
    terminated: bool  # end symbol emitted before the length cap
    logprob: float


def _fallback_rng(seed: int, entity_id: str) -> random.Random:
    return random.Random(seed ^ zlib.crc32(entity_id.encode("utf-8")))


def generate(
    trained: TrainedModel,
    entity: Entity,
    target_language: str,
    decode: str = "greedy",
    beam_width: int = 3,
) -> GenerationResult:
    """Decode a description for (entity, target language).

    Works even when the target language has no article: the query language
    falls back to a uniform choice seeded by the entity id, keeping decoding
    deterministic for fixed model and inputs.
    """
    config = trained.config
    query = select_query_language(
        entity, target_language, "infer", _fallback_rng(config.seed, entity.id)
    )
    instance = PreparedInstance(entity, target_language, query)
    with torch.no_grad():
        context = build_contexts(trained, [instance])[0]
        ctx, mask = _pad_contexts([context])
        if decode == "greedy":
            ids, logprob, terminated = _greedy(trained.model, ctx, mask, config.max_output_tokens)
        elif decode == "beam":
            if not 1 <= beam_width <= 5:
                raise GenerationError("beam width must be between 1 and 5")
            ids, logprob, terminated = _beam(trained.model, ctx, mask, config.max_output_tokens, beam_width)
        else:
            raise GenerationError(f"unknown decode mode {decode!r}")
    tokens = trained.vocab.decode(ids)
    return GenerationResult(entity.id, target_language, tokens, " ".join(tokens), terminated, logprob)


def _step_logprobs(model: DescriptionModel, prefix: list[int], ctx: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    ids = torch.tensor([prefix], dtype=torch.long)
    logits = model.decoder(ids, ctx, mask)[0, -1]
    logits[PAD] = float("-inf")
    logits[BOS] = float("-inf")
    return torch.log_softmax(logits, dim=-1)


def _greedy(model: DescriptionModel, ctx: torch.Tensor, mask: torch.Tensor, cap: int) -> tuple[list[int], float, bool]:
    prefix = [BOS]
    out: list[int] = []
    logprob = 0.0
    for _ in range(cap):
        step = _step_logprobs(model, prefix, ctx, mask)
        token = int(step.argmax().item())
        logprob += float(step[token].item())
        if token == EOS:
            return out, logprob, True
        out.append(token)
        prefix.append(token)
    return out, logprob, False


def _beam(
    model: DescriptionModel, ctx: torch.Tensor, mask: torch.Tensor, cap: int, width: int
) -> tuple[list[int], float, bool]:
    # beams: (tokens, logprob, terminated)
    beams: list[tuple[list[int], float, bool]] = [([], 0.0, False)]
    for _ in range(cap):
        candidates: list[tuple[list[int], float, bool]] = []
        for tokens, score, done in beams:
            if done:
                candidates.append((tokens, score, True))
                continue
            step = _step_logprobs(model, [BOS] + tokens, ctx, mask)
            top = torch.topk(step, width)
            for value, token_id in zip(top.values.tolist(), top.indices.tolist()):
                if token_id == EOS:
                    candidates.append((tokens, score + value, True))
                else:
                    candidates.append((tokens + [token_id], score + value, False))
        candidates.sort(key=lambda item: (-item[1], item[2], item[0]))
        beams = candidates[:width]
        if all(done for _, _, done in beams):
            break
    best = max(beams, key=lambda item: item[1])
    return best[0], best[1], best[2]


def filter_truncated(results: Iterable[GenerationResult]) -> tuple[list[GenerationResult], float]:
    """Drop generations that hit the length cap without terminating."""
    results = list(results)
    surviving = [r for r in results if r.terminated]
    dropped = (len(results) - len(surviving)) / len(results) if results else 0.0
    return surviving, dropped


# ---------------------------------------------------------------------------
# Evaluation helpers


@dataclass
class ExactMatchReport:
    fraction: float
    n_instances: int
    matches: list[tuple[str, str, bool]]  # (entity id, language, matched)


def evaluate_exact_match(
    trained: TrainedModel,
    corpus: Corpus,
    ids: Sequence[str],
    languages: Sequence[str] | None = None,
) -> ExactMatchReport:
    """Exact-match rate (case- and whitespace-insensitive) over every
    (entity, language) pair with a gold description."""
    matches: list[tuple[str, str, bool]] = []
    for eid in sorted(ids):
        entity = corpus[eid]
        for lang in entity.description_languages():
            if languages is not None and lang not in languages:
                continue
            result = generate(trained, entity, lang)
            matched = dedup_key(result.text) == dedup_key(entity.descriptions[lang])
            matches.append((eid, lang, matched))
    if not matches:
        return ExactMatchReport(0.0, 0, [])
    fraction = sum(1 for _, _, ok in matches if ok) / len(matches)
    return ExactMatchReport(fraction, len(matches), matches)


def description_embedder(trained: TrainedModel):
    """Contextual token embedder backed by the model's description encoder."""

    def embed(text: str) -> tuple[list[str], np.ndarray]:
        tokens = tokenize(text)[: trained.config.max_positions]
        if not tokens:
            return [], np.zeros((0, trained.config.d_desc))
        ids = trained.vocab.encode(tokens)
        with torch.no_grad():
            matrix = trained.model.desc_encoder.encode_batch([ids])[0]
        return tokens, matrix.double().numpy()

    return embed


# ---------------------------------------------------------------------------
# Checkpoints

CHECKPOINT_FORMAT = "multidesc-checkpoint-v1"


def save_checkpoint(trained: TrainedModel, path: str | Path) -> None:
    """JSON tensor map keyed by canonical (state-dict) parameter names."""
    state = trained.model.state_dict()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(trained.config),
        "vocab": {"tokens": trained.vocab.id_to_token, "languages": trained.vocab.language_codes},
        "type_table": {
            key: [float(x) for x in trained.type_table[key]] for key in trained.type_table.ids()
        },
        "parameters": {
            name: {"shape": list(tensor.shape), "data": tensor.reshape(-1).tolist()}
            for name, tensor in sorted(state.items())
        },
        "train_log": trained.train_log,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path: str | Path) -> TrainedModel:
    raw = json.loads(Path(path).read_text())
    if raw.get("format") != CHECKPOINT_FORMAT:
        raise GenerationError(f"unrecognized checkpoint format in {path}")
    config = ModelConfig(**raw["config"])
    vocab = Vocabulary(raw["vocab"]["tokens"], raw["vocab"]["languages"])
    table = TypeEmbeddingTable(
        {key: np.array(vec) for key, vec in raw["type_table"].items()}, dim=config.d_t
    )
    model = build_model(vocab, config)
    state = {
        name: torch.tensor(entry["data"], dtype=torch.float32).reshape(entry["shape"])
        for name, entry in raw["parameters"].items()
    }
    model.load_state_dict(state)
    return TrainedModel(model, vocab, config, table, raw.get("train_log", []))
