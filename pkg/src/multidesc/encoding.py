"""Tokenization, vocabulary, trainable encoders, description pooling,
type-embedding lookup, and the query-language selection policy."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import ArticleText, Corpus, Entity, normalize_text

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>"]


class EncodingError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return normalize_text(text).split()


@dataclass
class Vocabulary:
    """Token ids with fixed reserved slots and one language token per configured language."""

    id_to_token: list[str]
    language_codes: list[str]

    def __post_init__(self) -> None:
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise EncodingError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(tok) for tok in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def language_index(self, code: str) -> int:
        try:
            return self.language_codes.index(code)
        except ValueError:
            raise EncodingError(f"language {code!r} not in vocabulary") from None

    def lang_token_id(self, code: str) -> int:
        return len(RESERVED) + self.language_index(code)

    def save(self, path: str | Path) -> None:
        payload = {"tokens": self.id_to_token, "languages": self.language_codes}
        Path(path).write_text(json.dumps(payload, ensure_ascii=False, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        raw = json.loads(Path(path).read_text())
        return cls(raw["tokens"], raw["languages"])


def build_vocab(corpus: Corpus, max_size: int, languages: Sequence[str]) -> Vocabulary:
    """Keep the ``max_size`` most frequent corpus tokens (ties broken lexicographically)."""
    if not corpus:
        raise EncodingError("empty corpus")
    codes = sorted(languages)
    taken = set(RESERVED) | {f"<lang:{c}>" for c in codes}
    counts: dict[str, int] = {}
    for entity in corpus.values():
        for text in list(entity.articles.values()) + list(entity.descriptions.values()):
            for tok in tokenize(text):
                if tok not in taken:
                    counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts, key=lambda tok: (-counts[tok], tok))[:max_size]
    id_to_token = RESERVED + [f"<lang:{c}>" for c in codes] + ranked
    return Vocabulary(id_to_token, codes)


# ---------------------------------------------------------------------------
# Encoders


def sinusoidal_positions(max_positions: int, d_model: int) -> torch.Tensor:
    position = torch.arange(max_positions, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    table = torch.zeros(max_positions, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: d_model // 2])
    return table.to(torch.get_default_dtype())


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise EncodingError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(
        self,
        query: torch.Tensor,  # (B, Tq, d)
        keys: torch.Tensor,  # (B, Tk, d)
        key_mask: torch.Tensor | None = None,  # (B, Tk) True where attendable
        causal: bool = False,
    ) -> torch.Tensor:
        b, t_q, d = query.shape
        t_k = keys.shape[1]
        q = self.q_proj(query).view(b, t_q, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(keys).view(b, t_k, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(keys).view(b, t_k, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            future = torch.triu(torch.ones(t_q, t_k, dtype=torch.bool, device=query.device), 1)
            scores = scores.masked_fill(future, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t_q, d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_model, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ff = FeedForward(d_model, 4 * d_model)
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        x = self.ln1(x + self.attn(x, x, key_mask=mask))
        return self.ln2(x + self.ff(x))


class TextEncoder(nn.Module):
    """Small transformer encoder producing one vector per input token."""

    def __init__(self, embedding: nn.Embedding, n_heads: int, n_layers: int, max_positions: int):
        super().__init__()
        self.embedding = embedding
        d_model = embedding.embedding_dim
        self.register_buffer("positions", sinusoidal_positions(max_positions, d_model))
        self.layers = nn.ModuleList(EncoderLayer(d_model, n_heads) for _ in range(n_layers))
        self.scale = math.sqrt(d_model)

    @property
    def max_positions(self) -> int:
        return self.positions.shape[0]

    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        t = ids.shape[1]
        if t > self.max_positions:
            raise EncodingError(f"sequence length {t} exceeds max positions {self.max_positions}")
        x = self.embedding(ids) * self.scale + self.positions[:t]
        for layer in self.layers:
            x = layer(x, mask)
        return x

    def encode_batch(self, token_id_lists: Sequence[Sequence[int]]) -> list[torch.Tensor]:
        """Pad, run one forward pass, and return per-sequence matrices without padding."""
        if not token_id_lists:
            return []
        lengths = [min(len(ids), self.max_positions) for ids in token_id_lists]
        if min(lengths) < 1:
            raise EncodingError("cannot encode an empty token sequence")
        t_max = max(lengths)
        batch = torch.full((len(token_id_lists), t_max), PAD, dtype=torch.long)
        mask = torch.zeros(len(token_id_lists), t_max, dtype=torch.bool)
        for row, ids in enumerate(token_id_lists):
            n = lengths[row]
            batch[row, :n] = torch.tensor(list(ids)[:n], dtype=torch.long)
            mask[row, :n] = True
        out = self.forward(batch, mask)
        return [out[row, : lengths[row]] for row in range(len(token_id_lists))]


@dataclass
class EncodedArticle:
    language: str
    matrix: torch.Tensor  # (T, d_model)


def encode_article(article: ArticleText, encoder: TextEncoder, vocab: Vocabulary) -> EncodedArticle:
    tokens = tokenize(article.first_paragraph)
    if not tokens:
        raise EncodingError(f"article in {article.language!r} tokenizes to nothing")
    ids = vocab.encode(tokens)[: encoder.max_positions]
    matrix = encoder.encode_batch([ids])[0]
    return EncodedArticle(article.language, matrix)


@dataclass
class PooledDescription:
    vector: torch.Tensor  # (d_desc,), zeros when no language contributes
    n_sources: int

    @property
    def is_null(self) -> bool:
        return self.n_sources == 0


def pool_descriptions(
    entity: Entity,
    target_language: str,
    encoder: TextEncoder,
    vocab: Vocabulary,
) -> PooledDescription:
    """Mean over contributing languages of each description's mean token vector.

    The target language's own description is never an input; with no other
    language contributing the result is the all-zeros null vector.
    """
    languages = [lang for lang in entity.description_languages() if lang != target_language]
    d_desc = encoder.embedding.embedding_dim
    if not languages:
        return PooledDescription(torch.zeros(d_desc, dtype=encoder.embedding.weight.dtype), 0)
    id_lists = [vocab.encode(tokenize(entity.descriptions[lang])) for lang in languages]
    matrices = encoder.encode_batch(id_lists)
    per_language = torch.stack([m.mean(dim=0) for m in matrices])
    return PooledDescription(per_language.mean(dim=0), len(languages))


# ---------------------------------------------------------------------------
# Type embeddings


class TypeEmbeddingTable:
    """Id -> vector lookup with a global-mean fallback row.

    The global mean is recomputed lazily whenever the table changes.
    """

    def __init__(self, vectors: dict[str, np.ndarray] | None = None, dim: int | None = None):
        self._vectors: dict[str, np.ndarray] = {}
        self._mean: np.ndarray | None = None
        self.dim = dim
        for key, vec in (vectors or {}).items():
            self[key] = vec
        if self.dim is None:
            raise EncodingError("empty table needs an explicit dimension")

    def __setitem__(self, key: str, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1:
            raise EncodingError("type vectors must be one-dimensional")
        if self.dim is None:
            self.dim = len(vec)
        elif len(vec) != self.dim:
            raise EncodingError(f"vector for {key!r} has dim {len(vec)}, table dim {self.dim}")
        self._vectors[key] = vec
        self._mean = None

    def __contains__(self, key: str) -> bool:
        return key in self._vectors

    def __getitem__(self, key: str) -> np.ndarray:
        return self._vectors[key]

    def __len__(self) -> int:
        return len(self._vectors)

    def ids(self) -> list[str]:
        return sorted(self._vectors)

    @property
    def global_mean(self) -> np.ndarray:
        if self._mean is None:
            if self._vectors:
                self._mean = np.mean(list(self._vectors.values()), axis=0)
            else:
                self._mean = np.zeros(self.dim)
        return self._mean

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key in sorted(self._vectors):
                fields = "\t".join(repr(float(x)) for x in self._vectors[key])
                fh.write(f"{key}\t{fields}\n")

    @classmethod
    def load(cls, path: str | Path) -> "TypeEmbeddingTable":
        vectors: dict[str, np.ndarray] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                if len(parts) < 2:
                    continue
                vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
        if not vectors:
            raise EncodingError(f"no type vectors in {path}")
        return cls(vectors)

    @classmethod
    def random(cls, ids: Iterable[str], dim: int, seed: int) -> "TypeEmbeddingTable":
        rng = np.random.default_rng(seed)
        return cls({key: rng.normal(size=dim) for key in sorted(set(ids))}, dim=dim)


def type_representation(entity: Entity, table: TypeEmbeddingTable) -> np.ndarray:
    """Mean vector of the entity's resolvable type ids; global mean when none resolve."""
    rows = [table[t] for t in entity.type_ids if t in table]
    if not rows:
        return table.global_mean.copy()
    return np.mean(rows, axis=0)


# ---------------------------------------------------------------------------
# Query-language policy


def select_query_language(
    entity: Entity,
    target_language: str,
    mode: str,
    rng: random.Random,
) -> str:
    """Choose the language whose article supplies the attention queries.

    Training samples uniformly over the entity's article languages; inference
    prefers the target language and falls back to a uniform seeded choice when
    the target has no article.
    """
    languages = entity.article_languages()
    if not languages:
        raise EncodingError(f"entity {entity.id!r} has no article")
    if mode == "train":
        return rng.choice(languages)
    if mode == "infer":
        if target_language in entity.articles:
            return target_language
        return rng.choice(languages)
    raise EncodingError(f"unknown mode {mode!r}")
