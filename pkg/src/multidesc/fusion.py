"""Cross-language article fusion and decoder-context assembly.

The fusion block merges per-language article representations into one matrix
aligned with the query language's tokens:

    A_i = (1/n) * sum_l FF(LayerNorm(Q_i + softmax(Q_i K_l^T / sqrt(d)) V_l))

with Q = A_q W_Q, K_l = A_l W_K, V_l = A_l W_V, the softmax running over the
key positions of language l, and the average over all n languages including
the query language itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import torch
from torch import nn

from .encoding import EncodedArticle, PooledDescription


class FusionError(ValueError):
    pass


class FusionBlock(nn.Module):
    """Single-head attention fusion with skip connection, layer norm, and feed-forward."""

    def __init__(self, d_model: int, d_k: int, d_ff: int | None = None):
        super().__init__()
        self.d_model = d_model
        self.d_k = d_k
        d_ff = d_ff or 4 * d_k
        self.w_q = nn.Parameter(torch.empty(d_model, d_k))
        self.w_k = nn.Parameter(torch.empty(d_model, d_k))
        self.w_v = nn.Parameter(torch.empty(d_model, d_k))
        for weight in (self.w_q, self.w_k, self.w_v):
            nn.init.normal_(weight, std=d_model**-0.5)
        self.layer_norm = nn.LayerNorm(d_k)
        self.ff_in = nn.Linear(d_k, d_ff)
        self.ff_out = nn.Linear(d_ff, d_k)
        self.activation = nn.GELU()

    def feed_forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.ff_out(self.activation(self.ff_in(x)))

    def forward(self, matrices: list[torch.Tensor], query_index: int) -> torch.Tensor:
        if not matrices:
            raise FusionError("need at least one language")
        if not 0 <= query_index < len(matrices):
            raise FusionError(f"query index {query_index} out of range")
        for m in matrices:
            if m.ndim != 2 or m.shape[1] != self.d_model:
                raise FusionError(
                    f"expected (T, {self.d_model}) matrices, got {tuple(m.shape)}"
                )
        q = matrices[query_index] @ self.w_q  # (Tq, dk)
        total = torch.zeros_like(q)
        for a_l in matrices:
            k = a_l @ self.w_k
            v = a_l @ self.w_v
            attention = torch.softmax(q @ k.T / math.sqrt(self.d_k), dim=-1)
            total = total + self.feed_forward(self.layer_norm(q + attention @ v))
        return total / len(matrices)


@dataclass
class FusedArticle:
    matrix: torch.Tensor  # (Tq, d_k), row count = query article token count
    query_language: str


def fuse_articles(
    encoded: list[EncodedArticle],
    query: str,
    block: FusionBlock,
) -> FusedArticle:
    """Fuse per-language encodings; the query language must be among them."""
    languages = [e.language for e in encoded]
    if query not in languages:
        raise FusionError(f"query language {query!r} not among encoded languages {languages}")
    matrix = block([e.matrix for e in encoded], languages.index(query))
    return FusedArticle(matrix, query)


# ---------------------------------------------------------------------------
# Decoder context


@dataclass
class DecoderContext:
    """Sequence of d_model vectors: [language token; projected type; projected
    description; fused article rows], with ablated or null slots removed."""

    matrix: torch.Tensor  # (L, d_model)
    slots: tuple[str, ...]  # parallel slot names: "lang", "type", "desc", "article"


class ContextAssembler(nn.Module):
    """Learned projections that lift the description and type vectors into
    pseudo-token slots, plus the target-language token embedding."""

    def __init__(self, d_model: int, d_desc: int, d_t: int, n_languages: int):
        super().__init__()
        self.desc_proj = nn.Linear(d_desc, d_model)
        self.type_proj = nn.Linear(d_t, d_model)
        self.language_embedding = nn.Embedding(n_languages, d_model)
        nn.init.normal_(self.desc_proj.weight, std=0.02)
        nn.init.normal_(self.type_proj.weight, std=0.02)
        nn.init.normal_(self.language_embedding.weight, std=0.02)
        nn.init.zeros_(self.desc_proj.bias)
        nn.init.zeros_(self.type_proj.bias)

    def forward(
        self,
        fused: FusedArticle,
        pooled: PooledDescription | None,
        type_vector: torch.Tensor | None,
        language_index: int,
        use_desc: bool = True,
        use_types: bool = True,
    ) -> DecoderContext:
        return assemble_decoder_context(
            fused, pooled, type_vector, language_index, self, use_desc, use_types
        )


def assemble_decoder_context(
    fused: FusedArticle,
    pooled: PooledDescription | None,
    type_vector: torch.Tensor | None,
    language_index: int,
    assembler: ContextAssembler,
    use_desc: bool = True,
    use_types: bool = True,
) -> DecoderContext:
    """Concatenate [lang; type'; desc'; fused rows], omitting ablated slots.

    A null pooled description (no contributing language) is treated as ablated
    for this instance, so decoders never see a zero-information placeholder.
    """
    device = fused.matrix.device
    rows = [assembler.language_embedding(torch.tensor(language_index, device=device))]
    slots = ["lang"]
    if use_types and type_vector is not None:
        rows.append(assembler.type_proj(type_vector.to(fused.matrix.dtype)))
        slots.append("type")
    if use_desc and pooled is not None and not pooled.is_null:
        rows.append(assembler.desc_proj(pooled.vector))
        slots.append("desc")
    matrix = torch.cat([torch.stack(rows), fused.matrix], dim=0)
    slots.extend(["article"] * fused.matrix.shape[0])
    return DecoderContext(matrix, tuple(slots))
