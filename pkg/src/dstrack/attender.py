"""Bidirectional attention between utterance tokens and schema elements.

Builds the N x M similarity matrix (whole-element or token-level), then
row-normalizes it to re-express every utterance token as a mixture of
schema embeddings and column-normalizes it to re-express every schema
element as a mixture of token embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .decoder import AdditiveAttention

OVERALL = "overall"
TOKEN = "token"
NONE = "none"
SCHEMA_ONLY = "schema_only"
UTTERANCE_ONLY = "utterance_only"

VARIANTS = (OVERALL, TOKEN, NONE, SCHEMA_ONLY, UTTERANCE_ONLY)


@dataclass
class Fused:
    utt: Tensor  # (h, N) schema-attended utterance representations
    schema: Tensor  # (h, M) utterance-attended schema representations


class Attender:
    def __init__(self, ps: ParamSet, prefix: str, hidden: int, attn_dim: int, token_level: bool = False):
        self.r = ps.param(f"{prefix}.r", (attn_dim, 1))
        self.w1 = ps.param(f"{prefix}.w1", (attn_dim, hidden))
        self.w2 = ps.param(f"{prefix}.w2", (attn_dim, hidden))
        self.token_attn = (
            AdditiveAttention(ps, f"{prefix}.token_attn", hidden, hidden, attn_dim) if token_level else None
        )

    def similarity_overall(self, utt: Tensor, schema: Tensor) -> Tensor:
        """(N, M) scores r . tanh(W1 d_i + W2 e_j)."""
        if utt.data.shape[0] != schema.data.shape[0]:
            raise ad.ShapeError(
                f"utterance width {utt.data.shape[0]} != schema width {schema.data.shape[0]}"
            )
        return ad.additive_scores(self.r, ad.matmul(self.w1, utt), ad.matmul(self.w2, schema))

    def similarity_token(self, utt: Tensor, element_tokens: list[Tensor]) -> Tensor:
        """Token-level variant: each element is re-embedded per utterance token
        by attending over that element's own token matrix."""
        if self.token_attn is None:
            raise ValueError("attender was built without token-level parameters")
        if not element_tokens:
            raise ad.ShapeError("similarity_token needs at least one element")
        proj_utt = ad.matmul(self.w1, utt)  # (a, N)
        cols = []
        for tj in element_tokens:
            if tj.data.shape[1] == 0:
                raise ad.ShapeError("empty token matrix for a schema element")
            per_token_embed = self.token_attn.batched(utt, tj, tj)  # (h, N)
            pre = ad.tanh(ad.add(proj_utt, ad.matmul(self.w2, per_token_embed)))  # (a, N)
            cols.append(ad.transpose(ad.matmul(ad.transpose(self.r), pre)))  # (N, 1)
        return ad.concat(cols, axis=1)  # (N, M)


def fuse(similarity: Tensor, utt: Tensor, schema: Tensor) -> Fused:
    """Row/column-normalize the similarities and mix the opposite side.

    Row-normalized weights combine schema embeddings into per-token
    representations; column-normalized weights combine token embeddings
    into per-element representations. Both outputs are convex combinations
    of the source columns.
    """
    n, m = similarity.data.shape
    if n == 0 or m == 0 or utt.data.shape[1] != n or schema.data.shape[1] != m:
        raise ad.ShapeError(
            f"fuse: similarity {similarity.data.shape} does not match utterance "
            f"{utt.data.shape} / schema {schema.data.shape}"
        )
    row_norm = ad.softmax(similarity, axis=1)  # rows sum to 1 over schema elements
    col_norm = ad.softmax(similarity, axis=0)  # columns sum to 1 over tokens
    fused_utt = ad.matmul(schema, ad.transpose(row_norm))  # (h, N)
    fused_schema = ad.matmul(utt, col_norm)  # (h, M)
    return Fused(fused_utt, fused_schema)
