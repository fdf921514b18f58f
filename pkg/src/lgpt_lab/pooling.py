"""Readout from node states to LM prompt vectors.

Four pieces: learnable pooling tokens (n trainable vectors that attend over
all graph nodes), a mean-pooling baseline, a late-fusion cross-attention
baseline, and the projection MLP into the LM embedding space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncodedGraph, EncoderError, GraphTransformerLayer, OpCounter
from .tensor import Tensor


@dataclass
class LgptParams:
    """n learnable pooling token vectors plus their pooling GNN layers.

    ``pool_link`` is the single learned edge embedding shared by every
    node->token edge. Token rows are initialized from independent Gaussians
    (std 0.02): identically initialized rows would stay identical forever
    under the symmetric pooling update.
    """

    tokens: Tensor              # (n, d)
    pool_link: Tensor           # (1, d)
    layers: list[GraphTransformerLayer]

    @classmethod
    def init(cls, rng: np.random.Generator, n: int, d: int, heads: int,
             num_layers: int = 1) -> "LgptParams":
        if n < 1:
            raise EncoderError(f"LGPT requires n >= 1 tokens, got {n}")
        tokens = Tensor(rng.normal(size=(n, d)) * 0.02, requires_grad=True)
        pool_link = Tensor(rng.normal(size=(1, d)) * 0.02, requires_grad=True)
        layers = [GraphTransformerLayer(rng, d, heads) for _ in range(num_layers)]
        return cls(tokens=tokens, pool_link=pool_link, layers=layers)

    def named_params(self, prefix: str = "lgpt") -> dict[str, Tensor]:
        out = {f"{prefix}.tokens": self.tokens, f"{prefix}.pool_link": self.pool_link}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_params(f"{prefix}.layer{i}"))
        return out


def lgpt_pool(eg: EncodedGraph, lgpt: LgptParams,
              counter: OpCounter | None = None) -> Tensor:
    """Pool node states into n token vectors via directed node->token attention.

    Edges run only into the tokens, so graph node states are left untouched;
    every token sees every node (query node included when attached) through
    the shared pool_link edge embedding.
    """
    n = lgpt.tokens.data.shape[0]
    if n == 0:
        raise EncoderError("lgpt_pool: zero pooling tokens configured")
    k = eg.num_nodes
    src = np.tile(np.arange(k, dtype=np.intp), n)
    dst = np.repeat(np.arange(n, dtype=np.intp), k)
    erow = np.ones(n * k, dtype=np.intp)  # row 1 of [zero; pool_link]
    tokens = lgpt.tokens
    edge_states = T.tile_rows(lgpt.pool_link, 1)
    for layer in lgpt.layers:
        tokens = layer.attend(tokens, eg.node_states, edge_states,
                              src, dst, erow, counter=counter)
    return tokens


def mean_pool(eg: EncodedGraph, include_query: bool = False) -> Tensor:
    """Arithmetic mean of graph node rows; the query node is skipped unless asked."""
    k = eg.num_nodes
    if eg.query_node_index is not None and not include_query:
        rows = T.gather_rows(eg.node_states, np.arange(k - 1, dtype=np.intp))
        return T.mean_rows(rows)
    return T.mean_rows(eg.node_states)


@dataclass
class LateFusionParams:
    """Single-head cross-attention between pooled prompt rows and the query."""

    w_query: Tensor
    w_key: Tensor
    w_value: Tensor
    ln_gain: Tensor
    ln_bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int) -> "LateFusionParams":
        return cls(
            w_query=T.uniform_init(rng, d, d, fan_in=d),
            w_key=T.uniform_init(rng, d, d, fan_in=d),
            w_value=T.uniform_init(rng, d, d, fan_in=d),
            ln_gain=Tensor(np.ones(d), requires_grad=True),
            ln_bias=Tensor(np.zeros(d), requires_grad=True),
        )

    def named_params(self, prefix: str = "late_fusion") -> dict[str, Tensor]:
        return {
            f"{prefix}.w_query": self.w_query,
            f"{prefix}.w_key": self.w_key,
            f"{prefix}.w_value": self.w_value,
            f"{prefix}.ln_gain": self.ln_gain,
            f"{prefix}.ln_bias": self.ln_bias,
        }


def late_fusion_cross_attention(prompt_in: Tensor, query_vec: Tensor,
                                params: LateFusionParams) -> Tensor:
    """Fold an independently encoded query into pooled prompt rows.

    alpha_i = softmax_i <Wq row_i, Wk q>; each row receives a layer-normed
    additive update alpha_i * Wv q. Normalizing the update (rather than the
    sum) keeps the op an exact identity when Wv is zero.
    """
    m, d = prompt_in.data.shape
    pq = T.matmul(prompt_in, params.w_query)                 # (m, d)
    qk = T.matmul(query_vec, params.w_key)                   # (1, d)
    scores = T.scale(T.block_sum_cols(T.mul_rowvec(pq, qk), d), 1.0 / math.sqrt(d))  # (m, 1)
    alpha = T.transpose(T.softmax_rows(T.transpose(scores)))  # softmax across rows
    qv = T.matmul(query_vec, params.w_value)                 # (1, d)
    delta = T.matmul(alpha, qv)                              # (m, d) outer product
    update = T.layer_norm(delta, params.ln_gain, params.ln_bias)
    return T.add(prompt_in, update)


@dataclass
class ProjectionMlp:
    """Two affine layers d -> d_mlp -> d_llm with tanh in between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, d_llm: int,
             d_mlp: int | None = None) -> "ProjectionMlp":
        d_mlp = d_mlp if d_mlp is not None else 2 * d_llm
        return cls(
            w1=T.uniform_init(rng, d, d_mlp, fan_in=d),
            b1=Tensor(np.zeros(d_mlp), requires_grad=True),
            w2=T.uniform_init(rng, d_mlp, d_llm, fan_in=d_mlp),
            b2=Tensor(np.zeros(d_llm), requires_grad=True),
        )

    def named_params(self, prefix: str = "proj") -> dict[str, Tensor]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}

    @property
    def d_in(self) -> int:
        return self.w1.data.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.data.shape[1]


@dataclass
class PromptVectors:
    """Final prompt rows for the LM plus a tag naming the readout that made them."""

    matrix: Tensor  # (n_out, d_llm)
    provenance: str  # lgpt | mean | late_fused


def project(tokens: Tensor, mlp: ProjectionMlp, provenance: str = "lgpt") -> PromptVectors:
    if tokens.data.shape[1] != mlp.d_in:
        raise EncoderError(f"projection expects dim {mlp.d_in}, got {tokens.data.shape[1]}")
    h = T.tanh(T.add_bias(T.matmul(tokens, mlp.w1), mlp.b1))
    out = T.add_bias(T.matmul(h, mlp.w2), mlp.b2)
    return PromptVectors(matrix=out, provenance=provenance)
