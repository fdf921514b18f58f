"""Graph Transformer message passing over text-attributed graphs.

Covers virtual-query-node construction (the early query fusion path), the
structural encoding stack, and an operation counter used to check that the
encoder's work grows linearly in node count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .data import TextAttributedGraph, text_encode
from .tensor import Tensor


class EncoderError(ValueError):
    """Contract violation in encoder construction or forward pass."""


@dataclass
class EncodedGraph:
    """Node/edge states plus optional appended virtual query node."""

    node_states: Tensor              # (k or k+1, d)
    edge_index: tuple                # ((src, dst), ...)
    edge_states: Tensor              # (E, d)
    query_node_index: int | None = None

    @property
    def num_nodes(self) -> int:
        return self.node_states.data.shape[0]


class OpCounter:
    """Counts node-update operations executed by GNN layers."""

    def __init__(self):
        self.count = 0


class GraphTransformerLayer:
    """One attention layer over in-neighbors (plus self-loop) with edge features.

    score(i,j) = <Wq h_i, Wk h_j + We e_ji> / sqrt(d_h) per head; messages are
    attention-weighted (Wv h_j + We e_ji); heads concatenated, projected,
    residual-added and layer-normed. Edge states pass through unchanged.
    """

    def __init__(self, rng: np.random.Generator, d: int, heads: int):
        if d % heads != 0:
            raise EncoderError(f"embedding dim {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.d_head = d // heads
        # heads are stored column-blocked inside full d x d matrices
        self.w_query = T.uniform_init(rng, d, d, fan_in=d)
        self.w_key = T.uniform_init(rng, d, d, fan_in=d)
        self.w_value = T.uniform_init(rng, d, d, fan_in=d)
        self.w_edge = T.uniform_init(rng, d, d, fan_in=d)
        self.w_out = T.uniform_init(rng, d, d, fan_in=d)
        self.ln_gain = Tensor(np.ones(d), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(d), requires_grad=True)

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_query": self.w_query,
            f"{prefix}.w_key": self.w_key,
            f"{prefix}.w_value": self.w_value,
            f"{prefix}.w_edge": self.w_edge,
            f"{prefix}.w_out": self.w_out,
            f"{prefix}.ln_gain": self.ln_gain,
            f"{prefix}.ln_bias": self.ln_bias,
        }

    def attend(self, dst_states: Tensor, src_states: Tensor, edge_states: Tensor | None,
               src_idx: np.ndarray, dst_idx: np.ndarray, edge_row: np.ndarray,
               counter: OpCounter | None = None) -> Tensor:
        """Generic attention update of `dst_states` from `src_states`.

        edge_row indexes into edge_states with 0 reserved for the shared
        zero row (self-loops / no edge feature).
        """
        n_dst = dst_states.data.shape[0]
        q_all = T.matmul(dst_states, self.w_query)
        k_all = T.matmul(src_states, self.w_key)
        v_all = T.matmul(src_states, self.w_value)
        if edge_states is not None and edge_states.data.shape[0] > 0:
            e_all = T.matmul(edge_states, self.w_edge)
            e_pad = T.concat_rows([Tensor(np.zeros((1, self.d))), e_all])
            e_gather = T.gather_rows(e_pad, edge_row)
            keys = T.add(T.gather_rows(k_all, src_idx), e_gather)
            vals = T.add(T.gather_rows(v_all, src_idx), e_gather)
        else:
            keys = T.gather_rows(k_all, src_idx)
            vals = T.gather_rows(v_all, src_idx)
        queries = T.gather_rows(q_all, dst_idx)
        prod = T.mul(queries, keys)
        scores = T.scale(T.block_sum_cols(prod, self.d_head), 1.0 / math.sqrt(self.d_head))
        alpha = T.segment_softmax(scores, dst_idx, n_dst)
        weighted = T.mul(T.repeat_cols(alpha, self.d_head), vals)
        agg = T.segment_sum_rows(weighted, dst_idx, n_dst)
        out = T.matmul(agg, self.w_out)
        if counter is not None:
            counter.count += n_dst
        return T.layer_norm(T.add(dst_states, out), self.ln_gain, self.ln_bias)


def init_node_edge_states(graph: TextAttributedGraph, d: int) -> EncodedGraph:
    # Row i must hold node id i regardless of storage order: edge_index
    # addresses rows by node id.
    node_rows = np.stack([text_encode(text, d)
                          for _, text in sorted(graph.nodes)])
    if graph.edges:
        edge_rows = np.stack([text_encode(text, d) for _, _, text in graph.edges])
    else:
        edge_rows = np.zeros((0, d))
    edge_index = tuple((src, dst) for src, dst, _ in graph.edges)
    return EncodedGraph(node_states=Tensor(node_rows), edge_index=edge_index,
                        edge_states=Tensor(edge_rows))


def attach_query_node(eg: EncodedGraph, query_vec: Tensor, query_link: Tensor) -> EncodedGraph:
    """Append a virtual query node wired bidirectionally to every graph node.

    All query-link edges carry one shared learned edge embedding
    (`query_link`, shape (1, d)); there is no natural text for them.
    """
    if eg.query_node_index is not None:
        raise EncoderError("query node already attached")
    k = eg.num_nodes
    node_states = T.concat_rows([eg.node_states, query_vec])
    new_edges = []
    for i in range(k):
        new_edges.append((k, i))
        new_edges.append((i, k))
    edge_states = T.concat_rows([eg.edge_states, T.tile_rows(query_link, 2 * k)])
    return EncodedGraph(node_states=node_states,
                        edge_index=eg.edge_index + tuple(new_edges),
                        edge_states=edge_states,
                        query_node_index=k)


def _message_arrays(eg: EncodedGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flattened (src, dst, edge_row) arrays: self-loops first, then edges.

    edge_row is offset by one; 0 addresses the shared zero edge feature used
    by self-loops.
    """
    n = eg.num_nodes
    src = list(range(n))
    dst = list(range(n))
    erow = [0] * n
    for eid, (s, d) in enumerate(eg.edge_index):
        src.append(s)
        dst.append(d)
        erow.append(eid + 1)
    return (np.asarray(src, dtype=np.intp), np.asarray(dst, dtype=np.intp),
            np.asarray(erow, dtype=np.intp))


def gt_layer_forward(layer: GraphTransformerLayer, eg: EncodedGraph,
                     counter: OpCounter | None = None) -> EncodedGraph:
    src, dst, erow = _message_arrays(eg)
    updated = layer.attend(eg.node_states, eg.node_states, eg.edge_states,
                           src, dst, erow, counter=counter)
    return replace(eg, node_states=updated)


def run_gnn_query(eg: EncodedGraph, layers: list[GraphTransformerLayer],
                  counter: OpCounter | None = None) -> EncodedGraph:
    if eg.query_node_index is None:
        raise EncoderError("run_gnn_query requires an attached query node")
    for layer in layers:
        eg = gt_layer_forward(layer, eg, counter=counter)
    return eg


def run_gnn_graph(eg: EncodedGraph, layers: list[GraphTransformerLayer],
                  counter: OpCounter | None = None) -> EncodedGraph:
    for layer in layers:
        eg = gt_layer_forward(layer, eg, counter=counter)
    return eg


def count_encoder_ops(k: int, n: int, g: int, d: int = 16, heads: int = 2) -> int:
    """Node-update operations actually executed by the three GNN stages.

    Runs the query-fusion stage, the structural stage, and the pooling stage
    (g layers each) over a ring graph of k nodes with n pooling tokens and
    counts updated rows. Grows linearly in k for fixed n, g.
    """
    from .pooling import LgptParams, lgpt_pool  # local import to avoid a cycle

    if k < 1 or n < 1 or g < 0:
        raise EncoderError(f"count_encoder_ops: need k,n >= 1 and g >= 0, got {(k, n, g)}")
    if g == 0:
        return 0
    rng = np.random.default_rng(0)
    nodes = tuple((i, f"node {i}") for i in range(k))
    edges = tuple((i, (i + 1) % k, "next") for i in range(k))
    graph = TextAttributedGraph(nodes=nodes, edges=edges)
    counter = OpCounter()
    eg = init_node_edge_states(graph, d)
    query_link = Tensor(rng.normal(size=(1, d)) * 0.02, requires_grad=True)
    eg = attach_query_node(eg, Tensor(text_encode("count probe", d).reshape(1, d)), query_link)
    query_layers = [GraphTransformerLayer(rng, d, heads) for _ in range(g)]
    graph_layers = [GraphTransformerLayer(rng, d, heads) for _ in range(g)]
    eg = run_gnn_query(eg, query_layers, counter=counter)
    eg = run_gnn_graph(eg, graph_layers, counter=counter)
    lgpt = LgptParams.init(rng, n=n, d=d, heads=heads, num_layers=g)
    lgpt_pool(eg, lgpt, counter=counter)
    return counter.count
