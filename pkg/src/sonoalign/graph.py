"""Per-sample bipartite lesion-attribute graphs and their encoding into
the text stream: typed mean-aggregation message passing, attention
pooling, cross-attention fusion, and the gated residual update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .taxonomy import TASK_IDS, TaxonomyCatalog

DIAG_TASK = "T3"
ATTR_TASKS = tuple(t for t in TASK_IDS if t != DIAG_TASK)


class GraphError(Exception):
    pass


class EmptyGraphError(GraphError):
    """Signals the caller to take the fusion bypass (no active nodes)."""


@dataclass(frozen=True)
class HeteroGraph:
    diag_nodes: tuple  # (task_id, label index), vocabulary-index order
    attr_nodes: tuple  # (task_id, label index), task order then label index
    edges: tuple  # (diag position, attr position), full bipartite

    @property
    def n_nodes(self):
        return len(self.diag_nodes) + len(self.attr_nodes)


def build_graph(record, catalog: TaxonomyCatalog) -> HeteroGraph:
    diag = tuple((DIAG_TASK, i) for i in sorted(record.label_set(DIAG_TASK)))
    attr = tuple((tid, i) for tid in ATTR_TASKS for i in sorted(record.label_set(tid)))
    edges = tuple((d, a) for d in range(len(diag)) for a in range(len(attr)))
    return HeteroGraph(diag, attr, edges)


def graph_from_labels(labels: dict, catalog: TaxonomyCatalog) -> HeteroGraph:
    """Same construction from a bare task->indices mapping (used for
    singleton prompt graphs)."""
    diag = tuple((DIAG_TASK, i) for i in sorted(labels.get(DIAG_TASK, ())))
    attr = tuple((tid, i) for tid in ATTR_TASKS for i in sorted(labels.get(tid, ())))
    edges = tuple((d, a) for d in range(len(diag)) for a in range(len(attr)))
    return HeteroGraph(diag, attr, edges)


def vocab_layout(catalog: TaxonomyCatalog):
    """Offset of each task's block in the flat node-embedding table."""
    offsets = {}
    pos = 0
    for tid in TASK_IDS:
        offsets[tid] = pos
        pos += catalog.task(tid).n_labels
    return offsets, pos


@dataclass
class GraphEncoderParams:
    emb: ad.Tensor  # V_total x D node embedding table
    w_self_diag: ad.Tensor  # D x D
    w_self_attr: ad.Tensor  # D x D
    w_attr_to_diag: ad.Tensor  # D x D, messages into diagnostic nodes
    w_diag_to_attr: ad.Tensor  # D x D, messages into attribute nodes
    w_pool: ad.Tensor  # D x D_a
    v_pool: ad.Tensor  # D_a x 1
    w_text: ad.Tensor  # D x D query projection
    w_graph: ad.Tensor  # D x D key/value projection
    w_out: ad.Tensor  # D x D output projection
    a_gate: ad.Tensor  # 1 x 1 pre-sigmoid gate
    ln_gain: ad.Tensor  # 1 x D
    ln_bias: ad.Tensor  # 1 x D
    heads: int = 4
    alpha_max: float = 0.2
    layers: int = 1
    ln_eps: float = 1e-5

    def named_parameters(self):
        return [
            ("graph.emb", self.emb),
            ("graph.w_self_diag", self.w_self_diag),
            ("graph.w_self_attr", self.w_self_attr),
            ("graph.w_attr_to_diag", self.w_attr_to_diag),
            ("graph.w_diag_to_attr", self.w_diag_to_attr),
            ("graph.w_pool", self.w_pool),
            ("graph.v_pool", self.v_pool),
            ("graph.w_text", self.w_text),
            ("graph.w_graph", self.w_graph),
            ("graph.w_out", self.w_out),
            ("graph.a_gate", self.a_gate),
            ("graph.ln_gain", self.ln_gain),
            ("graph.ln_bias", self.ln_bias),
        ]

    def alpha(self) -> ad.Tensor:
        return ad.scale(ad.sigmoid_elem(self.a_gate), self.alpha_max)


def _node_rows(graph, params, offsets):
    rows = []
    for tid, idx in graph.diag_nodes + graph.attr_nodes:
        rows.append(ad.row(params.emb, offsets[tid] + idx))
    return rows


def encode_nodes(graph: HeteroGraph, params: GraphEncoderParams,
                 catalog: TaxonomyCatalog, layers=None) -> ad.Tensor:
    """One or more layers of typed message passing:
    z_v = tanh(e_v W_self + mean_u(e_u) W_cross), messages crossing the
    bipartition; isolated nodes drop the message term. Rows come back
    diag-first in the graph's canonical node order."""
    if graph.n_nodes == 0:
        raise EmptyGraphError("no active nodes")
    layers = params.layers if layers is None else layers
    offsets, _ = vocab_layout(catalog)
    rows = _node_rows(graph, params, offsets)
    n_diag = len(graph.diag_nodes)
    for _ in range(layers):
        diag_rows = rows[:n_diag]
        attr_rows = rows[n_diag:]
        diag_mean = _row_mean(diag_rows)
        attr_mean = _row_mean(attr_rows)
        new_rows = []
        for e in diag_rows:
            z = ad.matmul(e, params.w_self_diag)
            if attr_rows:
                z = ad.add(z, ad.matmul(attr_mean, params.w_attr_to_diag))
            new_rows.append(ad.tanh_elem(z))
        for e in attr_rows:
            z = ad.matmul(e, params.w_self_attr)
            if diag_rows:
                z = ad.add(z, ad.matmul(diag_mean, params.w_diag_to_attr))
            new_rows.append(ad.tanh_elem(z))
        rows = new_rows
    return ad.concat_rows(rows)


def _row_mean(rows):
    if not rows:
        return None
    if len(rows) == 1:
        return rows[0]
    return ad.scale(ad.sum_elems(ad.concat_rows(rows), axis=0), 1.0 / len(rows))


def attention_pool(z: ad.Tensor, params: GraphEncoderParams) -> ad.Tensor:
    scores = ad.matmul(ad.tanh_elem(ad.matmul(z, params.w_pool)), params.v_pool)
    weights = ad.row_softmax(ad.transpose(scores))
    return ad.matmul(weights, z)


def fuse(t: ad.Tensor, graph_repr, params: GraphEncoderParams, mode="pooled") -> ad.Tensor:
    """Gated residual text enhancement. graph_repr is the pooled summary
    (mode='pooled') or the node matrix (mode='nodes'); None takes the
    empty-graph bypass layer_norm(t).

    In pooled mode the cross-attention has a single key, so the softmax
    weight is identically 1 and the attended value does not depend on t.
    """
    if graph_repr is None:
        return ad.layer_norm(t, params.ln_gain, params.ln_bias, params.ln_eps)
    d = t.shape[1]
    if d % params.heads != 0:
        raise GraphError(f"head count {params.heads} must divide D={d}")
    if mode == "pooled":
        h = ad.matmul(ad.matmul(graph_repr, params.w_graph), params.w_out)
    elif mode == "nodes":
        head_dim = d // params.heads
        q = ad.matmul(t, params.w_text)
        kv = ad.matmul(graph_repr, params.w_graph)
        pieces = []
        for head in range(params.heads):
            lo, hi = head * head_dim, (head + 1) * head_dim
            q_h = ad.slice_cols(q, lo, hi)
            k_h = ad.slice_cols(kv, lo, hi)
            scores = ad.scale(ad.matmul(q_h, ad.transpose(k_h)), 1.0 / np.sqrt(head_dim))
            attn = ad.row_softmax(scores)
            pieces.append(ad.matmul(attn, k_h))
        h = ad.matmul(ad.concat_cols(pieces), params.w_out)
    else:
        raise GraphError(f"unknown fusion mode {mode!r}")
    gated = ad.mul(params.alpha(), ad.tanh_elem(h))
    return ad.layer_norm(ad.add(t, gated), params.ln_gain, params.ln_bias, params.ln_eps)


def render_graph(graph: HeteroGraph, catalog: TaxonomyCatalog) -> str:
    """Deterministic text rendering for the inspection CLI."""
    lines = [f"nodes: {graph.n_nodes} "
             f"(diagnostic {len(graph.diag_nodes)}, attribute {len(graph.attr_nodes)})"]
    for kind, nodes in (("diag", graph.diag_nodes), ("attr", graph.attr_nodes)):
        for tid, idx in nodes:
            lines.append(f"  {kind} {tid}:{catalog.task(tid).labels[idx]}")
    lines.append(f"edges: {len(graph.edges)}")
    for d, a in graph.edges:
        dt, di = graph.diag_nodes[d]
        at, ai = graph.attr_nodes[a]
        lines.append(f"  {dt}:{catalog.task(dt).labels[di]} -- "
                     f"{at}:{catalog.task(at).labels[ai]}")
    return "\n".join(lines)


def render_dot(graph: HeteroGraph, catalog: TaxonomyCatalog) -> str:
    lines = ["graph lesion_attributes {"]
    for prefix, nodes in (("d", graph.diag_nodes), ("a", graph.attr_nodes)):
        for pos, (tid, idx) in enumerate(nodes):
            label = catalog.task(tid).labels[idx].replace('"', "'")
            lines.append(f'  {prefix}{pos} [label="{tid}:{label}"];')
    for d, a in graph.edges:
        lines.append(f"  d{d} -- a{a};")
    lines.append("}")
    return "\n".join(lines)
