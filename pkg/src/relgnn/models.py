"""Message-passing classifiers over batched datapoints: GCN, GIN, GAT, per-type (ER) variants, PoolMLP."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encode import NodeTypeEncoder, encode_node
from .graph import FORWARD, REVERSE, SELF_LOOP, EdgeType
from .rdb import Database
from .sampler import Datapoint
from .tensor import (
    RngStream,
    Tensor,
    add,
    concat,
    cross_entropy,
    dropout,
    embedding_lookup,
    init_embedding,
    init_weight,
    leaky_relu,
    matmul,
    multiply,
    relu,
    segment_mean,
    segment_softmax,
    segment_sum,
    sigmoid,
)

__all__ = ["ModelConfig", "GraphSchema", "GraphBatch", "build_batch", "Model", "VARIANTS"]

VARIANTS = ("gcn", "gin", "gat", "ergcn", "ergin", "ergat", "poolmlp")

DEFAULT_ROUNDS = {"gcn": 1, "ergcn": 1, "gin": 2, "gat": 2, "ergin": 2, "ergat": 2, "poolmlp": 0}


@dataclass
class ModelConfig:
    variant: str
    hidden: int = 32
    rounds: int | None = None  # None picks the per-variant default
    dropout: float = 0.5
    heads: int = 1
    gin_eps: float = 0.0
    gin_train_eps: bool = False
    classes: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.hidden <= 0:
            raise ValueError("hidden width must be positive")
        if self.variant in ("gat", "ergat") and self.hidden % self.heads != 0:
            raise ValueError("hidden width must divide evenly across heads")

    @property
    def resolved_rounds(self) -> int:
        rounds = DEFAULT_ROUNDS[self.variant] if self.rounds is None else self.rounds
        if self.variant != "poolmlp" and rounds < 1:
            raise ValueError("message-passing variants need rounds >= 1")
        return rounds

    def to_json_dict(self) -> dict:
        return {
            "variant": self.variant,
            "hidden": self.hidden,
            "rounds": self.resolved_rounds,
            "dropout": self.dropout,
            "heads": self.heads,
            "gin_eps": self.gin_eps,
            "gin_train_eps": self.gin_train_eps,
            "classes": self.classes,
        }


@dataclass
class GraphSchema:
    """What the parameter shapes depend on: per-type input widths and the possible edge types."""

    input_widths: list[int]
    cat_specs: list[list[tuple[int, int, int]]]  # per table: (column, rows incl null slot, dim)
    edge_types: list[EdgeType]

    @classmethod
    def from_database(cls, db: Database, encoders: list[NodeTypeEncoder], reverse_edges: bool = True) -> "GraphSchema":
        widths = [enc.input_width for enc in encoders]
        cat_specs = []
        for enc in encoders:
            specs = []
            for ci in enc.cat_columns:
                cat = enc.categorical[ci]
                specs.append((ci, cat.cardinality + 1, cat.embedding_dim))
            cat_specs.append(specs)
        edge_types = []
        for ti, table in enumerate(db.tables):
            for ci, col in enumerate(table.columns):
                if col.kind.tag == "foreign_key":
                    edge_types.append(EdgeType(ti, ci, FORWARD))
                    if reverse_edges:
                        edge_types.append(EdgeType(ti, ci, REVERSE))
            edge_types.append(EdgeType(ti, -1, SELF_LOOP))
        return cls(widths, cat_specs, sorted(edge_types))


@dataclass
class GraphBatch:
    num_nodes: int
    num_graphs: int
    node_type: np.ndarray  # (N,)
    graph_id: np.ndarray  # (N,)
    types_present: list[int]
    type_rows: dict[int, np.ndarray]  # type -> batch positions, ascending
    dense: dict[int, np.ndarray]  # type -> (n_t, dense width)
    cats: dict[int, np.ndarray]  # type -> (n_t, #categorical columns)
    scatter: np.ndarray  # (N,) batch position -> row of the type-major concatenation
    edges: dict[EdgeType, tuple[np.ndarray, np.ndarray]]
    labels: np.ndarray  # (B,)
    target_positions: np.ndarray  # (B,) batch position of each datapoint's target node


def build_batch(datapoints: list[Datapoint], db: Database, encoders: list[NodeTypeEncoder],
                cache: dict | None = None) -> GraphBatch:
    if not datapoints:
        raise ValueError("empty batch")
    node_type = np.concatenate([dp.node_types for dp in datapoints])
    sizes = [dp.num_nodes for dp in datapoints]
    offsets = np.cumsum([0] + sizes)
    graph_id = np.concatenate([np.full(n, i, dtype=np.int64) for i, n in enumerate(sizes)])

    edges: dict[EdgeType, tuple[np.ndarray, np.ndarray]] = {}
    pieces: dict[EdgeType, list[tuple[np.ndarray, np.ndarray]]] = {}
    for i, dp in enumerate(datapoints):
        for et, (src, dst) in dp.edges.items():
            pieces.setdefault(et, []).append((src + offsets[i], dst + offsets[i]))
    for et in sorted(pieces):
        srcs, dsts = zip(*pieces[et])
        edges[et] = (np.concatenate(srcs), np.concatenate(dsts))

    types_present = sorted(set(int(t) for t in node_type))
    type_rows = {t: np.nonzero(node_type == t)[0].astype(np.int64) for t in types_present}
    scatter = np.empty(len(node_type), dtype=np.int64)
    cursor = 0
    for t in types_present:
        rows = type_rows[t]
        scatter[rows] = np.arange(cursor, cursor + len(rows))
        cursor += len(rows)

    dense: dict[int, np.ndarray] = {}
    cats: dict[int, np.ndarray] = {}
    all_nodes = [nid for dp in datapoints for nid in dp.nodes]
    def _encoded(t: int, row: int):
        if cache is None:
            return encode_node(db, t, row, encoders[t])
        key = (t, row)
        hit = cache.get(key)
        if hit is None:
            hit = cache[key] = encode_node(db, t, row, encoders[t])
        return hit

    for t in types_present:
        rows = type_rows[t]
        encoded = [_encoded(t, all_nodes[p][1]) for p in rows]
        dense[t] = np.stack([e.dense for e in encoded]) if encoded else np.zeros((0, 0))
        cats[t] = np.stack([e.cat_indices for e in encoded])

    labels = np.array([dp.label if dp.label is not None else 0 for dp in datapoints], dtype=np.int64)
    target_positions = np.array([offsets[i] + dp.target_local for i, dp in enumerate(datapoints)], dtype=np.int64)
    return GraphBatch(
        int(len(node_type)), len(datapoints), node_type, graph_id, types_present, type_rows,
        dense, cats, scatter, edges, labels, target_positions,
    )


def _et_key(et: EdgeType) -> str:
    return f"et{et.table}_{et.column}_{et.direction}"


def _union(batch: GraphBatch, include_self: bool) -> tuple[np.ndarray, np.ndarray]:
    """Type-erased edge arrays, concatenated in sorted edge-type order, multiplicity kept."""
    srcs, dsts = [], []
    for et in sorted(batch.edges):
        if not include_self and et.direction == SELF_LOOP:
            continue
        src, dst = batch.edges[et]
        srcs.append(src)
        dsts.append(dst)
    if not srcs:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    return np.concatenate(srcs), np.concatenate(dsts)


def _gcn_coeff(batch: GraphBatch) -> dict[EdgeType, np.ndarray]:
    """Symmetric normalization 1/sqrt(deg(u) deg(v)) with degrees from the full union incl self-loops."""
    deg = np.zeros(batch.num_nodes)
    for et, (_, dst) in batch.edges.items():
        np.add.at(deg, dst, 1.0)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return {et: inv_sqrt[src] * inv_sqrt[dst] for et, (src, dst) in batch.edges.items()}


class Model:
    """Parameter container plus forward pass for one variant; all init flows from one seed."""

    def __init__(self, config: ModelConfig, schema: GraphSchema, seed: int = 0):
        self.config = config
        self.schema = schema
        self.params: dict[str, Tensor] = {}
        self._root = RngStream(seed)
        d = config.hidden
        for ti, width in enumerate(schema.input_widths):
            for ci, rows, dim in schema.cat_specs[ti]:
                self._param(f"emb/t{ti}c{ci}", (rows, dim), kind="embedding")
            if width == 0:
                self._param(f"init/t{ti}/const", (1, d), kind="zeros")
            else:
                hidden = 4 * width
                self._param(f"init/t{ti}/W1", (width, hidden))
                self._param(f"init/t{ti}/b1", (hidden,), kind="zeros")
                self._param(f"init/t{ti}/W2", (hidden, d))
                self._param(f"init/t{ti}/b2", (d,), kind="zeros")
        for layer in range(config.resolved_rounds):
            self._layer_params(layer)
        if config.variant == "poolmlp":
            self._param("pool/W1", (d, d))
            self._param("pool/b1", (d,), kind="zeros")
            self._param("pool/W2", (d, config.classes))
            self._param("pool/b2", (config.classes,), kind="zeros")
        else:
            self._param("readout/gate_W", (d, d))
            self._param("readout/gate_b", (d,), kind="zeros")
            self._param("readout/proj_W", (d, d))
            self._param("readout/proj_b", (d,), kind="zeros")
            self._param("readout/out_W", (d, config.classes))
            self._param("readout/out_b", (config.classes,), kind="zeros")

    def _param(self, name: str, shape: tuple[int, ...], kind: str = "weight") -> None:
        stream = self._root.child(name)
        if kind == "zeros":
            self.params[name] = Tensor(np.zeros(shape), requires_grad=True)
        elif kind == "embedding":
            self.params[name] = init_embedding(stream, *shape)
        else:
            self.params[name] = init_weight(stream, *shape)

    def _layer_params(self, layer: int) -> None:
        cfg = self.config
        d = cfg.hidden
        n_types = len(self.schema.input_widths)
        prefix = f"layer{layer}"
        if cfg.variant == "gcn":
            self._param(f"{prefix}/W", (d, d))
            self._param(f"{prefix}/b", (d,), kind="zeros")
        elif cfg.variant == "ergcn":
            for et in self.schema.edge_types:
                self._param(f"{prefix}/{_et_key(et)}/W", (d, d))
            self._param(f"{prefix}/bias_table", (n_types, d), kind="zeros")
        elif cfg.variant == "gin":
            self.params[f"{prefix}/eps"] = Tensor(np.asarray(cfg.gin_eps), requires_grad=cfg.gin_train_eps)
            self._param(f"{prefix}/W1", (d, d))
            self._param(f"{prefix}/b1", (d,), kind="zeros")
            self._param(f"{prefix}/W2", (d, d))
            self._param(f"{prefix}/b2", (d,), kind="zeros")
        elif cfg.variant == "ergin":
            self.params[f"{prefix}/eps_table"] = Tensor(
                np.full((n_types, 1), cfg.gin_eps), requires_grad=cfg.gin_train_eps
            )
            for ti in range(n_types):
                self._param(f"{prefix}/nt{ti}/W1", (d, d))
                self._param(f"{prefix}/nt{ti}/b1", (d,), kind="zeros")
                self._param(f"{prefix}/nt{ti}/W2", (d, d))
                self._param(f"{prefix}/nt{ti}/b2", (d,), kind="zeros")
        elif cfg.variant == "gat":
            dh = d // cfg.heads
            for head in range(cfg.heads):
                self._param(f"{prefix}/h{head}/W", (d, dh))
                self._param(f"{prefix}/h{head}/a1", (dh, 1))
                self._param(f"{prefix}/h{head}/a2", (dh, 1))
            self._param(f"{prefix}/b", (d,), kind="zeros")
        elif cfg.variant == "ergat":
            dh = d // cfg.heads
            for head in range(cfg.heads):
                for et in self.schema.edge_types:
                    self._param(f"{prefix}/h{head}/{_et_key(et)}/W", (d, dh))
                    self._param(f"{prefix}/h{head}/{_et_key(et)}/a1", (dh, 1))
                    self._param(f"{prefix}/h{head}/{_et_key(et)}/a2", (dh, 1))
            self._param(f"{prefix}/bias_table", (n_types, d), kind="zeros")

    # ----- forward pieces -------------------------------------------------

    def _init_hidden(self, batch: GraphBatch) -> Tensor:
        blocks = []
        for t in batch.types_present:
            rows = batch.type_rows[t]
            parts = []
            if batch.dense[t].shape[1]:
                parts.append(Tensor(batch.dense[t]))
            for j, (ci, _, _) in enumerate(self.schema.cat_specs[t]):
                parts.append(embedding_lookup(self.params[f"emb/t{t}c{ci}"], batch.cats[t][:, j]))
            if not parts:
                ones = Tensor(np.ones((len(rows), 1)))
                blocks.append(matmul(ones, self.params[f"init/t{t}/const"]))
                continue
            x = parts[0] if len(parts) == 1 else concat(parts, axis=1)
            hidden = relu(add(matmul(x, self.params[f"init/t{t}/W1"]), self.params[f"init/t{t}/b1"]))
            blocks.append(add(matmul(hidden, self.params[f"init/t{t}/W2"]), self.params[f"init/t{t}/b2"]))
        stacked = blocks[0] if len(blocks) == 1 else concat(blocks, axis=0)
        return embedding_lookup(stacked, batch.scatter)

    def _node_type_rows(self, batch: GraphBatch, table: Tensor) -> Tensor:
        return embedding_lookup(table, batch.node_type)

    def _gcn_layer(self, layer: int, h: Tensor, batch: GraphBatch) -> Tensor:
        coeff = _gcn_coeff(batch)
        src, dst = _union(batch, include_self=True)
        coeff_all = np.concatenate([coeff[et] for et in sorted(batch.edges)])
        y = matmul(h, self.params[f"layer{layer}/W"])
        msg = multiply(embedding_lookup(y, src), Tensor(coeff_all[:, None]))
        agg = segment_sum(msg, dst, batch.num_nodes)
        return relu(add(agg, self.params[f"layer{layer}/b"]))

    def _ergcn_layer(self, layer: int, h: Tensor, batch: GraphBatch) -> Tensor:
        coeff = _gcn_coeff(batch)
        agg = None
        for et in sorted(batch.edges):
            src, dst = batch.edges[et]
            y = matmul(h, self.params[f"layer{layer}/{_et_key(et)}/W"])
            msg = multiply(embedding_lookup(y, src), Tensor(coeff[et][:, None]))
            part = segment_sum(msg, dst, batch.num_nodes)
            agg = part if agg is None else add(agg, part)
        bias = self._node_type_rows(batch, self.params[f"layer{layer}/bias_table"])
        return relu(add(agg, bias))

    def _gin_layer(self, layer: int, h: Tensor, batch: GraphBatch) -> Tensor:
        src, dst = _union(batch, include_self=False)
        neigh = segment_sum(embedding_lookup(h, src), dst, batch.num_nodes)
        scale = add(Tensor(1.0), self.params[f"layer{layer}/eps"])
        pre = add(multiply(h, scale), neigh)
        p = self.params
        hidden = relu(add(matmul(pre, p[f"layer{layer}/W1"]), p[f"layer{layer}/b1"]))
        return add(matmul(hidden, p[f"layer{layer}/W2"]), p[f"layer{layer}/b2"])

    def _ergin_layer(self, layer: int, h: Tensor, batch: GraphBatch) -> Tensor:
        src, dst = _union(batch, include_self=False)
        neigh = segment_sum(embedding_lookup(h, src), dst, batch.num_nodes)
        eps_rows = self._node_type_rows(batch, self.params[f"layer{layer}/eps_table"])
        scale = add(Tensor(1.0), eps_rows)
        pre = add(multiply(h, scale), neigh)
        blocks = []
        for t in batch.types_present:
            rows = batch.type_rows[t]
            p = self.params
            x = embedding_lookup(pre, rows)
            hidden = relu(add(matmul(x, p[f"layer{layer}/nt{t}/W1"]), p[f"layer{layer}/nt{t}/b1"]))
            blocks.append(add(matmul(hidden, p[f"layer{layer}/nt{t}/W2"]), p[f"layer{layer}/nt{t}/b2"]))
        stacked = blocks[0] if len(blocks) == 1 else concat(blocks, axis=0)
        return embedding_lookup(stacked, batch.scatter)

    def _gat_layer(self, layer: int, h: Tensor, batch: GraphBatch) -> Tensor:
        src, dst = _union(batch, include_self=True)
        heads = []
        for head in range(self.config.heads):
            p = self.params
            y = matmul(h, p[f"layer{layer}/h{head}/W"])
            s1 = matmul(y, p[f"layer{layer}/h{head}/a1"])  # destination term
            s2 = matmul(y, p[f"layer{layer}/h{head}/a2"])  # source term
            logits = leaky_relu(add(embedding_lookup(s1, dst), embedding_lookup(s2, src)), 0.2)
            alpha = segment_softmax(logits, dst, batch.num_nodes)
            msg = multiply(alpha, embedding_lookup(y, src))
            heads.append(segment_sum(msg, dst, batch.num_nodes))
        agg = heads[0] if len(heads) == 1 else concat(heads, axis=1)
        return sigmoid(add(agg, self.params[f"layer{layer}/b"]))

    def _ergat_layer(self, layer: int, h: Tensor, batch: GraphBatch) -> Tensor:
        types = sorted(batch.edges)
        dst_all = np.concatenate([batch.edges[et][1] for et in types])
        heads = []
        for head in range(self.config.heads):
            p = self.params
            ys = {}
            logit_parts = []
            for et in types:
                src, dst = batch.edges[et]
                key = f"layer{layer}/h{head}/{_et_key(et)}"
                y = matmul(h, p[f"{key}/W"])
                ys[et] = y
                s1 = matmul(y, p[f"{key}/a1"])
                s2 = matmul(y, p[f"{key}/a2"])
                logit_parts.append(leaky_relu(add(embedding_lookup(s1, dst), embedding_lookup(s2, src)), 0.2))
            logits = logit_parts[0] if len(logit_parts) == 1 else concat(logit_parts, axis=0)
            alpha = segment_softmax(logits, dst_all, batch.num_nodes)  # joint over the whole in-neighborhood
            agg = None
            start = 0
            for et in types:
                src, dst = batch.edges[et]
                stop = start + len(src)
                alpha_slice = embedding_lookup(alpha, np.arange(start, stop))
                msg = multiply(alpha_slice, embedding_lookup(ys[et], src))
                part = segment_sum(msg, dst, batch.num_nodes)
                agg = part if agg is None else add(agg, part)
                start = stop
            heads.append(agg)
        agg = heads[0] if len(heads) == 1 else concat(heads, axis=1)
        bias = self._node_type_rows(batch, self.params[f"layer{layer}/bias_table"])
        return sigmoid(add(agg, bias))

    def _readout(self, h: Tensor, batch: GraphBatch) -> Tensor:
        p = self.params
        gates = sigmoid(add(matmul(h, p["readout/gate_W"]), p["readout/gate_b"]))
        proj = add(matmul(h, p["readout/proj_W"]), p["readout/proj_b"])
        pooled = segment_sum(multiply(gates, proj), batch.graph_id, batch.num_graphs)
        return add(matmul(pooled, p["readout/out_W"]), p["readout/out_b"])

    def forward(self, batch: GraphBatch, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.config
        h = self._init_hidden(batch)
        if cfg.variant == "poolmlp":
            mean = segment_mean(h, batch.graph_id, batch.num_graphs)
            p = self.params
            hidden = relu(add(matmul(mean, p["pool/W1"]), p["pool/b1"]))
            hidden = dropout(hidden, cfg.dropout, train, rng)
            return add(matmul(hidden, p["pool/W2"]), p["pool/b2"])
        layer_fn = {
            "gcn": self._gcn_layer,
            "ergcn": self._ergcn_layer,
            "gin": self._gin_layer,
            "ergin": self._ergin_layer,
            "gat": self._gat_layer,
            "ergat": self._ergat_layer,
        }[cfg.variant]
        for layer in range(cfg.resolved_rounds):
            h = layer_fn(layer, h, batch)
            h = dropout(h, cfg.dropout, train, rng)
        return self._readout(h, batch)

    def loss(self, batch: GraphBatch, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return cross_entropy(self.forward(batch, train, rng), batch.labels)
