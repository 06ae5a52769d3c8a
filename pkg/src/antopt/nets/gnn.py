"""Edge-scoring network for learned heuristic measures.

An anisotropic message-passing encoder with sigmoid edge gates embeds the
construction graph, then one MLP decoder per head maps every directed edge
to a desirability in (0, 1).  The forward runs on the project autodiff, so
the same code serves inference (no tape) and training (tape bound to the
parameter store).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import autodiff as ad
from ..problems import get_problem
from ..problems.base import EPS, ConstructionGraph, HeuristicField, Instance
from .common import affine, create_affine, uniform_init, use_param

CHECKPOINT_KIND = "edge-gnn"


@dataclass(frozen=True)
class GnnConfig:
    """Architecture knobs; embedded in checkpoints for shape validation."""

    node_dim: int
    edge_dim: int = 1
    n_layers: int = 3
    width: int = 32
    decoder_width: int = 32
    n_heads: int = 1

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.width < 2:
            raise ValueError(f"width must be >= 2, got {self.width}")
        if self.n_heads < 1:
            raise ValueError(f"n_heads must be >= 1, got {self.n_heads}")
        if min(self.node_dim, self.edge_dim, self.decoder_width) < 1:
            raise ValueError("feature and decoder widths must be >= 1")


def edge_config_for(inst: Instance, n_heads: int = 1, n_layers: int = 3,
               width: int = 32) -> GnnConfig:
    """Desk-scale default configuration sized to the instance's features."""
    nf = get_problem(inst.kind).node_features(inst)
    return GnnConfig(node_dim=nf.shape[1], n_layers=n_layers, width=width,
                     decoder_width=width, n_heads=n_heads)


def init_gnn(cfg: GnnConfig, store: ad.ParamStore, seed: int = 0):
    """Create all parameters in `store`, uniform in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    create_affine(store, rng, "in_node", cfg.node_dim, cfg.width)
    create_affine(store, rng, "in_edge", cfg.edge_dim, cfg.width)
    for layer in range(cfg.n_layers):
        # message-passing transforms carry no bias: the normalization that
        # follows them would absorb a shared offset anyway
        for w in ("U", "V", "P", "Q", "R"):
            store.create(f"l{layer}/{w}",
                         uniform_init(rng, cfg.width, (cfg.width, cfg.width)))
    for head in range(cfg.n_heads):
        create_affine(store, rng, f"dec{head}/1", 3 * cfg.width,
                      cfg.decoder_width)
        create_affine(store, rng, f"dec{head}/2", cfg.decoder_width,
                      cfg.decoder_width)
        create_affine(store, rng, f"dec{head}/3", cfg.decoder_width, 1)


def embed(inst: Instance, graph: ConstructionGraph, store: ad.ParamStore,
          cfg: GnnConfig, tape: ad.Tape | None = None):
    """Run the message-passing stack; returns (node, edge) embeddings.

    Node update: residual + SiLU(norm(U h_i + mean over neighbors j of
    sigmoid(e_ij) * V h_j)).  Edge update: residual + SiLU(norm(P e_ij +
    Q h_i + R h_j)).  Nodes with no edges keep a zero aggregate.
    """
    prob = get_problem(inst.kind)
    nf = np.asarray(prob.node_features(inst), dtype=np.float64)
    ea = np.asarray(prob.edge_attr(inst, graph), dtype=np.float64)
    if ea.ndim == 1:
        ea = ea[:, None]
    if nf.shape[1] != cfg.node_dim or ea.shape[1] != cfg.edge_dim:
        raise ad.ShapeError(
            f"instance features are ({nf.shape[1]}, {ea.shape[1]})-wide, "
            f"config expects ({cfg.node_dim}, {cfg.edge_dim})")
    h = affine(ad.Tensor(nf), store, "in_node", tape)
    e = affine(ad.Tensor(ea), store, "in_edge", tape)
    src, dst = graph.edge_src, graph.edge_dst
    for layer in range(cfg.n_layers):
        try:
            gate = ad.sigmoid(e)
            vh = ad.gather_rows(
                ad.matmul(h, use_param(store, f"l{layer}/V", tape)), dst)
            pooled = ad.segment_mean(ad.mul(gate, vh), src, graph.graph_n)
            uh = ad.matmul(h, use_param(store, f"l{layer}/U", tape))
            h_upd = ad.silu(ad.feature_norm(ad.add(uh, pooled)))
            pe = ad.matmul(e, use_param(store, f"l{layer}/P", tape))
            qh = ad.gather_rows(
                ad.matmul(h, use_param(store, f"l{layer}/Q", tape)), src)
            rh = ad.gather_rows(
                ad.matmul(h, use_param(store, f"l{layer}/R", tape)), dst)
            e_upd = ad.silu(ad.feature_norm(ad.add(ad.add(pe, qh), rh)))
            h = ad.add(h, h_upd)
            e = ad.add(e, e_upd)
        except ad.GradientError as exc:
            raise ad.GradientError(
                f"non-finite value in message-passing layer {layer}") from exc
    return h, e


def decode_edges(h: ad.Tensor, e: ad.Tensor, graph: ConstructionGraph,
                 store: ad.ParamStore, cfg: GnnConfig, head: int = 0,
                 tape: ad.Tape | None = None) -> ad.Tensor:
    """Per-edge desirability in (0, 1) for one decoder head.

    Each edge embedding is concatenated with both endpoint node embeddings
    before the three decoder stages (SiLU, SiLU, sigmoid).
    """
    if not 0 <= head < cfg.n_heads:
        raise ValueError(f"head {head} out of range, model has {cfg.n_heads}")
    hi = ad.gather_rows(h, graph.edge_src)
    hj = ad.gather_rows(h, graph.edge_dst)
    z = ad.concat([e, hi, hj], axis=1)
    z = ad.silu(affine(z, store, f"dec{head}/1", tape))
    z = ad.silu(affine(z, store, f"dec{head}/2", tape))
    out = ad.sigmoid(affine(z, store, f"dec{head}/3", tape))
    return ad.reshape(out, (graph.n_edges,))


def edge_flat_index(graph: ConstructionGraph) -> np.ndarray:
    """Flat (row-major) positions of the directed edges in a dense matrix."""
    return graph.edge_src.astype(np.int64) * graph.graph_n + graph.edge_dst


def edge_field(inst: Instance, graph: ConstructionGraph,
               store: ad.ParamStore, cfg: GnnConfig,
               head: int = 0) -> HeuristicField:
    """Dense learned measure matrix; off-graph entries sit at the floor."""
    h, e = embed(inst, graph, store, cfg)
    measures = decode_edges(h, e, graph, store, cfg, head)
    dense = np.full((graph.graph_n, graph.graph_n), EPS)
    dense.reshape(-1)[edge_flat_index(graph)] = measures.values
    name = "learned" if cfg.n_heads == 1 else f"learned-head-{head}"
    return HeuristicField(provenance=name, matrix=dense)


def save_gnn(path, store: ad.ParamStore, cfg: GnnConfig,
             extra: dict | None = None):
    meta = {"net": CHECKPOINT_KIND, "config": asdict(cfg)}
    if extra:
        meta.update(extra)
    ad.save_checkpoint(path, store, meta)


def load_gnn(path) -> tuple[ad.ParamStore, GnnConfig]:
    """Rebuild (store, config) from a checkpoint; shapes must match."""
    values, meta = ad.load_checkpoint(path)
    if meta.get("net") != CHECKPOINT_KIND:
        raise ad.CheckpointError(
            f"checkpoint holds '{meta.get('net')}', "
            f"expected '{CHECKPOINT_KIND}'")
    cfg = GnnConfig(**meta["config"])
    store = ad.ParamStore()
    init_gnn(cfg, store, seed=0)
    missing = set(store.names()) - set(values)
    extra = set(values) - set(store.names())
    if missing or extra:
        raise ad.CheckpointError(
            f"parameter set mismatch: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}")
    store.load_values(values)
    return store, cfg
