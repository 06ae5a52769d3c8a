"""Item-scoring network: order-free self-attention over knapsack items.

Items carry no meaningful order, so the encoder uses plain multi-head
self-attention without any positional signal.  A per-item MLP maps the
final representations to measures in (0, 1); the dummy start item is
pinned at the floor since construction never selects it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import autodiff as ad
from ..problems import get_problem
from ..problems.base import EPS, HeuristicField, Instance
from .common import affine, create_affine, use_param

CHECKPOINT_KIND = "item-attention"


@dataclass(frozen=True)
class ItemNetConfig:
    """Encoder/decoder sizes; embedded in checkpoints for validation."""

    feat_dim: int
    n_layers: int = 3
    width: int = 32
    n_attn_heads: int = 2
    ffn_width: int = 128
    decoder_width: int = 32

    def __post_init__(self):
        if min(self.feat_dim, self.n_layers, self.ffn_width,
               self.decoder_width, self.n_attn_heads) < 1:
            raise ValueError("all sizes must be >= 1")
        if self.width % self.n_attn_heads != 0:
            raise ValueError(
                f"width {self.width} not divisible by "
                f"{self.n_attn_heads} attention heads")

    @property
    def head_width(self) -> int:
        return self.width // self.n_attn_heads


def item_config_for(inst: Instance, n_layers: int = 3,
               width: int = 32) -> ItemNetConfig:
    feats = get_problem("MKP").item_features(inst)
    return ItemNetConfig(feat_dim=feats.shape[1], n_layers=n_layers,
                         width=width, ffn_width=4 * width,
                         decoder_width=width)


def init_item_net(cfg: ItemNetConfig, store: ad.ParamStore, seed: int = 0):
    """Create all parameters in `store`, uniform in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    create_affine(store, rng, "in", cfg.feat_dim, cfg.width)
    for layer in range(cfg.n_layers):
        for head in range(cfg.n_attn_heads):
            for proj in ("q", "k", "v"):
                create_affine(store, rng, f"l{layer}/h{head}/{proj}",
                              cfg.width, cfg.head_width)
        create_affine(store, rng, f"l{layer}/out", cfg.width, cfg.width)
        create_affine(store, rng, f"l{layer}/ffn1", cfg.width, cfg.ffn_width)
        create_affine(store, rng, f"l{layer}/ffn2", cfg.ffn_width, cfg.width)
    create_affine(store, rng, "dec/1", cfg.width, cfg.decoder_width)
    create_affine(store, rng, "dec/2", cfg.decoder_width, cfg.decoder_width)
    create_affine(store, rng, "dec/3", cfg.decoder_width, 1)


def encode_items(inst: Instance, store: ad.ParamStore, cfg: ItemNetConfig,
                 tape: ad.Tape | None = None) -> ad.Tensor:
    """Self-attention stack over real items; returns (n, width) states.

    Post-norm residual wiring: x <- norm(x + attention), then
    x <- norm(x + feedforward).
    """
    if inst.kind != "MKP":
        raise ValueError(
            f"item encoder requires MKP instances, got {inst.kind}")
    feats = get_problem("MKP").item_features(inst)
    if feats.shape[1] != cfg.feat_dim:
        raise ad.ShapeError(
            f"instance items are {feats.shape[1]}-wide, "
            f"config expects {cfg.feat_dim}")
    x = affine(ad.Tensor(feats), store, "in", tape)
    scale = 1.0 / math.sqrt(cfg.head_width)
    for layer in range(cfg.n_layers):
        try:
            ctx = []
            for head in range(cfg.n_attn_heads):
                base = f"l{layer}/h{head}"
                q = affine(x, store, f"{base}/q", tape)
                k = affine(x, store, f"{base}/k", tape)
                v = affine(x, store, f"{base}/v", tape)
                scores = ad.mul_const(ad.matmul(q, ad.transpose(k)), scale)
                ctx.append(ad.matmul(ad.softmax_rows(scores), v))
            mixed = affine(ad.concat(ctx, axis=1), store,
                           f"l{layer}/out", tape)
            x = ad.feature_norm(ad.add(x, mixed))
            ff = ad.silu(affine(x, store, f"l{layer}/ffn1", tape))
            ff = affine(ff, store, f"l{layer}/ffn2", tape)
            x = ad.feature_norm(ad.add(x, ff))
        except ad.GradientError as exc:
            raise ad.GradientError(
                f"non-finite value in attention layer {layer}") from exc
    return x


def decode_items(x: ad.Tensor, store: ad.ParamStore, cfg: ItemNetConfig,
                 tape: ad.Tape | None = None) -> ad.Tensor:
    """Per-item desirability in (0, 1)."""
    z = ad.silu(affine(x, store, "dec/1", tape))
    z = ad.silu(affine(z, store, "dec/2", tape))
    out = ad.sigmoid(affine(z, store, "dec/3", tape))
    return ad.reshape(out, (x.shape[0],))


def item_field(inst: Instance, store: ad.ParamStore,
               cfg: ItemNetConfig) -> HeuristicField:
    """Learned per-item measures; entry 0 (dummy start) sits at the floor."""
    x = encode_items(inst, store, cfg)
    measures = decode_items(x, store, cfg)
    vec = np.empty(inst.graph_n)
    vec[0] = EPS
    vec[1:] = measures.values
    return HeuristicField(provenance="learned", vector=vec)


def save_item_net(path, store: ad.ParamStore, cfg: ItemNetConfig,
                  extra: dict | None = None):
    meta = {"net": CHECKPOINT_KIND, "config": asdict(cfg)}
    if extra:
        meta.update(extra)
    ad.save_checkpoint(path, store, meta)


def load_item_net(path) -> tuple[ad.ParamStore, ItemNetConfig]:
    values, meta = ad.load_checkpoint(path)
    if meta.get("net") != CHECKPOINT_KIND:
        raise ad.CheckpointError(
            f"checkpoint holds '{meta.get('net')}', "
            f"expected '{CHECKPOINT_KIND}'")
    cfg = ItemNetConfig(**meta["config"])
    store = ad.ParamStore()
    init_item_net(cfg, store, seed=0)
    missing = set(store.names()) - set(values)
    extra = set(values) - set(store.names())
    if missing or extra:
        raise ad.CheckpointError(
            f"parameter set mismatch: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}")
    store.load_values(values)
    return store, cfg
