"""Learned heuristic-measure networks: per-edge and per-item scoring."""

from .attention import (ItemNetConfig, decode_items, encode_items,
                        init_item_net, item_config_for, item_field,
                        load_item_net, save_item_net)
from .gnn import (GnnConfig, decode_edges, edge_config_for, edge_field,
                  edge_flat_index, embed, init_gnn, load_gnn, save_gnn)

__all__ = [
    "GnnConfig", "edge_config_for", "embed", "decode_edges", "edge_field",
    "edge_flat_index", "init_gnn", "save_gnn", "load_gnn",
    "ItemNetConfig", "item_config_for", "encode_items", "decode_items",
    "item_field", "init_item_net", "save_item_net", "load_item_net",
]
