"""Multiple knapsack: pick items maximizing value under m capacity rows.

Item 0 is a zero-value, zero-weight dummy used only as an unbiased start
for edge-based construction.  Construction ends when nothing fits, so the
empty feasible set is normal termination here.  Objective is negated value.
Supports both pheromone models: per-edge and per-item.
"""

from __future__ import annotations

import numpy as np

from .base import (EPS, EPS_DEPOSIT, FEAS_TOL, BatchState, HeuristicField,
                   InfeasibleSolutionError, Instance, Problem, _mark,
                   build_graph)


class Mkp(Problem):
    kind = "MKP"
    pheromone_models = ("edges", "items")

    def generate(self, n: int, seed: int, m: int = 5, **kw) -> Instance:
        rng = np.random.default_rng(seed)
        values = np.concatenate(([0.0], rng.uniform(0.0, 1.0, size=n)))
        weights = np.concatenate(
            (np.zeros((m, 1)), rng.uniform(0.0, 1.0, size=(m, n))), axis=1)
        lo = weights[:, 1:].max(axis=1)
        hi = weights[:, 1:].sum(axis=1)
        capacities = rng.uniform(lo, hi)
        # edge attribute <i,j> is the source item's value
        dist = np.broadcast_to(values[:, None], (n + 1, n + 1)).copy()
        return Instance(kind=self.kind, n=n, seed=seed, values=values,
                        weights=weights, capacities=capacities, dist=dist)

    def build_graph(self, inst, k=None):
        return build_graph(inst.dist, inst.graph_n - 1, directed_complete=True)

    def init_state(self, inst, n_ants, rng=None):
        gn = inst.graph_n
        visited = np.zeros((n_ants, gn), dtype=bool)
        visited[:, 0] = True
        seq = np.full((n_ants, gn), -1, dtype=np.int64)
        seq[:, 0] = 0
        return BatchState(kind=self.kind, graph_n=gn,
                          cur=np.zeros(n_ants, dtype=np.int64),
                          visited=visited,
                          done=np.zeros(n_ants, dtype=bool),
                          seq=seq, step=np.ones(n_ants, dtype=np.int64),
                          residual=np.tile(inst.capacities, (n_ants, 1)))

    def feasible_mask(self, inst, graph, state):
        fits = (inst.weights[None, :, :] <=
                state.residual[:, :, None] + FEAS_TOL).all(axis=1)
        mask = ~state.visited & fits
        mask[state.done] = False
        return mask

    def advance(self, inst, state, choice):
        active = choice >= 0
        idx = np.nonzero(active)[0]
        state.residual[idx] -= inst.weights[:, choice[idx]].T
        _mark(state, active, choice)

    def requires_completion(self):
        return False

    def objective(self, inst, seq):
        seq = np.asarray(seq, dtype=np.int64)
        items = seq[seq > 0]
        if len(np.unique(items)) != len(items):
            raise InfeasibleSolutionError("MKP selection repeats an item")
        load = inst.weights[:, items].sum(axis=1)
        if (load > inst.capacities + FEAS_TOL).any():
            i = int(np.argmax(load - inst.capacities))
            raise InfeasibleSolutionError(
                f"capacity row {i} exceeded: {load[i]:.6f} > "
                f"{inst.capacities[i]:.6f}")
        return float(-inst.values[items].sum())

    def objective_batch(self, inst, seq, steps):
        vals = np.where(seq > 0, inst.values[np.maximum(seq, 0)], 0.0)
        return -vals.sum(axis=1)

    def deposit_basis(self, f):
        return 1.0 / np.maximum(-f, EPS_DEPOSIT)

    def expert_heuristic(self, inst, model="edges"):
        per_item = inst.values / np.maximum(inst.weights.sum(axis=0), EPS)
        per_item = np.maximum(per_item, EPS)
        per_item[0] = EPS
        if model == "items":
            return HeuristicField(provenance="expert", vector=per_item)
        eta = np.broadcast_to(per_item[None, :],
                              (inst.graph_n, inst.graph_n)).copy()
        np.fill_diagonal(eta, EPS)
        return HeuristicField(provenance="expert", matrix=np.maximum(eta, EPS))

    def node_features(self, inst):
        return inst.weights.T.copy()

    def item_features(self, inst):
        """(n, m+1) per real item: value plus capacity-normalized weights."""
        norm_w = inst.weights[:, 1:] / inst.capacities[:, None]
        return np.concatenate((inst.values[1:, None], norm_w.T), axis=1)

    def edge_attr(self, inst, graph):
        return inst.values[graph.edge_src]
