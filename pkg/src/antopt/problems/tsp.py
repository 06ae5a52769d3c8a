"""Traveling salesman: shortest cyclic tour over all nodes."""

from __future__ import annotations

import numpy as np

from .base import (EPS, BatchState, ConstructionGraph, HeuristicField,
                   InfeasibleSolutionError, Instance, Problem, _mark,
                   build_graph, default_k, full_distance_matrix)


class Tsp(Problem):
    kind = "TSP"

    def generate(self, n: int, seed: int, **kw) -> Instance:
        rng = np.random.default_rng(seed)
        coords = rng.random((n, 2))
        return Instance(kind=self.kind, n=n, seed=seed, coords=coords,
                        dist=full_distance_matrix(coords))

    def build_graph(self, inst, k=None):
        return build_graph(inst.dist, k if k is not None else default_k(inst.n))

    def init_state(self, inst, n_ants, rng=None):
        # A tour is a cycle, so the entry node is arbitrary; spreading ants
        # over random starts keeps batches diverse even under a sharp field.
        n = inst.n
        if rng is None:
            starts = np.zeros(n_ants, dtype=np.int64)
        else:
            starts = rng.integers(0, n, size=n_ants)
        rows = np.arange(n_ants)
        visited = np.zeros((n_ants, n), dtype=bool)
        visited[rows, starts] = True
        seq = np.full((n_ants, n), -1, dtype=np.int64)
        seq[rows, 0] = starts
        return BatchState(kind=self.kind, graph_n=n,
                          cur=starts.astype(np.int64),
                          visited=visited,
                          done=np.zeros(n_ants, dtype=bool),
                          seq=seq, step=np.ones(n_ants, dtype=np.int64))

    def feasible_mask(self, inst, graph, state):
        unvisited = ~state.visited
        mask = unvisited & graph.nbr_mask[state.cur]
        # sparsified neighborhood exhausted: any unvisited node is allowed
        empty = ~mask.any(axis=1) & ~state.done
        if empty.any():
            mask[empty] = unvisited[empty]
        mask[state.done] = False
        return mask

    def advance(self, inst, state, choice):
        active = choice >= 0
        _mark(state, active, choice)
        state.done |= state.step >= inst.n

    def objective(self, inst, seq):
        seq = np.asarray(seq, dtype=np.int64)
        if sorted(seq.tolist()) != list(range(inst.n)):
            raise InfeasibleSolutionError(
                f"TSP tour must visit each of {inst.n} nodes exactly once")
        return float(inst.dist[seq, np.roll(seq, -1)].sum())

    def objective_batch(self, inst, seq, steps):
        return inst.dist[seq, np.roll(seq, -1, axis=1)].sum(axis=1)

    def expert_heuristic(self, inst, model="edges"):
        eta = 1.0 / np.maximum(inst.dist, EPS)
        np.fill_diagonal(eta, EPS)
        return HeuristicField(provenance="expert", matrix=eta)

    def node_features(self, inst):
        return inst.coords.copy()

    def edge_attr(self, inst, graph):
        return inst.dist[graph.edge_src, graph.edge_dst]
