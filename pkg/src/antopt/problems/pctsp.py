"""Prize-collecting TSP: tour length plus penalties for skipped nodes,
subject to a minimum collected prize of n/4.  Node 0 is the depot."""

from __future__ import annotations

import numpy as np

from .base import (EPS, FEAS_TOL, BatchState, HeuristicField,
                   InfeasibleSolutionError, Instance, Problem, _mark,
                   build_graph, default_k, full_distance_matrix)


def expected_tour_len(n: int) -> float:
    if n < 50:
        return 4.0
    if n < 250:
        return 8.0
    return 18.0


class Pctsp(Problem):
    kind = "PCTSP"

    def generate(self, n: int, seed: int, **kw) -> Instance:
        rng = np.random.default_rng(seed)
        coords = rng.random((n + 1, 2))
        prizes = np.zeros(n + 1)
        # redraw rarely fires (mean prize sum is n/2) but keeps instances valid
        while True:
            prizes[1:] = rng.uniform(0.0, 1.0, size=n)
            if prizes.sum() >= n / 4.0:
                break
        penalties = np.zeros(n + 1)
        penalties[1:] = rng.uniform(0.0, 3.0 * expected_tour_len(n) / (2.0 * n),
                                    size=n)
        return Instance(kind=self.kind, n=n, seed=seed, coords=coords,
                        dist=full_distance_matrix(coords), prizes=prizes,
                        penalties=penalties, min_prize=n / 4.0)

    def build_graph(self, inst, k=None):
        return build_graph(inst.dist, k if k is not None else default_k(inst.n),
                           keep_node=0)

    def init_state(self, inst, n_ants, rng=None):
        gn = inst.graph_n
        visited = np.zeros((n_ants, gn), dtype=bool)
        visited[:, 0] = True
        seq = np.full((n_ants, gn + 1), -1, dtype=np.int64)
        seq[:, 0] = 0
        return BatchState(kind=self.kind, graph_n=gn,
                          cur=np.zeros(n_ants, dtype=np.int64),
                          visited=visited,
                          done=np.zeros(n_ants, dtype=bool),
                          seq=seq, step=np.ones(n_ants, dtype=np.int64),
                          traveled=np.zeros(n_ants),
                          prize=np.zeros(n_ants))

    def feasible_mask(self, inst, graph, state):
        unvisited = ~state.visited
        mask = unvisited & graph.nbr_mask[state.cur]
        empty = ~mask.any(axis=1) & ~state.done & unvisited[:, 1:].any(axis=1)
        if empty.any():
            mask[empty] = unvisited[empty]
        # depot return only once the collected prize meets the constraint
        mask[:, 0] = state.prize >= inst.min_prize - FEAS_TOL
        mask[state.done] = False
        return mask

    def advance(self, inst, state, choice):
        active = choice >= 0
        idx = np.nonzero(active)[0]
        state.traveled[idx] += inst.dist[state.cur[idx], choice[idx]]
        state.prize[idx] += inst.prizes[choice[idx]]
        _mark(state, active, choice)
        state.done[idx[choice[idx] == 0]] = True

    def objective(self, inst, seq):
        seq = np.asarray(seq, dtype=np.int64)
        if len(seq) == 0 or seq[0] != 0:
            raise InfeasibleSolutionError("PCTSP tour must start at the depot")
        inner = seq[1:]
        if len(inner) and inner[-1] == 0:
            inner = inner[:-1]
        if (inner == 0).any() or len(np.unique(inner)) != len(inner):
            raise InfeasibleSolutionError("PCTSP tour revisits a node")
        prize = inst.prizes[inner].sum()
        if prize < inst.min_prize - FEAS_TOL:
            raise InfeasibleSolutionError(
                f"collected prize {prize:.6f} below minimum {inst.min_prize}")
        closed = np.concatenate(([0], inner, [0]))
        length = inst.dist[closed[:-1], closed[1:]].sum()
        skipped = np.setdiff1d(np.arange(1, inst.graph_n), inner)
        return float(length + inst.penalties[skipped].sum())

    def objective_batch(self, inst, seq, steps):
        nxt = np.roll(seq, -1, axis=1)
        last = steps - 1
        rows = np.arange(seq.shape[0])
        nxt[rows, last] = 0                       # close each tour at the depot
        valid = (seq >= 0) & (np.arange(seq.shape[1])[None, :] < steps[:, None])
        legs = np.where(valid,
                        inst.dist[np.maximum(seq, 0), np.maximum(nxt, 0)], 0.0)
        visited = np.zeros((seq.shape[0], inst.graph_n), dtype=bool)
        visited[np.broadcast_to(rows[:, None], seq.shape)[valid], seq[valid]] = True
        penalty = np.where(visited, 0.0, inst.penalties[None, :]).sum(axis=1)
        return legs.sum(axis=1) + penalty

    def expert_heuristic(self, inst, model="edges"):
        eta = inst.prizes[None, :] / np.maximum(inst.dist, EPS)
        eta = np.maximum(eta, EPS)
        np.fill_diagonal(eta, EPS)
        return HeuristicField(provenance="expert", matrix=eta)

    def node_features(self, inst):
        return np.stack([inst.prizes, inst.penalties], axis=1)

    def edge_attr(self, inst, graph):
        return inst.dist[graph.edge_src, graph.edge_dst]
