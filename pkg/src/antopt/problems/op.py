"""Orienteering: maximize collected prize under a tour-length budget.

Node 0 is the depot.  A tour starts there, may end by selecting the depot
again, and every intermediate move keeps the return leg affordable.
Internally the objective is the negated prize so lower is better.
"""

from __future__ import annotations

import numpy as np

from .base import (EPS, EPS_DEPOSIT, FEAS_TOL, BatchState, HeuristicField,
                   InfeasibleSolutionError, Instance, Problem, _mark,
                   build_graph, default_k, full_distance_matrix)


def budget_for(n: int) -> float:
    if n <= 100:
        return 4.0
    if n <= 200:
        return 5.0
    return 6.0


class Op(Problem):
    kind = "OP"

    def generate(self, n: int, seed: int, **kw) -> Instance:
        rng = np.random.default_rng(seed)
        coords = rng.random((n + 1, 2))
        dist = full_distance_matrix(coords)
        d0 = dist[0, 1:]
        prizes = np.zeros(n + 1)
        prizes[1:] = (1.0 + np.floor(99.0 * d0 / d0.max())) / 100.0
        return Instance(kind=self.kind, n=n, seed=seed, coords=coords,
                        dist=dist, prizes=prizes,
                        max_len=kw.get("max_len", budget_for(n)))

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
                          traveled=np.zeros(n_ants))

    def feasible_mask(self, inst, graph, state):
        # node j reachable if traveled + d(cur,j) + d(j,0) fits the budget
        slack = inst.max_len + FEAS_TOL - state.traveled[:, None]
        reachable = inst.dist[state.cur] + inst.dist[:, 0][None, :] <= slack
        mask = ~state.visited & graph.nbr_mask[state.cur] & reachable
        mask[:, 0] = True                 # depot always terminates the tour
        mask[state.done] = False
        return mask

    def advance(self, inst, state, choice):
        active = choice >= 0
        idx = np.nonzero(active)[0]
        state.traveled[idx] += inst.dist[state.cur[idx], choice[idx]]
        _mark(state, active, choice)
        state.done[idx[choice[idx] == 0]] = True

    def requires_completion(self):
        return False

    def objective(self, inst, seq):
        seq = np.asarray(seq, dtype=np.int64)
        if len(seq) == 0 or seq[0] != 0:
            raise InfeasibleSolutionError("OP tour must start at the depot")
        inner = seq[1:]
        if len(inner) and inner[-1] == 0:
            inner = inner[:-1]
        if (inner == 0).any() or len(np.unique(inner)) != len(inner):
            raise InfeasibleSolutionError("OP tour revisits a node")
        closed = np.concatenate(([0], inner, [0]))
        length = inst.dist[closed[:-1], closed[1:]].sum()
        if length > inst.max_len + FEAS_TOL:
            raise InfeasibleSolutionError(
                f"OP tour length {length:.6f} exceeds budget {inst.max_len}")
        return float(-inst.prizes[inner].sum())

    def objective_batch(self, inst, seq, steps):
        prize = np.where(seq >= 0, inst.prizes[np.maximum(seq, 0)], 0.0)
        return -prize.sum(axis=1)

    def deposit_basis(self, f):
        return 1.0 / np.maximum(-f, EPS_DEPOSIT)

    def expert_heuristic(self, inst, model="edges"):
        eta = inst.prizes[None, :] / np.maximum(inst.dist, EPS)
        eta = np.maximum(eta, EPS)
        np.fill_diagonal(eta, EPS)
        return HeuristicField(provenance="expert", matrix=eta)

    def node_features(self, inst):
        return np.stack([inst.prizes, inst.dist[0]], axis=1)

    def edge_attr(self, inst, graph):
        return inst.dist[graph.edge_src, graph.edge_dst]
