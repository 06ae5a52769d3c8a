"""Single-machine total weighted tardiness scheduling.

Job 0 is a zero-feature dummy so every real job can be scheduled first; a
solution is a processing order of all jobs.  Tardiness accumulates online
so the engine never replays sequences in its hot path.
"""

from __future__ import annotations

import numpy as np

from .base import (EPS, EPS_DEPOSIT, BatchState, HeuristicField,
                   InfeasibleSolutionError, Instance, Problem, _mark,
                   build_graph)


class Smtwtp(Problem):
    kind = "SMTWTP"

    def generate(self, n: int, seed: int, **kw) -> Instance:
        rng = np.random.default_rng(seed)
        due = np.concatenate(([0.0], n * rng.uniform(0.0, 1.0, size=n)))
        job_w = np.concatenate(([0.0], rng.uniform(0.0, 1.0, size=n)))
        proc = np.concatenate(([0.0], rng.uniform(0.0, 1.0, size=n)))
        # edge attribute <i,j> is the destination's processing time
        dist = np.broadcast_to(proc[None, :], (n + 1, n + 1)).copy()
        return Instance(kind=self.kind, n=n, seed=seed, due=due, proc=proc,
                        job_w=job_w, dist=dist)

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
                          clock=np.zeros(n_ants),
                          tardiness=np.zeros(n_ants))

    def feasible_mask(self, inst, graph, state):
        mask = ~state.visited
        mask[state.done] = False
        return mask

    def advance(self, inst, state, choice):
        active = choice >= 0
        idx = np.nonzero(active)[0]
        ch = choice[idx]
        state.clock[idx] += inst.proc[ch]
        late = np.maximum(0.0, state.clock[idx] - inst.due[ch])
        state.tardiness[idx] += inst.job_w[ch] * late
        _mark(state, active, choice)
        state.done |= state.step >= inst.graph_n

    def objective(self, inst, seq):
        seq = np.asarray(seq, dtype=np.int64)
        if seq[0] != 0 or sorted(seq.tolist()) != list(range(inst.graph_n)):
            raise InfeasibleSolutionError(
                "schedule must start at the dummy job and order every job once")
        clock = np.cumsum(inst.proc[seq])
        late = np.maximum(0.0, clock - inst.due[seq])
        return float((inst.job_w[seq] * late).sum())

    def objective_batch(self, inst, seq, steps):
        clock = np.cumsum(inst.proc[np.maximum(seq, 0)], axis=1)
        late = np.maximum(0.0, clock - inst.due[np.maximum(seq, 0)])
        return (inst.job_w[np.maximum(seq, 0)] * late * (seq >= 0)).sum(axis=1)

    def deposit_basis(self, f):
        # zero tardiness is a perfectly feasible optimum
        return np.maximum(f, EPS_DEPOSIT)

    def expert_heuristic(self, inst, model="edges"):
        eta = np.broadcast_to(
            1.0 / np.maximum(inst.due, EPS)[None, :],
            (inst.graph_n, inst.graph_n)).copy()
        eta[:, 0] = EPS
        np.fill_diagonal(eta, EPS)
        return HeuristicField(provenance="expert", matrix=np.maximum(eta, EPS))

    def node_features(self, inst):
        return np.stack([inst.due / max(inst.n, 1), inst.job_w], axis=1)

    def edge_attr(self, inst, graph):
        return inst.proc[graph.edge_dst]
