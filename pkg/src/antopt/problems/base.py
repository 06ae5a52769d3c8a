"""Shared problem-suite types: instances, sparsified graphs, batch states.

Every problem exposes the same surface: a deterministic generator, a
construction graph, vectorized feasibility/advance for a batch of ants,
objectives under a minimize-everything sign convention, and an expert
heuristic measure.  Node 0 is the depot / dummy start wherever the problem
defines one; TSP fixes the start at city 0 (tours are cyclic, nothing lost).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-10           # floor for heuristic/pheromone positivity
EPS_DEPOSIT = 1e-6    # floor for deposit denominators (objectives can hit 0)
FEAS_TOL = 1e-9       # slack when validating budget/prize constraints


class InfeasibleSolutionError(ValueError):
    """A solution offered for evaluation violates a problem constraint."""


@dataclass
class Instance:
    kind: str
    n: int                       # decision-variable count (excludes depot/dummy)
    seed: int
    coords: np.ndarray | None = None      # (graph_n, 2) geometric problems
    dist: np.ndarray | None = None        # (graph_n, graph_n) pairwise attribute
    prizes: np.ndarray | None = None      # OP / PCTSP, depot entry 0
    penalties: np.ndarray | None = None   # PCTSP, depot entry 0
    max_len: float | None = None          # OP budget
    min_prize: float | None = None        # PCTSP constraint
    due: np.ndarray | None = None         # SMTWTP, dummy entry 0
    proc: np.ndarray | None = None        # SMTWTP processing times, dummy 0
    job_w: np.ndarray | None = None       # SMTWTP weights, dummy 0
    values: np.ndarray | None = None      # MKP (n+1,), dummy 0
    weights: np.ndarray | None = None     # MKP (m, n+1), dummy column 0
    capacities: np.ndarray | None = None  # MKP (m,)

    @property
    def graph_n(self) -> int:
        return self.n if self.kind == "TSP" else self.n + 1


@dataclass
class ConstructionGraph:
    """Sparsified neighborhood structure plus the directed edge list."""

    graph_n: int
    k: int
    knn: np.ndarray              # (graph_n, k_eff) nearest neighbors by distance
    nbr_indptr: np.ndarray       # CSR over the symmetrized union neighborhood
    nbr_indices: np.ndarray
    edge_src: np.ndarray         # directed edges of the union graph
    edge_dst: np.ndarray
    edge_id: np.ndarray          # (graph_n, graph_n) int32, -1 where absent
    nbr_mask: np.ndarray         # (graph_n, graph_n) bool union adjacency

    def neighbors(self, i: int) -> np.ndarray:
        return self.nbr_indices[self.nbr_indptr[i]:self.nbr_indptr[i + 1]]

    @property
    def n_edges(self) -> int:
        return len(self.edge_src)


@dataclass
class HeuristicField:
    """Per-component desirability: dense matrix (edge model) or item vector."""

    provenance: str                      # expert | learned | learned-head-<k>
    matrix: np.ndarray | None = None     # (graph_n, graph_n)
    vector: np.ndarray | None = None     # (graph_n,)

    @property
    def model(self) -> str:
        return "edges" if self.matrix is not None else "items"

    def dense(self) -> np.ndarray:
        return self.matrix if self.matrix is not None else self.vector


@dataclass
class BatchState:
    """Construction state for a batch of ants advancing in lockstep."""

    kind: str
    graph_n: int
    cur: np.ndarray                      # (A,) int64
    visited: np.ndarray                  # (A, graph_n) bool
    done: np.ndarray                     # (A,) bool
    seq: np.ndarray                      # (A, max_steps) int64, -1 padded
    step: np.ndarray                     # (A,) filled prefix length of seq
    traveled: np.ndarray | None = None   # OP / PCTSP tour length so far
    prize: np.ndarray | None = None      # PCTSP collected prize
    clock: np.ndarray | None = None      # SMTWTP completion time
    tardiness: np.ndarray | None = None  # SMTWTP accumulated objective
    residual: np.ndarray | None = None   # MKP (A, m) remaining capacities

    @property
    def n_ants(self) -> int:
        return len(self.cur)


def full_distance_matrix(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def default_k(n: int) -> int:
    """Neighborhood size by instance scale."""
    if n < 50:
        return 10
    if n < 200:
        return 20
    return 50


def build_graph(dist: np.ndarray, k: int, keep_node: int | None = None,
                directed_complete: bool = False) -> ConstructionGraph:
    """k-NN sparsification with symmetrized union closure.

    `keep_node` (the depot) is appended to every union neighborhood so
    return legs always exist.  `directed_complete` bypasses sparsification
    for the order-based problems.
    """
    n = dist.shape[0]
    if directed_complete or n - 1 <= k:
        nbr = ~np.eye(n, dtype=bool)
        order = np.argsort(dist + np.where(np.eye(n, dtype=bool), np.inf, 0.0),
                           axis=1)
        knn = order[:, :min(k, n - 1)]
    else:
        order = np.argsort(dist + np.where(np.eye(n, dtype=bool), np.inf, 0.0),
                           axis=1)
        knn = order[:, :k]
        nbr = np.zeros((n, n), dtype=bool)
        rows = np.repeat(np.arange(n), knn.shape[1])
        nbr[rows, knn.reshape(-1)] = True
        nbr |= nbr.T                      # union closure keeps 2-opt reachable
        if keep_node is not None:
            nbr[:, keep_node] = True
            nbr[keep_node, :] = True
        np.fill_diagonal(nbr, False)

    src, dst = np.nonzero(nbr)
    counts = nbr.sum(axis=1)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    edge_id = np.full((n, n), -1, dtype=np.int32)
    edge_id[src, dst] = np.arange(len(src), dtype=np.int32)
    return ConstructionGraph(
        graph_n=n, k=k, knn=knn.astype(np.int64),
        nbr_indptr=indptr, nbr_indices=dst.astype(np.int64),
        edge_src=src.astype(np.int64), edge_dst=dst.astype(np.int64),
        edge_id=edge_id, nbr_mask=nbr)


class Problem:
    """Interface each problem implements; instances hold no state."""

    kind: str = ""
    pheromone_models = ("edges",)

    def generate(self, n: int, seed: int, **kw) -> Instance:
        raise NotImplementedError

    def build_graph(self, inst: Instance, k: int | None = None) -> ConstructionGraph:
        raise NotImplementedError

    def init_state(self, inst: Instance, n_ants: int,
                   rng: np.random.Generator | None = None) -> BatchState:
        """Fresh batch state; rng only matters where the start is arbitrary."""
        raise NotImplementedError

    def feasible_mask(self, inst: Instance, graph: ConstructionGraph,
                      state: BatchState) -> np.ndarray:
        """(A, graph_n) bool; all-False rows for done ants."""
        raise NotImplementedError

    def advance(self, inst: Instance, state: BatchState, choice: np.ndarray):
        """Apply one chosen component per active ant (choice -1 = inactive)."""
        raise NotImplementedError

    def requires_completion(self) -> bool:
        """True when an empty feasible set mid-build is an error."""
        return True

    def objective(self, inst: Instance, seq: np.ndarray) -> float:
        """Validate feasibility and evaluate one solution (minimize)."""
        raise NotImplementedError

    def objective_batch(self, inst: Instance, seq: np.ndarray,
                        steps: np.ndarray) -> np.ndarray:
        """Evaluate trusted construction output without validation."""
        raise NotImplementedError

    def deposit_basis(self, f: np.ndarray) -> np.ndarray:
        """Denominator for pheromone deposits Q/basis; must be positive."""
        return f

    def expert_heuristic(self, inst: Instance, model: str = "edges") -> HeuristicField:
        raise NotImplementedError

    def node_features(self, inst: Instance) -> np.ndarray:
        raise NotImplementedError

    def edge_attr(self, inst: Instance, graph: ConstructionGraph) -> np.ndarray:
        """Per-edge scalar attribute aligned with graph.edge_src/dst."""
        raise NotImplementedError


def _mark(state: BatchState, active: np.ndarray, choice: np.ndarray):
    """Shared bookkeeping: visit, position and sequence update."""
    idx = np.nonzero(active)[0]
    ch = choice[idx]
    state.visited[idx, ch] = True
    state.cur[idx] = ch
    state.seq[idx, state.step[idx]] = ch
    state.step[idx] += 1
