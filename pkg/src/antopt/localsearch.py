"""2-opt local search and its perturbation-guided outer loop.

Refinement minimizes the true objective; the perturbation stage runs the
same operator on elementwise-inverted heuristic measures, pushing the tour
toward components the model rates highly before refining again.  The inner
move scan is a numba kernel restricted to sparsified neighbor lists with a
randomized scan order and first-improvement acceptance.

Tours are cyclic node arrays without a repeated endpoint.  Partial tours
(OP and PCTSP visit subsets) are supported: candidate moves only consider
nodes present in the tour, and an optional true-length cap keeps budget
feasibility intact during surrogate-guided perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .problems import EPS, ConstructionGraph, HeuristicField, Instance, get_problem

MOVE_EPS = 1e-12
UNLIMITED = np.iinfo(np.int64).max
TOUR_KINDS = ("TSP", "OP", "PCTSP")


class TourError(ValueError):
    """Input is not a valid tour over distinct nodes."""


@dataclass
class NlsConfig:
    t_nls: int = 10       # perturb/refine rounds after the initial refinement
    t_p: int = 20         # accepted surrogate moves per perturbation
    operator: str = "2-opt"

    def __post_init__(self):
        if self.t_nls < 0:
            raise ValueError("t_nls must be >= 0")
        if self.t_p < 1:
            raise ValueError("t_p must be >= 1")
        if self.operator != "2-opt":
            raise ValueError(f"unsupported operator '{self.operator}'")


@njit(cache=True)
def _tour_cost(tour, costs):
    total = 0.0
    n = tour.shape[0]
    for i in range(n):
        total += costs[tour[i], tour[(i + 1) % n]]
    return total


@njit(cache=True)
def _two_opt_core(tour, pos, costs, true_costs, indptr, indices, order,
                  max_moves, max_len, cur_len):
    """First-improvement 2-opt sweeps; returns (accepted moves, true length).

    `pos` maps node id -> tour position, -1 for nodes outside the tour.
    A move is accepted when it improves `costs` and keeps the `true_costs`
    tour length within `max_len`.
    """
    n = tour.shape[0]
    moves = 0
    improved = True
    while improved and moves < max_moves:
        improved = False
        for oi in range(n):
            pa = order[oi]
            a = tour[pa]
            b = tour[(pa + 1) % n]
            for e in range(indptr[a], indptr[a + 1]):
                c = indices[e]
                if c == a or c == b:
                    continue
                pc = pos[c]
                if pc < 0:
                    continue
                d = tour[(pc + 1) % n]
                if d == a:
                    continue
                delta = costs[a, c] + costs[b, d] - costs[a, b] - costs[c, d]
                if delta < -MOVE_EPS:
                    tdelta = (true_costs[a, c] + true_costs[b, d]
                              - true_costs[a, b] - true_costs[c, d])
                    if cur_len + tdelta > max_len:
                        continue
                    lo = (pa if pa < pc else pc) + 1
                    hi = pc if pa < pc else pa
                    while lo < hi:
                        ta, tb = tour[lo], tour[hi]
                        tour[lo], tour[hi] = tb, ta
                        pos[tb] = lo
                        pos[ta] = hi
                        lo += 1
                        hi -= 1
                    cur_len += tdelta
                    moves += 1
                    improved = True
                    break        # successor of position pa changed: rescan
            if moves >= max_moves:
                break
    return moves, cur_len


def _full_neighbor_csr(n: int):
    indices = np.concatenate([np.delete(np.arange(n), i) for i in range(n)])
    indptr = np.arange(n + 1, dtype=np.int64) * (n - 1)
    return indptr, indices.astype(np.int64)


def two_opt(seq, costs: np.ndarray, max_iters: int | None = None,
            graph: ConstructionGraph | None = None,
            rng: np.random.Generator | None = None,
            true_costs: np.ndarray | None = None,
            max_length: float = np.inf):
    """2-opt descent on a cyclic tour under an arbitrary symmetric cost field.

    `max_iters=None` runs to a local optimum.  Returns the improved tour;
    the input array is left untouched.
    """
    tour = np.asarray(seq, dtype=np.int64).copy()
    if len(np.unique(tour)) != len(tour):
        raise TourError("tour repeats a node")
    if tour.min() < 0 or tour.max() >= costs.shape[0]:
        raise TourError("tour references nodes outside the cost field")
    if len(tour) < 4:
        return tour                     # no non-degenerate 2-opt move exists
    n_all = costs.shape[0]
    if graph is not None:
        indptr, indices = graph.nbr_indptr, graph.nbr_indices
    else:
        indptr, indices = _full_neighbor_csr(n_all)
    pos = np.full(n_all, -1, dtype=np.int64)
    pos[tour] = np.arange(len(tour))
    order = (rng.permutation(len(tour)) if rng is not None
             else np.arange(len(tour))).astype(np.int64)
    tc = true_costs if true_costs is not None else costs
    cur = _tour_cost(tour, tc)
    limit = UNLIMITED if max_iters is None else int(max_iters)
    _two_opt_core(tour, pos, costs, tc, indptr, indices, order,
                  limit, max_length, cur)
    return tour


def random_perturb(seq, t_p: int, rng: np.random.Generator):
    """Apply `t_p` uniformly random segment reversals, ignoring cost."""
    tour = np.asarray(seq, dtype=np.int64).copy()
    n = len(tour)
    if n < 4:
        return tour
    for _ in range(t_p):
        i, j = sorted(rng.choice(n, size=2, replace=False))
        if j - i >= 1 and not (i == 0 and j == n - 1):
            tour[i + 1:j + 1] = tour[i + 1:j + 1][::-1]
    return tour


def perturbation_costs(eta: HeuristicField) -> np.ndarray:
    """Surrogate field for the perturbation stage: inverted, symmetrized."""
    m = eta.matrix
    sym = 0.5 * (m + m.T)
    return 1.0 / np.maximum(sym, EPS)


def nls(seq, inst: Instance, eta: HeuristicField, cfg: NlsConfig,
        graph: ConstructionGraph | None = None,
        rng: np.random.Generator | None = None,
        perturb: str = "neural"):
    """Refine, then alternate perturbation and refinement, keep the best.

    Returns (best tour, objective evaluations spent).  `perturb` selects the
    guided surrogate stage or the uniform-random ablation.
    """
    if perturb not in ("neural", "random"):
        raise ValueError(f"unknown perturbation mode '{perturb}'")
    if inst.kind not in TOUR_KINDS:
        raise TourError(f"2-opt search does not apply to {inst.kind}")
    prob = get_problem(inst.kind)
    rng = rng if rng is not None else np.random.default_rng(0)
    dist = inst.dist
    cap = inst.max_len if inst.kind == "OP" else np.inf
    surrogate = perturbation_costs(eta) if perturb == "neural" else None

    s = two_opt(seq, dist, None, graph, rng, max_length=cap)
    best = s
    best_f = _closed_objective(prob, inst, s)
    evals = 1
    for _ in range(cfg.t_nls):
        if perturb == "neural":
            s = two_opt(s, surrogate, cfg.t_p, graph, rng,
                        true_costs=dist, max_length=cap)
        else:
            s = random_perturb(s, cfg.t_p, rng)
            if cap < np.inf and _tour_cost(s, dist) > cap:
                s = best.copy()          # infeasible shuffle: restart from best
        s = two_opt(s, dist, None, graph, rng, max_length=cap)
        f = _closed_objective(prob, inst, s)
        evals += 1
        if f < best_f:
            best, best_f = s, f
    return best, evals


def _closed_objective(prob, inst: Instance, tour: np.ndarray) -> float:
    """Evaluate a cyclic tour, rotating the depot to the front where needed."""
    if inst.kind == "TSP":
        return float(prob.objective(inst, tour))
    start = int(np.nonzero(tour == 0)[0][0])
    return float(prob.objective(inst, np.roll(tour, -start)))


def refine_trajectory(inst: Instance, eta: HeuristicField, cfg: NlsConfig,
                      traj, graph: ConstructionGraph | None = None,
                      rng: np.random.Generator | None = None,
                      perturb: str = "neural",
                      vanilla: bool = False) -> int:
    """Local-search hook for the colony loop: rewrites `traj` in place.

    Returns objective evaluations spent per ant.  `vanilla=True` runs plain
    refinement without any perturbation rounds.
    """
    prob = get_problem(inst.kind)
    rng = rng if rng is not None else np.random.default_rng(0)
    evals = 0
    for a in range(traj.n_ants):
        tour = traj.seq[a, :traj.step[a]]
        if inst.kind in ("OP", "PCTSP") and tour[-1] == 0:
            tour = tour[:-1]
        if vanilla:
            cap = inst.max_len if inst.kind == "OP" else np.inf
            out = two_opt(tour, inst.dist, None, graph, rng, max_length=cap)
            used = 1
            f = _closed_objective(prob, inst, out)
        else:
            out, used = nls(tour, inst, eta, cfg, graph, rng, perturb)
            f = _closed_objective(prob, inst, out)
        if inst.kind != "TSP":
            start = int(np.nonzero(out == 0)[0][0])
            out = np.roll(out, -start)
        traj.seq[a, :len(out)] = out
        traj.seq[a, len(out):] = -1
        traj.step[a] = len(out)
        traj.objective[a] = f
        evals = used
    return evals
