"""Ant-colony engine: stochastic construction and pheromone evolution.

Solutions are built for a whole batch of ants in lockstep (one vectorized
selection per step), sampling each component proportionally to
(tau+eps)^alpha * (eta+eps)^beta over the feasible set.  Supports the
classic Ant System update, its elitist variant, and MAX-MIN with bound
clamping, over either an edge pheromone matrix or an item vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .problems import (EPS, BatchState, ConstructionGraph, HeuristicField,
                       Instance, get_problem)

VARIANTS = ("AS", "Elitist", "MaxMin")


class ConstructionError(RuntimeError):
    """Feasible set exhausted on a problem that must reach completion."""


class DepositError(ValueError):
    """Deposit denominator not positive; update undefined."""


@dataclass
class AcoConfig:
    variant: str = "AS"
    n_ants: int = 20
    alpha: float = 1.0
    beta: float = 1.0
    rho: float = 0.1
    q: float = 1.0
    elitist_weight: int | None = None     # default: ceil(n_ants / 10)
    budget: int = 4000
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}'")
        if self.n_ants < 1:
            raise ValueError("n_ants must be >= 1")
        if not (0.0 < self.rho < 1.0):
            raise ValueError("rho must lie in (0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")

    @property
    def elitist_w(self) -> int:
        if self.elitist_weight is not None:
            return self.elitist_weight
        return math.ceil(self.n_ants / 10)


@dataclass
class PheromoneField:
    matrix: np.ndarray | None = None
    vector: np.ndarray | None = None
    tau_min: float | None = None
    tau_max: float | None = None

    @property
    def model(self) -> str:
        return "edges" if self.matrix is not None else "items"

    def dense(self) -> np.ndarray:
        return self.matrix if self.matrix is not None else self.vector


def init_pheromone(graph_n: int, model: str = "edges") -> PheromoneField:
    if model == "items":
        return PheromoneField(vector=np.ones(graph_n))
    return PheromoneField(matrix=np.ones((graph_n, graph_n)))


@dataclass
class StepRecord:
    """Flat per-step selection data for recomputing log-probs offline.

    `chosen_flat[t]` indexes the dense measure array for step-record t;
    `feas_flat` lists every feasible component of record t where
    `feas_rec == t`.  `ant` maps records to ants.
    """

    chosen_flat: np.ndarray
    ant: np.ndarray
    feas_flat: np.ndarray
    feas_rec: np.ndarray

    @property
    def n_records(self) -> int:
        return len(self.chosen_flat)


@dataclass
class Trajectory:
    """One constructed batch: sequences, exact log-probs, objectives."""

    seq: np.ndarray
    step: np.ndarray
    logp: np.ndarray
    objective: np.ndarray
    nls_objective: np.ndarray | None = None
    record: StepRecord | None = None

    @property
    def n_ants(self) -> int:
        return len(self.logp)


def _score_table(tau: PheromoneField, eta: HeuristicField,
                 alpha: float, beta: float) -> np.ndarray:
    """Dense (tau+eps)^a * (eta+eps)^b, computed once per construction.

    Both fields are frozen while a batch builds, so the powers never need
    to be redone per step.  Returns (n, n) for edge fields, (n,) for item
    vectors; a mixed pair broadcasts the vector across columns.
    """
    def powed(dense, exponent):
        base = dense + EPS
        return base if exponent == 1.0 else base ** exponent

    t = powed(tau.dense(), alpha)
    e = powed(eta.dense(), beta)
    if t.ndim == e.ndim:
        return t * e
    m, v = (t, e) if t.ndim == 2 else (e, t)
    return m * v[None, :]


def construct_batch(inst: Instance, graph: ConstructionGraph,
                    tau: PheromoneField, eta: HeuristicField,
                    cfg: AcoConfig, rng: np.random.Generator,
                    n_ants: int | None = None,
                    record: bool = False) -> Trajectory:
    """Build one batch of solutions by exact Eq-style roulette sampling."""
    prob = get_problem(inst.kind)
    A = cfg.n_ants if n_ants is None else n_ants
    state = prob.init_state(inst, A, rng)
    table = _score_table(tau, eta, cfg.alpha, cfg.beta)
    logp = np.zeros(A)
    rec_chosen, rec_ant, rec_feas, rec_rid = [], [], [], []
    rec_count = 0

    while True:
        mask = prob.feasible_mask(inst, graph, state)
        has_move = mask.any(axis=1)
        stuck = ~has_move & ~state.done
        if stuck.any():
            if prob.requires_completion():
                raise ConstructionError(
                    f"{inst.kind}: no feasible component for "
                    f"{int(stuck.sum())} ant(s) before completion")
            state.done[stuck] = True
        active = np.nonzero(~state.done)[0]
        if len(active) == 0:
            break

        mask_act = mask[active]
        if table.ndim == 2:
            w = table[state.cur[active]]
        else:
            w = np.broadcast_to(table, mask_act.shape)
        w = np.where(mask_act, w, 0.0)
        cum = np.cumsum(w, axis=1)
        total = cum[:, -1]
        r = rng.random(len(active)) * total
        col = (cum <= r[:, None]).sum(axis=1)
        chosen_w = w[np.arange(len(active)), col]
        logp[active] += np.log(chosen_w / total)

        if record:
            cur = state.cur[active]
            rows, cols = np.nonzero(mask_act)
            if eta.model == "edges":
                flat_chosen = cur * state.graph_n + col
                flat_feas = cur[rows] * state.graph_n + cols
            else:
                flat_chosen = col
                flat_feas = cols
            rec_chosen.append(flat_chosen)
            rec_ant.append(active.copy())
            rec_feas.append(flat_feas)
            rec_rid.append(rec_count + rows)
            rec_count += len(active)

        choice = np.full(A, -1, dtype=np.int64)
        choice[active] = col
        prob.advance(inst, state, choice)

    rec = None
    if record:
        rec = StepRecord(
            chosen_flat=np.concatenate(rec_chosen) if rec_chosen else np.zeros(0, np.int64),
            ant=np.concatenate(rec_ant) if rec_ant else np.zeros(0, np.int64),
            feas_flat=np.concatenate(rec_feas) if rec_feas else np.zeros(0, np.int64),
            feas_rec=np.concatenate(rec_rid) if rec_rid else np.zeros(0, np.int64))
    objective = prob.objective_batch(inst, state.seq, state.step)
    return Trajectory(seq=state.seq, step=state.step, logp=logp,
                      objective=objective, record=rec)


# ---------------------------------------------------------------------------
# pheromone updates
# ---------------------------------------------------------------------------

def solution_components(kind: str, seq: np.ndarray, step: int):
    """(src, dst) component pairs of one solution, or item ids for PH_items."""
    s = seq[:step]
    if kind == "TSP":
        src, dst = s, np.roll(s, -1)
    elif kind in ("OP", "PCTSP"):
        closed = s if s[-1] == 0 else np.concatenate((s, [0]))
        src, dst = closed[:-1], closed[1:]
    else:                                   # SMTWTP, MKP edge chains
        src, dst = s[:-1], s[1:]
    return src, dst


SYMMETRIC = {"TSP", "OP", "PCTSP"}


def _deposit(tau: PheromoneField, kind: str, seq: np.ndarray, step: int,
             amount: float):
    if tau.model == "items":
        items = seq[:step]
        np.add.at(tau.vector, items[items > 0], amount)
        return
    src, dst = solution_components(kind, seq, step)
    n = tau.matrix.shape[0]
    flat = src * n + dst
    if kind in SYMMETRIC:
        flat = np.concatenate((flat, dst * n + src))
    # each used component receives one deposit even if traversed twice
    tau.matrix.reshape(-1)[np.unique(flat)] += amount


def update_pheromone(tau: PheromoneField, traj: Trajectory, best_seq: np.ndarray,
                     best_step: int, best_f: float, cfg: AcoConfig,
                     inst: Instance, iteration: int) -> PheromoneField:
    """One evaporation + deposit cycle; mutates and returns `tau`."""
    prob = get_problem(inst.kind)
    dense = tau.dense()
    dense *= 1.0 - cfg.rho

    basis_best = float(prob.deposit_basis(np.asarray([best_f]))[0])
    if basis_best <= 0:
        raise DepositError(f"deposit basis {basis_best} for objective {best_f}")

    if cfg.variant in ("AS", "Elitist") and traj is not None:
        basis = prob.deposit_basis(traj.objective)
        if (basis <= 0).any():
            raise DepositError("non-positive deposit basis in batch")
        for a in range(traj.n_ants):
            _deposit(tau, inst.kind, traj.seq[a], int(traj.step[a]),
                     cfg.q / basis[a])
    if cfg.variant == "Elitist":
        _deposit(tau, inst.kind, best_seq, best_step,
                 cfg.elitist_w * cfg.q / basis_best)
    if cfg.variant == "MaxMin":
        # alternate deposits between iteration best and best so far
        if iteration % 2 == 0 and traj is not None:
            it_best = int(np.argmin(traj.objective))
            basis_it = float(prob.deposit_basis(
                traj.objective[it_best:it_best + 1])[0])
            if basis_it <= 0:
                raise DepositError("non-positive iteration-best basis")
            _deposit(tau, inst.kind, traj.seq[it_best],
                     int(traj.step[it_best]), cfg.q / basis_it)
        else:
            _deposit(tau, inst.kind, best_seq, best_step, cfg.q / basis_best)
        tau.tau_max = cfg.q / (cfg.rho * basis_best)
        tau.tau_min = tau.tau_max / (2.0 * dense.shape[0])
        np.clip(dense, tau.tau_min, tau.tau_max, out=dense)
    return tau


# ---------------------------------------------------------------------------
# evolution loops
# ---------------------------------------------------------------------------

@dataclass
class EvolutionLog:
    evaluations: list[int] = field(default_factory=list)
    best_objective: list[float] = field(default_factory=list)
    best_seq: np.ndarray | None = None
    best_step: int = 0

    def log(self, evals: int, best: float):
        self.evaluations.append(int(evals))
        self.best_objective.append(float(best))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("evaluations,best_objective\n")
            for e, b in zip(self.evaluations, self.best_objective):
                fh.write(f"{e},{b!r}\n")

    @staticmethod
    def from_csv(path) -> "EvolutionLog":
        log = EvolutionLog()
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "evaluations,best_objective":
                raise ValueError(f"{path}: unexpected header '{header}'")
            for line in fh:
                e, b = line.strip().split(",")
                log.log(int(e), float(b))
        return log


def _track_best(traj: Trajectory, log: EvolutionLog, best_f: float) -> float:
    a = int(np.argmin(traj.objective))
    if traj.objective[a] < best_f:
        best_f = float(traj.objective[a])
        log.best_seq = traj.seq[a, :traj.step[a]].copy()
        log.best_step = int(traj.step[a])
    return best_f


def run_colony(inst: Instance, graph: ConstructionGraph, eta: HeuristicField,
               cfg: AcoConfig, refine=None) -> EvolutionLog:
    """Full ACO evolution until the evaluation budget is spent.

    `refine(traj) -> extra_evals_per_ant` may replace sequences/objectives
    in place (local search); construction itself costs one evaluation per
    ant.  Logs one checkpoint per iteration.
    """
    tau = init_pheromone(inst.graph_n, eta.model)
    rng = np.random.default_rng(cfg.seed)
    log = EvolutionLog()
    best_f = np.inf
    evals = 0
    iteration = 0
    while evals < cfg.budget:
        traj = construct_batch(inst, graph, tau, eta, cfg, rng)
        evals += traj.n_ants
        if refine is not None:
            evals += refine(traj) * traj.n_ants
        best_f = _track_best(traj, log, best_f)
        update_pheromone(tau, traj, log.best_seq, log.best_step, best_f,
                         cfg, inst, iteration)
        log.log(evals, best_f)
        iteration += 1
    return log


def pure_sample(inst: Instance, graph: ConstructionGraph, eta: HeuristicField,
                cfg: AcoConfig, refine=None) -> EvolutionLog:
    """Same loop and budget accounting as run_colony, no pheromone updates."""
    tau = init_pheromone(inst.graph_n, eta.model)
    rng = np.random.default_rng(cfg.seed)
    log = EvolutionLog()
    best_f = np.inf
    evals = 0
    while evals < cfg.budget:
        traj = construct_batch(inst, graph, tau, eta, cfg, rng)
        evals += traj.n_ants
        if refine is not None:
            evals += refine(traj) * traj.n_ants
        best_f = _track_best(traj, log, best_f)
        log.log(evals, best_f)
    return log
