"""Problem suite: TSP, OP, PCTSP, SMTWTP, MKP behind one interface."""

from __future__ import annotations

import numpy as np

from .base import (EPS, EPS_DEPOSIT, FEAS_TOL, BatchState, ConstructionGraph,
                   HeuristicField, InfeasibleSolutionError, Instance, Problem,
                   default_k)
from .dataset import DatasetError, load_dataset, save_dataset
from .mkp import Mkp
from .op import Op
from .pctsp import Pctsp
from .smtwtp import Smtwtp
from .tsp import Tsp

PROBLEMS: dict[str, Problem] = {
    p.kind: p for p in (Tsp(), Op(), Pctsp(), Smtwtp(), Mkp())
}


def get_problem(kind: str) -> Problem:
    try:
        return PROBLEMS[kind]
    except KeyError:
        raise ValueError(f"unsupported problem kind '{kind}'") from None


def generate_instance(kind: str, n: int, seed: int, **kw) -> Instance:
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    return get_problem(kind).generate(n, seed, **kw)


def sparsify(inst: Instance, k: int | None = None) -> ConstructionGraph:
    return get_problem(inst.kind).build_graph(inst, k)


def feasible_components(inst: Instance, graph: ConstructionGraph,
                        state: BatchState, ant: int = 0) -> np.ndarray:
    """Indices of components ant `ant` may select next."""
    mask = get_problem(inst.kind).feasible_mask(inst, graph, state)
    return np.nonzero(mask[ant])[0]


def objective(inst: Instance, seq) -> float:
    return get_problem(inst.kind).objective(inst, np.asarray(seq))


def expert_heuristic(inst: Instance, model: str = "edges") -> HeuristicField:
    return get_problem(inst.kind).expert_heuristic(inst, model)


__all__ = [
    "EPS", "EPS_DEPOSIT", "FEAS_TOL", "BatchState", "ConstructionGraph",
    "DatasetError", "HeuristicField", "InfeasibleSolutionError", "Instance",
    "Problem", "PROBLEMS", "default_k", "expert_heuristic",
    "feasible_components", "generate_instance", "get_problem", "load_dataset",
    "objective", "save_dataset", "sparsify",
]
