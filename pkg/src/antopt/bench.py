"""Experiment drivers: benchmark curves, hyperparameter grids, paired
evolution-vs-sampling comparisons, plus dataset/checkpoint plumbing.

Every command is a pure function of its RunSpec: all randomness flows
from its seeds, numbers are written with repr (shortest decimal
that round-trips), and input files are never modified, so re-running a
spec regenerates identical artifacts.  Instance-level runs fan out over
a process pool sized by the ANTOPT_WORKERS environment variable; the
parent process alone writes output files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from multiprocessing import Pool

import numpy as np

from . import autodiff as ad
from . import colony, localsearch, nets, problems, training
from .nets import attention, gnn

COMMANDS = ("generate", "train", "solve", "bench", "grid", "sampling-compare")
METHODS = ("aco-expert", "deepaco", "deepaco-multihead", "deepaco-topk",
           "deepaco-imitation")
WORKERS_ENV = "ANTOPT_WORKERS"

# extra-loss recipes bound to each trainable method name
TRAIN_RECIPES = {
    "deepaco": {},
    "deepaco-multihead": {"n_heads": 4, "lambda_kl": 0.05},
    "deepaco-topk": {"lambda_ent": 0.05, "top_k": 5},
    "deepaco-imitation": {"lambda_imit": 0.02},
}


class BenchError(ValueError):
    """Unusable run spec: unknown method, missing or mismatched inputs."""


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        workers = int(raw)
    except ValueError:
        workers = 0
    if workers < 1:
        raise BenchError(f"{WORKERS_ENV} must be a positive integer, got {raw!r}")
    return workers


@dataclass
class RunSpec:
    """One archivable experiment: command, problem, method(s), seeds, paths.

    Defaults follow the benchmark protocol (4K evaluation budget, 100
    held-out instances, Ant System with alpha = beta = 1).  `checkpoints`
    maps method names to checkpoint files; `checkpoint` is a shared
    fallback for single-method commands.
    """

    command: str = "solve"
    problem: str = "TSP"
    scale: int = 20
    methods: tuple = ("aco-expert",)
    budget: int = 4000
    seeds: tuple = (0,)
    out: str | None = None
    checkpoints: dict = field(default_factory=dict)
    checkpoint: str | None = None
    dataset: str | None = None
    index: int = 0
    n_instances: int = 100
    instance_seed: int = 1_000_000
    variant: str = "AS"
    n_ants: int = 20
    alpha: float = 1.0
    beta: float = 1.0
    rho: float = 0.1
    q: float = 1.0
    elitist_weight: int | None = None
    nls: bool = False
    perturb: str = "neural"
    vanilla_ls: bool = False
    alphas: tuple = (0.5, 1.0, 2.0, 3.0)
    decays: tuple = (0.8, 0.9, 0.95, 0.99)
    grid_instances: int = 2
    train: dict = field(default_factory=dict)
    model: str | None = None
    width: int = 32
    n_layers: int = 3
    log: str | None = None

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise BenchError(f"unknown command '{self.command}'")
        problems.get_problem(self.problem)
        self.methods = tuple(self.methods)
        if not self.methods:
            raise BenchError("spec names no methods")
        for m in self.methods:
            if m not in METHODS:
                raise BenchError(f"unknown method '{m}'")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise BenchError("seeds must be explicit and non-empty")
        self.alphas = tuple(float(a) for a in self.alphas)
        self.decays = tuple(float(d) for d in self.decays)
        for d in self.decays:
            if not 0.0 < d < 1.0:
                raise BenchError(f"decay {d} outside (0, 1)")
        if self.scale < 2:
            raise BenchError("scale must be >= 2")
        if self.budget < 1:
            raise BenchError("budget must be >= 1")
        if self.n_instances < 1 or self.grid_instances < 1:
            raise BenchError("instance counts must be >= 1")
        if self.perturb not in ("neural", "random"):
            raise BenchError(f"unknown perturbation mode '{self.perturb}'")
        if self.model not in (None, "edges", "items"):
            raise BenchError(f"unknown pheromone model '{self.model}'")


def run_seed(seed: int, index: int) -> int:
    """Distinct colony stream per (replicate seed, instance index)."""
    return seed * 1_000_003 + index


def _pheromone_model(spec: RunSpec) -> str:
    if spec.model is not None:
        return spec.model
    return "items" if spec.problem == "MKP" else "edges"


def _aco_kwargs(spec: RunSpec, seed: int) -> dict:
    return dict(variant=spec.variant, n_ants=spec.n_ants, alpha=spec.alpha,
                beta=spec.beta, rho=spec.rho, q=spec.q,
                elitist_weight=spec.elitist_weight, budget=spec.budget,
                seed=seed)


# ---------------------------------------------------------------------------
# checkpoint loading and heuristic fields
# ---------------------------------------------------------------------------

@dataclass
class LoadedNet:
    net: str
    store: ad.ParamStore
    cfg: object
    meta: dict


def load_net(path) -> LoadedNet:
    """Open either net checkpoint flavor, dispatching on its metadata."""
    _, meta = ad.load_checkpoint(path)
    kind = meta.get("net")
    if kind == gnn.CHECKPOINT_KIND:
        store, cfg = nets.load_gnn(path)
    elif kind == attention.CHECKPOINT_KIND:
        store, cfg = nets.load_item_net(path)
    else:
        raise ad.CheckpointError(f"{path}: unknown net kind {kind!r}")
    return LoadedNet(net=kind, store=store, cfg=cfg, meta=meta)


def require_net(spec: RunSpec, method: str) -> LoadedNet | None:
    if method == "aco-expert":
        return None
    path = spec.checkpoints.get(method) or spec.checkpoint
    if not path:
        raise BenchError(f"method '{method}' needs a trained checkpoint")
    bundle = load_net(path)
    trained_kind = bundle.meta.get("kind")
    if trained_kind is not None and trained_kind != spec.problem:
        raise BenchError(f"{path}: trained on {trained_kind}, "
                         f"spec asks for {spec.problem}")
    if bundle.net == attention.CHECKPOINT_KIND and spec.problem != "MKP":
        raise BenchError(f"{path}: per-item nets only score MKP instances")
    return bundle


def method_fields(spec: RunSpec, method: str, bundle: LoadedNet | None,
                  inst, graph) -> list:
    """Heuristic field(s) guiding construction for one method on one
    instance; the multihead method gets one field per decoder head."""
    if bundle is None:
        return [problems.expert_heuristic(inst, model=_pheromone_model(spec))]
    if bundle.net == gnn.CHECKPOINT_KIND:
        heads = bundle.cfg.n_heads if method == "deepaco-multihead" else 1
        return [nets.edge_field(inst, graph, bundle.store, bundle.cfg, head=k)
                for k in range(heads)]
    return [nets.item_field(inst, bundle.store, bundle.cfg)]


# ---------------------------------------------------------------------------
# evolution runners
# ---------------------------------------------------------------------------

def _evolve(inst, graph, flds, cfg, sample=False, nls=False,
            perturb="neural", vanilla=False):
    """One budgeted run; local search costs draw from their own stream so
    construction sampling stays aligned with the refinement-free runs."""
    refine = None
    if nls:
        if inst.kind not in localsearch.TOUR_KINDS:
            raise BenchError(f"local search supports {localsearch.TOUR_KINDS}")
        ncfg = localsearch.NlsConfig()
        lrng = np.random.default_rng([cfg.seed, 1])
        guide = flds[0]          # perturbation costs follow the lead field

        def refine(traj):
            return localsearch.refine_trajectory(inst, guide, ncfg, traj,
                                                 graph, lrng, perturb=perturb,
                                                 vanilla=vanilla)

    if len(flds) == 1:
        runner = colony.pure_sample if sample else colony.run_colony
        return runner(inst, graph, flds[0], cfg, refine=refine)
    return _evolve_multi(inst, graph, flds, cfg, refine, sample)


def _evolve_multi(inst, graph, flds, cfg, refine, sample):
    """Colony loop with the batch split as evenly as possible across
    fields, merged back into one trajectory per iteration for tracking
    and pheromone update."""
    counts = np.full(len(flds), cfg.n_ants // len(flds), dtype=int)
    counts[:cfg.n_ants % len(flds)] += 1
    if (counts == 0).any():
        raise BenchError(f"{len(flds)} fields need at least as many ants")
    tau = colony.init_pheromone(inst.graph_n, flds[0].model)
    rng = np.random.default_rng(cfg.seed)
    log = colony.EvolutionLog()
    best_f = np.inf
    evals = 0
    iteration = 0
    while evals < cfg.budget:
        parts = [colony.construct_batch(inst, graph, tau, f, cfg, rng,
                                        n_ants=int(c))
                 for f, c in zip(flds, counts)]
        traj = colony.Trajectory(
            seq=np.concatenate([p.seq for p in parts]),
            step=np.concatenate([p.step for p in parts]),
            logp=np.concatenate([p.logp for p in parts]),
            objective=np.concatenate([p.objective for p in parts]))
        evals += traj.n_ants
        if refine is not None:
            evals += refine(traj) * traj.n_ants
        best_f = colony._track_best(traj, log, best_f)
        if not sample:
            colony.update_pheromone(tau, traj, log.best_seq, log.best_step,
                                    best_f, cfg, inst, iteration)
        log.log(evals, best_f)
        iteration += 1
    return log


def _job_evolve(payload):
    inst, graph, flds, cfg_kw, opts = payload
    cfg = colony.AcoConfig(**cfg_kw)
    return _evolve(inst, graph, flds, cfg, **opts)


def _pmap(fn, payloads):
    workers = worker_count()
    if workers <= 1 or len(payloads) < 2:
        return [fn(p) for p in payloads]
    with Pool(processes=workers) as pool:
        return pool.map(fn, payloads)


# ---------------------------------------------------------------------------
# curves and CSV output
# ---------------------------------------------------------------------------

def curve_at(log: colony.EvolutionLog, at: np.ndarray) -> np.ndarray:
    """Best-so-far objective sampled at evaluation counts `at`.

    The log is a right-continuous step function; positions before the
    first checkpoint clamp to it.
    """
    ev = np.asarray(log.evaluations)
    idx = np.clip(np.searchsorted(ev, at, side="right") - 1, 0, len(ev) - 1)
    return np.asarray(log.best_objective)[idx]


def mean_curve(logs) -> tuple[np.ndarray, np.ndarray]:
    """Average best-so-far curve over runs, on the union of checkpoints."""
    grid = np.unique(np.concatenate(
        [np.asarray(l.evaluations) for l in logs]))
    rows = np.stack([curve_at(l, grid) for l in logs])
    return grid, rows.mean(axis=0)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _need_out(spec: RunSpec) -> str:
    if not spec.out:
        raise BenchError(f"command '{spec.command}' needs --out")
    return spec.out


def _held_out(spec: RunSpec, count: int) -> list:
    """Shared evaluation set: every method sees these exact instances."""
    if spec.dataset:
        instances = problems.load_dataset(spec.dataset)
        if len(instances) < count:
            raise BenchError(f"{spec.dataset}: holds {len(instances)} "
                             f"instances, spec needs {count}")
        for inst in instances[:count]:
            if inst.kind != spec.problem:
                raise BenchError(f"{spec.dataset}: {inst.kind} instances, "
                                 f"spec asks for {spec.problem}")
        return instances[:count]
    return [problems.generate_instance(spec.problem, spec.scale,
                                       seed=spec.instance_seed + i)
            for i in range(count)]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(spec: RunSpec) -> str:
    out = _need_out(spec)
    if not out.endswith(".npz"):
        out += ".npz"
    instances = _held_out(spec, spec.n_instances)
    problems.save_dataset(out, instances)
    return out


def trainer_config(spec: RunSpec) -> training.TrainerConfig:
    method = spec.methods[0]
    if method == "aco-expert":
        raise BenchError("aco-expert has no trainable parameters")
    kw = dict(TRAIN_RECIPES[method])
    kw["seed"] = spec.seeds[0]
    if "w_nls" not in spec.train:
        kw["w_nls"] = 9.0 if spec.problem in localsearch.TOUR_KINDS else 0.0
    kw.update(spec.train)
    if isinstance(kw.get("nls"), dict):
        kw["nls"] = localsearch.NlsConfig(**kw["nls"])
    return training.TrainerConfig(**kw)


def cmd_train(spec: RunSpec):
    out = _need_out(spec)
    tcfg = trainer_config(spec)
    log_path = spec.log or os.path.splitext(out)[0] + ".log.csv"
    store, net_cfg, history = training.train(
        spec.problem, spec.scale, tcfg, model=_pheromone_model(spec),
        checkpoint_path=out, log_path=log_path,
        width=spec.width, n_layers=spec.n_layers)
    return out, history


def cmd_solve(spec: RunSpec) -> dict:
    if spec.dataset:
        instances = problems.load_dataset(spec.dataset)
        if not 0 <= spec.index < len(instances):
            raise BenchError(f"index {spec.index} outside dataset "
                             f"of {len(instances)}")
        inst = instances[spec.index]
    else:
        inst = problems.generate_instance(spec.problem, spec.scale,
                                          seed=spec.instance_seed)
    graph = problems.sparsify(inst)
    method = spec.methods[0]
    bundle = require_net(spec, method)
    flds = method_fields(spec, method, bundle, inst, graph)
    cfg = colony.AcoConfig(**_aco_kwargs(spec, spec.seeds[0]))
    log = _evolve(inst, graph, flds, cfg, nls=spec.nls,
                  perturb=spec.perturb, vanilla=spec.vanilla_ls)
    if spec.out:
        log.to_csv(spec.out)
    return {"objective": log.best_objective[-1],
            "solution": log.best_seq.tolist(),
            "evaluations": log.evaluations[-1],
            "iterations": len(log.evaluations)}


def _run_opts(spec: RunSpec, sample: bool) -> dict:
    return dict(sample=sample, nls=spec.nls, perturb=spec.perturb,
                vanilla=spec.vanilla_ls)


def cmd_bench(spec: RunSpec) -> list[dict]:
    """Evolution curves per method over a shared held-out set.

    Writes one EvolutionLog CSV per (method, seed, instance) and a
    summary of per-seed mean curves; returns the summary rows.
    """
    out = _need_out(spec)
    os.makedirs(out, exist_ok=True)
    instances = _held_out(spec, spec.n_instances)
    graphs = [problems.sparsify(inst) for inst in instances]
    summary = []
    for method in spec.methods:
        bundle = require_net(spec, method)
        flds = [method_fields(spec, method, bundle, inst, g)
                for inst, g in zip(instances, graphs)]
        for seed in spec.seeds:
            payloads = [(inst, g, f, _aco_kwargs(spec, run_seed(seed, i)),
                         _run_opts(spec, sample=False))
                        for i, (inst, g, f)
                        in enumerate(zip(instances, graphs, flds))]
            logs = _pmap(_job_evolve, payloads)
            for i, lg in enumerate(logs):
                lg.to_csv(os.path.join(out, f"{method}_s{seed}_i{i:03d}.csv"))
            grid, means = mean_curve(logs)
            summary.extend(
                {"method": method, "seed": seed, "evaluations": int(e),
                 "mean_best": float(m)} for e, m in zip(grid, means))
    _write_csv(os.path.join(out, "summary.csv"),
               ("method", "seed", "evaluations", "mean_best"),
               [(r["method"], r["seed"], r["evaluations"], r["mean_best"])
                for r in summary])
    return summary


def cmd_grid(spec: RunSpec):
    """Final-objective means over the (alpha, decay) grid per method,
    where decay is the pheromone retention factor (rho = 1 - decay).
    Returns (matrix rows, per-method variance of the cell means)."""
    out = _need_out(spec)
    os.makedirs(out, exist_ok=True)
    instances = _held_out(spec, spec.grid_instances)
    graphs = [problems.sparsify(inst) for inst in instances]
    rows = []
    variances = {}
    for method in spec.methods:
        bundle = require_net(spec, method)
        flds = [method_fields(spec, method, bundle, inst, g)
                for inst, g in zip(instances, graphs)]
        cell_means = []
        for alpha in spec.alphas:
            for decay in spec.decays:
                finals = []
                for seed in spec.seeds:
                    payloads = []
                    for i, (inst, g, f) in enumerate(
                            zip(instances, graphs, flds)):
                        kw = _aco_kwargs(spec, run_seed(seed, i))
                        kw["alpha"] = alpha
                        kw["rho"] = 1.0 - decay
                        payloads.append((inst, g, f, kw,
                                         _run_opts(spec, sample=False)))
                    logs = _pmap(_job_evolve, payloads)
                    finals.extend(lg.best_objective[-1] for lg in logs)
                mean_final = float(np.mean(finals))
                cell_means.append(mean_final)
                rows.append({"method": method, "alpha": alpha,
                             "decay": decay, "mean_final": mean_final})
        variances[method] = float(np.var(cell_means))
    _write_csv(os.path.join(out, "grid.csv"),
               ("method", "alpha", "decay", "mean_final"),
               [(r["method"], r["alpha"], r["decay"], r["mean_final"])
                for r in rows])
    _write_csv(os.path.join(out, "variance.csv"), ("method", "variance"),
               [(m, v) for m, v in variances.items()])
    return rows, variances


def cmd_sampling_compare(spec: RunSpec) -> list[tuple]:
    """Paired final objectives: pheromone evolution vs pure sampling at
    the same budget, same seeds, same instances."""
    out = _need_out(spec)
    os.makedirs(out, exist_ok=True)
    instances = _held_out(spec, spec.n_instances)
    graphs = [problems.sparsify(inst) for inst in instances]
    method = spec.methods[0]
    bundle = require_net(spec, method)
    flds = [method_fields(spec, method, bundle, inst, g)
            for inst, g in zip(instances, graphs)]
    seed = spec.seeds[0]

    def payloads(sample):
        return [(inst, g, f, _aco_kwargs(spec, run_seed(seed, i)),
                 _run_opts(spec, sample=sample))
                for i, (inst, g, f) in enumerate(zip(instances, graphs, flds))]

    evo = _pmap(_job_evolve, payloads(sample=False))
    sam = _pmap(_job_evolve, payloads(sample=True))
    rows = []
    for i, (e, s) in enumerate(zip(evo, sam)):
        if e.evaluations[-1] != s.evaluations[-1]:
            raise BenchError("budget accounting diverged between modes")
        rows.append((i, e.evaluations[-1],
                     float(e.best_objective[-1]), float(s.best_objective[-1])))
    _write_csv(os.path.join(out, "sampling.csv"),
               ("instance", "evaluations", "evolution_final",
                "sampling_final"), rows)
    return rows
