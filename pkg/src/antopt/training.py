"""Policy-gradient training of the scoring networks.

Rollouts are plain stochastic constructions with all pheromone trails held
at one, so the sampling distribution depends on the learned measures only.
Each instance contributes one advantage-weighted log-likelihood surrogate
(optionally coupled to local-search outcomes) plus three optional shaping
terms: cross-head diversity, top-k entropy, and imitation of the classic
measure.  Local-search results enter as constants; no gradient flows
through the search itself.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import colony, localsearch, nets
from .problems import (EPS, HeuristicField, generate_instance, get_problem,
                       sparsify)


class TrainingError(RuntimeError):
    """Training aborted (divergence or inconsistent inputs)."""


@dataclass
class TrainerConfig:
    w_nls: float = 9.0              # weight of the search-coupled term
    n_rollouts: int = 20            # constructions per instance, >= 2
    total_instances: int = 640
    instances_per_epoch: int = 32
    lambda_kl: float = 0.0          # cross-head diversity coefficient
    lambda_ent: float = 0.0         # top-k entropy coefficient
    lambda_imit: float = 0.0        # imitation coefficient
    top_k: int = 5
    n_heads: int = 1
    lr: float = 1e-3
    seed: int = 0
    perturb: str = "neural"         # "random" reproduces the ablation
    vanilla_ls: bool = False        # refinement without perturbation rounds
    nls: localsearch.NlsConfig = field(default_factory=localsearch.NlsConfig)

    def __post_init__(self):
        if self.w_nls < 0:
            raise ValueError("w_nls must be >= 0")
        if min(self.lambda_kl, self.lambda_ent, self.lambda_imit) < 0:
            raise ValueError("loss coefficients must be >= 0")
        if self.n_rollouts < 2:
            raise ValueError("need at least 2 rollouts per instance")
        if self.top_k < 1 or self.n_heads < 1:
            raise ValueError("top_k and n_heads must be >= 1")
        if self.total_instances < 1 or self.instances_per_epoch < 1:
            raise ValueError("instance counts must be >= 1")
        if self.perturb not in ("neural", "random"):
            raise ValueError(f"unknown perturbation mode '{self.perturb}'")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class BatchStats:
    """Per-instance mean objectives used as advantage baselines."""

    n_rollouts: int
    baseline: float
    baseline_nls: float | None = None

    @classmethod
    def from_trajectory(cls, traj: colony.Trajectory) -> "BatchStats":
        if traj.n_ants < 2:
            raise ValueError(
                f"baselines need >= 2 rollouts, got {traj.n_ants}")
        b = float(traj.objective.mean())
        b_nls = None
        if traj.nls_objective is not None:
            b_nls = float(traj.nls_objective.mean())
        if not math.isfinite(b) or (b_nls is not None
                                    and not math.isfinite(b_nls)):
            raise TrainingError("non-finite rollout objectives")
        return cls(n_rollouts=traj.n_ants, baseline=b, baseline_nls=b_nls)


def rollout_batch(inst, graph, eta: HeuristicField, n_rollouts: int,
                  rng: np.random.Generator, with_nls: bool = False,
                  nls_cfg: localsearch.NlsConfig | None = None,
                  perturb: str = "neural",
                  vanilla: bool = False) -> colony.Trajectory:
    """Sample constructions with unit pheromones, recording step data.

    With `with_nls`, every rollout is also refined and the refined
    objectives stored alongside the construction ones.
    """
    if n_rollouts < 2:
        raise ValueError(f"need at least 2 rollouts, got {n_rollouts}")
    tau = colony.init_pheromone(inst.graph_n, eta.model)
    cfg = colony.AcoConfig(variant="AS", n_ants=n_rollouts)
    traj = colony.construct_batch(inst, graph, tau, eta, cfg, rng,
                                  record=True)
    if with_nls:
        constructed = traj.objective.copy()
        localsearch.refine_trajectory(inst, eta, nls_cfg
                                      or localsearch.NlsConfig(), traj,
                                      graph, rng, perturb=perturb,
                                      vanilla=vanilla)
        traj.nls_objective = traj.objective
        traj.objective = constructed
    return traj


def selection_weights(measures: ad.Tensor, graph, model: str) -> ad.Tensor:
    """Dense flat weight tensor matching what construction sampled from."""
    gn = graph.graph_n
    if model == "edges":
        flat = nets.edge_flat_index(graph)
        dense = ad.scatter(measures, flat, (gn * gn,), fill=EPS)
    else:
        dense = ad.scatter(measures, np.arange(1, gn), (gn,), fill=EPS)
    return ad.add_const(dense, EPS)


def policy_gradient(weights: ad.Tensor, traj: colony.Trajectory,
                    stats: BatchStats, w_nls: float) -> ad.Tensor:
    """Advantage-weighted mean log-likelihood of the sampled rollouts.

    Backward through the returned scalar yields the estimator: descending
    it lowers the likelihood of above-baseline (worse) rollouts.
    Advantages are plain centered objectives, no rescaling.
    """
    rec = traj.record
    if rec is None:
        raise ValueError("trajectory carries no step record")
    if stats.n_rollouts != traj.n_ants:
        raise ValueError(
            f"stats cover {stats.n_rollouts} rollouts, "
            f"trajectory has {traj.n_ants}")
    adv = traj.objective - stats.baseline
    if w_nls > 0:
        if traj.nls_objective is None or stats.baseline_nls is None:
            raise ValueError("w_nls > 0 requires refined objectives")
        adv = adv + w_nls * (traj.nls_objective - stats.baseline_nls)
    chosen = ad.take(weights, rec.chosen_flat)
    feas = ad.take(weights, rec.feas_flat)
    totals = ad.segment_sum(feas, rec.feas_rec, rec.n_records)
    step_logp = ad.sub(ad.log(chosen), ad.log(totals))
    ant_logp = ad.segment_sum(step_logp, rec.ant, traj.n_ants)
    return ad.mean(ad.mul(ant_logp, ad.Tensor(adv)))


# ---------------------------------------------------------------------------
# shaping losses; each accepts tensors, arrays, or heuristic fields
# ---------------------------------------------------------------------------

def _as_rows(x) -> ad.Tensor:
    if isinstance(x, HeuristicField):
        x = x.dense()
    if not isinstance(x, ad.Tensor):
        x = ad.Tensor(np.asarray(x, dtype=np.float64))
    if x.values.ndim == 1:
        x = ad.reshape(x, (1, x.values.shape[0]))
    return x


def _norm_rows(rows: ad.Tensor) -> ad.Tensor:
    return ad.row_normalize(ad.clip_min(rows, EPS))


def loss_kl(head_rows: list) -> ad.Tensor:
    """Negated mean pairwise KL across heads: lower means more diverse."""
    if len(head_rows) < 2:
        raise ValueError("diversity loss needs at least 2 heads")
    rows = [_as_rows(r) for r in head_rows]
    shape = rows[0].values.shape
    if any(r.values.shape != shape for r in rows):
        raise ad.ShapeError("head fields disagree in shape")
    m, n_rows = len(rows), shape[0]
    normed = [_norm_rows(r) for r in rows]
    logs = [ad.log(r) for r in normed]
    total = None
    for a in range(m):
        for b in range(m):
            if a == b:
                continue
            term = ad.total_sum(ad.mul(normed[a], ad.sub(logs[a], logs[b])))
            total = term if total is None else ad.add(total, term)
    return ad.mul_const(total, -1.0 / (m * m * n_rows))


def loss_topk_entropy(rows, k: int) -> ad.Tensor:
    """Mean negated entropy over each row's k largest entries.

    Lies in [-log k, 0]; minimized when the top-k mass is uniform.  Rows
    shorter than k use the whole row.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rows = _as_rows(rows)
    n_rows, n_cols = rows.values.shape
    kk = min(k, n_cols)
    if kk < n_cols:
        idx = np.argpartition(rows.values, n_cols - kk, axis=1)[:, n_cols - kk:]
    else:
        idx = np.broadcast_to(np.arange(n_cols), (n_rows, n_cols))
    flat = (np.arange(n_rows)[:, None] * n_cols + idx).reshape(-1)
    top = ad.reshape(ad.take(rows, flat), (n_rows, kk))
    a = _norm_rows(top)
    return ad.mul_const(ad.total_sum(ad.mul(a, ad.log(a))), 1.0 / n_rows)


def loss_imitation(rows, expert) -> ad.Tensor:
    """Mean row-wise KL from the normalized expert measure to the learned."""
    rows = _as_rows(rows)
    ref = _as_rows(expert).values
    if ref.shape != rows.values.shape:
        raise ad.ShapeError(
            f"expert shape {ref.shape} != learned {rows.values.shape}")
    ref = np.maximum(ref, EPS)
    ref = ref / ref.sum(axis=1, keepdims=True)
    learned = _norm_rows(rows)
    gap = ad.sub(ad.Tensor(np.log(ref)), ad.log(learned))
    val = ad.total_sum(ad.mul(ad.Tensor(ref), gap))
    return ad.mul_const(val, 1.0 / rows.values.shape[0])


# ---------------------------------------------------------------------------
# full loop
# ---------------------------------------------------------------------------

def _support_expert(inst, graph, model: str) -> np.ndarray:
    """Expert measure restricted to the sparsified support, floor elsewhere."""
    prob = get_problem(inst.kind)
    if model == "items":
        exp = prob.expert_heuristic(inst, model="items")
        return exp.vector[None, 1:]
    exp = prob.expert_heuristic(inst)
    return np.where(graph.nbr_mask, exp.matrix, EPS)


def _forward_heads(inst, graph, store, net_cfg, model: str, tape):
    """Decode measure tensors for every head plus dense sampling fields."""
    gn = graph.graph_n
    measures, fields, dense_rows = [], [], []
    if model == "items":
        x = nets.encode_items(inst, store, net_cfg, tape)
        t = nets.decode_items(x, store, net_cfg, tape)
        vec = np.full(gn, EPS)
        vec[1:] = t.values
        measures.append(t)
        fields.append(HeuristicField(provenance="learned", vector=vec))
        dense_rows.append(ad.reshape(t, (1, gn - 1)))
    else:
        h, e = nets.embed(inst, graph, store, net_cfg, tape)
        flat = nets.edge_flat_index(graph)
        for head in range(net_cfg.n_heads):
            t = nets.decode_edges(h, e, graph, store, net_cfg, head, tape)
            dense = np.full((gn, gn), EPS)
            dense.reshape(-1)[flat] = t.values
            measures.append(t)
            fields.append(HeuristicField(provenance=f"learned-head-{head}",
                                         matrix=dense))
            dense_rows.append(
                ad.reshape(ad.scatter(t, flat, (gn * gn,), fill=EPS),
                           (gn, gn)))
    return measures, fields, dense_rows


def instance_loss(inst, graph, store, net_cfg, model: str,
                  tcfg: TrainerConfig, rng, tape):
    """One training instance: rollouts per head plus shaping terms.

    Returns (loss tensor, mean construction objective, mean refined
    objective or nan).
    """
    measures, fields, dense_rows = _forward_heads(
        inst, graph, store, net_cfg, model, tape)
    with_nls = tcfg.w_nls > 0
    loss = None
    mean_f, mean_nls = [], []
    for t, fld in zip(measures, fields):
        traj = rollout_batch(inst, graph, fld, tcfg.n_rollouts, rng,
                             with_nls=with_nls, nls_cfg=tcfg.nls,
                             perturb=tcfg.perturb, vanilla=tcfg.vanilla_ls)
        stats = BatchStats.from_trajectory(traj)
        weights = selection_weights(t, graph, model)
        surr = policy_gradient(weights, traj, stats, tcfg.w_nls)
        loss = surr if loss is None else ad.add(loss, surr)
        mean_f.append(stats.baseline)
        if stats.baseline_nls is not None:
            mean_nls.append(stats.baseline_nls)
    if tcfg.lambda_kl > 0 and len(dense_rows) >= 2:
        loss = ad.add(loss, ad.mul_const(loss_kl(dense_rows),
                                         tcfg.lambda_kl))
    if tcfg.lambda_ent > 0:
        scale = tcfg.lambda_ent / len(dense_rows)
        for rows in dense_rows:
            loss = ad.add(loss, ad.mul_const(
                loss_topk_entropy(rows, tcfg.top_k), scale))
    if tcfg.lambda_imit > 0:
        ref = _support_expert(inst, graph, model)
        scale = tcfg.lambda_imit / len(dense_rows)
        for rows in dense_rows:
            loss = ad.add(loss, ad.mul_const(loss_imitation(rows, ref),
                                             scale))
    nls_val = float(np.mean(mean_nls)) if mean_nls else float("nan")
    return loss, float(np.mean(mean_f)), nls_val


def train(kind: str, n: int, tcfg: TrainerConfig, model: str = "edges",
          checkpoint_path=None, log_path=None, net_seed: int = 0,
          width: int = 32, n_layers: int = 3):
    """Full training run; returns (store, net config, per-epoch history).

    Deterministic under (tcfg.seed, net_seed).  Aborts with the failing
    epoch index if the loss turns non-finite.
    """
    if tcfg.w_nls > 0 and kind not in localsearch.TOUR_KINDS:
        raise ValueError(
            f"{kind} has no local search; set w_nls=0 to train it")
    if model not in ("edges", "items"):
        raise ValueError(f"unknown pheromone model '{model}'")
    if model == "items" and kind != "MKP":
        raise ValueError("the per-item model applies to MKP only")
    template = generate_instance(kind, n, seed=tcfg.seed)
    store = ad.ParamStore()
    if model == "items":
        net_cfg = nets.item_config_for(template, n_layers=n_layers,
                                       width=width)
        nets.init_item_net(net_cfg, store, seed=net_seed)
    else:
        net_cfg = nets.edge_config_for(template, n_heads=tcfg.n_heads,
                                       n_layers=n_layers, width=width)
        nets.init_gnn(net_cfg, store, seed=net_seed)

    rng = np.random.default_rng(tcfg.seed)
    inst_seeds = rng.integers(0, 2**31 - 1, size=tcfg.total_instances)
    per_epoch = tcfg.instances_per_epoch
    n_epochs = math.ceil(tcfg.total_instances / per_epoch)
    history = []
    done = 0
    for epoch in range(n_epochs):
        t0 = time.perf_counter()
        epoch_f, epoch_nls, epoch_loss = [], [], []
        count = min(per_epoch, tcfg.total_instances - done)
        for i in range(count):
            inst = generate_instance(kind, n, seed=int(inst_seeds[done + i]))
            graph = sparsify(inst)
            tape = ad.Tape()
            try:
                loss, m_f, m_nls = instance_loss(
                    inst, graph, store, net_cfg, model, tcfg, rng, tape)
                ad.backward(tape, loss)
                # lr 0 means evaluate-only: gradients discarded, no update
                if tcfg.lr > 0:
                    store.adam_step(lr=tcfg.lr)
                else:
                    store.zero_grad()
            except ad.GradientError as exc:
                raise TrainingError(
                    f"training diverged at epoch {epoch} "
                    f"(instance {done + i}): {exc}") from exc
            epoch_f.append(m_f)
            epoch_nls.append(m_nls)
            epoch_loss.append(float(loss.values))
        done += count
        row = {"epoch": epoch,
               "mean_f": float(np.mean(epoch_f)),
               "mean_f_nls": float(np.nanmean(epoch_nls))
               if not np.all(np.isnan(epoch_nls)) else float("nan"),
               "loss": float(np.mean(epoch_loss)),
               "seconds": time.perf_counter() - t0}
        history.append(row)

    if checkpoint_path is not None:
        extra = {"kind": kind, "scale": n, "model": model}
        if model == "items":
            nets.save_item_net(checkpoint_path, store, net_cfg, extra)
        else:
            nets.save_gnn(checkpoint_path, store, net_cfg, extra)
    if log_path is not None:
        write_training_log(log_path, history)
    return store, net_cfg, history


def write_training_log(path, history: list):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "mean_f", "mean_f_nls", "loss",
                            "seconds"])
        writer.writeheader()
        for row in history:
            writer.writerow(row)
