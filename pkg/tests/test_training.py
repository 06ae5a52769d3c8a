"""Trainer tests: loss identities, gradient estimator, full loop."""

import math

import numpy as np
import pytest

from antopt import autodiff as ad
from antopt import colony, nets
from antopt import problems as pr
from antopt import training as tr
from antopt.problems.base import EPS


# ---------------------------------------------------------------------------
# shaping-loss identities (hand oracles, natural log throughout)
# ---------------------------------------------------------------------------

def kl_rows(p, q):
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    return float((p * (np.log(p) - np.log(q))).sum())


def test_kl_of_identical_heads_is_zero():
    rows = np.array([[0.4, 0.4, 0.2], [0.1, 0.6, 0.3]])
    v = tr.loss_kl([rows, rows.copy(), rows.copy()])
    assert v.values == 0.0


def test_kl_two_head_hand_value():
    a, b = np.array([[0.9, 0.1]]), np.array([[0.5, 0.5]])
    got = float(tr.loss_kl([a, b]).values)
    expected = -(kl_rows(a[0], b[0]) + kl_rows(b[0], a[0])) / 4.0
    assert abs(got - expected) < 1e-12
    # frozen: -(0.368064... + 0.510825...) / 4
    assert abs(got - (-0.2197224577336219)) < 1e-9


def test_kl_invariant_to_row_scaling():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.1, 1.0, size=(4, 6))
    b = rng.uniform(0.1, 1.0, size=(4, 6))
    v1 = float(tr.loss_kl([a, b]).values)
    v2 = float(tr.loss_kl([a * 37.5, b * 0.004]).values)
    assert abs(v1 - v2) < 1e-12


def test_kl_requires_two_heads_and_matching_shapes():
    with pytest.raises(ValueError, match="2 heads"):
        tr.loss_kl([np.ones((2, 3))])
    with pytest.raises(ad.ShapeError):
        tr.loss_kl([np.ones((2, 3)), np.ones((2, 4))])


def test_topk_entropy_uniform_row_hits_minus_log_k():
    rows = np.array([[1.0, 1.0, 0.2, 0.1]])
    got = float(tr.loss_topk_entropy(rows, 2).values)
    assert abs(got - (-math.log(2.0))) < 1e-12


def test_topk_entropy_hand_value():
    got = float(tr.loss_topk_entropy(np.array([[0.5, 0.3, 0.2]]), 2).values)
    expected = 0.625 * math.log(0.625) + 0.375 * math.log(0.375)
    assert abs(got - expected) < 1e-12
    assert abs(got - (-0.6615632381579821)) < 1e-9


def test_topk_entropy_degenerate_row_floors_near_zero():
    rows = np.array([[1.0, 1e-13, 1e-13]])
    got = float(tr.loss_topk_entropy(rows, 2).values)
    assert -1e-7 < got <= 0.0


def test_topk_entropy_short_rows_use_full_row():
    rows = np.array([[0.7, 0.3]])
    assert (tr.loss_topk_entropy(rows, 5).values
            == tr.loss_topk_entropy(rows, 2).values)


def test_topk_entropy_bounds():
    rng = np.random.default_rng(3)
    rows = rng.uniform(0.01, 1.0, size=(20, 9))
    for k in (1, 3, 5):
        v = float(tr.loss_topk_entropy(rows, k).values)
        assert -math.log(max(k, 1)) - 1e-12 <= v <= 0.0


def test_imitation_zero_for_proportional_fields():
    rng = np.random.default_rng(5)
    expert = rng.uniform(0.1, 2.0, size=(5, 7))
    got = float(tr.loss_imitation(expert * 3.7, expert).values)
    assert abs(got) < 1e-12


def test_imitation_hand_value_with_floor():
    expert = np.array([[1.0, 0.0]])
    learned = np.array([[0.5, 0.5]])
    got = float(tr.loss_imitation(learned, expert).values)
    e = np.maximum(expert[0], EPS)
    e = e / e.sum()
    expected = float((e * (np.log(e) - np.log([0.5, 0.5]))).sum())
    assert abs(got - expected) < 1e-12
    assert abs(got - math.log(2.0)) < 1e-7


def test_imitation_gradient_step_decreases_loss():
    store = ad.ParamStore()
    store.create("rows", np.array([[1.0, 2.0, 3.0]]))
    expert = np.array([[3.0, 2.0, 1.0]])

    def value():
        return float(tr.loss_imitation(ad.Tensor(store.get("rows")),
                                        expert).values)

    before = value()
    tape = ad.Tape()
    loss = tr.loss_imitation(store.use("rows", tape), expert)
    ad.backward(tape, loss)
    store.get("rows")[...] -= 0.05 * store.grad("rows")
    assert value() < before


def test_imitation_shape_mismatch_rejected():
    with pytest.raises(ad.ShapeError):
        tr.loss_imitation(np.ones((2, 3)), np.ones((2, 4)))


def test_losses_accept_heuristic_fields():
    inst = pr.generate_instance("MKP", 6, seed=1)
    f = pr.expert_heuristic(inst, model="items")
    v = float(tr.loss_topk_entropy(f, 3).values)
    assert -math.log(3) - 1e-12 <= v <= 0.0


# ---------------------------------------------------------------------------
# rollouts and baselines
# ---------------------------------------------------------------------------

def uniform_field(inst):
    eta = np.ones((inst.graph_n, inst.graph_n))
    np.fill_diagonal(eta, EPS)
    return pr.HeuristicField(provenance="expert", matrix=eta)


def test_rollout_batch_rejects_single_rollout():
    inst = pr.generate_instance("TSP", 8, seed=0)
    graph = pr.sparsify(inst)
    with pytest.raises(ValueError, match="2 rollouts"):
        tr.rollout_batch(inst, graph, uniform_field(inst), 1,
                         np.random.default_rng(0))


def test_batch_stats_are_rollout_means():
    inst = pr.generate_instance("TSP", 10, seed=2)
    graph = pr.sparsify(inst)
    traj = tr.rollout_batch(inst, graph, uniform_field(inst), 16,
                            np.random.default_rng(1))
    stats = tr.BatchStats.from_trajectory(traj)
    assert stats.n_rollouts == 16
    assert stats.baseline == pytest.approx(traj.objective.mean(), abs=1e-12)
    assert stats.baseline_nls is None
    traj.objective = traj.objective[:1]
    traj.logp = traj.logp[:1]
    with pytest.raises(ValueError):
        tr.BatchStats.from_trajectory(traj)


def test_uniform_rollout_mean_matches_exact_expectation():
    # closed tour through a uniform random permutation visits each ordered
    # pair with equal probability: E[len] = sum(d) / (n - 1)
    inst = pr.generate_instance("TSP", 10, seed=7)
    graph = pr.sparsify(inst)
    traj = tr.rollout_batch(inst, graph, uniform_field(inst), 10_000,
                            np.random.default_rng(3))
    exact = inst.dist.sum() / (inst.n - 1)
    se = traj.objective.std(ddof=1) / math.sqrt(traj.n_ants)
    assert abs(traj.objective.mean() - exact) < 3 * se


def test_near_delta_measure_collapses_advantages():
    inst = pr.generate_instance("TSP", 12, seed=4)
    graph = pr.sparsify(inst)
    order = np.roll(np.arange(12), -1)
    eta = np.full((12, 12), 1e-8)
    eta[np.arange(12), order] = 1e8
    field = pr.HeuristicField(provenance="expert", matrix=eta)
    traj = tr.rollout_batch(inst, graph, field, 16, np.random.default_rng(5))
    # ants enter the forced cycle at random nodes; rotations reorder the
    # float summation, so equality only holds to accumulation error
    assert np.ptp(traj.objective) < 1e-9
    stats = tr.BatchStats.from_trajectory(traj)
    assert np.all(np.abs(traj.objective - stats.baseline) < 1e-9)


def test_nls_rollouts_keep_construction_objectives():
    inst = pr.generate_instance("TSP", 15, seed=6)
    graph = pr.sparsify(inst)
    eta = uniform_field(inst)
    plain = tr.rollout_batch(inst, graph, eta, 8, np.random.default_rng(9))
    coupled = tr.rollout_batch(inst, graph, eta, 8, np.random.default_rng(9),
                               with_nls=True)
    assert np.array_equal(plain.objective, coupled.objective)
    assert coupled.nls_objective is not None
    assert np.all(coupled.nls_objective <= coupled.objective + 1e-9)


# ---------------------------------------------------------------------------
# policy-gradient surrogate
# ---------------------------------------------------------------------------

def tiny_setup(seed=11, n=6, n_heads=1, rollouts=4, with_nls=False):
    inst = pr.generate_instance("TSP", n, seed=seed)
    graph = pr.sparsify(inst)
    cfg = nets.GnnConfig(node_dim=2, n_layers=1, width=4, decoder_width=3,
                         n_heads=n_heads)
    store = ad.ParamStore()
    nets.init_gnn(cfg, store, seed=seed)
    rng = np.random.default_rng(seed)
    trajs = []
    for head in range(n_heads):
        field = nets.edge_field(inst, graph, store, cfg, head)
        trajs.append(tr.rollout_batch(inst, graph, field, rollouts, rng,
                                      with_nls=with_nls))
    return inst, graph, cfg, store, trajs


def surrogate_grads(inst, graph, cfg, store, traj, stats, w_nls=0.0):
    tape = ad.Tape()
    h, e = nets.embed(inst, graph, store, cfg, tape)
    m = nets.decode_edges(h, e, graph, store, cfg, tape=tape)
    w = tr.selection_weights(m, graph, "edges")
    ad.backward(tape, tr.policy_gradient(w, traj, stats, w_nls))
    out = {name: store.grad(name).copy() for name in store.names()}
    store.zero_grad()
    return out


def test_surrogate_value_matches_sampled_logp():
    inst, graph, cfg, store, (traj,) = tiny_setup()
    stats = tr.BatchStats.from_trajectory(traj)
    field = nets.edge_field(inst, graph, store, cfg)
    w = tr.selection_weights(
        ad.Tensor(field.matrix.reshape(-1)[nets.edge_flat_index(graph)]),
        graph, "edges")
    got = float(tr.policy_gradient(w, traj, stats, 0.0).values)
    adv = traj.objective - traj.objective.mean()
    assert got == pytest.approx(float((adv * traj.logp).mean()), rel=1e-9)


def test_zero_advantages_zero_every_gradient():
    inst, graph, cfg, store, (traj,) = tiny_setup()
    traj.objective = np.full(traj.n_ants, 3.25)
    stats = tr.BatchStats.from_trajectory(traj)
    grads = surrogate_grads(inst, graph, cfg, store, traj, stats)
    for g in grads.values():
        assert np.all(g == 0.0)


def test_gradient_unaffected_by_nls_values_when_w_zero():
    inst, graph, cfg, store, (traj,) = tiny_setup(with_nls=True)
    stats = tr.BatchStats.from_trajectory(traj)
    g1 = surrogate_grads(inst, graph, cfg, store, traj, stats, w_nls=0.0)
    traj.nls_objective = traj.nls_objective + 123.0
    stats2 = tr.BatchStats.from_trajectory(traj)
    g2 = surrogate_grads(inst, graph, cfg, store, traj, stats2, w_nls=0.0)
    for name in g1:
        assert np.array_equal(g1[name], g2[name])


def test_baseline_shift_invariance():
    inst, graph, cfg, store, (traj,) = tiny_setup()
    stats = tr.BatchStats.from_trajectory(traj)
    g1 = surrogate_grads(inst, graph, cfg, store, traj, stats)
    traj.objective = traj.objective + 5.0
    stats2 = tr.BatchStats.from_trajectory(traj)
    g2 = surrogate_grads(inst, graph, cfg, store, traj, stats2)
    for name in g1:
        assert np.allclose(g1[name], g2[name], rtol=1e-9, atol=1e-12)


def test_nls_term_enters_only_through_advantage_weights():
    # gradient must be linear in the per-rollout advantages; that holds
    # only if refined objectives act as constants, with no backward path
    inst, graph, cfg, store, (traj,) = tiny_setup(rollouts=2)
    base = tr.BatchStats(n_rollouts=2, baseline=0.0)

    def grads_for(f0, f1):
        traj.objective = np.array([f0, f1])
        return surrogate_grads(inst, graph, cfg, store, traj, base)

    e0 = grads_for(1.0, 0.0)
    e1 = grads_for(0.0, 1.0)
    mix = grads_for(0.7, -0.3)
    for name in mix:
        want = 0.7 * e0[name] - 0.3 * e1[name]
        assert np.allclose(mix[name], want, rtol=1e-9, atol=1e-13)


def test_policy_gradient_input_validation():
    inst, graph, cfg, store, (traj,) = tiny_setup()
    stats = tr.BatchStats.from_trajectory(traj)
    field = nets.edge_field(inst, graph, store, cfg)
    w = tr.selection_weights(
        ad.Tensor(field.matrix.reshape(-1)[nets.edge_flat_index(graph)]),
        graph, "edges")
    with pytest.raises(ValueError, match="rollouts"):
        tr.policy_gradient(w, traj,
                           tr.BatchStats(n_rollouts=9, baseline=0.0), 0.0)
    with pytest.raises(ValueError, match="refined"):
        tr.policy_gradient(w, traj, stats, 2.0)
    traj.record = None
    with pytest.raises(ValueError, match="record"):
        tr.policy_gradient(w, traj, stats, 0.0)


def test_composite_loss_matches_finite_differences():
    inst, graph, cfg, store, trajs = tiny_setup(seed=23, n_heads=2,
                                                rollouts=4, with_nls=True)
    stats = [tr.BatchStats.from_trajectory(t) for t in trajs]
    expert = tr._support_expert(inst, graph, "edges")
    flat = nets.edge_flat_index(graph)
    gn = graph.graph_n

    def forward(tape):
        h, e = nets.embed(inst, graph, store, cfg, tape)
        loss = None
        for head in range(cfg.n_heads):
            m = nets.decode_edges(h, e, graph, store, cfg, head, tape)
            w = tr.selection_weights(m, graph, "edges")
            surr = tr.policy_gradient(w, trajs[head], stats[head], 3.0)
            loss = surr if loss is None else ad.add(loss, surr)
        rows = []
        for head in range(cfg.n_heads):
            m = nets.decode_edges(h, e, graph, store, cfg, head, tape)
            rows.append(ad.reshape(
                ad.scatter(m, flat, (gn * gn,), fill=EPS), (gn, gn)))
        loss = ad.add(loss, ad.mul_const(tr.loss_kl(rows), 0.05))
        for r in rows:
            loss = ad.add(loss, ad.mul_const(
                tr.loss_topk_entropy(r, 2), 0.05 / 2))
            loss = ad.add(loss, ad.mul_const(
                tr.loss_imitation(r, expert), 0.02 / 2))
        return loss

    tape = ad.Tape()
    ad.backward(tape, forward(tape))
    analytic = {n: store.grad(n).copy() for n in store.names()}
    store.zero_grad()
    h = 1e-5
    for name in store.names():
        arr = store.get(name)
        for i in range(arr.size):
            orig = arr.flat[i]
            arr.flat[i] = orig + h
            up = float(forward(None).values)
            arr.flat[i] = orig - h
            dn = float(forward(None).values)
            arr.flat[i] = orig
            fd = (up - dn) / (2 * h)
            an = analytic[name].flat[i]
            err = abs(fd - an)
            assert err < 1e-7 or err / max(abs(an), 1e-12) < 1e-4, (
                f"{name}[{i}]: fd={fd} analytic={an}")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

FAST = dict(n_rollouts=6, total_instances=6, instances_per_epoch=3,
            w_nls=0.0)


def test_train_is_deterministic_under_seed():
    runs = []
    for _ in range(2):
        store, _, hist = tr.train("TSP", 8, tr.TrainerConfig(seed=5, **FAST),
                                  width=8, n_layers=1)
        numbers = [(h["epoch"], h["mean_f"], h["loss"]) for h in hist]
        runs.append((numbers, {n: store.get(n).copy()
                               for n in store.names()}))
    assert runs[0][0] == runs[1][0]
    for name, arr in runs[0][1].items():
        assert np.array_equal(arr, runs[1][1][name])


def test_train_zero_lr_leaves_params_at_init():
    cfg = tr.TrainerConfig(seed=9, lr=0.0, **FAST)
    store, net_cfg, _ = tr.train("TSP", 8, cfg, width=8, n_layers=1,
                                 net_seed=4)
    fresh = ad.ParamStore()
    nets.init_gnn(net_cfg, fresh, seed=4)
    for name in fresh.names():
        assert np.array_equal(store.get(name), fresh.get(name))


def test_train_objective_improves_on_small_tsp():
    cfg = tr.TrainerConfig(w_nls=0.0, n_rollouts=12, total_instances=320,
                           instances_per_epoch=64, seed=1, lr=3e-3)
    _, _, hist = tr.train("TSP", 10, cfg, width=16, n_layers=2)
    assert hist[-1]["mean_f"] < hist[0]["mean_f"] - 0.3


def test_train_rejects_nls_weight_on_unsupported_kind():
    cfg = tr.TrainerConfig(w_nls=1.0, n_rollouts=4, total_instances=2,
                           instances_per_epoch=2)
    with pytest.raises(ValueError, match="w_nls=0"):
        tr.train("MKP", 10, cfg)
    with pytest.raises(ValueError, match="MKP only"):
        tr.train("TSP", 8, tr.TrainerConfig(**FAST), model="items")


def test_train_aborts_with_epoch_index_on_divergence(monkeypatch):
    def boom(*args, **kw):
        raise ad.GradientError("synthetic blow-up")

    monkeypatch.setattr(tr, "instance_loss", boom)
    with pytest.raises(tr.TrainingError, match="epoch 0"):
        tr.train("TSP", 8, tr.TrainerConfig(seed=2, **FAST))


def test_training_log_roundtrip(tmp_path):
    cfg = tr.TrainerConfig(seed=3, **FAST)
    path = tmp_path / "log.csv"
    ckpt = tmp_path / "net.json"
    store, net_cfg, hist = tr.train("TSP", 8, cfg, width=8, n_layers=1,
                                    checkpoint_path=ckpt, log_path=path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,mean_f,mean_f_nls,loss,seconds"
    assert len(lines) == len(hist) + 1
    loaded, loaded_cfg = nets.load_gnn(ckpt)
    assert loaded_cfg == net_cfg
    for name in store.names():
        assert np.array_equal(loaded.get(name), store.get(name))


def test_trainer_config_validation():
    with pytest.raises(ValueError):
        tr.TrainerConfig(w_nls=-1)
    with pytest.raises(ValueError):
        tr.TrainerConfig(lambda_kl=-0.1)
    with pytest.raises(ValueError):
        tr.TrainerConfig(top_k=0)
    with pytest.raises(ValueError):
        tr.TrainerConfig(perturb="sideways")
    with pytest.raises(ValueError):
        tr.TrainerConfig(lr=-1e-3)
