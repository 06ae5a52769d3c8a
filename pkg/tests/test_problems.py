"""Generators, graphs, feasibility, objectives and expert measures.

Replay consistency is checked by rebuilding every accumulator from the raw
sequence; feasibility closure by handing uniformly sampled constructions to
the validating objective.
"""

import numpy as np
import pytest

from antopt import problems as pr
from antopt.problems.base import FEAS_TOL


def rollout_uniform(inst, graph, n_ants, rng):
    """Construct solutions choosing uniformly among feasible components."""
    prob = pr.get_problem(inst.kind)
    state = prob.init_state(inst, n_ants)
    while not state.done.all():
        mask = prob.feasible_mask(inst, graph, state)
        empty = ~mask.any(axis=1) & ~state.done
        if empty.any():
            if prob.requires_completion():
                raise AssertionError("feasible set empty before completion")
            state.done[empty] = True
        choice = np.full(n_ants, -1, dtype=np.int64)
        for a in np.nonzero(~state.done)[0]:
            cand = np.nonzero(mask[a])[0]
            choice[a] = rng.choice(cand)
        if (choice >= 0).any():
            prob.advance(inst, state, choice)
    return state


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["TSP", "OP", "PCTSP", "SMTWTP", "MKP"])
def test_generator_deterministic(kind):
    a = pr.generate_instance(kind, 20, seed=5)
    b = pr.generate_instance(kind, 20, seed=5)
    c = pr.generate_instance(kind, 20, seed=6)
    for name in ("coords", "dist", "prizes", "penalties", "due", "proc",
                 "job_w", "values", "weights", "capacities"):
        va, vb, vc = (getattr(x, name) for x in (a, b, c))
        if va is None:
            continue
        assert np.array_equal(va, vb)
        assert not np.array_equal(va, vc)


def test_tsp_coordinate_distribution():
    coords = np.concatenate([pr.generate_instance("TSP", 1000, seed=s).coords
                             for s in range(50)])
    assert coords.shape == (50_000, 2)
    assert abs(coords.mean() - 0.5) < 0.01
    assert coords.min() >= 0.0 and coords.max() <= 1.0


def test_op_prizes_on_grid_and_budget():
    inst = pr.generate_instance("OP", 100, seed=3)
    assert inst.max_len == 4.0
    cents = inst.prizes[1:] * 100.0
    assert np.allclose(cents, np.round(cents), atol=1e-9)
    assert inst.prizes[1:].min() >= 0.01 and inst.prizes[1:].max() <= 1.0
    assert inst.prizes[0] == 0.0
    assert pr.generate_instance("OP", 200, seed=3).max_len == 5.0
    assert pr.generate_instance("OP", 300, seed=3).max_len == 6.0


def test_pctsp_constraint_constants():
    inst = pr.generate_instance("PCTSP", 20, seed=7)
    assert inst.min_prize == 5.0
    assert inst.prizes.sum() >= inst.min_prize
    assert inst.penalties[0] == 0.0 and inst.prizes[0] == 0.0
    assert inst.penalties[1:].max() <= 3.0 * 4.0 / (2.0 * 20)


def test_smtwtp_dummy_job():
    inst = pr.generate_instance("SMTWTP", 30, seed=2)
    assert inst.due[0] == inst.proc[0] == inst.job_w[0] == 0.0
    assert inst.due[1:].max() < 30.0
    assert len(inst.due) == 31


def test_mkp_well_stated():
    inst = pr.generate_instance("MKP", 300, seed=9, m=5)
    w = inst.weights[:, 1:]
    assert inst.capacities.shape == (5,)
    assert (inst.capacities > w.max(axis=1)).all()
    assert (inst.capacities < w.sum(axis=1)).all()


def test_generate_rejects_bad_inputs():
    with pytest.raises(ValueError):
        pr.generate_instance("QAP", 10, seed=0)
    with pytest.raises(ValueError):
        pr.generate_instance("TSP", 1, seed=0)


# ---------------------------------------------------------------------------
# sparsification
# ---------------------------------------------------------------------------

def test_tsp20_knn_degree_exactly_10():
    inst = pr.generate_instance("TSP", 20, seed=4)
    graph = pr.sparsify(inst)
    assert graph.k == 10
    assert graph.knn.shape == (20, 10)
    # k-NN lists hold each node's 10 true nearest neighbors
    for i in range(20):
        d = inst.dist[i].copy()
        d[i] = np.inf
        assert set(graph.knn[i]) == set(np.argsort(d)[:10])


def test_small_instance_complete_graph():
    inst = pr.generate_instance("TSP", 5, seed=4)
    graph = pr.sparsify(inst)
    assert graph.knn.shape == (5, 4)
    assert (graph.nbr_mask.sum(axis=1) == 4).all()
    assert not graph.nbr_mask.diagonal().any()


def test_union_closure_adds_asymmetric_neighbor():
    # B's nearest is A, but C's nearest is B: closure must give B -> C
    from antopt.problems.base import full_distance_matrix
    inst = pr.generate_instance("TSP", 3, seed=0)
    inst.coords = np.array([[0.0, 0.0], [0.1, 0.0], [0.3, 0.0]])
    inst.dist = full_distance_matrix(inst.coords)
    graph = pr.get_problem("TSP").build_graph(inst, k=1)
    assert list(graph.knn[1]) == [0]
    assert graph.nbr_mask[1, 2] and graph.nbr_mask[2, 1]


def test_union_mask_symmetric_for_geometric():
    inst = pr.generate_instance("TSP", 60, seed=8)
    graph = pr.sparsify(inst)
    assert (graph.nbr_mask == graph.nbr_mask.T).all()
    assert (graph.nbr_mask.sum(axis=1) >= graph.k).all()


def test_depot_always_neighbor_for_op_pctsp():
    for kind in ("OP", "PCTSP"):
        inst = pr.generate_instance(kind, 100, seed=1)
        graph = pr.sparsify(inst)
        assert graph.nbr_mask[1:, 0].all()


def test_order_problems_fully_connected():
    inst = pr.generate_instance("SMTWTP", 15, seed=1)
    graph = pr.sparsify(inst)
    assert (graph.nbr_mask.sum(axis=1) == 15).all()
    assert graph.n_edges == 16 * 15


# ---------------------------------------------------------------------------
# feasibility
# ---------------------------------------------------------------------------

def test_tsp_last_unvisited_is_only_choice():
    inst = pr.generate_instance("TSP", 6, seed=3)
    graph = pr.sparsify(inst)
    prob = pr.get_problem("TSP")
    state = prob.init_state(inst, 1)
    for nxt in (1, 2, 3, 4):
        prob.advance(inst, state, np.array([nxt]))
    assert list(pr.feasible_components(inst, graph, state)) == [5]


def test_op_tight_budget_only_depot():
    inst = pr.generate_instance("OP", 10, seed=2)
    inst.max_len = 1.9 * inst.dist[0, 1:].min()
    graph = pr.sparsify(inst)
    state = pr.get_problem("OP").init_state(inst, 1)
    assert list(pr.feasible_components(inst, graph, state)) == [0]


def test_mkp_capacity_filter_hand_case():
    inst = pr.generate_instance("MKP", 2, seed=0, m=2)
    inst.weights = np.array([[0.0, 0.2, 0.05],
                             [0.0, 0.1, 0.3]])
    inst.capacities = np.array([0.6, 0.6])
    graph = pr.sparsify(inst)
    prob = pr.get_problem("MKP")
    state = prob.init_state(inst, 1)
    state.residual[0] = [0.1, 0.5]
    feas = list(pr.feasible_components(inst, graph, state))
    assert feas == [2]      # item 1 fails row 0; item 2 fits both rows


def test_pctsp_depot_locked_until_prize_met():
    inst = pr.generate_instance("PCTSP", 8, seed=5)
    graph = pr.sparsify(inst)
    prob = pr.get_problem("PCTSP")
    state = prob.init_state(inst, 1)
    assert 0 not in pr.feasible_components(inst, graph, state)
    order = 1 + np.argsort(-inst.prizes[1:])
    i = 0
    while state.prize[0] < inst.min_prize:
        prob.advance(inst, state, np.array([order[i]]))
        i += 1
    assert 0 in pr.feasible_components(inst, graph, state)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def square_tsp():
    inst = pr.generate_instance("TSP", 4, seed=0)
    inst.coords = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    from antopt.problems.base import full_distance_matrix
    inst.dist = full_distance_matrix(inst.coords)
    return inst


def test_tsp_unit_square_perimeter():
    assert pr.objective(square_tsp(), [0, 1, 2, 3]) == pytest.approx(4.0)


def test_tsp_rejects_non_permutation():
    with pytest.raises(pr.InfeasibleSolutionError):
        pr.objective(square_tsp(), [0, 1, 1, 3])


def test_smtwtp_single_weighted_job_tardiness():
    # only job 1 carries weight: w * max(0, completion - due) = 0.3
    inst = pr.generate_instance("SMTWTP", 2, seed=0)
    inst.proc = np.array([0.0, 0.5, 0.1])
    inst.due = np.array([0.0, 0.2, 10.0])
    inst.job_w = np.array([0.0, 1.0, 0.0])
    assert pr.objective(inst, [0, 1, 2]) == pytest.approx(0.3)


def test_mkp_value_sign_flip():
    inst = pr.generate_instance("MKP", 2, seed=1, m=2)
    inst.values = np.array([0.0, 0.5, 0.3])
    inst.weights = np.zeros((2, 3))
    inst.capacities = np.array([1.0, 1.0])
    assert pr.objective(inst, [0, 1, 2]) == pytest.approx(-0.8)


def test_mkp_rejects_overload():
    inst = pr.generate_instance("MKP", 2, seed=1, m=1)
    inst.values = np.array([0.0, 0.5, 0.3])
    inst.weights = np.array([[0.0, 0.7, 0.7]])
    inst.capacities = np.array([1.0])
    with pytest.raises(pr.InfeasibleSolutionError, match="capacity"):
        pr.objective(inst, [0, 1, 2])


def test_op_rejects_budget_violation():
    inst = pr.generate_instance("OP", 10, seed=2)
    inst.max_len = 0.5 * inst.dist[0, 1:].min()
    with pytest.raises(pr.InfeasibleSolutionError, match="budget"):
        pr.objective(inst, [0, 1, 0])


def test_pctsp_rejects_low_prize():
    inst = pr.generate_instance("PCTSP", 8, seed=5)
    with pytest.raises(pr.InfeasibleSolutionError, match="prize"):
        pr.objective(inst, [0, 1, 0])


def test_op_sign_convention():
    # collecting any prize beats the empty tour under minimization
    op = pr.generate_instance("OP", 10, seed=4)
    nearest = 1 + int(np.argmin(op.dist[0, 1:]))
    assert pr.objective(op, np.array([0])) == 0.0
    assert pr.objective(op, np.array([0, nearest, 0])) < 0.0


# ---------------------------------------------------------------------------
# expert heuristics
# ---------------------------------------------------------------------------

def test_expert_tsp_inverse_distance():
    inst = square_tsp()
    eta = pr.expert_heuristic(inst).matrix
    assert eta[0, 1] == pytest.approx(1.0)
    inst.dist[0, 1] = 0.5
    assert pr.expert_heuristic(inst).matrix[0, 1] == pytest.approx(2.0)


def test_expert_op_prize_over_distance():
    inst = pr.generate_instance("OP", 5, seed=1)
    inst.prizes = np.full(6, 0.5)
    inst.prizes[0] = 0.0
    inst.dist = np.full((6, 6), 0.25)
    np.fill_diagonal(inst.dist, 0.0)
    eta = pr.expert_heuristic(inst).matrix
    assert eta[1, 2] == pytest.approx(2.0)


def test_expert_mkp_value_over_weight_sum():
    inst = pr.generate_instance("MKP", 2, seed=1, m=2)
    inst.values = np.array([0.0, 0.6, 0.1])
    inst.weights = np.array([[0.0, 0.2, 0.1], [0.0, 0.4, 0.1]])
    assert pr.expert_heuristic(inst).matrix[0, 1] == pytest.approx(1.0)
    assert pr.expert_heuristic(inst, model="items").vector[1] == pytest.approx(1.0)


def test_expert_fields_strictly_positive():
    for kind in pr.PROBLEMS:
        inst = pr.generate_instance(kind, 12, seed=3)
        assert (pr.expert_heuristic(inst).dense() > 0).all()


# ---------------------------------------------------------------------------
# replay consistency and feasibility closure
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["TSP", "OP", "PCTSP", "SMTWTP", "MKP"])
def test_replay_and_closure(kind):
    rng = np.random.default_rng(11)
    inst = pr.generate_instance(kind, 15, seed=13)
    graph = pr.sparsify(inst)
    prob = pr.get_problem(kind)
    state = rollout_uniform(inst, graph, 8, rng)
    batch = prob.objective_batch(inst, state.seq, state.step)
    for a in range(8):
        seq = state.seq[a, :state.step[a]]
        f = pr.objective(inst, seq)           # validates feasibility too
        assert f == pytest.approx(batch[a], abs=1e-9)
        if kind in ("OP", "PCTSP"):
            assert state.traveled[a] <= (inst.max_len or np.inf) + FEAS_TOL
            closed = np.concatenate((seq, [0])) if seq[-1] != 0 else seq
            legs = inst.dist[closed[:-1], closed[1:]].sum()
            assert legs == pytest.approx(state.traveled[a]
                                         + (inst.dist[seq[-1], 0]
                                            if seq[-1] != 0 else 0.0),
                                         abs=1e-9)
        if kind == "PCTSP":
            assert state.prize[a] == pytest.approx(
                inst.prizes[seq].sum(), abs=1e-9)
        if kind == "SMTWTP":
            assert state.clock[a] == pytest.approx(
                inst.proc[seq].sum(), abs=1e-9)
            assert state.tardiness[a] == pytest.approx(f, abs=1e-9)
        if kind == "MKP":
            load = inst.weights[:, seq].sum(axis=1)
            assert np.allclose(state.residual[a],
                               inst.capacities - load, atol=1e-9)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def test_dataset_roundtrip_exact(tmp_path):
    instances = [pr.generate_instance("TSP", 10, seed=s) for s in range(3)]
    instances += [pr.generate_instance("MKP", 8, seed=4, m=3)]
    path = tmp_path / "mix.npz"
    pr.save_dataset(path, instances)
    back = pr.load_dataset(path)
    assert len(back) == 4
    for orig, copy in zip(instances, back):
        assert copy.kind == orig.kind and copy.n == orig.n
        for name in ("coords", "dist", "values", "weights", "capacities"):
            vo = getattr(orig, name)
            if vo is not None:
                assert getattr(copy, name).tobytes() == vo.tobytes()


def test_dataset_rejects_garbage(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, foo=np.zeros(3))
    with pytest.raises(pr.DatasetError):
        pr.load_dataset(path)
