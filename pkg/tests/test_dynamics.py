import numpy as np
import pytest
from hypothesis import given, strategies as st

from swarmql import dynamics
from swarmql.dynamics import (
    CostWeights,
    MasModel,
    SwarmState,
    all_tracking_errors,
    error_output,
    error_system_matrices,
    rollout_cost,
    stacked_error_system,
    stage_cost,
    step,
    tracking_error,
)
from swarmql.graph import Digraph

ROTATION = np.array([[0.0, 1.0], [-1.0, 0.0]])


def demo_model(demo_scenario):
    return demo_scenario.model


class StateFeedback:
    """Test controller: controls = gain @ stacked errors."""

    def __init__(self, gain, control_dims):
        self.gain = gain
        self.dims = control_dims

    def reset(self):
        pass

    def policy_controls(self, outputs, errors):
        u = self.gain @ np.concatenate(errors)
        out, at = [], 0
        for m in self.dims:
            out.append(u[at : at + m])
            at += m
        return out

    def observe(self, controls, outputs):
        pass


class TestStep:
    def test_leader_rotates(self, demo_scenario):
        model = demo_model(demo_scenario)
        state = SwarmState(tuple(np.zeros(2) for _ in range(3)), np.array([1.0, 0.0]))
        nxt = step(model, state, [np.zeros(1)] * 3)
        assert np.allclose(nxt.leader_state, [0.0, -1.0])
        assert nxt.step == 1

    def test_zero_dynamics_zero_control(self):
        g = Digraph(np.zeros((1, 1)), np.array([1.0]))
        with pytest.warns(UserWarning, match="not reachable"):
            model = MasModel(np.zeros((2, 2)), (np.array([[1.0], [0.0]]),), (np.eye(2),), g)
        state = SwarmState((np.array([3.0, -2.0]),), np.array([1.0, 1.0]))
        nxt = step(model, state, [np.zeros(1)])
        assert np.array_equal(nxt.follower_states[0], np.zeros(2))

    def test_input_matrix_drive(self, demo_scenario):
        model = demo_model(demo_scenario)
        state = SwarmState(tuple(np.zeros(2) for _ in range(3)), np.zeros(2))
        nxt = step(model, state, [np.array([1.0]), np.zeros(1), np.zeros(1)])
        assert np.allclose(nxt.follower_states[0], [2.0, 1.0])

    def test_dimension_mismatch(self, demo_scenario):
        model = demo_model(demo_scenario)
        state = SwarmState(tuple(np.zeros(2) for _ in range(3)), np.zeros(2))
        with pytest.raises(ValueError):
            step(model, state, [np.zeros(2), np.zeros(1), np.zeros(1)])


class TestTrackingError:
    def test_consensus_gives_zero(self, demo_scenario):
        model = demo_model(demo_scenario)
        x = np.array([0.3, -0.7])
        state = SwarmState((x.copy(), x.copy(), x.copy()), x.copy())
        for i in range(3):
            assert np.allclose(tracking_error(model, state, i), 0.0)

    def test_single_pinned_follower(self):
        g = Digraph(np.zeros((1, 1)), np.array([1.0]))
        model = MasModel(ROTATION, (np.array([[2.0], [1.0]]),), (np.eye(2),), g)
        state = SwarmState((np.array([1.0, 2.0]),), np.array([0.5, 0.5]))
        assert np.allclose(tracking_error(model, state, 0), [0.5, 1.5])

    def test_ring_demo_value(self, demo_scenario):
        model = demo_model(demo_scenario)
        state = SwarmState(
            (np.array([1.0, 0.0]), np.zeros(2), np.zeros(2)), np.zeros(2)
        )
        assert np.allclose(tracking_error(model, state, 0), [2.0, 0.0])


class TestErrorSystemMatrices:
    def test_pinned_node_gain(self, demo_scenario):
        f, _ = error_system_matrices(demo_model(demo_scenario), 0)
        assert np.allclose(f, [[4.0], [2.0]])

    def test_neighbor_coupling(self, demo_scenario):
        _, e = error_system_matrices(demo_model(demo_scenario), 0)
        assert set(e) == {2}
        assert np.allclose(e[2], [[-2.0], [-2.0]])

    def test_unpinned_node(self, demo_scenario):
        f, _ = error_system_matrices(demo_model(demo_scenario), 1)
        assert np.allclose(f, demo_scenario.model.b_matrices[1])


class TestErrorOutput:
    def test_identity_output(self, demo_scenario):
        assert np.allclose(
            error_output(demo_model(demo_scenario), 0, np.array([2.0, 0.0])), [2.0, 0.0]
        )

    def test_zero(self, demo_scenario):
        assert np.allclose(error_output(demo_model(demo_scenario), 1, np.zeros(2)), 0.0)

    def test_row_selection(self):
        g = Digraph(np.zeros((1, 1)), np.array([1.0]))
        model = MasModel(ROTATION, (np.array([[2.0], [1.0]]),), (np.array([[1.0, 0.0]]),), g)
        assert np.allclose(error_output(model, 0, np.array([3.0, 5.0])), [3.0])


class TestStageCost:
    def test_all_zero(self, demo_scenario):
        w = demo_scenario.weights
        assert stage_cost(w, 0, np.zeros(2), np.zeros(1), {2: np.zeros(1)}) == 0.0

    def test_demo_weights_value(self, demo_scenario):
        w = demo_scenario.weights
        got = stage_cost(w, 0, np.array([1.0, 0.0]), np.array([1.0]), {2: np.array([2.0])})
        assert got == pytest.approx(3.4)

    def test_no_neighbors(self):
        weights = CostWeights((np.eye(2),), (np.array([[2.0]]),), {})
        assert stage_cost(weights, 0, np.array([0.0, 1.0]), np.zeros(1), {}) == pytest.approx(1.0)


class TestRolloutCost:
    def test_zero_initial_state(self, demo_scenario):
        model = demo_scenario.model
        gain = np.zeros((3, 6))
        ctl = StateFeedback(gain, [1, 1, 1])
        cost = rollout_cost(model, demo_scenario.weights, ctl, [np.zeros(2)] * 3, 50, 0)
        assert cost == 0.0

    def test_horizon_one_equals_stage_cost(self, demo_scenario):
        model = demo_scenario.model
        rng = np.random.default_rng(0)
        gain = rng.normal(size=(3, 6)) * 0.1
        ctl = StateFeedback(gain, [1, 1, 1])
        e0 = [rng.normal(size=2) for _ in range(3)]
        cost = rollout_cost(model, demo_scenario.weights, ctl, e0, 1, 0)
        u = gain @ np.concatenate(e0)
        y0 = model.c_matrices[0] @ e0[0]
        expected = stage_cost(demo_scenario.weights, 0, y0, u[0:1], {2: u[2:3]})
        assert cost == pytest.approx(expected)

    def test_matches_oracle_kernel_value(self, demo_scenario):
        # the converged model-based kernels price exactly the cost of their
        # own policies, so a long truncated rollout must reproduce them
        from swarmql.oracle import model_based_vi

        model, weights = demo_scenario.model, demo_scenario.weights
        vi = model_based_vi(model, weights, max_iter=2000, tol=1e-12)
        gain = vi.policy_trace[-1]
        rng = np.random.default_rng(4)
        e0 = [rng.uniform(-1, 1, size=2) for _ in range(3)]
        for i in range(3):
            ctl = StateFeedback(gain, [1, 1, 1])
            cost = rollout_cost(model, weights, ctl, e0, 500, i)
            stacked = np.concatenate(e0)
            expected = float(stacked @ vi.kernel_trace[-1].stacked[i] @ stacked)
            assert cost == pytest.approx(expected, rel=1e-3)

    def test_single_agent_dare_value(self, single_scenario):
        from swarmql.oracle import dare_solve

        model, weights = single_scenario.model, single_scenario.weights
        f, _ = error_system_matrices(model, 0)
        q_eff = model.c_matrices[0].T @ weights.q_weights[0] @ model.c_matrices[0]
        p_star, k_star = dare_solve(model.a_matrix, f, q_eff, weights.r_self[0])
        e0 = np.array([0.8, -0.4])
        ctl = StateFeedback(-k_star, [1])
        cost = rollout_cost(model, weights, ctl, [e0], 500, 0)
        assert cost == pytest.approx(float(e0 @ p_star @ e0), rel=1e-3)


def test_tracking_error_linearity(demo_scenario):
    model = demo_scenario.model
    rng = np.random.default_rng(1)
    xs = tuple(rng.normal(size=2) for _ in range(3))
    x0 = rng.normal(size=2)
    s1 = SwarmState(xs, x0)
    s2 = SwarmState(tuple(2 * x for x in xs), 2 * x0)
    for i in range(3):
        assert np.allclose(2 * tracking_error(model, s1, i), tracking_error(model, s2, i))


def test_error_recursion_consistency(demo_scenario):
    # errors recomputed from states must follow the driven error recursion
    model = demo_scenario.model
    rng = np.random.default_rng(7)
    state = SwarmState(tuple(rng.normal(size=2) for _ in range(3)), rng.normal(size=2))
    for _ in range(30):
        controls = [rng.normal(size=1) for _ in range(3)]
        errs = all_tracking_errors(model, state)
        nxt = step(model, state, controls)
        next_errs = all_tracking_errors(model, nxt)
        for i in range(3):
            f_i, e_ij = error_system_matrices(model, i)
            predicted = model.a_matrix @ errs[i] + f_i @ controls[i]
            for j, mat in e_ij.items():
                predicted = predicted + mat @ controls[j]
            assert np.abs(predicted - next_errs[i]).max() <= 1e-10
        state = nxt


def test_stacked_error_system_matches_recursion(demo_scenario):
    model = demo_scenario.model
    a_all, b_all, e_slices, u_slices = stacked_error_system(model)
    rng = np.random.default_rng(3)
    e = rng.normal(size=6)
    u = rng.normal(size=3)
    nxt = a_all @ e + b_all @ u
    for i in range(3):
        f_i, e_ij = error_system_matrices(model, i)
        expected = model.a_matrix @ e[e_slices[i]] + f_i @ u[u_slices[i]]
        for j, mat in e_ij.items():
            expected = expected + mat @ u[u_slices[j]]
        assert np.allclose(nxt[e_slices[i]], expected)


@given(
    st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    st.lists(st.floats(-5, 5), min_size=1, max_size=1),
    st.lists(st.floats(-5, 5), min_size=1, max_size=1),
)
def test_stage_cost_positivity(y, u, uj):
    weights = CostWeights(
        (np.eye(2),), (np.array([[2.0]]),), {(0, 0): np.array([[0.1]])}
    )
    cost = stage_cost(weights, 0, np.array(y), np.array(u), {0: np.array(uj)})
    assert cost >= 0.0
    if cost == 0.0:
        assert np.allclose(y, 0) and np.allclose(u, 0) and np.allclose(uj, 0)


def test_leader_is_control_independent(demo_scenario):
    model = demo_scenario.model
    state = SwarmState(tuple(np.zeros(2) for _ in range(3)), np.array([0.4, 0.6]))
    rng = np.random.default_rng(2)
    a = step(model, state, [rng.normal(size=1) for _ in range(3)])
    b = step(model, state, [rng.normal(size=1) for _ in range(3)])
    assert np.array_equal(a.leader_state, b.leader_state)


def test_weights_must_be_positive_definite():
    with pytest.raises(ValueError, match="positive definite"):
        CostWeights((np.eye(2),), (np.array([[0.0]]),), {})


def test_unreachable_pair_warns():
    g = Digraph(np.zeros((1, 1)), np.array([1.0]))
    with pytest.warns(UserWarning, match="not reachable"):
        MasModel(np.eye(2), (np.array([[0.0], [0.0]]),), (np.eye(2),), g)
