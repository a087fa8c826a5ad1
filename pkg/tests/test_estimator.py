import numpy as np
import pytest

from swarmql.dynamics import MasModel, SwarmState, all_tracking_errors, error_output, step
from swarmql.estimator import (
    NotObservable,
    RankDeficient,
    build_block_matrices,
    build_estimator,
    observability_index,
    reconstruct_error,
    window_from_history,
)
from swarmql.graph import Digraph, neighbors

ROTATION = np.array([[0.0, 1.0], [-1.0, 0.0]])


def run_open_loop(model, steps, seed=0, amplitude=1.0):
    rng = np.random.default_rng(seed)
    nbar = model.num_agents
    state = SwarmState(
        tuple(rng.uniform(-1, 1, size=model.state_dim) for _ in range(nbar)),
        rng.uniform(-1, 1, size=model.state_dim),
    )
    controls = [np.zeros((steps, model.control_dim(i))) for i in range(nbar)]
    outputs = [np.zeros((steps, model.output_dim(i))) for i in range(nbar)]
    errors = [np.zeros((steps, model.state_dim)) for i in range(nbar)]
    for k in range(steps):
        errs = all_tracking_errors(model, state)
        for i in range(nbar):
            errors[i][k] = errs[i]
            outputs[i][k] = error_output(model, i, errs[i])
            controls[i][k] = rng.uniform(-amplitude, amplitude, size=model.control_dim(i))
        state = step(model, state, [controls[i][k] for i in range(nbar)])
    return controls, outputs, errors


def window_at(model, controls, outputs, i, k, horizon):
    nbr = neighbors(model.graph, i)
    return window_from_history(
        controls[i][k - horizon : k][::-1],
        [controls[j][k - horizon : k][::-1] for j in nbr],
        outputs[i][k - horizon : k][::-1],
        k,
    )


class TestBlockMatrices:
    def test_observability_stack(self, demo_scenario):
        blocks = build_block_matrices(demo_scenario.model, 0, 2)
        assert np.allclose(
            blocks.observability, [[0.0, 1.0], [-1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
        )

    def test_single_step_feedthrough_is_zero(self, demo_scenario):
        blocks = build_block_matrices(demo_scenario.model, 0, 1)
        assert blocks.own_feedthrough.shape == (2, 1)
        assert np.array_equal(blocks.own_feedthrough, np.zeros((2, 1)))

    def test_control_stack(self, demo_scenario):
        blocks = build_block_matrices(demo_scenario.model, 0, 2)
        assert np.allclose(blocks.own_controls, [[4.0, 2.0], [2.0, -4.0]])

    def test_feedthrough_shape_and_zero_structure(self, demo_scenario):
        blocks = build_block_matrices(demo_scenario.model, 0, 3)
        d = blocks.own_feedthrough
        assert d.shape == (6, 3)
        assert np.array_equal(d[:, 0], np.zeros(6))
        assert np.array_equal(d[4:, :], np.zeros((2, 3)))


class TestBuildEstimator:
    def test_output_map_closed_form(self, demo_scenario):
        est = build_estimator(demo_scenario.model, 0, 2)
        expected = -0.5 * np.hstack([ROTATION.T, np.eye(2)])
        assert np.allclose(est.t_output, expected, atol=1e-12)

    def test_left_inverse_identity(self, demo_scenario):
        model = demo_scenario.model
        est = build_estimator(model, 0, 2)
        blocks = build_block_matrices(model, 0, 2)
        a_pow = np.linalg.matrix_power(model.a_matrix, 2)
        assert np.abs(est.t_output @ blocks.observability - a_pow).max() <= 1e-9

    def test_too_few_output_rows(self):
        g = Digraph(np.zeros((1, 1)), np.array([1.0]))
        model = MasModel(ROTATION, (np.array([[2.0], [1.0]]),), (np.array([[1.0, 0.0]]),), g)
        with pytest.raises(RankDeficient):
            build_estimator(model, 0, 1)


class TestReconstruct:
    def test_zero_window(self, demo_scenario):
        model = demo_scenario.model
        est = build_estimator(model, 0, 2)
        window = window_from_history(
            [np.zeros(1)] * 2, [[np.zeros(1)] * 2], [np.zeros(2)] * 2, 2
        )
        assert np.allclose(reconstruct_error(est, window), 0.0)

    def test_exact_on_simulated_run(self, demo_scenario):
        model = demo_scenario.model
        horizon = 2
        ests = [build_estimator(model, i, horizon) for i in range(3)]
        controls, outputs, errors = run_open_loop(model, 120, seed=2)
        for k in range(horizon, 120):
            for i in range(3):
                window = window_at(model, controls, outputs, i, k, horizon)
                err = reconstruct_error(ests[i], window) - errors[i][k]
                assert np.abs(err).max() <= 1e-8 * (1 + np.linalg.norm(errors[i][k]))

    def test_linearity_in_window(self, demo_scenario):
        model = demo_scenario.model
        est = build_estimator(model, 0, 2)
        rng = np.random.default_rng(5)
        w1 = window_from_history(
            [rng.normal(size=1) for _ in range(2)],
            [[rng.normal(size=1) for _ in range(2)]],
            [rng.normal(size=2) for _ in range(2)],
            2,
        )
        scaled = window_from_history(
            [3.0 * u for u in w1.own_controls],
            [[3.0 * u for u in w1.neighbor_controls[0]]],
            [3.0 * y for y in w1.outputs],
            2,
        )
        assert np.allclose(
            reconstruct_error(est, scaled), 3.0 * reconstruct_error(est, w1)
        )


class TestObservabilityIndex:
    def test_full_state_output(self, demo_scenario):
        assert observability_index(demo_scenario.model, 0) == 1

    def test_partial_output(self):
        g = Digraph(np.zeros((1, 1)), np.array([1.0]))
        model = MasModel(ROTATION, (np.array([[2.0], [1.0]]),), (np.array([[1.0, 0.0]]),), g)
        assert observability_index(model, 0) == 2

    def test_unobservable_pair(self):
        g = Digraph(np.zeros((1, 1)), np.array([1.0]))
        with pytest.warns(UserWarning, match="not observable"):
            model = MasModel(
                np.diag([2.0, 3.0]), (np.array([[1.0], [1.0]]),), (np.array([[1.0, 0.0]]),), g
            )
        with pytest.raises(NotObservable):
            observability_index(model, 0)


def test_longer_window_also_exact(demo_scenario):
    model = demo_scenario.model
    controls, outputs, errors = run_open_loop(model, 60, seed=9)
    for horizon in (2, 3):
        ests = [build_estimator(model, i, horizon) for i in range(3)]
        for k in range(horizon, 60):
            for i in range(3):
                window = window_at(model, controls, outputs, i, k, horizon)
                err = reconstruct_error(ests[i], window) - errors[i][k]
                assert np.abs(err).max() <= 1e-8


def test_estimator_is_time_invariant(demo_scenario):
    a = build_estimator(demo_scenario.model, 1, 2)
    b = build_estimator(demo_scenario.model, 1, 2)
    assert np.array_equal(a.t_own, b.t_own)
    assert np.array_equal(a.t_output, b.t_output)
    for j in a.t_neighbors:
        assert np.array_equal(a.t_neighbors[j], b.t_neighbors[j])
