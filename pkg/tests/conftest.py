import dataclasses
import time

import numpy as np
import pytest
from hypothesis import settings

from swarmql.cli import bundled_scenario_path
from swarmql.dynamics import CostWeights, MasModel
from swarmql.graph import Digraph
from swarmql.learner import LearnerConfig, kernel_from_coefficients, run
from swarmql.oracle import dare_solve
from swarmql.scenario import Scenario, SimulationSettings, load_scenario

settings.register_profile("ci", max_examples=25, deadline=None)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def demo_scenario() -> Scenario:
    return load_scenario(bundled_scenario_path())


@pytest.fixture(scope="session")
def scalar_setup():
    """Scalar test system: A=0.5, B=C=1, pinned follower, Q=R=1."""
    graph = Digraph(np.zeros((1, 1)), np.array([1.0]))
    model = MasModel(np.array([[0.5]]), (np.array([[1.0]]),), (np.array([[1.0]]),), graph)
    weights = CostWeights((np.array([[1.0]]),), (np.array([[1.0]]),), {})
    p_star, k_star = dare_solve(model.a_matrix, np.array([[1.0]]), np.array([[1.0]]), np.array([[1.0]]))
    return model, weights, p_star, k_star


@pytest.fixture(scope="session")
def single_scenario(demo_scenario) -> Scenario:
    """Single-follower reduction of the demo system (agent 1, pinned)."""
    graph = Digraph(np.zeros((1, 1)), np.array([1.0]))
    model = MasModel(
        demo_scenario.model.a_matrix,
        (demo_scenario.model.b_matrices[0],),
        (demo_scenario.model.c_matrices[0],),
        graph,
    )
    weights = CostWeights(
        (demo_scenario.weights.q_weights[0],),
        (demo_scenario.weights.r_self[0],),
        {},
    )
    learner_cfg = LearnerConfig(
        horizon=2, convergence_epsilon=1e-4, max_iterations=40, rng_seed=11
    )
    return Scenario("single-follower", graph, model, weights, learner_cfg, SimulationSettings())


def _learn(scenario: Scenario, **overrides):
    cfg = dataclasses.replace(scenario.learner, **overrides) if overrides else scenario.learner
    started = time.perf_counter()
    report, gains = run(scenario.model, scenario.weights, cfg)
    elapsed = time.perf_counter() - started
    kernels = [
        kernel_from_coefficients(report.layouts[i], report.kernel_snapshots[-1][i])
        for i in range(scenario.model.num_agents)
    ]
    return report, gains, kernels, elapsed


@pytest.fixture(scope="session")
def demo_learning(demo_scenario):
    """One converged learning run of the bundled demo, shared across tests."""
    return _learn(demo_scenario)


@pytest.fixture(scope="session")
def single_learning(single_scenario):
    return _learn(single_scenario)


@pytest.fixture(scope="session")
def scalar_learning(scalar_setup):
    model, weights, _, _ = scalar_setup
    cfg = LearnerConfig(horizon=1, convergence_epsilon=1e-9, max_iterations=60, rng_seed=3)
    started = time.perf_counter()
    report, gains = run(model, weights, cfg)
    elapsed = time.perf_counter() - started
    kernels = [kernel_from_coefficients(report.layouts[0], report.kernel_snapshots[-1][0])]
    return report, gains, kernels, elapsed
