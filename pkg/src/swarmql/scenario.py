"""Scenario files, learned-policy files, and their validation.

A scenario is a YAML document with nested sections (graph, model,
weights, learner, simulation) and explicit matrix literals as row lists.
Agent indices in scenario files are 1-based to match the usual node
numbering; everything is 0-based in code.  Loading validates every
invariant and names the offending field; serialization round-trips
exactly (floats are written with full repr precision).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dynamics import CostWeights, MasModel, SwarmState
from .graph import Digraph, is_strongly_connected, neighbors
from .learner import LearnerConfig, LearningReport
from .qkernel import KernelLayout, PolicyGains, QKernel

__all__ = [
    "ParseError",
    "ValidationError",
    "SimulationSettings",
    "Scenario",
    "load_scenario",
    "scenario_to_dict",
    "save_scenario",
    "initial_state",
    "save_policies",
    "load_policies",
    "save_report",
]


class ParseError(RuntimeError):
    """The scenario file is malformed (missing or mistyped fields)."""


class ValidationError(RuntimeError):
    """The scenario parses but violates a model invariant."""


@dataclass(frozen=True)
class SimulationSettings:
    """Closed-loop rollout settings: horizon and initial-state spec.

    Follower initial states are either explicit vectors or a seeded
    uniform draw; the leader start defaults to zero when omitted.
    """

    horizon: int = 100
    leader_initial: np.ndarray | None = None
    follower_initial: list | None = None
    follower_seed: int = 0
    follower_low: float = -1.0
    follower_high: float = 1.0


@dataclass(frozen=True)
class Scenario:
    name: str
    graph: Digraph
    model: MasModel
    weights: CostWeights
    learner: LearnerConfig
    simulation: SimulationSettings


def _require(mapping: dict, key: str, where: str):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ParseError(f"{where}: missing required field '{key}'")
    return mapping[key]


def _matrix(raw, where: str) -> np.ndarray:
    try:
        mat = np.array(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: not a numeric matrix ({exc})") from None
    if mat.ndim == 1:
        mat = mat.reshape(1, -1)
    if mat.ndim != 2:
        raise ParseError(f"{where}: expected a 2-D matrix literal")
    return mat


def _vector(raw, where: str) -> np.ndarray:
    try:
        vec = np.array(raw, dtype=float).reshape(-1)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: not a numeric vector ({exc})") from None
    return vec


def load_scenario(path: str | Path) -> Scenario:
    """Parse and fully validate a scenario file."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"scenario file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: top level must be a mapping")
    return scenario_from_dict(raw)


def scenario_from_dict(raw: dict) -> Scenario:
    name = raw.get("name", "unnamed")
    graph_raw = _require(raw, "graph", "scenario")
    adjacency = _matrix(_require(graph_raw, "adjacency", "graph"), "graph.adjacency")
    pinning = _vector(_require(graph_raw, "pinning", "graph"), "graph.pinning")

    if adjacency.shape[0] != adjacency.shape[1]:
        raise ValidationError("graph.adjacency: matrix must be square")
    if pinning.shape[0] != adjacency.shape[0]:
        raise ValidationError("graph.pinning: length must match the number of nodes")
    if np.any(adjacency < 0) or np.any(pinning < 0):
        raise ValidationError("graph: edge weights and pinning gains must be non-negative")
    if np.any(np.diag(adjacency) != 0):
        raise ValidationError("graph.adjacency: self loops are not allowed")
    if not np.any(pinning > 0):
        raise ValidationError("graph.pinning: no leader pinning (all gains are zero)")
    graph = Digraph(adjacency, pinning)
    if not is_strongly_connected(graph):
        raise ValidationError("graph.adjacency: follower digraph is not strongly connected")
    nbar = graph.node_count

    model_raw = _require(raw, "model", "scenario")
    a_matrix = _matrix(_require(model_raw, "a_matrix", "model"), "model.a_matrix")
    b_raw = _require(model_raw, "b_matrices", "model")
    c_raw = _require(model_raw, "c_matrices", "model")
    if len(b_raw) != nbar or len(c_raw) != nbar:
        raise ValidationError("model: need one input and one output matrix per follower")
    try:
        model = MasModel(
            a_matrix,
            tuple(_matrix(b, f"model.b_matrices[{i + 1}]") for i, b in enumerate(b_raw)),
            tuple(_matrix(c, f"model.c_matrices[{i + 1}]") for i, c in enumerate(c_raw)),
            graph,
        )
    except ValueError as exc:
        raise ValidationError(f"model: {exc}") from None

    weights_raw = _require(raw, "weights", "scenario")
    q_raw = _require(weights_raw, "q", "weights")
    r_raw = _require(weights_raw, "r_self", "weights")
    if len(q_raw) != nbar or len(r_raw) != nbar:
        raise ValidationError("weights: need one q and one r_self matrix per follower")
    rn: dict[tuple[int, int], np.ndarray] = {}
    for entry in weights_raw.get("r_neighbor", []):
        i = int(_require(entry, "agent", "weights.r_neighbor")) - 1
        j = int(_require(entry, "neighbor", "weights.r_neighbor")) - 1
        rn[(i, j)] = _matrix(_require(entry, "matrix", "weights.r_neighbor"), "weights.r_neighbor.matrix")
    for i in range(nbar):
        for j in neighbors(graph, i):
            if (i, j) not in rn:
                raise ValidationError(
                    f"weights.r_neighbor: missing entry for agent {i + 1}, neighbor {j + 1}"
                )
    for (i, j) in rn:
        if j not in neighbors(graph, i):
            raise ValidationError(
                f"weights.r_neighbor: node {j + 1} is not a neighbor of agent {i + 1}"
            )
    try:
        weights = CostWeights(
            tuple(_matrix(q, f"weights.q[{i + 1}]") for i, q in enumerate(q_raw)),
            tuple(_matrix(r, f"weights.r_self[{i + 1}]") for i, r in enumerate(r_raw)),
            rn,
        )
    except ValueError as exc:
        raise ValidationError(f"weights: {exc}") from None

    learner_raw = raw.get("learner", {}) or {}
    try:
        learner = LearnerConfig(**learner_raw)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"learner: {exc}") from None

    sim_raw = raw.get("simulation", {}) or {}
    follower_initial = sim_raw.get("follower_initial")
    if follower_initial is not None:
        follower_initial = [
            _vector(v, f"simulation.follower_initial[{i + 1}]") for i, v in enumerate(follower_initial)
        ]
        if len(follower_initial) != nbar:
            raise ValidationError("simulation.follower_initial: need one vector per follower")
    leader_initial = sim_raw.get("leader_initial")
    if leader_initial is not None:
        leader_initial = _vector(leader_initial, "simulation.leader_initial")
    simulation = SimulationSettings(
        horizon=int(sim_raw.get("horizon", 100)),
        leader_initial=leader_initial,
        follower_initial=follower_initial,
        follower_seed=int(sim_raw.get("follower_seed", 0)),
        follower_low=float(sim_raw.get("follower_low", -1.0)),
        follower_high=float(sim_raw.get("follower_high", 1.0)),
    )
    if simulation.horizon < 1:
        raise ValidationError("simulation.horizon: must be positive")
    return Scenario(name, graph, model, weights, learner, simulation)


def scenario_to_dict(sc: Scenario) -> dict:
    out: dict = {
        "name": sc.name,
        "graph": {
            "adjacency": sc.graph.adjacency.tolist(),
            "pinning": sc.graph.pinning.tolist(),
        },
        "model": {
            "a_matrix": sc.model.a_matrix.tolist(),
            "b_matrices": [b.tolist() for b in sc.model.b_matrices],
            "c_matrices": [c.tolist() for c in sc.model.c_matrices],
        },
        "weights": {
            "q": [q.tolist() for q in sc.weights.q_weights],
            "r_self": [r.tolist() for r in sc.weights.r_self],
            "r_neighbor": [
                {"agent": i + 1, "neighbor": j + 1, "matrix": mat.tolist()}
                for (i, j), mat in sorted(sc.weights.r_neighbor.items())
            ],
        },
        "learner": {
            "horizon": sc.learner.horizon,
            "exploration_amplitude": sc.learner.exploration_amplitude,
            "samples_per_iteration": sc.learner.samples_per_iteration,
            "convergence_epsilon": sc.learner.convergence_epsilon,
            "max_iterations": sc.learner.max_iterations,
            "ridge_lambda": sc.learner.ridge_lambda,
            "rng_seed": sc.learner.rng_seed,
            "coupling_mode": sc.learner.coupling_mode,
            "reuse_data": sc.learner.reuse_data,
            "init_span": sc.learner.init_span,
            "holdout_fraction": sc.learner.holdout_fraction,
        },
        "simulation": {
            "horizon": sc.simulation.horizon,
            "follower_seed": sc.simulation.follower_seed,
            "follower_low": sc.simulation.follower_low,
            "follower_high": sc.simulation.follower_high,
        },
    }
    if sc.simulation.leader_initial is not None:
        out["simulation"]["leader_initial"] = sc.simulation.leader_initial.tolist()
    if sc.simulation.follower_initial is not None:
        out["simulation"]["follower_initial"] = [v.tolist() for v in sc.simulation.follower_initial]
    return out


def save_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(scenario_to_dict(sc), sort_keys=False))


def initial_state(sc: Scenario) -> SwarmState:
    """Initial swarm state per the scenario's simulation settings."""
    n = sc.model.state_dim
    if sc.simulation.follower_initial is not None:
        followers = tuple(np.asarray(v, dtype=float) for v in sc.simulation.follower_initial)
    else:
        rng = np.random.default_rng(sc.simulation.follower_seed)
        followers = tuple(
            rng.uniform(sc.simulation.follower_low, sc.simulation.follower_high, size=n)
            for _ in range(sc.model.num_agents)
        )
    leader = (
        np.asarray(sc.simulation.leader_initial, dtype=float)
        if sc.simulation.leader_initial is not None
        else np.zeros(n)
    )
    return SwarmState(followers, leader, 0)


def save_policies(
    gains: list[PolicyGains],
    kernels: list[QKernel],
    coupling_mode: str,
    path: str | Path,
) -> None:
    """Write learned gains plus their kernels as deterministic JSON."""
    doc = {
        "coupling_mode": coupling_mode,
        "agents": [
            {
                "layout": {
                    "own_dim": g.layout.own_dim,
                    "neighbor_dims": list(g.layout.neighbor_dims),
                    "output_dim": g.layout.output_dim,
                    "horizon": g.layout.horizon,
                },
                "g_own_past": g.g_own_past.tolist(),
                "g_neighbors": g.g_neighbors.tolist(),
                "g_output": g.g_output.tolist(),
                "inverted_term": g.inverted_term.tolist(),
                "kernel_upper_triangle": k.upper_triangle().tolist(),
            }
            for g, k in zip(gains, kernels)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_policies(path: str | Path) -> tuple[list[PolicyGains], list[QKernel], str]:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"policy file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None
    gains = []
    kernels = []
    for idx, agent in enumerate(doc.get("agents", [])):
        lay_raw = _require(agent, "layout", f"agents[{idx}]")
        layout = KernelLayout(
            own_dim=int(_require(lay_raw, "own_dim", "layout")),
            neighbor_dims=tuple(int(m) for m in _require(lay_raw, "neighbor_dims", "layout")),
            output_dim=int(_require(lay_raw, "output_dim", "layout")),
            horizon=int(_require(lay_raw, "horizon", "layout")),
        )
        gains.append(
            PolicyGains(
                layout,
                np.array(agent["g_own_past"], dtype=float).reshape(layout.own_dim, -1),
                np.array(agent["g_neighbors"], dtype=float).reshape(layout.own_dim, -1),
                np.array(agent["g_output"], dtype=float).reshape(layout.own_dim, -1),
                np.array(agent["inverted_term"], dtype=float),
            )
        )
        kernels.append(
            QKernel.from_upper_triangle(layout, np.array(agent["kernel_upper_triangle"], dtype=float))
        )
    if not gains:
        raise ValidationError(f"{path}: policy file contains no agents")
    return gains, kernels, doc.get("coupling_mode", "exact")


def save_report(report: LearningReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
