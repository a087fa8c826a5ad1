"""Follower/leader dynamics, neighborhood tracking errors, and game costs.

Follower ``i`` evolves as ``x_i(k+1) = A x_i(k) + B_i u_i(k)`` with a shared
state matrix and per-agent input matrices; the leader runs autonomously as
``x_0(k+1) = A x_0(k)``.  Agent ``i``'s local disagreement with its
neighbors and (if pinned) the leader,

    e_i(k) = sum_j a_ij (x_i - x_j) + b_i (x_i - x_0),

obeys the driven linear recursion

    e_i(k+1) = A e_i(k) + F_i u_i(k) + sum_{j in N_i} E_ij u_j(k),

with ``F_i = (d_i + b_i) B_i`` and ``E_ij = -a_ij B_j``.  This module is
the simulation ground truth: the learner only ever consumes the (u, y)
streams it produces, while the oracle checks read the full state.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .graph import Digraph, in_degree, neighbors

RANK_TOL = 1e-9

__all__ = [
    "MasModel",
    "CostWeights",
    "SwarmState",
    "step",
    "tracking_error",
    "all_tracking_errors",
    "error_system_matrices",
    "error_output",
    "stage_cost",
    "stacked_error_system",
    "simulate_errors",
    "rollout_cost",
]


@dataclass(frozen=True)
class MasModel:
    """Shared state matrix, per-agent input/output matrices, and topology.

    Ground truth for simulation and validation only; the learned
    controller never reads these matrices.
    """

    a_matrix: np.ndarray
    b_matrices: tuple[np.ndarray, ...]
    c_matrices: tuple[np.ndarray, ...]
    graph: Digraph

    def __post_init__(self) -> None:
        a = np.array(self.a_matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("state matrix must be square")
        n = a.shape[0]
        bs = tuple(np.array(b, dtype=float).reshape(n, -1) for b in self.b_matrices)
        cs = tuple(np.array(c, dtype=float).reshape(-1, n) for c in self.c_matrices)
        if len(bs) != self.graph.node_count or len(cs) != self.graph.node_count:
            raise ValueError("need one input and one output matrix per follower")
        for arr in (a, *bs, *cs):
            arr.setflags(write=False)
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "b_matrices", bs)
        object.__setattr__(self, "c_matrices", cs)
        for i, b in enumerate(bs):
            if _staircase_rank(a, b) < n:
                warnings.warn(
                    f"(A, B_{i + 1}) is not reachable at tolerance {RANK_TOL}; "
                    "learning quality may degrade",
                    stacklevel=2,
                )
        for i, c in enumerate(cs):
            if _staircase_rank(a.T, c.T) < n:
                warnings.warn(
                    f"(A, C_{i + 1}) is not observable at tolerance {RANK_TOL}; "
                    "windowed error reconstruction may fail",
                    stacklevel=2,
                )

    @property
    def state_dim(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def num_agents(self) -> int:
        return self.graph.node_count

    def control_dim(self, i: int) -> int:
        return self.b_matrices[i].shape[1]

    def output_dim(self, i: int) -> int:
        return self.c_matrices[i].shape[0]


def _staircase_rank(a: np.ndarray, b: np.ndarray) -> int:
    """Rank of [B, AB, ..., A^(n-1)B] with singular values below RANK_TOL dropped."""
    n = a.shape[0]
    blocks = [b]
    for _ in range(n - 1):
        blocks.append(a @ blocks[-1])
    sv = np.linalg.svd(np.hstack(blocks), compute_uv=False)
    return int(np.count_nonzero(sv > RANK_TOL))


@dataclass(frozen=True)
class CostWeights:
    """Positive-definite stage-cost weights of the multi-player game.

    ``r_neighbor[(i, j)]`` prices agent j's control inside agent i's cost
    and must be present exactly for the neighbor pairs of the graph.
    """

    q_weights: tuple[np.ndarray, ...]
    r_self: tuple[np.ndarray, ...]
    r_neighbor: Mapping[tuple[int, int], np.ndarray]

    def __post_init__(self) -> None:
        qs = tuple(np.atleast_2d(np.array(q, dtype=float)) for q in self.q_weights)
        rs = tuple(np.atleast_2d(np.array(r, dtype=float)) for r in self.r_self)
        rn = {k: np.atleast_2d(np.array(v, dtype=float)) for k, v in self.r_neighbor.items()}
        for name, mat in [(f"q_weights[{i}]", q) for i, q in enumerate(qs)] + [
            (f"r_self[{i}]", r) for i, r in enumerate(rs)
        ] + [(f"r_neighbor[{k}]", v) for k, v in rn.items()]:
            _require_spd(name, mat)
        for arr in (*qs, *rs, *rn.values()):
            arr.setflags(write=False)
        object.__setattr__(self, "q_weights", qs)
        object.__setattr__(self, "r_self", rs)
        object.__setattr__(self, "r_neighbor", rn)


def _require_spd(name: str, mat: np.ndarray) -> None:
    if mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(mat).min() <= 0.0:
        raise ValueError(f"{name} must be positive definite")


@dataclass(frozen=True)
class SwarmState:
    """Follower states, leader state, and the current step index."""

    follower_states: tuple[np.ndarray, ...]
    leader_state: np.ndarray
    step: int = 0

    def __post_init__(self) -> None:
        xs = tuple(np.array(x, dtype=float).reshape(-1) for x in self.follower_states)
        x0 = np.array(self.leader_state, dtype=float).reshape(-1)
        if any(x.shape != x0.shape for x in xs):
            raise ValueError("all follower states must share the leader's dimension")
        if self.step < 0:
            raise ValueError("step index must be non-negative")
        object.__setattr__(self, "follower_states", xs)
        object.__setattr__(self, "leader_state", x0)


def step(model: MasModel, state: SwarmState, controls: Sequence[np.ndarray]) -> SwarmState:
    """Advance followers under ``controls`` and the leader autonomously."""
    if len(controls) != model.num_agents:
        raise ValueError("need one control vector per follower")
    a = model.a_matrix
    nxt = []
    for i, (x, u) in enumerate(zip(state.follower_states, controls)):
        u = np.asarray(u, dtype=float).reshape(-1)
        if u.shape[0] != model.control_dim(i):
            raise ValueError(f"control {i} has dimension {u.shape[0]}, expected {model.control_dim(i)}")
        nxt.append(a @ x + model.b_matrices[i] @ u)
    return SwarmState(tuple(nxt), a @ state.leader_state, state.step + 1)


def tracking_error(model: MasModel, state: SwarmState, i: int) -> np.ndarray:
    """Graph-weighted disagreement of agent ``i`` with neighbors and leader."""
    g = model.graph
    if not 0 <= i < g.node_count:
        raise IndexError(f"agent index {i} out of range")
    xi = state.follower_states[i]
    e = g.pinning[i] * (xi - state.leader_state)
    for j in neighbors(g, i):
        e = e + g.adjacency[i, j] * (xi - state.follower_states[j])
    return e


def all_tracking_errors(model: MasModel, state: SwarmState) -> list[np.ndarray]:
    return [tracking_error(model, state, i) for i in range(model.num_agents)]


def error_system_matrices(model: MasModel, i: int) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Input matrices of agent ``i``'s tracking-error recursion.

    Returns ``F_i = (d_i + b_i) B_i`` and the map ``j -> E_ij = -a_ij B_j``
    over the neighbors of ``i``.
    """
    g = model.graph
    f = (in_degree(g, i) + g.pinning[i]) * model.b_matrices[i]
    e = {j: -g.adjacency[i, j] * model.b_matrices[j] for j in neighbors(g, i)}
    return f, e


def error_output(model: MasModel, i: int, e_i: np.ndarray) -> np.ndarray:
    """Measured error output ``y_i = C_i e_i``."""
    e_i = np.asarray(e_i, dtype=float).reshape(-1)
    if e_i.shape[0] != model.state_dim:
        raise ValueError(f"error vector has dimension {e_i.shape[0]}, expected {model.state_dim}")
    return model.c_matrices[i] @ e_i


def stage_cost(
    weights: CostWeights,
    i: int,
    y_i: np.ndarray,
    u_i: np.ndarray,
    neighbor_controls: Mapping[int, np.ndarray],
) -> float:
    """One-step cost: output penalty, own control penalty, neighbor control penalties."""
    y = np.asarray(y_i, dtype=float).reshape(-1)
    u = np.asarray(u_i, dtype=float).reshape(-1)
    q = weights.q_weights[i]
    r = weights.r_self[i]
    if y.shape[0] != q.shape[0] or u.shape[0] != r.shape[0]:
        raise ValueError("stage cost dimension mismatch")
    total = float(y @ q @ y + u @ r @ u)
    for j, uj in neighbor_controls.items():
        uj = np.asarray(uj, dtype=float).reshape(-1)
        rij = weights.r_neighbor[(i, j)]
        if uj.shape[0] != rij.shape[0]:
            raise ValueError("stage cost dimension mismatch for neighbor control")
        total += float(uj @ rij @ uj)
    return total


def stacked_error_system(model: MasModel) -> tuple[np.ndarray, np.ndarray, list[slice], list[slice]]:
    """Stacked tracking-error dynamics over all agents.

    Returns ``(A_all, B_all, error_slices, control_slices)`` such that the
    stacked error vector obeys ``e(k+1) = A_all e(k) + B_all u(k)`` with
    ``u`` the concatenation of every agent's control.
    """
    n = model.state_dim
    nbar = model.num_agents
    a_all = np.kron(np.eye(nbar), model.a_matrix)
    m_dims = [model.control_dim(i) for i in range(nbar)]
    m_off = np.concatenate([[0], np.cumsum(m_dims)])
    b_all = np.zeros((nbar * n, int(m_off[-1])))
    for i in range(nbar):
        f_i, e_ij = error_system_matrices(model, i)
        b_all[i * n : (i + 1) * n, m_off[i] : m_off[i + 1]] = f_i
        for j, e_mat in e_ij.items():
            b_all[i * n : (i + 1) * n, m_off[j] : m_off[j + 1]] = e_mat
    error_slices = [slice(i * n, (i + 1) * n) for i in range(nbar)]
    control_slices = [slice(int(m_off[i]), int(m_off[i + 1])) for i in range(nbar)]
    return a_all, b_all, error_slices, control_slices


def simulate_errors(
    model: MasModel,
    controller,
    initial_errors: Sequence[np.ndarray],
    horizon: int,
    diverge_norm: float = 1e9,
):
    """Roll the stacked error system forward under a controller.

    ``controller`` must provide ``reset()``, ``policy_controls(outputs,
    errors)`` returning one control per agent, and ``observe(controls,
    outputs)``.  Returns ``(errors, outputs, controls, diverged)`` where the
    error list has ``horizon + 1`` entries and the other two ``horizon``.
    """
    a_all, b_all, e_slices, u_slices = stacked_error_system(model)
    e = np.concatenate([np.asarray(v, dtype=float).reshape(-1) for v in initial_errors])
    controller.reset()
    err_trace = [e.copy()]
    out_trace: list[list[np.ndarray]] = []
    ctl_trace: list[list[np.ndarray]] = []
    diverged = False
    for _ in range(horizon):
        errs = [e[s] for s in e_slices]
        outs = [model.c_matrices[i] @ errs[i] for i in range(model.num_agents)]
        controls = controller.policy_controls(outs, errs)
        controller.observe(controls, outs)
        u = np.concatenate([np.asarray(c, dtype=float).reshape(-1) for c in controls])
        e = a_all @ e + b_all @ u
        err_trace.append(e.copy())
        out_trace.append(outs)
        ctl_trace.append([u[s] for s in u_slices])
        if not np.isfinite(e).all() or np.linalg.norm(e) > diverge_norm:
            diverged = True
            break
    return err_trace, out_trace, ctl_trace, diverged


def rollout_cost(
    model: MasModel,
    weights: CostWeights,
    controller,
    initial_errors: Sequence[np.ndarray],
    horizon: int,
    i: int,
    diverge_norm: float = 1e9,
) -> float:
    """Truncated closed-loop cost of agent ``i`` from the given error state.

    Accumulates the stage cost over ``horizon`` simulated steps; a diverging
    rollout yields ``inf``.  The truncation horizon is the caller's
    responsibility and is part of the reported quantity.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    _, out_trace, ctl_trace, diverged = simulate_errors(
        model, controller, initial_errors, horizon, diverge_norm
    )
    if diverged:
        return math.inf
    nbrs = neighbors(model.graph, i)
    total = 0.0
    for outs, ctls in zip(out_trace, ctl_trace):
        total += stage_cost(weights, i, outs[i], ctls[i], {j: ctls[j] for j in nbrs})
    return total
