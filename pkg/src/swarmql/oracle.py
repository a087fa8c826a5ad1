"""Model-based reference computations that verify the data-driven learner.

Everything here may read the true system matrices.  The value iteration
runs exactly over the stacked error vector of all agents (the one-step
update target is quadratic there), while each policy-improvement step
reads only the agent's own diagonal kernel block, mirroring the greedy
structure of the window policies: the current controls of all agents are
mutually coupled and solved as one linear system.  On a single agent the
iteration collapses to classical value iteration and its fixed point to
the discrete algebraic Riccati solution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import MasModel, CostWeights, error_system_matrices, stacked_error_system
from .graph import neighbors
from .qkernel import PolicyGains

__all__ = [
    "NotConverged",
    "HypothesisViolated",
    "StateValueKernel",
    "BoundCheckConfig",
    "ViResult",
    "model_based_vi",
    "dare_solve",
    "estimate_cost_ratio_bound",
    "check_vi_bounds",
    "LiftedLoop",
    "lifted_closed_loop",
    "truncated_cost_kernel",
    "check_stability",
    "check_nash",
]


class NotConverged(RuntimeError):
    """An iterative solve hit its iteration cap before reaching tolerance."""


class HypothesisViolated(RuntimeError):
    """The bound-check preconditions fail on the sample set; check skipped."""


@dataclass(frozen=True)
class StateValueKernel:
    """Per-agent quadratic value kernels at one value-iteration step.

    ``local`` holds each agent's own-error block (the matrices the greedy
    step reads); ``stacked`` the full kernels over the concatenated error
    vector, whose quadratic form is the exact value of the current joint
    policies.
    """

    local: tuple[np.ndarray, ...]
    stacked: tuple[np.ndarray, ...]
    iteration: int


@dataclass(frozen=True)
class BoundCheckConfig:
    """Envelope parameters of the value-iteration convergence bounds."""

    theta: float
    alpha: float
    beta: float
    iterations: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.theta < math.inf:
            raise ValueError("theta must be positive and finite")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 1.0 <= self.beta < math.inf:
            raise ValueError("beta must be at least 1 and finite")


@dataclass(frozen=True)
class ViResult:
    """Trace of the model-based value iteration.

    ``kernel_trace[s]`` is the kernel after s updates (entry 0 is the zero
    start); ``policy_trace[s]`` the joint feedback gain greedy with
    respect to it, mapping the stacked error vector to stacked controls.
    """

    kernel_trace: list[StateValueKernel]
    policy_trace: list[np.ndarray]
    converged: bool
    final_delta: float


def _greedy_joint_gain(
    model: MasModel,
    weights: CostWeights,
    local_kernels: Sequence[np.ndarray],
) -> np.ndarray:
    """Coupled greedy improvement: solve all current controls at once.

    Each agent minimizes its control penalty plus its own-block value at
    the next error, given the neighbors' current controls; stacking the
    resulting affine relations yields one linear system in the current
    controls, whose solution is linear in the stacked error.
    """
    a_all, b_all, e_slices, u_slices = stacked_error_system(model)
    dim_u = b_all.shape[1]
    dim_e = a_all.shape[0]
    system = np.eye(dim_u)
    rhs = np.zeros((dim_u, dim_e))
    for i in range(model.num_agents):
        f_i, e_ij = error_system_matrices(model, i)
        p_i = local_kernels[i]
        gram = weights.r_self[i] + f_i.T @ p_i @ f_i
        lead = np.linalg.solve(gram, f_i.T @ p_i)
        rows = u_slices[i]
        rhs[rows, e_slices[i]] = -lead @ model.a_matrix
        for j, e_mat in e_ij.items():
            system[rows, u_slices[j]] += lead @ e_mat
    return np.linalg.solve(system, rhs)


def model_based_vi(
    model: MasModel,
    weights: CostWeights,
    max_iter: int = 1000,
    tol: float = 1e-10,
) -> ViResult:
    """Exact value iteration from zero kernels and zero policies.

    Per outer step: evaluate every agent's one-step cost plus
    current-kernel continuation under the current joint policies (an
    exact quadratic update over the stacked error), then improve all
    policies simultaneously from the new kernels.
    """
    a_all, b_all, e_slices, u_slices = stacked_error_system(model)
    dim_e = a_all.shape[0]
    n = model.state_dim
    nbar = model.num_agents
    stacked = [np.zeros((dim_e, dim_e)) for _ in range(nbar)]
    locals_ = [np.zeros((n, n)) for _ in range(nbar)]
    gain = _greedy_joint_gain(model, weights, locals_)
    trace = [StateValueKernel(tuple(locals_), tuple(stacked), 0)]
    policies = [gain]
    selectors = [np.eye(dim_e)[s] for s in e_slices]

    delta = math.inf
    for s in range(1, max_iter + 1):
        a_cl = a_all + b_all @ gain
        new_stacked = []
        for i in range(nbar):
            c_i = model.c_matrices[i] @ selectors[i]
            gamma = c_i.T @ weights.q_weights[i] @ c_i
            k_i = gain[u_slices[i]]
            gamma = gamma + k_i.T @ weights.r_self[i] @ k_i
            for j in neighbors(model.graph, i):
                k_j = gain[u_slices[j]]
                gamma = gamma + k_j.T @ weights.r_neighbor[(i, j)] @ k_j
            nxt = gamma + a_cl.T @ stacked[i] @ a_cl
            new_stacked.append(0.5 * (nxt + nxt.T))
        delta = max(
            float(np.linalg.norm(new_stacked[i] - stacked[i])) for i in range(nbar)
        )
        stacked = new_stacked
        locals_ = [stacked[i][e_slices[i], e_slices[i]] for i in range(nbar)]
        gain = _greedy_joint_gain(model, weights, locals_)
        trace.append(StateValueKernel(tuple(locals_), tuple(stacked), s))
        policies.append(gain)
        if delta <= tol:
            return ViResult(trace, policies, True, delta)
    raise NotConverged(f"value iteration did not reach tolerance {tol} in {max_iter} steps")


def dare_solve(
    a: np.ndarray,
    f: np.ndarray,
    q_eff: np.ndarray,
    r: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 200000,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed point of the discrete-time Riccati iteration from zero.

    Returns the converged kernel and the feedback gain ``K`` such that
    ``u = -K e`` is optimal.  Raises NotConverged when the iteration
    fails to settle (non-stabilizable inputs).
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    f = np.asarray(f, dtype=float).reshape(a.shape[0], -1)
    q_eff = np.atleast_2d(np.asarray(q_eff, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    p = np.zeros_like(a)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            gram = r + f.T @ p @ f
            gain = np.linalg.solve(gram, f.T @ p @ a)
            nxt = q_eff + a.T @ p @ a - a.T @ p @ f @ gain
            nxt = 0.5 * (nxt + nxt.T)
            if np.linalg.norm(nxt - p) <= tol:
                gain = np.linalg.solve(r + f.T @ nxt @ f, f.T @ nxt @ a)
                return nxt, gain
            if not np.isfinite(nxt).all():
                break
            p = nxt
    raise NotConverged("Riccati iteration did not converge")


def estimate_cost_ratio_bound(
    a: np.ndarray,
    f: np.ndarray,
    q_eff: np.ndarray,
    r: np.ndarray,
    p_star: np.ndarray,
    states: Sequence[np.ndarray],
    controls: Sequence[np.ndarray],
) -> float:
    """Largest observed ratio of optimal next-state cost to stage cost.

    Scans every (state, control) pair in the sample set; the result is
    the data-driven envelope constant used by ``check_vi_bounds``.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    f = np.asarray(f, dtype=float).reshape(a.shape[0], -1)
    q_eff = np.atleast_2d(np.asarray(q_eff, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    p_star = np.atleast_2d(np.asarray(p_star, dtype=float))
    worst = 0.0
    for e in states:
        e = np.asarray(e, dtype=float).reshape(-1)
        for u in controls:
            u = np.asarray(u, dtype=float).reshape(-1)
            stage = float(e @ q_eff @ e + u @ r @ u)
            if stage <= 1e-300:
                continue
            nxt = a @ e + f @ u
            worst = max(worst, float(nxt @ p_star @ nxt) / stage)
    if worst <= 0.0:
        raise HypothesisViolated("sample set produced no positive stage costs")
    return worst


@dataclass(frozen=True)
class BoundsReport:
    ok: bool
    worst_lower_margin: float
    worst_upper_margin: float
    iterations_checked: int


def check_vi_bounds(
    vi_values: Sequence[np.ndarray],
    j_star: np.ndarray,
    cfg: BoundCheckConfig,
    test_states: Sequence[np.ndarray],
    slack: float = 1e-8,
) -> BoundsReport:
    """Verify the geometric convergence envelope of the VI value sequence.

    ``vi_values[s]`` is the value kernel after s updates and ``j_star``
    the converged optimum.  Checks, on every test state and iteration,

        (1 + (alpha-1)/(1+1/theta)^s) J* <= V^s <= (1 + (beta-1)/(1+1/theta)^s) J*

    within ``slack``.  Raises HypothesisViolated when the initial kernel
    does not satisfy alpha J* <= V^0 <= beta J* on the test states.
    """
    j_star = np.atleast_2d(np.asarray(j_star, dtype=float))
    states = [np.asarray(e, dtype=float).reshape(-1) for e in test_states]
    j_vals = [float(e @ j_star @ e) for e in states]
    v0 = np.atleast_2d(np.asarray(vi_values[0], dtype=float))
    for e, jv in zip(states, j_vals):
        v = float(e @ v0 @ e)
        if v < cfg.alpha * jv - slack or v > cfg.beta * jv + slack:
            raise HypothesisViolated(
                "initial value does not lie between alpha and beta times the optimum"
            )
    n_iter = len(vi_values) if cfg.iterations is None else min(cfg.iterations + 1, len(vi_values))
    worst_lo = math.inf
    worst_hi = math.inf
    for s in range(n_iter):
        v_s = np.atleast_2d(np.asarray(vi_values[s], dtype=float))
        shrink = (1.0 + 1.0 / cfg.theta) ** s
        lo_factor = 1.0 + (cfg.alpha - 1.0) / shrink
        hi_factor = 1.0 + (cfg.beta - 1.0) / shrink
        for e, jv in zip(states, j_vals):
            v = float(e @ v_s @ e)
            worst_lo = min(worst_lo, v - lo_factor * jv)
            worst_hi = min(worst_hi, hi_factor * jv - v)
    ok = worst_lo >= -slack and worst_hi >= -slack
    return BoundsReport(ok, worst_lo, worst_hi, n_iter)


@dataclass(frozen=True)
class LiftedLoop:
    """Closed loop of the error system under window policies, as one LTI map.

    The lifted state stacks the last ``horizon`` error vectors and the
    last ``horizon - 1`` joint controls; ``control_map`` reproduces the
    coupled policy solve as a single linear read-out.
    """

    transition: np.ndarray
    control_map: np.ndarray
    error_dim: int
    control_slices: list[slice]
    error_slices: list[slice]

    @property
    def dim(self) -> int:
        return self.transition.shape[0]

    def initial(self, stacked_errors: np.ndarray) -> np.ndarray:
        z = np.zeros((self.dim,) + stacked_errors.shape[1:])
        z[: self.error_dim] = stacked_errors
        return z


def lifted_closed_loop(
    model: MasModel,
    gains: Sequence[PolicyGains],
    mode: str = "exact",
) -> LiftedLoop:
    """Build the exact LTI representation of the window-policy closed loop."""
    a_all, b_all, e_slices, u_slices = stacked_error_system(model)
    dim_e = a_all.shape[0]
    dim_u = b_all.shape[1]
    horizon = gains[0].layout.horizon
    dim_z = dim_e * horizon + dim_u * (horizon - 1)

    def err_block(t: int) -> slice:
        return slice(t * dim_e, (t + 1) * dim_e)

    def ctl_block(t: int) -> slice:
        start = dim_e * horizon + (t - 1) * dim_u
        return slice(start, start + dim_u)

    nbar = model.num_agents
    nbr_ids = [neighbors(model.graph, i) for i in range(nbar)]
    rhs = np.zeros((dim_u, dim_z))
    current_coupling = np.eye(dim_u)
    for i in range(nbar):
        g = gains[i]
        lay = g.layout
        rows = u_slices[i]
        own_past = np.zeros((lay.own_dim * (horizon - 1), dim_z))
        for t in range(1, horizon):
            own_past[(t - 1) * lay.own_dim : t * lay.own_dim, ctl_block(t)] = np.eye(dim_u)[
                u_slices[i]
            ]
        rhs[rows] += g.g_own_past @ own_past
        out_win = np.zeros((lay.output_dim * horizon, dim_z))
        c_i = model.c_matrices[i]
        for t in range(horizon):
            sel = np.zeros((model.state_dim, dim_z))
            sel[:, err_block(t)] = np.eye(dim_e)[e_slices[i]]
            out_win[t * lay.output_dim : (t + 1) * lay.output_dim] = c_i @ sel
        rhs[rows] += g.g_output @ out_win
        for pos, j in enumerate(nbr_ids[i]):
            m_j = lay.neighbor_dims[pos]
            block = g.neighbor_block(pos)
            nbr_past = np.zeros((m_j * (horizon - 1), dim_z))
            for t in range(1, horizon):
                nbr_past[(t - 1) * m_j : t * m_j, ctl_block(t)] = np.eye(dim_u)[u_slices[j]]
            rhs[rows] += block[:, m_j:] @ nbr_past
            if mode == "exact":
                current_coupling[rows, u_slices[j]] -= g.neighbor_current(pos)
            elif mode == "delay":
                if horizon > 1:
                    prev = np.zeros((m_j, dim_z))
                    prev[:, ctl_block(1)] = np.eye(dim_u)[u_slices[j]]
                    rhs[rows] += g.neighbor_current(pos) @ prev
            else:
                raise ValueError(f"unknown coupling mode {mode!r}")
    control_map = np.linalg.solve(current_coupling, rhs) if mode == "exact" else rhs

    transition = np.zeros((dim_z, dim_z))
    transition[err_block(0)] = b_all @ control_map
    transition[err_block(0), err_block(0)] += a_all
    for t in range(1, horizon):
        transition[err_block(t), err_block(t - 1)] = np.eye(dim_e)
    if horizon > 1:
        transition[ctl_block(1)] = control_map
        for t in range(2, horizon):
            transition[ctl_block(t), ctl_block(t - 1)] = np.eye(dim_u)
    return LiftedLoop(transition, control_map, dim_e, u_slices, e_slices)


def stage_cost_kernel(model: MasModel, weights: CostWeights, loop: LiftedLoop, agent: int) -> np.ndarray:
    """Quadratic form of agent ``agent``'s stage cost over the lifted state."""
    dim_z = loop.dim
    c_i = model.c_matrices[agent]
    out_read = np.zeros((c_i.shape[0], dim_z))
    out_read[:, loop.error_slices[agent]] = c_i
    gamma = out_read.T @ weights.q_weights[agent] @ out_read
    u_i = loop.control_map[loop.control_slices[agent]]
    gamma = gamma + u_i.T @ weights.r_self[agent] @ u_i
    for j in neighbors(model.graph, agent):
        u_j = loop.control_map[loop.control_slices[j]]
        gamma = gamma + u_j.T @ weights.r_neighbor[(agent, j)] @ u_j
    return 0.5 * (gamma + gamma.T)


def truncated_cost_kernel(
    loop: LiftedLoop, gamma: np.ndarray, horizon: int, diverge_norm: float = 1e18
) -> np.ndarray | None:
    """Quadratic form of the horizon-truncated cost sum over initial states.

    Returns None when the accumulation blows past ``diverge_norm``, the
    lifted-path analogue of the stepwise simulator's state-norm guard:
    such a loop is diverging and its cost is treated as infinite.
    """
    acc = np.zeros_like(gamma)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(horizon):
            acc = gamma + loop.transition.T @ acc @ loop.transition
            if not np.isfinite(acc).all() or np.abs(acc).max() > diverge_norm:
                return None
            acc = 0.5 * (acc + acc.T)
    return acc


@dataclass(frozen=True)
class StabilityReport:
    stable: bool
    spectral_radius: float
    spectral_stable: bool
    monte_carlo_stable: bool
    agree: bool


def check_stability(
    model: MasModel,
    policies,
    trials: int = 20,
    horizon: int = 400,
    rng: np.random.Generator | None = None,
    decay: float = 1e-6,
) -> StabilityReport:
    """Closed-loop stability by spectral radius and Monte-Carlo decay.

    ``policies`` is either a stacked state-feedback gain (controls =
    gain @ stacked errors) or a list of window policy gains.  Both
    verdicts are computed; they are reported separately so disagreement
    is visible.
    """
    rng = rng or np.random.default_rng(0)
    a_all, b_all, e_slices, _ = stacked_error_system(model)
    dim_e = a_all.shape[0]
    if isinstance(policies, np.ndarray):
        transition = a_all + b_all @ policies
        err_rows = e_slices
        init = lambda e0: e0
    else:
        loop = lifted_closed_loop(model, policies)
        transition = loop.transition
        err_rows = loop.error_slices
        init = loop.initial
    radius = float(np.max(np.abs(np.linalg.eigvals(transition))))
    spectral_stable = radius < 1.0

    mc_stable = True
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(trials):
            e0 = rng.uniform(-1.0, 1.0, size=dim_e)
            z = init(e0)
            norms0 = [max(np.linalg.norm(e0[s]), 1e-300) for s in e_slices]
            reached = False
            for _ in range(horizon):
                z = transition @ z
                if not np.isfinite(z).all():
                    break
                ratios = [
                    np.linalg.norm(z[err_rows[i]]) / norms0[i] for i in range(model.num_agents)
                ]
                if max(ratios) <= decay:
                    reached = True
                    break
            mc_stable = mc_stable and reached
            if not mc_stable:
                break
    return StabilityReport(
        stable=spectral_stable and mc_stable,
        spectral_radius=radius,
        spectral_stable=spectral_stable,
        monte_carlo_stable=mc_stable,
        agree=spectral_stable == mc_stable,
    )


@dataclass(frozen=True)
class NashReport:
    ok: bool
    agent: int
    baseline_cost: float
    worst_delta: float
    improving_fraction: float
    unstable_perturbations: int
    tail_estimate: float


def check_nash(
    model: MasModel,
    weights: CostWeights,
    gains: Sequence[PolicyGains],
    agent: int,
    rng: np.random.Generator | None = None,
    perturbations: int = 50,
    initial_states: int = 20,
    horizon: int = 500,
    scale: float = 0.1,
    tolerance: float = 1e-6,
) -> NashReport:
    """Unilateral-deviation test of agent ``agent``'s policy.

    Perturbs the agent's gain matrices entrywise and multiplicatively,
    holds every other policy fixed, and compares horizon-truncated costs
    averaged over random initial error states.  A diverging perturbed
    loop counts as an unstable perturbation with infinite cost.
    """
    rng = rng or np.random.default_rng(0)
    base_loop = lifted_closed_loop(model, gains)
    gamma = stage_cost_kernel(model, weights, base_loop, agent)
    base_kernel = truncated_cost_kernel(base_loop, gamma, horizon)
    if base_kernel is None:
        raise NotConverged("baseline closed loop diverges; Nash check is meaningless")
    e0 = rng.uniform(-1.0, 1.0, size=(base_loop.error_dim, initial_states))
    # warm the registers up under the baseline policies so every policy is
    # compared from the same consistent I/O history; zero-padded windows
    # would measure startup transients instead of the policies themselves
    warmup = gains[agent].layout.horizon
    z0 = np.linalg.matrix_power(base_loop.transition, warmup) @ base_loop.initial(e0)
    base_costs = np.einsum("ib,ij,jb->b", z0, base_kernel, z0)
    j_base = float(base_costs.mean())

    radius = float(np.max(np.abs(np.linalg.eigvals(base_loop.transition))))
    z_end = np.linalg.matrix_power(base_loop.transition, horizon) @ z0
    end_stage = float(np.einsum("ib,ij,jb->b", z_end, gamma, z_end).mean())
    tail = end_stage * radius**2 / (1.0 - radius**2) if radius < 1.0 else math.inf

    worst_delta = math.inf
    improving = 0
    unstable = 0
    target = gains[agent]
    for _ in range(perturbations):
        perturbed = PolicyGains(
            target.layout,
            target.g_own_past * (1.0 + rng.uniform(-scale, scale, size=target.g_own_past.shape)),
            target.g_neighbors * (1.0 + rng.uniform(-scale, scale, size=target.g_neighbors.shape)),
            target.g_output * (1.0 + rng.uniform(-scale, scale, size=target.g_output.shape)),
            target.inverted_term,
        )
        trial_gains = list(gains)
        trial_gains[agent] = perturbed
        loop = lifted_closed_loop(model, trial_gains)
        gamma_p = stage_cost_kernel(model, weights, loop, agent)
        kernel = truncated_cost_kernel(loop, gamma_p, horizon)
        if kernel is None:
            unstable += 1
            continue
        cost = float(np.einsum("ib,ij,jb->b", z0, kernel, z0).mean())
        delta = cost - j_base
        worst_delta = min(worst_delta, delta)
        if delta < -tolerance * (1.0 + j_base):
            improving += 1
    return NashReport(
        ok=improving == 0,
        agent=agent,
        baseline_cost=j_base,
        worst_delta=worst_delta if worst_delta < math.inf else 0.0,
        improving_fraction=improving / perturbations,
        unstable_perturbations=unstable,
        tail_estimate=tail,
    )
