"""Data-based value-iteration Q-learning over I/O windows.

Outer loop: simulate the true swarm under the current window policies
with persistent-excitation noise injected into every applied control,
cut the (u, y) streams into consecutive-window samples, solve every
agent's least-squares value update from the same batch, then improve all
policies simultaneously.  Policies and value kernels start at zero; no
admissible initial policy is required.

Two readings of the boundary step matter for exactness.  The window
features of a sample carry the controls that were actually applied
(noise included), because that is the measured data the value is
parameterized on.  The update target, however, prices the current
*policies*: the stage cost and the shifted window entering the target use
the noise-free policy actions at the boundary step, recomputed from the
recorded windows.  Targets built from the noisy applied actions instead
would carry an O(amplitude^2) bias that puts a floor under the kernel
deltas and breaks the tight convergence this package is verified
against.

When every window coordinate is informative the regression has
d(d+1)/2 unknowns per agent; when the output window is longer than the
state dimension, the window coordinates satisfy exact linear relations
(outputs are determined by past controls plus an n-dimensional latent
error), so the achievable feature rank is s(s+1)/2 with
s = (own + neighbor control dims) * horizon + rank of the observability
stack.  The kernel is then identified only on the subspace of windows
the system can realize, which is exactly where it is ever evaluated; the
rank check compares against this ceiling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import (
    CostWeights,
    MasModel,
    SwarmState,
    all_tracking_errors,
    error_output,
    stage_cost,
    step,
)
from .estimator import observability_index
from .graph import neighbors
from .qkernel import KernelLayout, PolicyGains, QKernel, SwarmController, joint_controls, policy_gains

__all__ = [
    "RankDeficientData",
    "DataDiverged",
    "LearnerConfig",
    "Sample",
    "TrajectoryBuffer",
    "LearningReport",
    "agent_layout",
    "expected_feature_rank",
    "quadratic_features",
    "kernel_from_coefficients",
    "collect_trajectory",
    "make_samples",
    "collect_samples",
    "value_update",
    "policy_improvement",
    "bellman_residuals",
    "run",
]


class RankDeficientData(RuntimeError):
    """Collected data does not excite the identifiable feature space."""


class DataDiverged(RuntimeError):
    """The exploration run blew up; the current policies destabilize the swarm."""


@dataclass
class LearnerConfig:
    """Tuning knobs of the data-based value iteration.

    ``samples_per_iteration`` counts the fitted samples per agent; a
    ``holdout_fraction`` share is collected on top of it for residual
    diagnostics.  ``horizon`` defaults to the largest observability index
    over the agents.  ``reuse_data`` switches from fresh on-policy
    batches per iteration to one exploratory batch recorded once and
    re-targeted every iteration.
    """

    horizon: int | None = None
    exploration_amplitude: float = 0.1
    samples_per_iteration: int | None = None
    convergence_epsilon: float = 1e-4
    max_iterations: int = 100
    ridge_lambda: float = 1e-8
    rng_seed: int = 0
    coupling_mode: str = "exact"
    reuse_data: bool = False
    init_span: float = 1.0
    holdout_fraction: float = 0.25

    def __post_init__(self) -> None:
        if self.horizon is not None and self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.exploration_amplitude < 0.0:
            raise ValueError("exploration amplitude must be non-negative")
        if self.convergence_epsilon <= 0.0 or self.ridge_lambda < 0.0:
            raise ValueError("epsilon must be positive and ridge non-negative")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if self.coupling_mode not in ("exact", "delay"):
            raise ValueError("coupling_mode must be 'exact' or 'delay'")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class Sample:
    """One Bellman sample of an agent.

    ``w_now`` is the window anchored at the sample step, ``w_next`` the
    window shifted one step forward with the policy actions in its
    current-control slots, and the remaining fields the stage-cost
    components at the boundary step (output measured, controls from the
    current policies).
    """

    w_now: np.ndarray
    w_next: np.ndarray
    y_now: np.ndarray
    u_own: np.ndarray
    u_neighbors: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class TrajectoryBuffer:
    """Measured streams of one exploratory run: applied controls and outputs."""

    controls: tuple[np.ndarray, ...]
    outputs: tuple[np.ndarray, ...]

    @property
    def steps(self) -> int:
        return self.controls[0].shape[0]


@dataclass
class LearningReport:
    """Everything needed to replay and audit one learning run."""

    converged: bool
    iterations: int
    epsilon: float
    seed: int
    horizon: int
    coupling_mode: str
    layouts: list[KernelLayout]
    deltas: list[list[float]] = field(default_factory=list)
    residuals: list[list[float]] = field(default_factory=list)
    kernel_snapshots: list[list[np.ndarray]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "horizon": self.horizon,
            "coupling_mode": self.coupling_mode,
            "layouts": [
                {
                    "own_dim": lay.own_dim,
                    "neighbor_dims": list(lay.neighbor_dims),
                    "output_dim": lay.output_dim,
                    "horizon": lay.horizon,
                }
                for lay in self.layouts
            ],
            "kernel_deltas": self.deltas,
            "held_out_residuals": self.residuals,
            "kernel_upper_triangles": [
                [snap.tolist() for snap in row] for row in self.kernel_snapshots
            ],
        }


def agent_layout(model: MasModel, i: int, horizon: int) -> KernelLayout:
    """Window layout of agent ``i`` at the given history length."""
    return KernelLayout(
        own_dim=model.control_dim(i),
        neighbor_dims=tuple(model.control_dim(j) for j in neighbors(model.graph, i)),
        output_dim=model.output_dim(i),
        horizon=horizon,
    )


def expected_feature_rank(model: MasModel, i: int, layout: KernelLayout) -> int:
    """Largest feature rank real data can reach for agent ``i``.

    Valid windows are parameterized by the free control entries plus the
    latent error the observability stack can resolve, so quadratic
    features span at most s(s+1)/2 dimensions.
    """
    a = model.a_matrix
    c = model.c_matrices[i]
    obs = np.vstack([c @ np.linalg.matrix_power(a, layout.horizon - 1 - r) for r in range(layout.horizon)])
    latent = int(np.linalg.matrix_rank(obs))
    s = min(layout.total_dim, (layout.own_dim + sum(layout.neighbor_dims)) * layout.horizon + latent)
    return s * (s + 1) // 2


def quadratic_features(w_rows: np.ndarray) -> np.ndarray:
    """Symmetric-basis expansion: one row of w w' upper-triangle products.

    Off-diagonal products are doubled so that coefficients equal the
    entries of a symmetric kernel matrix.
    """
    w_rows = np.atleast_2d(np.asarray(w_rows, dtype=float))
    d = w_rows.shape[1]
    rows, cols = np.triu_indices(d)
    feats = w_rows[:, rows] * w_rows[:, cols]
    feats[:, rows != cols] *= 2.0
    return feats


def kernel_from_coefficients(layout: KernelLayout, coeffs: np.ndarray) -> QKernel:
    """Rebuild the symmetric kernel from upper-triangle coefficients."""
    return QKernel.from_upper_triangle(layout, coeffs)


def collect_trajectory(
    model: MasModel,
    gains: Sequence[PolicyGains],
    config: LearnerConfig,
    total_steps: int,
    rng: np.random.Generator,
) -> TrajectoryBuffer:
    """Run the swarm under the current policies plus exploration noise.

    The first ``horizon`` steps apply pure exploration noise so that full
    windows exist before the first usable sample.  Initial follower and
    leader states are drawn uniformly from the configured span.
    """
    nbar = model.num_agents
    horizon = gains[0].layout.horizon
    nbr_ids = [neighbors(model.graph, i) for i in range(nbar)]
    state = SwarmState(
        tuple(rng.uniform(-config.init_span, config.init_span, size=model.state_dim) for _ in range(nbar)),
        rng.uniform(-config.init_span, config.init_span, size=model.state_dim),
    )
    controller = SwarmController(gains, nbr_ids, mode=config.coupling_mode)
    ctl_log = [np.zeros((total_steps, model.control_dim(i))) for i in range(nbar)]
    out_log = [np.zeros((total_steps, model.output_dim(i))) for i in range(nbar)]
    for k in range(total_steps):
        errs = all_tracking_errors(model, state)
        outs = [error_output(model, i, errs[i]) for i in range(nbar)]
        if k < horizon:
            planned = [np.zeros(model.control_dim(i)) for i in range(nbar)]
        else:
            planned = controller.policy_controls(outs)
        applied = [
            planned[i]
            + rng.uniform(
                -config.exploration_amplitude,
                config.exploration_amplitude,
                size=model.control_dim(i),
            )
            for i in range(nbar)
        ]
        controller.observe(applied, outs)
        for i in range(nbar):
            ctl_log[i][k] = applied[i]
            out_log[i][k] = outs[i]
        state = step(model, state, applied)
        span = max(np.abs(x).max() for x in state.follower_states)
        if not np.isfinite(span) or span > 1e9:
            raise DataDiverged(
                f"exploration run diverged at step {k} (state magnitude {span:.3e}); "
                "the current policy iterate destabilizes the swarm"
            )
    return TrajectoryBuffer(tuple(ctl_log), tuple(out_log))


def make_samples(
    model: MasModel,
    buffer: TrajectoryBuffer,
    gains: Sequence[PolicyGains],
    config: LearnerConfig,
) -> list[list[Sample]]:
    """Cut a recorded run into per-agent Bellman samples.

    The boundary-step controls entering the target are recomputed from
    the recorded windows under the *given* policies, so one recorded
    batch can be re-targeted by later policy iterates.
    """
    nbar = model.num_agents
    horizon = gains[0].layout.horizon
    layouts = [g.layout for g in gains]
    nbr_ids = [neighbors(model.graph, i) for i in range(nbar)]
    total = buffer.steps
    samples: list[list[Sample]] = [[] for _ in range(nbar)]
    for k in range(horizon, total):
        own_pasts = [buffer.controls[i][k - horizon + 1 : k][::-1].reshape(-1) for i in range(nbar)]
        nbr_pasts = [[own_pasts[j] for j in nbr_ids[i]] for i in range(nbar)]
        out_wins = [buffer.outputs[i][k - horizon + 1 : k + 1][::-1].reshape(-1) for i in range(nbar)]
        prev = [buffer.controls[i][k - 1] for i in range(nbar)]
        policy_actions = joint_controls(
            gains, nbr_ids, own_pasts, nbr_pasts, out_wins,
            mode=config.coupling_mode, prev_controls=prev,
        )
        for i in range(nbar):
            w_now = np.concatenate(
                [buffer.controls[i][k - horizon : k][::-1].reshape(-1)]
                + [buffer.controls[j][k - horizon : k][::-1].reshape(-1) for j in nbr_ids[i]]
                + [buffer.outputs[i][k - horizon : k][::-1].reshape(-1)]
            )
            w_next = np.concatenate(
                [policy_actions[i], own_pasts[i]]
                + [part for j_pos, j in enumerate(nbr_ids[i]) for part in (policy_actions[j], nbr_pasts[i][j_pos])]
                + [out_wins[i]]
            )
            samples[i].append(
                Sample(
                    w_now=w_now,
                    w_next=w_next,
                    y_now=buffer.outputs[i][k].copy(),
                    u_own=policy_actions[i].copy(),
                    u_neighbors=tuple(policy_actions[j].copy() for j in nbr_ids[i]),
                )
            )
    return samples


def _feature_rank(samples: Sequence[Sample]) -> int:
    feats = quadratic_features(np.vstack([s.w_now for s in samples])) if samples else np.zeros((0, 1))
    return int(np.linalg.matrix_rank(feats)) if samples else 0


def collect_samples(
    model: MasModel,
    gains: Sequence[PolicyGains],
    config: LearnerConfig,
    count: int,
    rng: np.random.Generator,
) -> list[list[Sample]]:
    """Collect ``count`` samples per agent and verify excitation.

    Raises RankDeficientData when some agent's quadratic features do not
    reach the achievable rank ceiling, which signals insufficient
    excitation; raise the amplitude or the sample count.
    """
    horizon = gains[0].layout.horizon
    buffer = collect_trajectory(model, gains, config, horizon + count, rng)
    samples = make_samples(model, buffer, gains, config)
    if count > 0:
        for i, agent_samples in enumerate(samples):
            needed = expected_feature_rank(model, i, gains[i].layout)
            got = _feature_rank(agent_samples)
            if got < min(needed, len(agent_samples)):
                raise RankDeficientData(
                    f"agent {i} features reach rank {got} of {needed}; "
                    "increase exploration amplitude or sample count"
                )
    return samples


def _reward(weights: CostWeights, i: int, nbr_ids: Sequence[int], sample: Sample) -> float:
    return stage_cost(
        weights, i, sample.y_now, sample.u_own,
        {j: sample.u_neighbors[pos] for pos, j in enumerate(nbr_ids)},
    )


def value_update(
    samples: Sequence[Sample],
    kernel_prev: QKernel,
    weights: CostWeights,
    agent: int,
    nbr_ids: Sequence[int],
    config: LearnerConfig,
    expected_rank: int | None = None,
) -> QKernel:
    """One least-squares Bellman update of an agent's value kernel.

    Fits the symmetric-basis expansion of the current windows to the
    stage cost plus the previous kernel's value at the shifted windows,
    with a small ridge term; the returned kernel is symmetric by
    construction.
    """
    if not samples:
        raise RankDeficientData("value update needs at least one sample")
    w_now = np.vstack([s.w_now for s in samples])
    w_next = np.vstack([s.w_next for s in samples])
    feats = quadratic_features(w_now)
    if expected_rank is not None:
        got = int(np.linalg.matrix_rank(feats))
        if got < min(expected_rank, len(samples)):
            raise RankDeficientData(
                f"agent {agent} fit features reach rank {got} of {expected_rank}"
            )
    rewards = np.array([_reward(weights, agent, nbr_ids, s) for s in samples])
    targets = rewards + np.einsum("bi,ij,bj->b", w_next, kernel_prev.matrix, w_next)
    # standardized columns keep the ridge relative; an absolute ridge puts
    # a data-scale-dependent floor under the kernel deltas
    col_scale = np.sqrt(np.mean(feats**2, axis=0))
    col_scale[col_scale <= 0.0] = 1.0
    scaled = feats / col_scale
    gram = scaled.T @ scaled + config.ridge_lambda * np.eye(feats.shape[1])
    coeffs = np.linalg.solve(gram, scaled.T @ targets) / col_scale
    return kernel_from_coefficients(kernel_prev.layout, coeffs)


def policy_improvement(kernel_next: QKernel, weights: CostWeights, agent: int) -> PolicyGains:
    """Greedy window policy of the updated kernel."""
    return policy_gains(kernel_next, weights.r_self[agent])


def bellman_residuals(
    samples: Sequence[Sample],
    kernel: QKernel,
    weights: CostWeights,
    agent: int,
    nbr_ids: Sequence[int],
) -> np.ndarray:
    """Relative self-consistency residuals of a kernel on given samples."""
    res = []
    for s in samples:
        target = _reward(weights, agent, nbr_ids, s) + float(
            s.w_next @ kernel.matrix @ s.w_next
        )
        value = float(s.w_now @ kernel.matrix @ s.w_now)
        res.append(abs(value - target) / (1.0 + abs(target)))
    return np.array(res)


def run(
    model: MasModel,
    weights: CostWeights,
    config: LearnerConfig,
    initial_kernels: Sequence[QKernel] | None = None,
) -> tuple[LearningReport, list[PolicyGains]]:
    """Full data-based value iteration until the kernels settle.

    All value updates of one outer iteration read the same batch and the
    pre-iteration policies; improvement happens for all agents after
    every update is done.  Stops when the largest per-agent Frobenius
    kernel delta drops to the configured epsilon, or returns a
    non-converged report after the iteration cap.
    """
    nbar = model.num_agents
    horizon = config.horizon or max(observability_index(model, i) for i in range(nbar))
    layouts = [agent_layout(model, i, horizon) for i in range(nbar)]
    nbr_ids = [neighbors(model.graph, i) for i in range(nbar)]
    rng = np.random.default_rng(config.rng_seed)

    if initial_kernels is None:
        kernels = [QKernel.zeros(lay) for lay in layouts]
    else:
        kernels = list(initial_kernels)
    gains = [policy_gains(kernels[i], weights.r_self[i]) for i in range(nbar)]

    fit_count = config.samples_per_iteration or max(lay.total_dim * (lay.total_dim + 1) for lay in layouts)
    min_needed = max(lay.total_dim * (lay.total_dim + 1) // 2 for lay in layouts)
    if fit_count < min_needed:
        raise ValueError(f"samples_per_iteration must be at least {min_needed}")
    holdout = max(1, int(round(config.holdout_fraction * fit_count)))
    expected_ranks = [expected_feature_rank(model, i, layouts[i]) for i in range(nbar)]

    report = LearningReport(
        converged=False,
        iterations=0,
        epsilon=config.convergence_epsilon,
        seed=config.rng_seed,
        horizon=horizon,
        coupling_mode=config.coupling_mode,
        layouts=layouts,
    )
    buffer: TrajectoryBuffer | None = None
    collection_seed = int(rng.integers(2**63))
    for _ in range(config.max_iterations):
        if buffer is None or not config.reuse_data:
            # common random numbers: every iteration replays the same noise
            # realization and initial states, so batches differ only through
            # the policies and the kernel sequence is a deterministic
            # iteration instead of one resampled around its fixed point
            buffer = collect_trajectory(
                model, gains, config, horizon + fit_count + holdout,
                np.random.default_rng(collection_seed),
            )
        samples = make_samples(model, buffer, gains, config)
        fit = [agent[:fit_count] for agent in samples]
        held = [agent[fit_count:] for agent in samples]
        new_kernels = [
            value_update(fit[i], kernels[i], weights, i, nbr_ids[i], config, expected_ranks[i])
            for i in range(nbar)
        ]
        deltas = [float(np.linalg.norm(new_kernels[i].matrix - kernels[i].matrix)) for i in range(nbar)]
        residuals = [
            float(bellman_residuals(held[i], new_kernels[i], weights, i, nbr_ids[i]).max())
            for i in range(nbar)
        ]
        gains = [policy_improvement(new_kernels[i], weights, i) for i in range(nbar)]
        kernels = new_kernels
        report.deltas.append(deltas)
        report.residuals.append(residuals)
        report.kernel_snapshots.append([k.upper_triangle() for k in kernels])
        report.iterations += 1
        if max(deltas) <= config.convergence_epsilon:
            report.converged = True
            break
    return report, gains
