"""End-to-end checks that cross-examine learned policies against oracles.

Each check returns a named result with a margin so reports stay
machine-readable; individual failures never abort the suite.  Checks
whose premise does not apply to the scenario (single-agent reductions of
multi-agent scenarios, say) report themselves as skipped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dynamics, estimator, learner, oracle
from .dynamics import CostWeights, MasModel, SwarmState
from .graph import Digraph, neighbors
from .qkernel import PolicyGains, QKernel, SwarmController, evaluate
from .scenario import Scenario

__all__ = ["CheckResult", "run_validation"]

# Engineering thresholds for the approximate multi-agent cross-checks;
# the single-agent paths use the tight tolerances the package is
# acceptance-tested against.  On coupled graphs the window value is a
# projection (each agent's window cannot resolve the other agents'
# errors), so pointwise value agreement and Bellman self-consistency
# are loose there by construction; the demo-scale checks compare policy
# performance instead.
ESTIMATOR_TOL = 1e-8
DARE_REL_TOL = 1e-3
EXACT_RESIDUAL_TOL = 1e-6
APPROX_RESIDUAL_TOL = 1.0
EXACT_VALUE_TOL = 1e-3
COST_RATIO_BAND = (0.6, 1.5)
NASH_APPROX_TOL = 5e-2


@dataclass
class CheckResult:
    name: str
    passed: bool
    skipped: bool = False
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "skipped": self.skipped,
            "details": self.details,
        }


def _exploratory_run(model: MasModel, horizon: int, steps: int, seed: int):
    """Open-loop run under uniform random controls; returns full logs."""
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
        errs = dynamics.all_tracking_errors(model, state)
        for i in range(nbar):
            errors[i][k] = errs[i]
            outputs[i][k] = dynamics.error_output(model, i, errs[i])
            controls[i][k] = rng.uniform(-1, 1, size=model.control_dim(i))
        state = dynamics.step(model, state, [controls[i][k] for i in range(nbar)])
    return controls, outputs, errors


def estimator_exactness_check(sc: Scenario, steps: int = 200, seed: int = 1) -> CheckResult:
    """Windowed reconstruction must match the simulator's errors exactly."""
    model = sc.model
    horizon = sc.learner.horizon or max(
        estimator.observability_index(model, i) for i in range(model.num_agents)
    )
    try:
        estimators = [
            estimator.build_estimator(model, i, horizon) for i in range(model.num_agents)
        ]
    except (estimator.RankDeficient, estimator.NotObservable) as exc:
        return CheckResult(
            "estimator_exactness", passed=False,
            details={"error": type(exc).__name__, "message": str(exc)},
        )
    controls, outputs, errors = _exploratory_run(model, horizon, steps, seed)
    worst = 0.0
    for i in range(model.num_agents):
        nbr = neighbors(model.graph, i)
        for k in range(horizon, steps):
            window = estimator.window_from_history(
                controls[i][k - horizon : k][::-1],
                [controls[j][k - horizon : k][::-1] for j in nbr],
                outputs[i][k - horizon : k][::-1],
                k,
            )
            err = estimator.reconstruct_error(estimators[i], window) - errors[i][k]
            worst = max(worst, float(np.abs(err).max()))
    return CheckResult(
        "estimator_exactness", passed=worst <= ESTIMATOR_TOL,
        details={"max_abs_error": worst, "tolerance": ESTIMATOR_TOL, "steps": steps},
    )


def dare_gain_check(sc: Scenario, gains: Sequence[PolicyGains], kernels: Sequence[QKernel]) -> CheckResult:
    """Single-follower scenarios: learned policy and value against the Riccati solution.

    Compares policy actions and kernel values on windows harvested from a
    real run, which is the only place the kernel is identified.
    """
    model = sc.model
    if model.num_agents != 1 or neighbors(model.graph, 0):
        return CheckResult("dare_equivalence", passed=True, skipped=True,
                           details={"reason": "only defined for a single pinned follower"})
    f, _ = dynamics.error_system_matrices(model, 0)
    q_eff = model.c_matrices[0].T @ sc.weights.q_weights[0] @ model.c_matrices[0]
    p_star, k_star = oracle.dare_solve(model.a_matrix, f, q_eff, sc.weights.r_self[0])
    horizon = gains[0].layout.horizon
    controls, outputs, errors = _exploratory_run(model, horizon, 160, seed=3)
    u_learned, u_opt, v_learned, v_true = [], [], [], []
    for k in range(horizon, 160):
        own_past = controls[0][k - horizon + 1 : k][::-1].reshape(-1)
        out_win = outputs[0][k - horizon + 1 : k + 1][::-1].reshape(-1)
        u_learned.append(gains[0].g_own_past @ own_past + gains[0].g_output @ out_win)
        u_opt.append(-k_star @ errors[0][k])
        w_now = np.concatenate(
            [controls[0][k - horizon : k][::-1].reshape(-1),
             outputs[0][k - horizon : k][::-1].reshape(-1)]
        )
        v_learned.append(evaluate(kernels[0], w_now))
        v_true.append(float(errors[0][k] @ p_star @ errors[0][k]))
    u_learned, u_opt = np.array(u_learned), np.array(u_opt)
    gain_err = float(np.linalg.norm(u_learned - u_opt) / max(np.linalg.norm(u_opt), 1e-300))
    v_learned, v_true = np.array(v_learned), np.array(v_true)
    value_err = float(np.max(np.abs(v_learned - v_true) / np.maximum(np.abs(v_true), 1e-9)))
    passed = gain_err <= DARE_REL_TOL and value_err <= EXACT_VALUE_TOL
    return CheckResult(
        "dare_equivalence", passed=passed,
        details={"gain_rel_error": gain_err, "value_rel_error": value_err,
                 "tolerance": DARE_REL_TOL},
    )


def _closed_loop_points(sc: Scenario, gains: Sequence[PolicyGains], mode: str, runs: int, span: int):
    """Noise-free closed-loop run logs: windows plus true stacked errors."""
    model = sc.model
    nbar = model.num_agents
    horizon = gains[0].layout.horizon
    nbr_ids = [neighbors(model.graph, i) for i in range(nbar)]
    points = []
    for run_idx in range(runs):
        rng = np.random.default_rng(100 + run_idx)
        state = SwarmState(
            tuple(rng.uniform(-1, 1, size=model.state_dim) for _ in range(nbar)),
            rng.uniform(-1, 1, size=model.state_dim),
        )
        ctrl = SwarmController(gains, nbr_ids, mode=mode)
        steps = horizon + span
        controls = [np.zeros((steps, model.control_dim(i))) for i in range(nbar)]
        outputs = [np.zeros((steps, model.output_dim(i))) for i in range(nbar)]
        errs_log = np.zeros((steps, nbar * model.state_dim))
        for k in range(steps):
            errs = dynamics.all_tracking_errors(model, state)
            outs = [dynamics.error_output(model, i, errs[i]) for i in range(nbar)]
            us = ctrl.policy_controls(outs) if k >= horizon else [
                rng.uniform(-0.3, 0.3, size=model.control_dim(i)) for i in range(nbar)
            ]
            ctrl.observe(us, outs)
            for i in range(nbar):
                controls[i][k] = us[i]
                outputs[i][k] = outs[i]
            errs_log[k] = np.concatenate(errs)
            state = dynamics.step(model, state, us)
        for k in range(horizon, steps):
            w_agents = []
            for i in range(nbar):
                w_agents.append(
                    np.concatenate(
                        [controls[i][k - horizon : k][::-1].reshape(-1)]
                        + [controls[j][k - horizon : k][::-1].reshape(-1) for j in nbr_ids[i]]
                        + [outputs[i][k - horizon : k][::-1].reshape(-1)]
                    )
                )
            points.append((w_agents, errs_log[k]))
    return points


def oracle_value_check(
    sc: Scenario,
    gains: Sequence[PolicyGains],
    kernels: Sequence[QKernel],
    mode: str,
    points: int = 100,
) -> CheckResult:
    """Learned policies and values against the model-based iteration.

    Single follower: the window value must match the oracle value
    pointwise (the representation is exact there).  Coupled graphs: the
    window cannot resolve the other agents' errors, so the check
    compares what actually matters, the truncated cost of the learned
    policies against the oracle policies' cost from the same error
    states, per agent.
    """
    model = sc.model
    try:
        vi = oracle.model_based_vi(model, sc.weights, max_iter=3000, tol=1e-11)
    except oracle.NotConverged as exc:
        return CheckResult("oracle_crosscheck", passed=False,
                           details={"error": "NotConverged", "message": str(exc)})
    stacked = vi.kernel_trace[-1].stacked

    if model.num_agents == 1:
        collected = _closed_loop_points(sc, gains, mode, runs=4, span=40)
        rel_errs = []
        for w_agents, e_stack in collected:
            v_oracle = float(e_stack @ stacked[0] @ e_stack)
            if v_oracle < 1e-6:
                continue
            rel_errs.append(abs(evaluate(kernels[0], w_agents[0]) - v_oracle) / v_oracle)
            if len(rel_errs) >= points:
                break
        if not rel_errs:
            return CheckResult("oracle_crosscheck", passed=False,
                               details={"error": "no usable trajectory points"})
        worst = float(np.max(rel_errs))
        return CheckResult(
            "oracle_crosscheck", passed=worst <= EXACT_VALUE_TOL,
            details={"max_value_rel_error": worst, "tolerance": EXACT_VALUE_TOL,
                     "points": len(rel_errs), "exact_representation": True},
        )

    loop = oracle.lifted_closed_loop(model, gains, mode)
    horizon = 1000
    rng = np.random.default_rng(9)
    e0 = rng.uniform(-1.0, 1.0, size=(loop.error_dim, 40))
    z_w = np.linalg.matrix_power(loop.transition, gains[0].layout.horizon) @ loop.initial(e0)
    e_w = z_w[: loop.error_dim]
    ratios = []
    ok = True
    for i in range(model.num_agents):
        gamma = oracle.stage_cost_kernel(model, sc.weights, loop, i)
        kernel = oracle.truncated_cost_kernel(loop, gamma, horizon)
        if kernel is None:
            return CheckResult("oracle_crosscheck", passed=False,
                               details={"error": "learned closed loop diverges"})
        j_learned = np.einsum("ib,ij,jb->b", z_w, kernel, z_w)
        j_oracle = np.einsum("ib,ij,jb->b", e_w, stacked[i], e_w)
        ratio = float((j_learned / j_oracle).mean())
        ratios.append(ratio)
        ok = ok and COST_RATIO_BAND[0] <= ratio <= COST_RATIO_BAND[1]
    return CheckResult(
        "oracle_crosscheck", passed=ok,
        details={"mean_cost_ratio_per_agent": ratios, "band": list(COST_RATIO_BAND),
                 "exact_representation": False},
    )


def scalar_vi_bounds_check(slack: float = 1e-8) -> CheckResult:
    """Geometric VI convergence envelope on the bundled scalar system."""
    graph = Digraph(np.zeros((1, 1)), np.array([1.0]))
    model = MasModel(np.array([[0.5]]), (np.array([[1.0]]),), (np.array([[1.0]]),), graph)
    weights = CostWeights((np.array([[1.0]]),), (np.array([[1.0]]),), {})
    vi = oracle.model_based_vi(model, weights, max_iter=200, tol=1e-12)
    values = [k.local[0] for k in vi.kernel_trace]
    p_star, _ = oracle.dare_solve(np.array([[0.5]]), np.array([[1.0]]),
                                  np.array([[1.0]]), np.array([[1.0]]))
    states = [np.array([e]) for e in np.linspace(-2.0, 2.0, 17) if abs(e) > 1e-9]
    controls = [np.array([u]) for u in np.linspace(-4.0, 4.0, 81)]
    # the cost ratio is scale-free, so a dense control grid plus the
    # analytic maximizer pins the uniform envelope constant
    m_mat = np.array([[0.5, 1.0]]).T @ p_star @ np.array([[0.5, 1.0]])
    theta_sup = float(np.linalg.eigvalsh(m_mat).max())
    theta = max(
        oracle.estimate_cost_ratio_bound(
            model.a_matrix, np.array([[1.0]]), np.array([[1.0]]), np.array([[1.0]]),
            p_star, states, controls,
        ),
        theta_sup,
    )
    cfg = oracle.BoundCheckConfig(theta=theta, alpha=0.0, beta=1.0)
    try:
        report = oracle.check_vi_bounds(values, p_star, cfg, states, slack=slack)
    except oracle.HypothesisViolated as exc:
        return CheckResult("vi_convergence_bounds", passed=False, skipped=True,
                           details={"error": "HypothesisViolated", "message": str(exc)})
    final_gap = float(np.abs(values[-1] - p_star).max())
    passed = report.ok and final_gap <= 1e-6
    return CheckResult(
        "vi_convergence_bounds", passed=passed,
        details={"theta": theta, "worst_lower_margin": report.worst_lower_margin,
                 "worst_upper_margin": report.worst_upper_margin,
                 "final_gap_to_optimum": final_gap,
                 "iterations_checked": report.iterations_checked},
    )


def stability_check(sc: Scenario, gains: Sequence[PolicyGains]) -> CheckResult:
    report = oracle.check_stability(sc.model, list(gains), trials=20, horizon=400,
                                    rng=np.random.default_rng(5))
    return CheckResult(
        "closed_loop_stability", passed=report.stable and report.agree,
        details={"spectral_radius": report.spectral_radius,
                 "spectral_stable": report.spectral_stable,
                 "monte_carlo_stable": report.monte_carlo_stable,
                 "verdicts_agree": report.agree},
    )


def nash_check(sc: Scenario, gains: Sequence[PolicyGains]) -> CheckResult:
    """No agent may improve its own cost by a unilateral gain deviation.

    Single follower: the learned policy is plain optimal control, so no
    deviation may help at all.  Coupled graphs: the iteration's fixed
    point is only approximately a best-response point (its per-agent
    values cannot see the whole swarm state), so a small documented
    improvement margin is tolerated; genuinely bad policies still fail
    by orders of magnitude.
    """
    exact = sc.model.num_agents == 1
    tolerance = 1e-6 if exact else NASH_APPROX_TOL
    worst = 0.0
    per_agent = []
    ok = True
    for i in range(sc.model.num_agents):
        rep = oracle.check_nash(
            sc.model, sc.weights, list(gains), i,
            rng=np.random.default_rng(50 + i), tolerance=tolerance,
        )
        ok = ok and rep.ok
        worst = min(worst, rep.worst_delta)
        per_agent.append({
            "agent": i + 1, "ok": rep.ok, "baseline_cost": rep.baseline_cost,
            "worst_delta": rep.worst_delta,
            "unstable_perturbations": rep.unstable_perturbations,
            "tail_estimate": rep.tail_estimate,
        })
    return CheckResult("nash_unilateral_optimality", passed=ok,
                       details={"agents": per_agent, "worst_delta": worst,
                                "tolerance": tolerance, "exact_representation": exact})


def residual_check(
    sc: Scenario, gains: Sequence[PolicyGains], kernels: Sequence[QKernel], mode: str
) -> CheckResult:
    """Self-consistency of the converged kernels on fresh held-out data."""
    model = sc.model
    nbar = model.num_agents
    cfg = sc.learner
    probe = learner.LearnerConfig(
        horizon=gains[0].layout.horizon,
        exploration_amplitude=max(cfg.exploration_amplitude, 0.05),
        rng_seed=cfg.rng_seed + 999,
        coupling_mode=mode,
        init_span=cfg.init_span,
    )
    count = max(lay.layout.total_dim * (lay.layout.total_dim + 1) for lay in gains)
    rng = np.random.default_rng(probe.rng_seed)
    samples = learner.collect_samples(model, list(gains), probe, count, rng)
    nbr_ids = [neighbors(model.graph, i) for i in range(nbar)]
    worst = 0.0
    for i in range(nbar):
        res = learner.bellman_residuals(samples[i], kernels[i], sc.weights, i, nbr_ids[i])
        worst = max(worst, float(res.max()))
    exact = all(len(nbr_ids[i]) == 0 for i in range(nbar))
    tol = EXACT_RESIDUAL_TOL if exact else APPROX_RESIDUAL_TOL
    return CheckResult(
        "bellman_residual", passed=worst <= tol,
        details={"max_rel_residual": worst, "tolerance": tol,
                 "exact_representation": exact},
    )


def run_validation(
    sc: Scenario,
    gains: Sequence[PolicyGains],
    kernels: Sequence[QKernel],
    mode: str,
) -> tuple[list[CheckResult], bool]:
    """Run the whole suite; failures are collected, never raised."""
    plan = [
        ("estimator_exactness", lambda: estimator_exactness_check(sc)),
        ("dare_equivalence", lambda: dare_gain_check(sc, gains, kernels)),
        ("oracle_crosscheck", lambda: oracle_value_check(sc, gains, kernels, mode)),
        ("vi_convergence_bounds", lambda: scalar_vi_bounds_check()),
        ("closed_loop_stability", lambda: stability_check(sc, gains)),
        ("nash_unilateral_optimality", lambda: nash_check(sc, gains)),
        ("bellman_residual", lambda: residual_check(sc, gains, kernels, mode)),
    ]
    checks = []
    for name, fn in plan:
        try:
            checks.append(fn())
        except Exception as exc:  # defensive: one broken check must not hide the rest
            checks.append(CheckResult(name, passed=False,
                                      details={"error": type(exc).__name__, "message": str(exc)}))
    all_passed = all(c.passed or c.skipped for c in checks)
    return checks, all_passed
