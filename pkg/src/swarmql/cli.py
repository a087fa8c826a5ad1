"""Command-line surface: learn, simulate, validate, demo-paper.

Exit codes are stable: 0 success, 1 parse error, 2 validation error,
3 learning did not produce converged policies, 4 a validation check
failed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import dynamics, learner, validate
from .graph import neighbors
from .qkernel import SingularCoupling, SingularGain, SwarmController
from .scenario import (
    ParseError,
    Scenario,
    ValidationError,
    initial_state,
    load_policies,
    load_scenario,
    save_policies,
    save_report,
)

EXIT_OK = 0
EXIT_PARSE = 1
EXIT_VALIDATION = 2
EXIT_NOT_CONVERGED = 3
EXIT_CHECK_FAILURE = 4

CONSENSUS_TOL = 1e-2


def bundled_scenario_path() -> Path:
    return Path(resources.files("swarmql") / "scenarios" / "demo_paper.yaml")


def _apply_overrides(sc: Scenario, args) -> Scenario:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["rng_seed"] = args.seed
    if getattr(args, "epsilon", None) is not None:
        changes["convergence_epsilon"] = args.epsilon
    if getattr(args, "max_iters", None) is not None:
        changes["max_iterations"] = args.max_iters
    if getattr(args, "coupling", None) is not None:
        changes["coupling_mode"] = args.coupling
    if not changes:
        return sc
    return dataclasses.replace(sc, learner=dataclasses.replace(sc.learner, **changes))


def cmd_learn(sc: Scenario, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        report, gains = learner.run(sc.model, sc.weights, sc.learner)
    except (learner.RankDeficientData, learner.DataDiverged, SingularGain, SingularCoupling) as exc:
        print(f"learning failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    kernels = [
        learner.kernel_from_coefficients(report.layouts[i], report.kernel_snapshots[-1][i])
        for i in range(sc.model.num_agents)
    ] if report.kernel_snapshots else []
    save_report(report, out_dir / "report.json")
    _write_kernel_trace(report, out_dir / "kernel_trace.csv")
    if kernels:
        save_policies(gains, kernels, sc.learner.coupling_mode, out_dir / "gains.json")
    if report.converged:
        final = max(report.deltas[-1])
        print(f"converged after {report.iterations} iterations (max kernel delta {final:.3e})")
        return EXIT_OK
    print(f"did not converge within {report.iterations} iterations", file=sys.stderr)
    return EXIT_NOT_CONVERGED


def _write_kernel_trace(report, path: Path) -> None:
    lines = ["iteration,agent,row,col,value"]
    for it, row in enumerate(report.kernel_snapshots, start=1):
        for agent, upper in enumerate(row, start=1):
            d = report.layouts[agent - 1].total_dim
            rows, cols = np.triu_indices(d)
            for r, c, v in zip(rows, cols, upper):
                lines.append(f"{it},{agent},{r + 1},{c + 1},{float(v)!r}")
    path.write_text("\n".join(lines) + "\n")


def cmd_simulate(sc: Scenario, gains_path: Path, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    gains, _, mode = load_policies(gains_path)
    if len(gains) != sc.model.num_agents:
        raise ValidationError("policy file does not match the scenario's agent count")
    model = sc.model
    nbar = model.num_agents
    n = model.state_dim
    m_max = max(model.control_dim(i) for i in range(nbar))
    ctrl = SwarmController(gains, [neighbors(model.graph, i) for i in range(nbar)], mode=mode)
    state = initial_state(sc)
    horizon = sc.simulation.horizon

    header = (
        ["k", "agent"]
        + [f"x{c + 1}" for c in range(n)]
        + [f"e{c + 1}" for c in range(n)]
        + [f"u{c + 1}" for c in range(m_max)]
        + [f"leader{c + 1}" for c in range(n)]
    )
    rows = [",".join(header)]
    consensus_step = None
    for k in range(horizon):
        errs = dynamics.all_tracking_errors(model, state)
        outs = [dynamics.error_output(model, i, errs[i]) for i in range(nbar)]
        controls = ctrl.policy_controls(outs)
        ctrl.observe(controls, outs)
        gap = max(
            float(np.linalg.norm(state.follower_states[i] - state.leader_state))
            for i in range(nbar)
        )
        if consensus_step is None and gap <= CONSENSUS_TOL:
            consensus_step = k
        leader_cells = [repr(float(v)) for v in state.leader_state]
        rows.append(",".join(
            [str(k), "0"] + leader_cells + [""] * n + [""] * m_max + leader_cells
        ))
        for i in range(nbar):
            u_cells = [repr(float(v)) for v in controls[i]]
            u_cells += [""] * (m_max - len(u_cells))
            rows.append(",".join(
                [str(k), str(i + 1)]
                + [repr(float(v)) for v in state.follower_states[i]]
                + [repr(float(v)) for v in errs[i]]
                + u_cells
                + leader_cells
            ))
        state = dynamics.step(model, state, controls)
    (out_dir / "trace.csv").write_text("\n".join(rows) + "\n")
    if consensus_step is not None:
        print(f"consensus (max state gap <= {CONSENSUS_TOL}) first reached at step {consensus_step}")
    else:
        print(f"no consensus within {horizon} steps")
    return EXIT_OK


def cmd_validate(sc: Scenario, gains_path: Path, out_dir: Path | None) -> int:
    gains, kernels, mode = load_policies(gains_path)
    if len(gains) != sc.model.num_agents:
        raise ValidationError("policy file does not match the scenario's agent count")
    checks, all_passed = validate.run_validation(sc, gains, kernels, mode)
    for c in checks:
        status = "SKIP" if c.skipped else ("PASS" if c.passed else "FAIL")
        print(f"[{status}] {c.name}: {json.dumps(c.details, default=float)}")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        doc = {"all_passed": all_passed, "checks": [c.to_dict() for c in checks]}
        (out_dir / "validation.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=float))
    return EXIT_OK if all_passed else EXIT_CHECK_FAILURE


def cmd_demo(out_dir: Path, args) -> int:
    sc = _apply_overrides(load_scenario(bundled_scenario_path()), args)
    print(f"scenario: {sc.name}")
    code = cmd_learn(sc, out_dir)
    if code != EXIT_OK:
        return code
    code = cmd_simulate(sc, out_dir / "gains.json", out_dir)
    if code != EXIT_OK:
        return code
    return cmd_validate(sc, out_dir / "gains.json", out_dir)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swarmql",
        description="Learn, simulate, and validate data-driven consensus-tracking controllers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, need_scenario=True):
        if need_scenario:
            p.add_argument("--scenario", required=True, help="scenario YAML file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override learner RNG seed")
        p.add_argument("--epsilon", type=float, default=None, help="override convergence epsilon")
        p.add_argument("--max-iters", type=int, default=None, help="override iteration cap")
        p.add_argument("--coupling", choices=["exact", "delay"], default=None,
                       help="override the current-control coupling mode")

    p_learn = sub.add_parser("learn", help="run the data-based value iteration")
    add_common(p_learn)

    p_sim = sub.add_parser("simulate", help="closed-loop rollout under learned gains")
    add_common(p_sim)
    p_sim.add_argument("--gains", required=True, help="gains file from `learn`")

    p_val = sub.add_parser("validate", help="oracle checks of learned gains")
    add_common(p_val)
    p_val.add_argument("--gains", required=True, help="gains file from `learn`")

    p_demo = sub.add_parser("demo-paper", help="run the bundled three-follower demo end to end")
    add_common(p_demo, need_scenario=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out)
    try:
        if args.command == "demo-paper":
            return cmd_demo(out_dir, args)
        sc = _apply_overrides(load_scenario(args.scenario), args)
        if args.command == "learn":
            return cmd_learn(sc, out_dir)
        if args.command == "simulate":
            return cmd_simulate(sc, Path(args.gains), out_dir)
        if args.command == "validate":
            return cmd_validate(sc, Path(args.gains), out_dir)
        raise AssertionError(f"unhandled command {args.command}")
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
