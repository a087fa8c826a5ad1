"""Quadratic value kernels over I/O windows and the policies they induce.

Each agent's value is a quadratic form ``w' P w`` in its flattened data
window ``w`` (own controls, neighbors' controls in ascending order, own
outputs; newest entries first).  Reading the same kernel against the
window shifted one step forward puts the agent's current control in the
leading coordinates, so minimizing over it yields a distributed control
law whose gains are plain blocks of the kernel's first rows.

Because each agent's current control depends on its neighbors' current
controls, all controls at a step are mutually coupled; ``joint_controls``
stacks the per-agent affine relations into one linear system and solves
it exactly (default), or substitutes one-step-delayed neighbor controls
(fallback mode).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_GAIN_CONDITION = 1e12

__all__ = [
    "SingularGain",
    "SingularCoupling",
    "KernelLayout",
    "QKernel",
    "PolicyGains",
    "evaluate",
    "extract_blocks",
    "policy_gains",
    "control",
    "joint_controls",
    "SwarmController",
]


class SingularGain(RuntimeError):
    """R_ii plus the leading kernel block is numerically singular."""


class SingularCoupling(RuntimeError):
    """The stacked current-control system has no unique solution."""


@dataclass(frozen=True)
class KernelLayout:
    """Block structure of one agent's flattened data window.

    Coordinates [0, own_dim*horizon) hold the agent's own controls, the
    next blocks each neighbor's controls (ascending node order, contiguous
    per neighbor), and the last output_dim*horizon coordinates the
    outputs.  Within every block, entries are newest first.
    """

    own_dim: int
    neighbor_dims: tuple[int, ...]
    output_dim: int
    horizon: int

    def __post_init__(self) -> None:
        if min(self.own_dim, self.output_dim, self.horizon) < 1 or any(
            m < 1 for m in self.neighbor_dims
        ):
            raise ValueError("all layout dimensions must be positive")

    @property
    def total_dim(self) -> int:
        return (self.own_dim + sum(self.neighbor_dims) + self.output_dim) * self.horizon

    @property
    def own_span(self) -> int:
        return self.own_dim * self.horizon

    @property
    def neighbor_span(self) -> int:
        return sum(self.neighbor_dims) * self.horizon

    def neighbor_slice(self, pos: int) -> slice:
        start = self.own_span + sum(m * self.horizon for m in self.neighbor_dims[:pos])
        return slice(start, start + self.neighbor_dims[pos] * self.horizon)

    @property
    def output_slice(self) -> slice:
        return slice(self.own_span + self.neighbor_span, self.total_dim)

    def flatten(
        self,
        own: Sequence[np.ndarray],
        neighbor_seqs: Sequence[Sequence[np.ndarray]],
        outputs: Sequence[np.ndarray],
    ) -> np.ndarray:
        """Concatenate newest-first window pieces into one data vector."""
        if len(own) != self.horizon or len(outputs) != self.horizon:
            raise ValueError("window pieces must match the layout horizon")
        if len(neighbor_seqs) != len(self.neighbor_dims):
            raise ValueError("neighbor sequence count must match layout")
        parts = [np.asarray(u, dtype=float).reshape(-1) for u in own]
        for seq in neighbor_seqs:
            if len(seq) != self.horizon:
                raise ValueError("window pieces must match the layout horizon")
            parts.extend(np.asarray(u, dtype=float).reshape(-1) for u in seq)
        parts.extend(np.asarray(y, dtype=float).reshape(-1) for y in outputs)
        w = np.concatenate(parts)
        if w.shape[0] != self.total_dim:
            raise ValueError(f"flattened window has dimension {w.shape[0]}, expected {self.total_dim}")
        return w


@dataclass(frozen=True)
class QKernel:
    """Symmetric value kernel over one agent's data window.

    Symmetry is exact by construction: the stored matrix is the upper
    triangle mirrored onto the lower one.
    """

    layout: KernelLayout
    matrix: np.ndarray

    def __post_init__(self) -> None:
        mat = np.array(self.matrix, dtype=float)
        d = self.layout.total_dim
        if mat.shape != (d, d):
            raise ValueError(f"kernel matrix must be {d}x{d}, got {mat.shape}")
        upper = np.triu(mat)
        mat = upper + np.triu(mat, 1).T
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def zeros(cls, layout: KernelLayout) -> "QKernel":
        return cls(layout, np.zeros((layout.total_dim, layout.total_dim)))

    def upper_triangle(self) -> np.ndarray:
        """Row-major upper-triangle entries (the serialization format)."""
        iu = np.triu_indices(self.layout.total_dim)
        return self.matrix[iu]

    @classmethod
    def from_upper_triangle(cls, layout: KernelLayout, entries: np.ndarray) -> "QKernel":
        d = layout.total_dim
        mat = np.zeros((d, d))
        mat[np.triu_indices(d)] = np.asarray(entries, dtype=float)
        return cls(layout, mat)


def evaluate(kernel: QKernel, w: np.ndarray) -> float:
    """Quadratic form value of the kernel at a data vector."""
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape[0] != kernel.layout.total_dim:
        raise ValueError(f"data vector has dimension {w.shape[0]}, expected {kernel.layout.total_dim}")
    return float(w @ kernel.matrix @ w)


def extract_blocks(kernel: QKernel) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """First block-row of the kernel, split along the shifted-window partition.

    Returns (current-control block, own-past block, neighbor block, output
    block); together they tile the first ``own_dim`` rows exactly.
    """
    lay = kernel.layout
    m = lay.own_dim
    row = kernel.matrix[:m]
    return (
        row[:, :m].copy(),
        row[:, m : lay.own_span].copy(),
        row[:, lay.own_span : lay.own_span + lay.neighbor_span].copy(),
        row[:, lay.own_span + lay.neighbor_span :].copy(),
    )


@dataclass(frozen=True)
class PolicyGains:
    """Distributed control law read off a value kernel.

    ``g_own_past`` acts on the agent's last horizon-1 controls,
    ``g_neighbors`` on each neighbor's current plus last horizon-1
    controls, and ``g_output`` on the current plus last horizon-1 outputs
    (all newest first).
    """

    layout: KernelLayout
    g_own_past: np.ndarray
    g_neighbors: np.ndarray
    g_output: np.ndarray
    inverted_term: np.ndarray

    @classmethod
    def zeros(cls, layout: KernelLayout, r_self: np.ndarray) -> "PolicyGains":
        m = layout.own_dim
        return cls(
            layout,
            np.zeros((m, m * (layout.horizon - 1))),
            np.zeros((m, layout.neighbor_span)),
            np.zeros((m, layout.output_dim * layout.horizon)),
            np.linalg.inv(np.atleast_2d(np.asarray(r_self, dtype=float))),
        )

    def neighbor_block(self, pos: int) -> np.ndarray:
        """Columns of ``g_neighbors`` belonging to the pos-th neighbor."""
        lay = self.layout
        start = sum(m * lay.horizon for m in lay.neighbor_dims[:pos])
        return self.g_neighbors[:, start : start + lay.neighbor_dims[pos] * lay.horizon]

    def neighbor_current(self, pos: int) -> np.ndarray:
        """Coefficient of the pos-th neighbor's current control."""
        return self.neighbor_block(pos)[:, : self.layout.neighbor_dims[pos]]


def policy_gains(kernel: QKernel, r_self: np.ndarray) -> PolicyGains:
    """Greedy control law of the kernel's quadratic one-step objective.

    Raises SingularGain when ``r_self`` plus the leading kernel block is
    numerically singular, which signals a degenerate kernel iterate.
    """
    p_uu, p_own, p_nbr, p_out = extract_blocks(kernel)
    r = np.atleast_2d(np.asarray(r_self, dtype=float))
    term = r + p_uu
    if not np.isfinite(term).all() or np.linalg.cond(term) > MAX_GAIN_CONDITION:
        raise SingularGain("control penalty plus leading kernel block is numerically singular")
    inv = np.linalg.inv(term)
    inv = 0.5 * (inv + inv.T)
    return PolicyGains(kernel.layout, -inv @ p_own, -inv @ p_nbr, -inv @ p_out, inv)


def control(
    gains: PolicyGains,
    own_past: Sequence[np.ndarray],
    neighbor_window: Sequence[Sequence[np.ndarray]],
    output_window: Sequence[np.ndarray],
) -> np.ndarray:
    """Evaluate the control law on explicit window pieces.

    ``own_past`` holds the last horizon-1 own controls, each neighbor
    window its current control followed by horizon-1 past ones, and the
    output window the current output followed by horizon-1 past ones.
    """
    lay = gains.layout
    own = _stack(own_past, lay.own_dim * (lay.horizon - 1), "own past controls")
    nbr_parts = []
    for pos, seq in enumerate(neighbor_window):
        nbr_parts.append(
            _stack(seq, lay.neighbor_dims[pos] * lay.horizon, f"neighbor window {pos}")
        )
    nbr = np.concatenate(nbr_parts) if nbr_parts else np.zeros(0)
    if nbr.shape[0] != lay.neighbor_span:
        raise ValueError("neighbor windows do not match the layout")
    out = _stack(output_window, lay.output_dim * lay.horizon, "output window")
    return gains.g_own_past @ own + gains.g_neighbors @ nbr + gains.g_output @ out


def _stack(pieces: Sequence[np.ndarray], expected: int, what: str) -> np.ndarray:
    flat = (
        np.concatenate([np.asarray(p, dtype=float).reshape(-1) for p in pieces])
        if len(pieces)
        else np.zeros(0)
    )
    if flat.shape[0] != expected:
        raise ValueError(f"{what} has dimension {flat.shape[0]}, expected {expected}")
    return flat


def joint_controls(
    gains: Sequence[PolicyGains],
    neighbor_ids: Sequence[Sequence[int]],
    own_pasts: Sequence[np.ndarray],
    neighbor_pasts: Sequence[Sequence[np.ndarray]],
    output_windows: Sequence[np.ndarray],
    mode: str = "exact",
    prev_controls: Sequence[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Current controls of the whole swarm under the window policies.

    ``own_pasts[i]`` stacks agent i's last horizon-1 controls,
    ``neighbor_pasts[i][p]`` the last horizon-1 controls of its p-th
    neighbor, and ``output_windows[i]`` its current output followed by
    horizon-1 past ones; all flattened newest first.

    In ``exact`` mode the mutually dependent current controls are solved
    as one stacked linear system; in ``delay`` mode each neighbor's
    current control is replaced by its previous one (``prev_controls``).
    """
    n_agents = len(gains)
    m_dims = [g.layout.own_dim for g in gains]
    offsets = np.concatenate([[0], np.cumsum(m_dims)]).astype(int)
    rhs = np.zeros(int(offsets[-1]))
    for i, g in enumerate(gains):
        base = g.g_own_past @ own_pasts[i] + g.g_output @ output_windows[i]
        for pos in range(len(neighbor_ids[i])):
            block = g.neighbor_block(pos)
            m_j = g.layout.neighbor_dims[pos]
            base = base + block[:, m_j:] @ neighbor_pasts[i][pos]
        rhs[offsets[i] : offsets[i + 1]] = base

    if mode == "delay":
        if prev_controls is None:
            raise ValueError("delay mode needs the previous controls")
        u = rhs.copy()
        for i, g in enumerate(gains):
            for pos, j in enumerate(neighbor_ids[i]):
                u[offsets[i] : offsets[i + 1]] += g.neighbor_current(pos) @ np.asarray(
                    prev_controls[j], dtype=float
                ).reshape(-1)
        return [u[offsets[i] : offsets[i + 1]] for i in range(n_agents)]
    if mode != "exact":
        raise ValueError(f"unknown coupling mode {mode!r}")

    system = np.eye(int(offsets[-1]))
    for i, g in enumerate(gains):
        for pos, j in enumerate(neighbor_ids[i]):
            system[offsets[i] : offsets[i + 1], offsets[j] : offsets[j + 1]] -= g.neighbor_current(pos)
    if np.linalg.cond(system) > MAX_GAIN_CONDITION:
        raise SingularCoupling("stacked current-control system is numerically singular")
    u = np.linalg.solve(system, rhs)
    return [u[offsets[i] : offsets[i + 1]] for i in range(n_agents)]


class SwarmController:
    """Stateful closed-loop runtime for a swarm of window policies.

    Keeps the last horizon-1 controls and outputs of every agent (zero
    padded at the start of a run) and produces each step's controls via
    the coupled solve.  ``observe`` must be called with the controls that
    were actually applied, which may differ from the policy output when
    exploration noise is injected.
    """

    def __init__(
        self,
        gains: Sequence[PolicyGains],
        neighbor_ids: Sequence[Sequence[int]],
        mode: str = "exact",
    ) -> None:
        self.gains = list(gains)
        self.neighbor_ids = [list(ids) for ids in neighbor_ids]
        self.mode = mode
        self.reset()

    def reset(self) -> None:
        self._u_hist = [
            [np.zeros(g.layout.own_dim) for _ in range(g.layout.horizon - 1)] for g in self.gains
        ]
        self._y_hist = [
            [np.zeros(g.layout.output_dim) for _ in range(g.layout.horizon - 1)]
            for g in self.gains
        ]
        self._prev_controls = [np.zeros(g.layout.own_dim) for g in self.gains]

    def policy_controls(self, outputs: Sequence[np.ndarray], errors=None) -> list[np.ndarray]:
        own_pasts = [
            np.concatenate(h) if h else np.zeros(0) for h in (list(hist) for hist in self._u_hist)
        ]
        neighbor_pasts = [
            [own_pasts[j] for j in self.neighbor_ids[i]] for i in range(len(self.gains))
        ]
        output_windows = [
            np.concatenate([np.asarray(outputs[i], dtype=float).reshape(-1)] + list(self._y_hist[i]))
            for i in range(len(self.gains))
        ]
        return joint_controls(
            self.gains,
            self.neighbor_ids,
            own_pasts,
            neighbor_pasts,
            output_windows,
            mode=self.mode,
            prev_controls=self._prev_controls,
        )

    def observe(self, controls: Sequence[np.ndarray], outputs: Sequence[np.ndarray]) -> None:
        for i in range(len(self.gains)):
            u = np.asarray(controls[i], dtype=float).reshape(-1)
            y = np.asarray(outputs[i], dtype=float).reshape(-1)
            if self.gains[i].layout.horizon > 1:
                self._u_hist[i] = [u] + self._u_hist[i][:-1]
                self._y_hist[i] = [y] + self._y_hist[i][:-1]
            self._prev_controls[i] = u
