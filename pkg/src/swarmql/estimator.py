"""Windowed reconstruction of tracking errors from measured I/O data.

Expanding the error recursion over the last ``N`` steps expresses the
current error exactly in terms of the control and output histories,

    e_i(k) = T_u  u_i(k-1..k-N) + sum_j T_uj u_j(k-1..k-N) + T_y y_i(k-1..k-N),

provided the stacked observability matrix of (A, C_i) has full column
rank (N at least the observability index).  This module exists on the
validation side only: it certifies the window parameterization that the
learned value kernels live on and produces ground-truth errors for
diagnostics.  The learner itself never builds these matrices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dynamics import MasModel, error_system_matrices
from .graph import neighbors

SVD_TOL = 1e-9

__all__ = [
    "RankDeficient",
    "NotObservable",
    "IoWindow",
    "HistoryBlocks",
    "EstimatorMatrices",
    "build_block_matrices",
    "build_estimator",
    "reconstruct_error",
    "observability_index",
]


class RankDeficient(RuntimeError):
    """The stacked observability matrix cannot be left-inverted."""


class NotObservable(RuntimeError):
    """No stacking depth up to the state dimension reaches full rank."""


@dataclass(frozen=True)
class IoWindow:
    """Per-agent I/O history over the last N steps, newest entry first.

    Flattening concatenates own controls, then each neighbor's controls in
    ascending node order, then outputs.
    """

    own_controls: tuple[np.ndarray, ...]
    neighbor_controls: tuple[tuple[np.ndarray, ...], ...]
    outputs: tuple[np.ndarray, ...]
    anchor_step: int

    def __post_init__(self) -> None:
        n = len(self.own_controls)
        if n == 0:
            raise ValueError("window length must be positive")
        if len(self.outputs) != n or any(len(seq) != n for seq in self.neighbor_controls):
            raise ValueError("all window sequences must have the same length")

    @property
    def horizon(self) -> int:
        return len(self.own_controls)

    def flatten(self) -> np.ndarray:
        parts = [np.asarray(u, dtype=float).reshape(-1) for u in self.own_controls]
        for seq in self.neighbor_controls:
            parts.extend(np.asarray(u, dtype=float).reshape(-1) for u in seq)
        parts.extend(np.asarray(y, dtype=float).reshape(-1) for y in self.outputs)
        return np.concatenate(parts)


@dataclass(frozen=True)
class HistoryBlocks:
    """Stacked matrices of the N-step expanded error/output equations."""

    observability: np.ndarray
    own_controls: np.ndarray
    neighbor_controls: dict[int, np.ndarray]
    own_feedthrough: np.ndarray
    neighbor_feedthrough: dict[int, np.ndarray]


@dataclass(frozen=True)
class EstimatorMatrices:
    """Linear maps from the flattened I/O window to the current error."""

    t_own: np.ndarray
    t_neighbors: dict[int, np.ndarray]
    t_output: np.ndarray
    horizon: int


def _control_stack(a: np.ndarray, b: np.ndarray, n_steps: int) -> np.ndarray:
    # columns pair with controls newest first: [B, AB, ..., A^(N-1)B]
    blocks = [b]
    for _ in range(n_steps - 1):
        blocks.append(a @ blocks[-1])
    return np.hstack(blocks)


def _feedthrough(c: np.ndarray, a: np.ndarray, b: np.ndarray, n_steps: int) -> np.ndarray:
    # block (r, s) couples output y(k-1-r) to control u(k-1-s); only
    # controls strictly older than the output contribute, so the first
    # block column and last block row are zero.
    q, m = c.shape[0], b.shape[1]
    d = np.zeros((q * n_steps, m * n_steps))
    powers = [np.eye(a.shape[0])]
    for _ in range(n_steps):
        powers.append(a @ powers[-1])
    for r in range(n_steps):
        for s in range(r + 1, n_steps):
            d[r * q : (r + 1) * q, s * m : (s + 1) * m] = c @ powers[s - r - 1] @ b
    return d


def build_block_matrices(model: MasModel, i: int, n_steps: int) -> HistoryBlocks:
    """Stacked matrices relating the N-step window to the oldest error."""
    if n_steps < 1:
        raise ValueError("window length must be at least 1")
    a = model.a_matrix
    c = model.c_matrices[i]
    f_i, e_ij = error_system_matrices(model, i)
    obs = np.vstack([c @ np.linalg.matrix_power(a, n_steps - 1 - r) for r in range(n_steps)])
    return HistoryBlocks(
        observability=obs,
        own_controls=_control_stack(a, f_i, n_steps),
        neighbor_controls={j: _control_stack(a, e_mat, n_steps) for j, e_mat in e_ij.items()},
        own_feedthrough=_feedthrough(c, a, f_i, n_steps),
        neighbor_feedthrough={j: _feedthrough(c, a, e_mat, n_steps) for j, e_mat in e_ij.items()},
    )


def build_estimator(model: MasModel, i: int, n_steps: int) -> EstimatorMatrices:
    """Window-to-error maps for agent ``i`` over an ``n_steps`` history.

    Uses an SVD pseudo-inverse of the observability stack (threshold
    ``SVD_TOL``) instead of the normal equations; the two agree whenever
    the stack is well conditioned.

    Raises RankDeficient when the observability stack loses column rank,
    which signals ``n_steps`` below the observability index or an
    unobservable output map.
    """
    blocks = build_block_matrices(model, i, n_steps)
    u_svd, sv, vt = np.linalg.svd(blocks.observability, full_matrices=False)
    if sv.size < model.state_dim or sv.min() < SVD_TOL:
        raise RankDeficient(
            f"observability stack of agent {i} is rank deficient at window length {n_steps}"
        )
    pinv = vt.T @ np.diag(1.0 / sv) @ u_svd.T
    a_pow = np.linalg.matrix_power(model.a_matrix, n_steps)
    propagate = a_pow @ pinv
    return EstimatorMatrices(
        t_own=blocks.own_controls - propagate @ blocks.own_feedthrough,
        t_neighbors={
            j: blocks.neighbor_controls[j] - propagate @ blocks.neighbor_feedthrough[j]
            for j in blocks.neighbor_controls
        },
        t_output=propagate,
        horizon=n_steps,
    )


def reconstruct_error(est: EstimatorMatrices, window: IoWindow) -> np.ndarray:
    """Exact current tracking error from the I/O window alone."""
    if window.horizon != est.horizon:
        raise ValueError(
            f"window length {window.horizon} does not match estimator horizon {est.horizon}"
        )
    if len(window.neighbor_controls) != len(est.t_neighbors):
        raise ValueError("window neighbor count does not match estimator")
    own = np.concatenate([np.asarray(u, dtype=float).reshape(-1) for u in window.own_controls])
    out = np.concatenate([np.asarray(y, dtype=float).reshape(-1) for y in window.outputs])
    e = est.t_own @ own + est.t_output @ out
    for t_mat, seq in zip(est.t_neighbors.values(), window.neighbor_controls):
        stacked = np.concatenate([np.asarray(u, dtype=float).reshape(-1) for u in seq])
        e = e + t_mat @ stacked
    return e


def observability_index(model: MasModel, i: int) -> int:
    """Smallest stacking depth at which (A, C_i) reaches full column rank."""
    a = model.a_matrix
    c = model.c_matrices[i]
    n = model.state_dim
    stack = c
    for k in range(1, n + 1):
        if k > 1:
            stack = np.vstack([c @ np.linalg.matrix_power(a, k - 1), stack])
        if np.linalg.matrix_rank(stack) == n:
            return k
    raise NotObservable(f"(A, C_{i + 1}) never reaches rank {n} within depth {n}")


def window_from_history(
    controls: Sequence[np.ndarray],
    neighbor_controls: Sequence[Sequence[np.ndarray]],
    outputs: Sequence[np.ndarray],
    anchor_step: int,
) -> IoWindow:
    """Convenience constructor from newest-first history slices."""
    return IoWindow(
        own_controls=tuple(np.asarray(u, dtype=float) for u in controls),
        neighbor_controls=tuple(
            tuple(np.asarray(u, dtype=float) for u in seq) for seq in neighbor_controls
        ),
        outputs=tuple(np.asarray(y, dtype=float) for y in outputs),
        anchor_step=anchor_step,
    )
