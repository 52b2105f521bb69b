"""Finite MDP abstraction of a linear Gaussian system over a uniform grid.

Each abstract row is the Gaussian kernel at a representative state and
input, integrated over every grid cell in closed form. Mass that falls
outside the grid, or is dropped by the truncation threshold, goes to a
single absorbing state (index ``n_cells``), so safety values computed on
the abstraction are conservative.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import ndtr

from .grid import Grid
from .model import LinearDtScs

DEFAULT_MEMORY_CAP = 2 * 1024**3
_BLOCK_ENTRIES = 2_000_000


class AbstractionTooLarge(MemoryError):
    def __init__(self, report: dict):
        self.report = report
        super().__init__(
            f"abstraction needs up to {report['estimated_bytes'] / 1e9:.2f} GB "
            f"(cap {report['cap_bytes'] / 1e9:.2f} GB): {report['n_cells']} cells x "
            f"{report['n_inputs']} inputs x {report['n_cells']} successors"
        )


@dataclass(frozen=True)
class TruncationPolicy:
    """Entries below ``gamma`` are dropped and their mass sent to the absorbing state."""

    gamma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("truncation threshold must lie in [0, 1)")


@dataclass(eq=False)
class FiniteMdp:
    """Sparse finite MDP; ``matrices[j]`` is the row-stochastic matrix for input ``j``.

    State ``n_states - 1`` is absorbing. Each row stores the kept cell
    probabilities plus the remainder in the absorbing column.
    """

    matrices: tuple
    state_reps: np.ndarray | None = None
    input_reps: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.matrices[0].shape[0]

    @property
    def n_inputs(self) -> int:
        return len(self.matrices)

    @property
    def absorbing(self) -> int:
        return self.n_states - 1

    def row(self, state: int, j: int) -> dict[int, float]:
        m = self.matrices[j]
        lo, hi = m.indptr[state], m.indptr[state + 1]
        return {int(c): float(p) for c, p in zip(m.indices[lo:hi], m.data[lo:hi])}

    def nnz(self) -> int:
        return int(sum(m.nnz for m in self.matrices))

    def permute_inputs(self, order) -> "FiniteMdp":
        order = list(order)
        reps = None if self.input_reps is None else self.input_reps[order]
        return FiniteMdp(tuple(self.matrices[j] for j in order), self.state_reps, reps,
                         dict(self.provenance))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["src", "input", "dst", "prob"])
        for j, m in enumerate(self.matrices):
            coo = m.tocoo()
            order = np.lexsort((coo.col, coo.row))
            for r, c, p in zip(coo.row[order], coo.col[order], coo.data[order]):
                w.writerow([int(r), j, int(c), f"{p:.17g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FiniteMdp":
        """Read ``src,input,dst,prob`` triplets; the largest state index is taken as absorbing."""
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows or set(rows[0]) != {"src", "input", "dst", "prob"}:
            raise ValueError("expected a CSV with header src,input,dst,prob")
        src = np.array([int(r["src"]) for r in rows])
        inp = np.array([int(r["input"]) for r in rows])
        dst = np.array([int(r["dst"]) for r in rows])
        prob = np.array([float(r["prob"]) for r in rows])
        n = int(max(src.max(), dst.max())) + 1
        mats = []
        for j in range(int(inp.max()) + 1):
            sel = inp == j
            mats.append(sp.csr_matrix((prob[sel], (src[sel], dst[sel])), shape=(n, n)))
        return cls(tuple(mats), provenance={"source": "csv"})


def _dim_probabilities(mu: np.ndarray, sigma: float, grid: Grid, d: int) -> np.ndarray:
    """Probability of each cell interval in dimension ``d`` for means ``mu`` (shape (k,))."""
    edges = grid.edges(d)
    if sigma == 0.0:
        idx = grid.dim_index(mu, d)
        out = np.zeros((mu.size, grid.cells[d]))
        ok = idx >= 0
        out[np.nonzero(ok)[0], idx[ok]] = 1.0
        return out
    z = (edges[None, :] - mu[:, None]) / sigma
    lower = ndtr(z)
    upper = ndtr(-z)
    # differences of the tail closer to each interval keep relative accuracy
    from_lower = lower[:, 1:] - lower[:, :-1]
    from_upper = upper[:, :-1] - upper[:, 1:]
    return np.where(z[:, :-1] > 0, from_upper, from_lower)


def _cell_probabilities(model: LinearDtScs, mu: np.ndarray, grid: Grid) -> np.ndarray:
    """Dense ``(k, n_cells)`` cell probabilities for kernel means ``mu`` (shape (k, n))."""
    out = None
    for d in range(grid.dim):
        p = _dim_probabilities(mu[:, d], float(model.R[d]), grid, d)
        out = p if out is None else (out[:, :, None] * p[:, None, :]).reshape(mu.shape[0], -1)
    return out


def _sparse_rows(probs: np.ndarray, gamma: float, absorbing: int):
    """Coordinate lists for dense cell probabilities, remainder routed to ``absorbing``."""
    keep = probs >= gamma if gamma > 0 else probs > 0
    kept = np.where(keep, probs, 0.0)
    remainder = np.clip(1.0 - kept.sum(axis=1), 0.0, 1.0)
    rows, cols = np.nonzero(keep)
    vals = probs[rows, cols]
    has_rem = remainder > 0
    rrows = np.nonzero(has_rem)[0]
    rows = np.concatenate([rows, rrows])
    cols = np.concatenate([cols, np.full(rrows.size, absorbing)])
    vals = np.concatenate([vals, remainder[has_rem]])
    return rows, cols, vals


def transition_row(model: LinearDtScs, x_rep, u_rep, grid: Grid,
                   trunc: TruncationPolicy = TruncationPolicy()) -> dict[int, float]:
    """Sparse successor distribution of one (representative state, input) pair.

    Keys are flat cell indices; ``grid.n_cells`` is the absorbing state.
    """
    x = np.atleast_1d(np.asarray(x_rep, dtype=float))
    u = np.atleast_1d(np.asarray(u_rep, dtype=float))
    mu = model.mean(x[None, :], u[None, :])
    probs = _cell_probabilities(model, mu, grid)
    _, cols, vals = _sparse_rows(probs, trunc.gamma, grid.n_cells)
    return {int(c): float(v) for c, v in zip(cols, vals)}


def _as_input_points(inputs, model: LinearDtScs) -> np.ndarray:
    if isinstance(inputs, Grid):
        pts = inputs.representatives
    else:
        pts = np.asarray(inputs, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None] if model.input_dim == 1 else pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != model.input_dim:
        raise ValueError(f"input points have shape {pts.shape}, model has {model.input_dim} inputs")
    return np.array(pts)


def sizing_report(grid: Grid, n_inputs: int, cap_bytes: int = DEFAULT_MEMORY_CAP) -> dict:
    # worst case: every row dense; 8-byte value + 4-byte column index
    est = grid.n_cells * n_inputs * (grid.n_cells + 1) * 12
    return {"n_cells": grid.n_cells, "n_inputs": n_inputs,
            "estimated_bytes": est, "cap_bytes": cap_bytes}


def abstract(model: LinearDtScs, state_grid: Grid, inputs,
             trunc: TruncationPolicy = TruncationPolicy(),
             threads: int = 1, memory_cap: int = DEFAULT_MEMORY_CAP) -> FiniteMdp:
    """Build the finite MDP over ``state_grid`` and the given input points or input grid."""
    if state_grid.dim != model.state_dim:
        raise ValueError(f"grid is {state_grid.dim}-D, model state is {model.state_dim}-D")
    u_pts = _as_input_points(inputs, model)
    report = sizing_report(state_grid, len(u_pts), memory_cap)
    if report["estimated_bytes"] > memory_cap:
        raise AbstractionTooLarge(report)

    reps = state_grid.representatives
    n_cells = state_grid.n_cells
    n = n_cells + 1
    block = max(1, _BLOCK_ENTRIES // max(n_cells, 1))
    jobs = [(j, s) for j in range(len(u_pts)) for s in range(0, n_cells, block)]

    def work(job):
        j, start = job
        x = reps[start:start + block]
        mu = model.mean(x, np.broadcast_to(u_pts[j], (x.shape[0], model.input_dim)))
        probs = _cell_probabilities(model, mu, state_grid)
        r, c, v = _sparse_rows(probs, trunc.gamma, n_cells)
        return r + start, c, v

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, jobs))
    else:
        parts = [work(job) for job in jobs]

    mats = []
    for j in range(len(u_pts)):
        pieces = [p for job, p in zip(jobs, parts) if job[0] == j]
        rows = np.concatenate([p[0] for p in pieces] + [np.array([n_cells])])
        cols = np.concatenate([p[1] for p in pieces] + [np.array([n_cells])])
        vals = np.concatenate([p[2] for p in pieces] + [np.array([1.0])])
        mats.append(sp.csr_matrix((vals, (rows, cols)), shape=(n, n)))

    provenance = {
        "model": model.fingerprint(),
        "state_grid": state_grid.fingerprint(),
        "n_inputs": len(u_pts),
        "truncation_gamma": trunc.gamma,
        "delta": state_grid.delta,
    }
    return FiniteMdp(tuple(mats), np.array(reps), u_pts, provenance)


def validate_mdp(mdp: FiniteMdp) -> dict:
    max_dev = 0.0
    negatives = 0
    for m in mdp.matrices:
        sums = np.asarray(m.sum(axis=1)).ravel()
        max_dev = max(max_dev, float(np.max(np.abs(sums - 1.0))))
        negatives += int(np.count_nonzero(m.data < 0))
    a = mdp.absorbing
    absorbing_ok = all(m[a, a] == 1.0 and m[a].nnz == 1 for m in mdp.matrices)
    return {"max_row_deviation": max_dev, "negative_entries": negatives,
            "absorbing_self_loop": absorbing_ok}
