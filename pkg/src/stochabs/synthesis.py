"""Finite-horizon dynamic programming over a FiniteMdp and refinement to the concrete system.

Labels are read along ``y(0), ..., y(T)``: the automaton consumes the label
of the initial state before the first transition, and a word is accepted if
any prefix of length at most ``T + 1`` is. Region membership of a cell is
decided at its representative; the absorbing state satisfies nothing.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .abstraction import FiniteMdp
from .bounds import QuadraticSsf, interface
from .grid import Grid
from .model import Region
from .spec import Dfa, HorizonSpec, LabelMap


class RegionNotAligned(UserWarning):
    pass


@dataclass(eq=False)
class ValueFunction:
    """``values[k, s, q]``: probability of satisfying the property from time ``k``
    in state ``s`` with automaton location ``q`` (``q`` has size 1 for the
    safety/reachability kinds)."""

    values: np.ndarray
    spec: HorizonSpec
    init_loc: np.ndarray  # location after reading the label of each state at k = 0

    @property
    def horizon(self) -> int:
        return self.values.shape[0] - 1

    def initial(self) -> np.ndarray:
        """Satisfaction probability from each state at time 0."""
        s = np.arange(self.values.shape[1])
        return self.values[0, s, self.init_loc]


@dataclass(eq=False)
class ProductPolicy:
    """``table[k, s, q]``: input index applied at time ``k`` (for ``k < horizon``)."""

    table: np.ndarray
    reachable: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.table.shape[0]

    def compressed(self) -> list[tuple[int, np.ndarray]]:
        """Runs of identical consecutive slices as ``(first_k, slice)`` pairs."""
        runs: list[tuple[int, np.ndarray]] = []
        for k in range(self.table.shape[0]):
            if runs and np.array_equal(runs[-1][1], self.table[k]):
                continue
            runs.append((k, self.table[k]))
        return runs


def _membership(grid_reps: np.ndarray, C: np.ndarray | None, region: Region) -> np.ndarray:
    Y = grid_reps if C is None else grid_reps @ C.T
    return region.contains(Y)


def region_cell_mask(mdp: FiniteMdp, region: Region, grid: Grid | None = None,
                     C: np.ndarray | None = None, strict: bool = False) -> np.ndarray:
    """Boolean mask over MDP states (absorbing excluded) by representative membership."""
    if mdp.state_reps is None:
        raise ValueError("MDP has no state representatives; give explicit masks")
    mask = _membership(mdp.state_reps, C, region)
    if grid is not None and (C is None or np.array_equal(C, np.eye(grid.dim))):
        cut = _cells_cut(grid, region)
        if cut:
            msg = f"{cut} cells are cut by region boundaries; using representative membership"
            if strict:
                raise ValueError(msg)
            warnings.warn(msg, RegionNotAligned, stacklevel=3)
    return np.concatenate([mask, [False]])


def _cells_cut(grid: Grid, region: Region) -> int:
    lo = np.stack([grid.edges(d)[:-1] for d in range(grid.dim)])
    cut = 0
    for b in region.boxes:
        for d in range(grid.dim):
            e = grid.edges(d)
            for bound in (b.lower[d], b.upper[d]):
                if e[0] < bound < e[-1] and not np.any(np.isclose(e, bound, rtol=0, atol=1e-9 * (1 + abs(bound)))):
                    cut += 1
    del lo
    return cut


def _canonical_matvec(m, V: np.ndarray) -> np.ndarray:
    """``m @ V`` with each row summed in ascending order of its terms.

    The result depends only on the multiset of terms in a row, so relabelling
    states permutes the output bit-exactly.
    """
    n_rows = m.shape[0]
    counts = np.diff(m.indptr)
    rows = np.repeat(np.arange(n_rows), counts)
    terms = m.data[:, None] * V[m.indices]
    out = np.zeros((n_rows, V.shape[1]))
    nonempty = counts > 0
    starts = m.indptr[:-1][nonempty]
    for q in range(V.shape[1]):
        order = np.lexsort((terms[:, q], rows))
        out[nonempty, q] = np.add.reduceat(terms[order, q], starts)
    return out


def _stack(mdp: FiniteMdp, V: np.ndarray) -> np.ndarray:
    """``out[j] = P_j @ V`` for every input ``j``."""
    V2 = V[:, None] if V.ndim == 1 else V
    out = np.stack([_canonical_matvec(m, V2) for m in mdp.matrices])
    return out[..., 0] if V.ndim == 1 else out


def _pick(Q: np.ndarray, maximize: bool) -> tuple[np.ndarray, np.ndarray]:
    # argmax/argmin return the lowest index on ties
    idx = np.argmax(Q, axis=0) if maximize else np.argmin(Q, axis=0)
    return np.take_along_axis(Q, idx[None], axis=0)[0], idx


def value_iterate(mdp: FiniteMdp, spec: HorizonSpec, *, safe_mask=None, target_mask=None,
                  letters=None, grid: Grid | None = None, C=None, strict: bool = False,
                  maximize: bool = True) -> tuple[ValueFunction, ProductPolicy]:
    """Backward recursion for the property ``spec`` on ``mdp``.

    Region masks are derived from the MDP representatives unless given
    explicitly (``safe_mask``/``target_mask`` over all states including the
    absorbing one, or ``letters`` as alphabet indices per non-absorbing state).
    ``maximize=False`` computes the adversarial (minimising) value.
    """
    n = mdp.n_states
    T = spec.horizon
    absorbing = mdp.absorbing

    if spec.kind == "dfa":
        return _dfa_iterate(mdp, spec, letters, C, maximize)

    if spec.kind in ("safety", "reach-avoid"):
        if safe_mask is None:
            safe_mask = region_cell_mask(mdp, spec.safe, grid, C, strict)
        safe = np.asarray(safe_mask, dtype=bool).copy()
    else:
        safe = np.ones(n, dtype=bool)
    safe[absorbing] = False
    if spec.kind == "safety":
        target = np.zeros(n, dtype=bool)
    else:
        if target_mask is None:
            target_mask = region_cell_mask(mdp, spec.target, grid, C, strict)
        target = np.asarray(target_mask, dtype=bool).copy()
        target[absorbing] = False

    values = np.empty((T + 1, n, 1))
    table = np.zeros((T, n, 1), dtype=np.int64)
    if spec.kind == "safety":
        V = safe.astype(float)
        values[T, :, 0] = V
        for k in range(T - 1, -1, -1):
            best, idx = _pick(_stack(mdp, V), maximize)
            V = np.where(safe, best, 0.0)
            values[k, :, 0] = V
            table[k, :, 0] = idx
    else:
        continuing = safe & ~target
        V = target.astype(float)
        values[T, :, 0] = V
        for k in range(T - 1, -1, -1):
            best, idx = _pick(_stack(mdp, V), maximize)
            V = np.where(target, 1.0, np.where(continuing, best, 0.0))
            values[k, :, 0] = V
            table[k, :, 0] = idx
    vf = ValueFunction(values, spec, np.zeros(n, dtype=np.int64))
    policy = ProductPolicy(table)
    policy.reachable = _reachable(mdp, policy, vf, None, None)
    return vf, policy


def _state_letters(mdp: FiniteMdp, spec: HorizonSpec, C) -> np.ndarray:
    Y = mdp.state_reps if C is None else mdp.state_reps @ np.asarray(C).T
    return spec.labelmap.label_indices(Y, spec.dfa.alphabet)


def _dfa_iterate(mdp, spec, letters, C, maximize):
    dfa: Dfa = spec.dfa
    T = spec.horizon
    n = mdp.n_states
    nq = len(dfa.locations)
    if letters is None:
        letters = _state_letters(mdp, spec, C)
    letters = np.asarray(letters, dtype=np.int64)
    if letters.shape != (n - 1,):
        raise ValueError("need one letter per non-absorbing state")
    table = dfa.table()
    acc = dfa.accepting_mask()
    # successor location when entering each state from each location
    nxt = table[:, letters]  # (nq, n-1)

    values = np.zeros((T + 1, n, nq))
    values[T, : n - 1, :] = acc[None, :]
    policy = np.zeros((T, n, nq), dtype=np.int64)
    cols = np.arange(n - 1)[None, :]
    for k in range(T - 1, -1, -1):
        W = np.zeros((n, nq))
        W[: n - 1, :] = values[k + 1, cols, nxt].T
        best, idx = _pick(_stack(mdp, W), maximize)
        best[:, acc] = 1.0
        best[n - 1, :] = np.where(acc, 1.0, 0.0)
        values[k] = best
        policy[k] = idx
    values[:, n - 1, :] = np.where(acc, 1.0, 0.0)[None, :]
    init = np.concatenate([table[dfa.loc_index(dfa.initial), letters], [dfa.loc_index(dfa.initial)]])
    vf = ValueFunction(values, spec, init)
    pol = ProductPolicy(policy)
    pol.reachable = _reachable(mdp, pol, vf, nxt, acc)
    return vf, pol


def _reachable(mdp, policy, vf, nxt, acc) -> np.ndarray:
    """Forward support of (state, location) pairs under the policy from every start."""
    T = policy.horizon
    n = mdp.n_states
    nq = policy.table.shape[2]
    reach = np.zeros((T + 1, n, nq), dtype=bool)
    reach[0, np.arange(n), vf.init_loc] = True
    supports = [(m != 0).astype(np.int8) for m in mdp.matrices]
    for k in range(T):
        cur = reach[k]
        for j, S in enumerate(supports):
            sel = cur & (policy.table[k] == j)
            if not sel.any():
                continue
            for q in range(nq):
                rows = np.nonzero(sel[:, q])[0]
                if rows.size == 0:
                    continue
                succ = np.asarray(S[rows].sum(axis=0)).ravel() > 0
                if nxt is None:
                    reach[k + 1, succ, q] = True
                else:
                    if acc[q]:
                        reach[k + 1, succ, q] = True
                        continue
                    s_idx = np.nonzero(succ)[0]
                    inner = s_idx[s_idx < n - 1]
                    reach[k + 1, inner, nxt[q, inner]] = True
                    if succ[n - 1]:
                        reach[k + 1, n - 1, q] = True
    return reach


# --------------------------------------------------------------------------
# Exhaustive oracle


def brute_force_value(mdp: FiniteMdp, spec: HorizonSpec, *, safe_mask=None, target_mask=None,
                      letters=None, max_states: int = 8, max_horizon: int = 6,
                      maximize: bool = True) -> np.ndarray:
    """Optimal satisfaction probability from every start state by expectimax over histories.

    Every input choice at every history node and every successor outcome is
    enumerated; the property is evaluated on whole state paths. Only for
    tiny instances.
    """
    n = mdp.n_states
    T = spec.horizon
    if n > max_states or T > max_horizon:
        raise ValueError(f"instance too large for enumeration ({n} states, horizon {T})")
    rows = [[sorted(mdp.row(s, j).items()) for j in range(mdp.n_inputs)] for s in range(n)]
    absorbing = mdp.absorbing
    pick = max if maximize else min

    if spec.kind == "dfa":
        dfa = spec.dfa
        letters = np.asarray(letters, dtype=np.int64)

        def verdict(path):
            word = [dfa.alphabet[letters[s]] for s in path if s != absorbing]
            cut = path.index(absorbing) if absorbing in path else len(path)
            q = dfa.initial
            for letter in word[:cut]:
                q = dfa.trans[(q, letter)]
                if q in dfa.accepting:
                    return 1.0
            return 0.0
    else:
        safe = np.ones(n, bool) if safe_mask is None else np.asarray(safe_mask, bool).copy()
        target = np.zeros(n, bool) if target_mask is None else np.asarray(target_mask, bool).copy()
        safe[absorbing] = False
        target[absorbing] = False

        def verdict(path):
            if spec.kind == "safety":
                return float(all(safe[s] for s in path))
            for s in path:
                if target[s]:
                    return 1.0
                if spec.kind == "reach-avoid" and not safe[s]:
                    return 0.0
            return 0.0

    def expand(path):
        if len(path) == T + 1:
            return verdict(path)
        s = path[-1]
        return pick(sum(p * expand(path + [t]) for t, p in rows[s][j]) for j in range(mdp.n_inputs))

    return np.array([expand([s]) for s in range(n)])


# --------------------------------------------------------------------------
# Refinement to the concrete system


@dataclass(eq=False)
class ConcreteController:
    """Quantise-then-lookup state feedback, with automaton tracking for dfa properties.

    Batched: ``states`` has shape ``(k, n)`` and ``locs`` shape ``(k,)``.
    Outside the grid, or once the automaton has accepted, the fallback input
    is used and ``out_of_domain`` counts the former.
    """

    policy: ProductPolicy
    grid: Grid
    input_reps: np.ndarray
    fallback: np.ndarray
    dfa: Dfa | None = None
    labelmap: LabelMap | None = None
    C: np.ndarray | None = None
    ssf: QuadraticSsf | None = None
    out_of_domain: int = field(default=0)

    def _letters(self, X) -> np.ndarray:
        Y = X if self.C is None else X @ self.C.T
        return self.labelmap.label_indices(Y, self.dfa.alphabet)

    def initial_locations(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.dfa is None:
            return np.zeros(X.shape[0], dtype=np.int64)
        q0 = self.dfa.loc_index(self.dfa.initial)
        return self.dfa.table()[q0, self._letters(X)]

    def advance(self, locs, X) -> np.ndarray:
        if self.dfa is None:
            return locs
        return self.dfa.table()[locs, self._letters(np.atleast_2d(X))]

    def __call__(self, k: int, X, locs=None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if locs is None:
            locs = np.zeros(X.shape[0], dtype=np.int64)
        kk = min(k, self.policy.horizon - 1)
        idx = self.grid.index(X)
        inside = idx < self.grid.n_cells
        choice = self.policy.table[kk, np.where(inside, idx, 0), locs]
        U = self.input_reps[choice].astype(float)
        if self.ssf is not None:
            reps = self.grid.representatives[np.where(inside, idx, 0)]
            U = interface(X, reps, U, self.ssf)
        bad = ~inside
        if self.dfa is not None:
            bad = bad | self.dfa.accepting_mask()[locs]
        U[bad] = self.fallback
        self.out_of_domain += int(np.count_nonzero(~inside))
        return U

    def act(self, k: int, x, loc=0) -> np.ndarray:
        return self(k, np.atleast_2d(x), np.array([loc]))[0]


def refine_policy(policy: ProductPolicy, state_grid: Grid, input_reps, *, dfa: Dfa | None = None,
                  labelmap: LabelMap | None = None, C=None, ssf: QuadraticSsf | None = None,
                  fallback=None) -> ConcreteController:
    input_reps = np.atleast_2d(np.asarray(input_reps, dtype=float))
    if input_reps.shape[0] == 1 and policy.table.max() > 0:
        input_reps = input_reps.T
    if fallback is None:
        fallback = input_reps[0]
    return ConcreteController(policy, state_grid, input_reps, np.asarray(fallback, dtype=float),
                              dfa, labelmap, None if C is None else np.asarray(C, dtype=float), ssf)


def policy_csv(vf: ValueFunction, policy: ProductPolicy, mdp: FiniteMdp) -> str:
    """``k,state_idx,dfa_loc,x...,input_idx,u...,value`` for every non-absorbing pair."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    nx = mdp.state_reps.shape[1]
    nu = mdp.input_reps.shape[1]
    w.writerow(["k", "state_idx", "dfa_loc"] + [f"x{i}" for i in range(nx)]
               + ["input_idx"] + [f"u{i}" for i in range(nu)] + ["value"])
    T, n, nq = policy.table.shape
    for k in range(T):
        for s in range(n - 1):
            for q in range(nq):
                j = int(policy.table[k, s, q])
                w.writerow([k, s, q] + [f"{v:.17g}" for v in mdp.state_reps[s]] + [j]
                           + [f"{v:.17g}" for v in mdp.input_reps[j]] + [f"{vf.values[k, s, q]:.17g}"])
    return buf.getvalue()


def values_csv(vf: ValueFunction, mdp: FiniteMdp) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    nx = mdp.state_reps.shape[1]
    w.writerow(["k", "state_idx", "dfa_loc"] + [f"x{i}" for i in range(nx)] + ["value"])
    T1, n, nq = vf.values.shape
    for k in range(T1):
        for s in range(n - 1):
            for q in range(nq):
                w.writerow([k, s, q] + [f"{v:.17g}" for v in mdp.state_reps[s]]
                           + [f"{vf.values[k, s, q]:.17g}"])
    return buf.getvalue()
