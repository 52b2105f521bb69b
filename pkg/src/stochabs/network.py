"""Interconnected subsystems, small-gain checks and compositional error bounds.

Gains are linear: ``g_ij`` multiplies the simulation-function value of
subsystem ``j`` in the decrease inequality of subsystem ``i``::

    E[V_i+] <= kappa_i V_i + g_i(max_j V_j over neighbours j) + psi_i
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
import scipy.sparse as sp

from .abstraction import FiniteMdp, TruncationPolicy, abstract
from .bounds import SsfParams
from .grid import Grid, build_grid
from .model import Box, LinearDtScs, SparseBilinear

EXACT_CYCLE_LIMIT = 50
_MAX_ENUMERATED_CYCLES = 200_000


class SmallGainViolation(ValueError):
    def __init__(self, message: str, witness: list | None = None):
        self.witness = witness
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class Subsystem:
    """Model plus internal input matrix ``D`` (``n x p``) and internal output ``C2`` (``q2 x n``)."""

    model: LinearDtScs
    D: np.ndarray
    C2: np.ndarray

    def __post_init__(self):
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        C2 = np.atleast_2d(np.asarray(self.C2, dtype=float))
        n = self.model.state_dim
        if D.shape[0] != n:
            raise ValueError(f"D has {D.shape[0]} rows, expected {n}")
        if C2.shape[1] != n:
            raise ValueError(f"C2 has {C2.shape[1]} columns, expected {n}")
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "C2", C2)

    @property
    def internal_inputs(self) -> int:
        return self.D.shape[1]

    @property
    def internal_outputs(self) -> int:
        return self.C2.shape[0]

    def augmented(self) -> LinearDtScs:
        """The subsystem with internal inputs appended to the external ones."""
        m = self.model
        B = np.hstack([m.B, self.D])
        N = None
        if m.bilinear:
            c = m._coo
            N = SparseBilinear((B.shape[1], m.state_dim, m.state_dim), c.j, c.a, c.b, c.value)
        return LinearDtScs(m.A, B, m.c0, m.C, m.R, N=N)


@dataclass(frozen=True, eq=False)
class Interconnection:
    subsystems: tuple
    M: object  # dense or sparse (sum p_i) x (sum q2_i)

    def __post_init__(self):
        subs = tuple(self.subsystems)
        p = sum(s.internal_inputs for s in subs)
        q = sum(s.internal_outputs for s in subs)
        M = self.M if sp.issparse(self.M) else np.atleast_2d(np.asarray(self.M, dtype=float))
        if p == 0 and q == 0:
            M = np.zeros((0, 0))
        if M.shape != (p, q):
            raise ValueError(f"coupling matrix has shape {M.shape}, expected {(p, q)}")
        object.__setattr__(self, "subsystems", subs)
        object.__setattr__(self, "M", M)


def _block_bilinear(subsystems) -> SparseBilinear | None:
    parts = []
    n_off = u_off = 0
    for s in subsystems:
        m = s.model
        if m.bilinear:
            c = m._coo
            parts.append((c.j + u_off, c.a + n_off, c.b + n_off, c.value))
        n_off += m.state_dim
        u_off += m.input_dim
    if not parts:
        return None
    j, a, b, v = (np.concatenate(x) for x in zip(*parts))
    return SparseBilinear((u_off, n_off, n_off), j, a, b, v)


def interconnect(subsystems, M) -> LinearDtScs:
    """Monolithic model with the internal loop ``w = M y2`` closed."""
    net = Interconnection(tuple(subsystems), M)
    subs = net.subsystems
    if len(subs) == 1 and subs[0].internal_inputs == 0:
        return subs[0].model
    A = sp.block_diag([s.model.A for s in subs], format="csr")
    if net.M.shape[0]:
        D = sp.block_diag([s.D for s in subs], format="csr")
        C2 = sp.block_diag([s.C2 for s in subs], format="csr")
        A = A + D @ sp.csr_matrix(net.M) @ C2
    B = sp.block_diag([s.model.B for s in subs]).toarray()
    C = sp.block_diag([s.model.C for s in subs]).toarray()
    c0 = np.concatenate([s.model.c0 for s in subs])
    R = np.concatenate([s.model.R for s in subs])
    return LinearDtScs(A.toarray(), B, c0, C, R, N=_block_bilinear(subs))


def merge(subsystems) -> Subsystem:
    """Group subsystems into one block subsystem without closing any internal loop."""
    subs = list(subsystems)
    m = LinearDtScs(
        sp.block_diag([s.model.A for s in subs]).toarray(),
        sp.block_diag([s.model.B for s in subs]).toarray(),
        np.concatenate([s.model.c0 for s in subs]),
        sp.block_diag([s.model.C for s in subs]).toarray(),
        np.concatenate([s.model.R for s in subs]),
        N=_block_bilinear(subs),
    )
    D = sp.block_diag([s.D for s in subs]).toarray()
    C2 = sp.block_diag([s.C2 for s in subs]).toarray()
    return Subsystem(m, D, C2)


# --------------------------------------------------------------------------
# Room networks


def room_subsystem(neighbours: int, sigma: float = 0.1, theta: float = 0.4, gamma: float = 0.5,
                   T_e: float = -1.0, T_h: float = 50.0, R: float = 0.3) -> Subsystem:
    """One room exchanging heat with ``neighbours`` rooms; its temperature is copied to each port."""
    base = 1.0 - 2.0 * sigma - theta
    model = LinearDtScs([[base]], [[gamma * T_h]], [theta * T_e], [[1.0]], [R],
                        N=[[[-gamma]]])
    return Subsystem(model, np.full((1, neighbours), sigma), np.ones((neighbours, 1)))


def two_rooms(**kwargs) -> tuple[list[Subsystem], np.ndarray]:
    subs = [room_subsystem(1, **kwargs), room_subsystem(1, **kwargs)]
    return subs, np.array([[0.0, 1.0], [1.0, 0.0]])


def ring_coupling(n: int) -> sp.csr_matrix:
    """Port ``2i`` of room ``i`` reads room ``i-1``, port ``2i+1`` reads room ``i+1``."""
    rows, cols = [], []
    for i in range(n):
        rows += [2 * i, 2 * i + 1]
        # each room exposes two identical output copies: 2j (to j+1) and 2j+1 (to j-1)
        cols += [2 * ((i - 1) % n), 2 * ((i + 1) % n) + 1]
    return sp.csr_matrix((np.ones(2 * n), (rows, cols)), shape=(2 * n, 2 * n))


def ring_of_rooms(n: int, **kwargs) -> tuple[list[Subsystem], sp.csr_matrix]:
    if n < 3:
        raise ValueError("a ring needs at least three rooms")
    room = room_subsystem(2, **kwargs)
    return [room] * n, ring_coupling(n)


def gain_graph_from_coupling(subsystems, M) -> sp.csr_matrix:
    """Boolean ``N x N`` adjacency: ``[i, j]`` set when subsystem ``i`` reads subsystem ``j``."""
    M = sp.csr_matrix(M)
    in_owner = np.concatenate([np.full(s.internal_inputs, i) for i, s in enumerate(subsystems)])
    out_owner = np.concatenate([np.full(s.internal_outputs, i) for i, s in enumerate(subsystems)])
    coo = M.tocoo()
    n = len(subsystems)
    keep = coo.data != 0
    adj = sp.csr_matrix((np.ones(int(keep.sum())), (in_owner[coo.row[keep]], out_owner[coo.col[keep]])),
                        shape=(n, n))
    adj.data[:] = 1.0
    adj.setdiag(0)
    adj.eliminate_zeros()
    return adj


# --------------------------------------------------------------------------
# Gains and small-gain checks


@dataclass(frozen=True, eq=False)
class GainData:
    """Per-subsystem contraction ``kappa``, error ``psi``, ``alpha`` coefficient and cross gains ``G``."""

    G: object
    kappa: np.ndarray
    psi: np.ndarray
    k_alpha: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        G = sp.csr_matrix(self.G, dtype=float)
        n = G.shape[0]
        if G.shape != (n, n):
            raise ValueError("gain matrix must be square")
        if G.nnz and G.data.min() < 0:
            raise ValueError("gains must be nonnegative")
        if np.any(G.diagonal() != 0):
            raise ValueError("self gains must be zero")
        object.__setattr__(self, "G", G)
        for name in ("kappa", "psi", "k_alpha"):
            v = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)).copy()
            object.__setattr__(self, name, v)

    @property
    def size(self) -> int:
        return self.G.shape[0]

    @classmethod
    def uniform(cls, adjacency, kappa: float, gain: float, psi: float, k_alpha: float = 1.0,
                provenance=None) -> "GainData":
        G = sp.csr_matrix(adjacency, dtype=float) * gain
        return cls(G, kappa, psi, k_alpha, dict(provenance or {}))


def linear_gains(k_rho_int, k_alpha, adjacency) -> sp.csr_matrix:
    """``g_ij = k_rho_int_i / k_alpha_j`` on the edges of ``adjacency``
    (for ``rho_int(s) = k s^2`` and ``alpha(s) = k s^2``)."""
    adj = sp.csr_matrix(adjacency).tocoo()
    k_rho_int = np.asarray(k_rho_int, dtype=float)
    k_alpha = np.asarray(k_alpha, dtype=float)
    vals = k_rho_int[adj.row] / k_alpha[adj.col]
    return sp.csr_matrix((vals, (adj.row, adj.col)), shape=adj.shape)


@dataclass(frozen=True)
class SmallGainReport:
    holds: bool
    value: float
    witness: list
    method: str

    def to_text(self) -> str:
        return "\n".join([f"small_gain.holds={self.holds}", f"small_gain.value={self.value:.17g}",
                          f"small_gain.method={self.method}",
                          "small_gain.witness=" + "->".join(str(v) for v in self.witness)])


def _gain_digraph(G: sp.csr_matrix) -> nx.DiGraph:
    coo = G.tocoo()
    g = nx.DiGraph()
    g.add_nodes_from(range(G.shape[0]))
    for i, j, v in zip(coo.row, coo.col, coo.data):
        if v > 0:
            # edge j -> i: the value of j feeds subsystem i
            g.add_edge(int(j), int(i), weight=float(v))
    return g


def _cycle_product(g: nx.DiGraph, cycle) -> float:
    prod = 1.0
    for a, b in zip(cycle, cycle[1:] + cycle[:1]):
        prod *= g[a][b]["weight"]
    return prod


def _enumerate_max_cycle(g: nx.DiGraph):
    best, best_cycle = 0.0, []
    for count, cyc in enumerate(nx.simple_cycles(g)):
        if count >= _MAX_ENUMERATED_CYCLES:
            return None
        p = _cycle_product(g, cyc)
        rot = cyc.index(min(cyc))
        cyc = cyc[rot:] + cyc[:rot]
        if p > best or (p == best and best_cycle and cyc < best_cycle):
            best, best_cycle = p, cyc
    return best, best_cycle


def max_cycle_mean(g: nx.DiGraph, weight: str = "logw") -> tuple[float, list]:
    """Karp's maximum mean cycle over all strongly connected components."""
    best = -math.inf
    best_cycle: list = []
    for comp in nx.strongly_connected_components(g):
        if len(comp) == 1:
            v = next(iter(comp))
            if not g.has_edge(v, v):
                continue
        sub = g.subgraph(comp)
        nodes = sorted(sub.nodes)
        idx = {v: k for k, v in enumerate(nodes)}
        n = len(nodes)
        src = np.array([idx[a] for a, b in sub.edges])
        dst = np.array([idx[b] for a, b in sub.edges])
        w = np.array([sub[a][b][weight] for a, b in sub.edges])
        D = np.full((n + 1, n), -math.inf)
        D[0, 0] = 0.0
        for k in range(1, n + 1):
            cand = D[k - 1, src] + w
            row = np.full(n, -math.inf)
            np.maximum.at(row, dst, cand)
            D[k] = row
        with np.errstate(invalid="ignore"):
            ratios = (D[n][None, :] - D[:n]) / (n - np.arange(n))[:, None]
        ratios = np.where(np.isfinite(D[:n]) & np.isfinite(D[n])[None, :], ratios, math.inf)
        per_node = ratios.min(axis=0)
        per_node = np.where(np.isfinite(D[n]), per_node, -math.inf)
        mu = float(per_node.max())
        if mu > best:
            best = mu
            best_cycle = _critical_cycle(sub, weight, mu)
    return best, best_cycle


def _critical_cycle(sub: nx.DiGraph, weight: str, mu: float) -> list:
    """A cycle of mean ``mu`` found as a negative cycle of slightly shifted weights."""
    h = nx.DiGraph()
    scale = 1e-9 * (1.0 + abs(mu))
    for a, b, d in sub.edges(data=True):
        h.add_edge(a, b, weight=mu - d[weight] - scale)
    root = object()
    for v in sub.nodes:
        h.add_edge(root, v, weight=0.0)
    try:
        cyc = nx.find_negative_cycle(h, root)
    except nx.NetworkXError:
        return []
    cyc = [v for v in cyc[:-1] if v is not root]
    rot = cyc.index(min(cyc))
    return cyc[rot:] + cyc[:rot]


def small_gain_max(gains: GainData | sp.spmatrix | np.ndarray) -> SmallGainReport:
    """Every cycle product of the gain digraph is below one.

    Exact enumeration of simple cycles for up to 50 subsystems (falling back
    when there are too many cycles); Karp's maximum cycle mean on log-gains
    otherwise.
    """
    G = gains.G if isinstance(gains, GainData) else sp.csr_matrix(gains, dtype=float)
    g = _gain_digraph(G)
    if G.shape[0] <= EXACT_CYCLE_LIMIT:
        found = _enumerate_max_cycle(g)
        if found is not None:
            best, cyc = found
            return SmallGainReport(best < 1.0, best, cyc, "cycle-enumeration")
    for a, b, d in g.edges(data=True):
        d["logw"] = math.log(d["weight"])
    mu, cyc = max_cycle_mean(g)
    if not cyc:
        return SmallGainReport(True, 0.0, [], "max-cycle-mean")
    return SmallGainReport(mu < 0.0, _cycle_product(g, cyc), cyc, "max-cycle-mean")


def small_gain_sum(G, tol: float = 1e-10, max_iter: int = 100_000) -> SmallGainReport:
    """Spectral radius of a nonnegative gain matrix below one.

    Power iteration on ``G + I`` (aperiodic, same Perron vector) with the
    Collatz-Wielandt bracket as the stopping rule; if the bracket does not
    close, the Gershgorin bound decides when it can, else a dense
    eigenvalue computation.
    """
    G = sp.csr_matrix(G, dtype=float)
    n = G.shape[0]
    if G.nnz and G.data.min() < 0:
        raise ValueError("gain matrix must be nonnegative")
    if G.nnz == 0:
        return SmallGainReport(True, 0.0, [], "zero-matrix")
    S = G + sp.identity(n, format="csr")
    x = np.ones(n)
    lo, hi = 0.0, math.inf
    for _ in range(max_iter):
        y = S @ x
        r = y / x
        lo, hi = float(r.min()) - 1.0, float(r.max()) - 1.0
        x = y / y.max()
        if hi - lo <= tol * max(1.0, hi):
            rho = 0.5 * (lo + hi)
            return SmallGainReport(hi < 1.0 or (rho < 1.0 and hi - 1.0 < tol), rho, [],
                                   "power-iteration")
    gersh = float(min(np.abs(G).sum(axis=1).max(), np.abs(G).sum(axis=0).max()))
    hi = min(hi, gersh)
    if hi < 1.0:
        return SmallGainReport(True, hi, [], "collatz-wielandt/gershgorin bound")
    if lo >= 1.0:
        return SmallGainReport(False, lo, [], "collatz-wielandt lower bound")
    rho = float(np.max(np.abs(np.linalg.eigvals(G.toarray()))))
    return SmallGainReport(rho < 1.0, rho, [], "dense-eigenvalues")


def compose_error_max(gains: GainData) -> SsfParams:
    """Network simulation-function parameters for ``V = max_i V_i``.

    ``kappa = max_i (kappa_i + max_j g_ij)``, ``psi = max_i psi_i``,
    ``alpha`` coefficient ``min_i k_alpha_i``. Refuses when the cycle
    condition fails, or when the composed contraction is not below one.
    """
    sg = small_gain_max(gains)
    if not sg.holds:
        raise SmallGainViolation(f"small-gain condition fails: cycle product {sg.value:.6g}",
                                 sg.witness)
    row_max = np.asarray(gains.G.max(axis=1).todense()).ravel() if gains.G.nnz else np.zeros(gains.size)
    kappa = float(np.max(gains.kappa + row_max))
    if not kappa < 1.0:
        raise SmallGainViolation(
            f"cycle condition holds but the unweighted max-composition contracts by {kappa:.6g} >= 1",
            sg.witness)
    return SsfParams(k_alpha=float(gains.k_alpha.min()), p_alpha=2.0, kappa=kappa,
                     psi=float(gains.psi.max()))


def compose_error_sum(gains: GainData, weights=None) -> SsfParams:
    """Network parameters for ``V = sum_i w_i V_i``.

    ``kappa = max_j (kappa_j + sum_i w_i g_ij / w_j)``, ``psi = sum_i w_i psi_i``,
    ``alpha`` coefficient ``min_i w_i k_alpha_i``.
    """
    n = gains.size
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w <= 0):
        raise ValueError("weights must be positive, one per subsystem")
    inflow = np.asarray(gains.G.T @ w).ravel() / w
    kappa = float(np.max(gains.kappa + inflow))
    if not kappa < 1.0:
        raise SmallGainViolation(f"weighted sum composition contracts by {kappa:.6g} >= 1")
    return SsfParams(k_alpha=float(np.min(w * gains.k_alpha)), p_alpha=2.0, kappa=kappa,
                     psi=float(np.dot(w, gains.psi)))


def published_room_gains(adjacency, delta: float = 0.005) -> GainData:
    """Quoted constants: ``alpha(s)=s^2``, decrease rate 0.99 (contraction 0.01),
    ``rho_int(s)=0.97 s^2`` and ``psi_i = 6.06 delta^2``."""
    return GainData.uniform(adjacency, kappa=1.0 - 0.99, gain=0.97, psi=6.06 * delta**2,
                            k_alpha=1.0, provenance={"source": "quoted constants"})


def room_ssf_constants(sub: Subsystem, u_points, delta: float, w_spacing: float,
                       pi1: float = 1.0, pi2: float = 1.0) -> dict:
    """Derived per-room constants for ``V_i = (x_i - x_hat_i)^2`` with shared noise.

    ``e+ = a(u) e + sum_k D_k (w_k - w_hat_k) + q`` where ``q`` collects the
    state quantisation (``|q| <= delta``) and the internal-input quantisation
    (``|D| w_spacing / 2``). Young's inequality twice gives
    ``kappa = (1+pi1) max a^2``, per-neighbour gain ``(1+1/pi1)(1+pi2) |D|_1^2``
    and ``psi = (1+1/pi1)(1+1/pi2)(delta + |D|_1 w_spacing/2)^2``.
    """
    m = sub.model
    if m.state_dim != 1:
        raise ValueError("room constants are derived for scalar subsystems")
    u = np.atleast_2d(np.asarray(u_points, dtype=float)).reshape(-1, m.input_dim)
    lo, hi = u.min(axis=0), u.max(axis=0)
    a2 = max(float(m.effective_A(v)[0, 0]) ** 2 for v in (lo, hi))
    d1 = float(np.abs(sub.D).sum())
    return {
        "kappa": (1 + pi1) * a2,
        "gain": (1 + 1 / pi1) * (1 + pi2) * d1**2,
        "psi": (1 + 1 / pi1) * (1 + 1 / pi2) * (delta + d1 * w_spacing / 2) ** 2,
        "k_alpha": 1.0,
    }


# --------------------------------------------------------------------------
# Per-subsystem abstraction


@dataclass(frozen=True)
class SubsystemGrids:
    state: Grid
    u_points: np.ndarray
    w_points: np.ndarray  # per internal input: 1-D point set (shared)

    def input_points(self, sub: Subsystem) -> np.ndarray:
        """Product of external input points and internal input points per port."""
        axes = [np.arange(len(self.u_points))] + [np.arange(len(self.w_points))] * sub.internal_inputs
        idx = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
        U = np.atleast_2d(self.u_points).reshape(len(self.u_points), -1)[idx[:, 0]]
        W = np.asarray(self.w_points, dtype=float)[idx[:, 1:]]
        return np.hstack([U, W])


def _content_key(sub: Subsystem, grids: SubsystemGrids, trunc: TruncationPolicy) -> str:
    h = hashlib.sha256()
    h.update(sub.augmented().fingerprint().encode())
    h.update(grids.state.fingerprint().encode())
    h.update(np.ascontiguousarray(grids.u_points, dtype=float).tobytes())
    h.update(np.ascontiguousarray(grids.w_points, dtype=float).tobytes())
    h.update(repr(trunc.gamma).encode())
    return h.hexdigest()


def abstract_subsystems(subsystems, grids: SubsystemGrids, trunc: TruncationPolicy = TruncationPolicy(),
                        threads: int = 1) -> tuple[list[FiniteMdp], dict]:
    """Abstract every subsystem, building each distinct (model, grid, inputs) only once.

    Returns one MDP per subsystem (shared objects for identical subsystems)
    and statistics on how many were built.
    """
    keys = [_content_key(s, grids, trunc) for s in subsystems]
    unique = {}
    for k, s in zip(keys, subsystems):
        unique.setdefault(k, s)

    def build(item):
        key, sub = item
        return key, abstract(sub.augmented(), grids.state, grids.input_points(sub), trunc)

    items = sorted(unique.items())
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            built = dict(pool.map(build, items))
    else:
        built = dict(build(it) for it in items)
    return [built[k] for k in keys], {"subsystems": len(subsystems), "distinct": len(built)}


def default_room_grids(internal_points: int = 3, u_points=(0.0, 0.2, 0.4, 0.6),
                       cells: int = 400) -> SubsystemGrids:
    """400-cell room grid on [19, 21]; internal inputs quantised to ``internal_points`` centres."""
    state = build_grid(Box([19.0], [21.0]), cells)
    w_grid = build_grid(Box([19.0], [21.0]), internal_points)
    return SubsystemGrids(state, np.asarray(u_points, dtype=float).reshape(-1, 1),
                          w_grid.representatives[:, 0])
