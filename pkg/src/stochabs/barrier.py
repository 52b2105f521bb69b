"""Control barrier certificates checked pointwise on grids, with exact Gaussian moments.

A certificate is a polynomial ``B`` with an affine (optionally clamped)
feedback ``u(x)``. Expectations ``E[B(f(x, u, w))]`` are computed in closed
form from the raw moments of the normal distribution, so only the check
grid (not the expectation) is approximate.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .model import Box, LinearDtScs, UnsupportedModel, as_region

MAX_DEGREE = 6
_CHUNK = 200_000


# --------------------------------------------------------------------------
# Polynomials


@dataclass(frozen=True, eq=False)
class Polynomial:
    """Sum of ``coeff * prod_i x_i**k_i`` over multi-indices ``k``."""

    coeffs: dict
    dim: int

    def __post_init__(self):
        clean = {}
        for k, c in self.coeffs.items():
            k = tuple(int(e) for e in k)
            if len(k) != self.dim or min(k, default=0) < 0:
                raise ValueError(f"bad multi-index {k} for a {self.dim}-D polynomial")
            if not math.isfinite(c):
                raise ValueError("polynomial coefficients must be finite")
            if c != 0.0:
                clean[k] = clean.get(k, 0.0) + float(c)
        if clean and max(sum(k) for k in clean) > MAX_DEGREE:
            raise UnsupportedModel(f"polynomial degree above {MAX_DEGREE}")
        object.__setattr__(self, "coeffs", clean)

    @classmethod
    def univariate(cls, coeffs) -> "Polynomial":
        """From ascending coefficients ``[c0, c1, c2, ...]``."""
        return cls({(p,): float(c) for p, c in enumerate(coeffs)}, 1)

    @classmethod
    def constant(cls, value: float, dim: int = 1) -> "Polynomial":
        return cls({(0,) * dim: float(value)}, dim)

    @classmethod
    def vertex(cls, center, degree: int = 2, scale: float = 1.0, offset: float = 0.0) -> "Polynomial":
        """``scale * sum_i (x_i - center_i)**degree + offset``."""
        center = np.atleast_1d(np.asarray(center, dtype=float))
        n = center.size
        coeffs: dict = {(0,) * n: offset}
        for i, m in enumerate(center):
            for p in range(degree + 1):
                k = [0] * n
                k[i] = p
                c = scale * math.comb(degree, p) * (-m) ** (degree - p)
                coeffs[tuple(k)] = coeffs.get(tuple(k), 0.0) + c
        return cls(coeffs, n)

    @property
    def degree(self) -> int:
        return max((sum(k) for k in self.coeffs), default=0)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            x = x[..., None] if self.dim == 1 else x
        out = np.zeros(x.shape[:-1])
        for k, c in self.coeffs.items():
            term = np.full(x.shape[:-1], c)
            for i, e in enumerate(k):
                if e:
                    term = term * x[..., i] ** e
            out = out + term
        return out

    def lipschitz_bound(self, box: Box) -> float:
        """Crude upper bound on ``|grad B|_1`` over ``box`` (sound, term by term)."""
        r = np.maximum(np.abs(box.lower), np.abs(box.upper))
        total = 0.0
        for k, c in self.coeffs.items():
            for i, e in enumerate(k):
                if e:
                    other = np.prod([r[j] ** k[j] for j in range(self.dim) if j != i])
                    total += abs(c) * e * r[i] ** (e - 1) * other
        return float(total)


@lru_cache(maxsize=None)
def normal_moment(k: int) -> float:
    """``E[z**k]`` for standard normal ``z``: 0 for odd ``k``, ``(k-1)!!`` for even."""
    if k < 0:
        raise ValueError("moment order must be nonnegative")
    if k == 0:
        return 1.0
    if k == 1:
        return 0.0
    return (k - 1) * normal_moment(k - 2)


def _raw_moments(mu: np.ndarray, sigma: float, order: int) -> list[np.ndarray]:
    """``E[(mu + sigma z)**p]`` for ``p = 0..order``."""
    out = []
    for p in range(order + 1):
        acc = np.zeros_like(mu)
        for j in range(0, p + 1, 2):
            acc = acc + math.comb(p, j) * mu ** (p - j) * sigma**j * normal_moment(j)
        out.append(acc)
    return out


def expected_polynomial(poly: Polynomial, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """``E[B(mean + diag(std) z)]`` for means of shape ``(k, n)``."""
    mean = np.atleast_2d(mean)
    deg = poly.degree
    moments = [_raw_moments(mean[:, i], float(std[i]), deg) for i in range(poly.dim)]
    out = np.zeros(mean.shape[0])
    for k, c in poly.coeffs.items():
        term = np.full(mean.shape[0], c)
        for i, e in enumerate(k):
            if e:
                term = term * moments[i][e]
        out = out + term
    return out


# --------------------------------------------------------------------------
# Certificates


@dataclass(frozen=True, eq=False)
class AffineController:
    """``u(x) = K x + k0``, optionally clamped to ``clamp``."""

    K: np.ndarray
    k0: np.ndarray
    clamp: Box | None = None

    def __post_init__(self):
        object.__setattr__(self, "K", np.atleast_2d(np.asarray(self.K, dtype=float)))
        object.__setattr__(self, "k0", np.atleast_1d(np.asarray(self.k0, dtype=float)))

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = x @ self.K.T + self.k0
        if self.clamp is not None:
            u = np.clip(u, self.clamp.lower, self.clamp.upper)
        return u


@dataclass(frozen=True, eq=False)
class BarrierCertificate:
    poly: Polynomial
    eta: float
    beta: float
    kappa: float
    c: float
    controller: AffineController | None = None

    def __post_init__(self):
        if not self.beta > self.eta:
            raise ValueError(f"need beta > eta, got beta={self.beta}, eta={self.eta}")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError("kappa must lie in (0, 1]")
        if self.c < 0:
            raise ValueError("c must be nonnegative")

    def inputs(self, model: LinearDtScs, X) -> np.ndarray:
        if self.controller is None:
            return np.zeros((np.atleast_2d(X).shape[0], model.input_dim))
        return self.controller(X)

    def __call__(self, k: int, X) -> np.ndarray:
        """Feedback in the ``(time, states)`` form used by the simulator."""
        return self.controller(X)


def expected_barrier(poly: Polynomial, model: LinearDtScs, x, u) -> np.ndarray | float:
    """Exact ``E[B(f(x, u, w)) | x, u]``; batched over leading axes of ``x``/``u``."""
    if not isinstance(poly, Polynomial):
        raise UnsupportedModel("expected_barrier needs a Polynomial")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim <= 1 and (x.ndim == 0 or x.shape[0] == model.state_dim)
    X = np.atleast_2d(x.reshape(-1, model.state_dim))
    U = np.asarray(u, dtype=float).reshape(-1, model.input_dim)
    if U.shape[0] == 1 and X.shape[0] > 1:
        U = np.broadcast_to(U, (X.shape[0], model.input_dim))
    mean = model.mean(X, U)
    out = expected_polynomial(poly, mean, model.R)
    return float(out[0]) if scalar else out


@dataclass
class CbcReport:
    conditions: dict
    resolution: float
    continuum_certified: bool
    lipschitz: tuple | None = None
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c["holds"] for c in self.conditions.values())

    def to_text(self) -> str:
        lines = [f"resolution={self.resolution:.17g}",
                 f"scope={'continuum' if self.continuum_certified else 'grid-only'}"]
        for name, c in self.conditions.items():
            lines.append(f"{name}.holds={c['holds']}")
            lines.append(f"{name}.margin={c['margin']:.17g}")
            lines.append(f"{name}.worst_x={' '.join(f'{v:.17g}' for v in c['worst_x'])}")
            lines.append(f"{name}.points={c['points']}")
        lines.extend(f"note={n}" for n in self.notes)
        return "\n".join(lines)


def region_points(region, resolution: float) -> np.ndarray:
    """Tensor grid with spacing at most ``resolution`` covering every box (edges included)."""
    pts = []
    for b in as_region(region).boxes:
        axes = []
        for lo, hi in zip(b.lower, b.upper):
            n = max(2, int(math.ceil((hi - lo) / resolution - 1e-9)) + 1)
            axes.append(np.linspace(lo, hi, n))
        mesh = np.meshgrid(*axes, indexing="ij")
        pts.append(np.stack([m.reshape(-1) for m in mesh], axis=-1))
    return np.concatenate(pts) if pts else np.zeros((0, 1))


def _spacing(region, resolution: float) -> float:
    h = 0.0
    for b in as_region(region).boxes:
        for lo, hi in zip(b.lower, b.upper):
            n = max(2, int(math.ceil((hi - lo) / resolution - 1e-9)) + 1)
            h = max(h, (hi - lo) / (n - 1))
    return h


def _worst(values: np.ndarray, pts: np.ndarray, tighten: float) -> dict:
    """``values`` must be <= 0 everywhere; the margin is ``-max - tighten``."""
    i = int(np.argmax(values))  # first maximiser: deterministic
    margin = -float(values[i]) - tighten + 0.0  # + 0.0 turns -0.0 into 0.0
    return {"holds": margin >= 0, "margin": margin, "worst_x": pts[i].tolist(), "points": len(pts)}


def decrease_gap(cand: BarrierCertificate, model: LinearDtScs, X: np.ndarray) -> np.ndarray:
    """``E[B'] - max(kappa B, c)`` at each point, evaluated in chunks."""
    out = np.empty(X.shape[0])
    for s in range(0, X.shape[0], _CHUNK):
        x = X[s:s + _CHUNK]
        e = expected_barrier(cand.poly, model, x, cand.inputs(model, x))
        out[s:s + _CHUNK] = e - np.maximum(cand.kappa * cand.poly(x), cand.c)
    return out


def check_cbc(cand: BarrierCertificate, model: LinearDtScs, X0, Xu, X, resolution: float,
              lipschitz_margin=None) -> CbcReport:
    """Pointwise check of the three certificate conditions on grids of spacing ``resolution``.

    ``lipschitz_margin`` is an optional triple of Lipschitz constants (init,
    unsafe, decrease condition functions); each threshold is then tightened
    by ``L h / 2`` and a pass certifies the continuum, not just the grid.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    sets = {"init": X0, "unsafe": Xu, "decrease": X}
    pts = {k: region_points(v, resolution) for k, v in sets.items()}
    tight = {k: 0.0 for k in sets}
    if lipschitz_margin is not None:
        for k, L in zip(sets, lipschitz_margin):
            tight[k] = float(L) * _spacing(sets[k], resolution) / 2.0
    conds = {
        "init": _worst(cand.poly(pts["init"]) - cand.eta, pts["init"], tight["init"]),
        "unsafe": _worst(cand.beta - cand.poly(pts["unsafe"]), pts["unsafe"], tight["unsafe"]),
        "decrease": _worst(decrease_gap(cand, model, pts["decrease"]), pts["decrease"],
                           tight["decrease"]),
    }
    rep = CbcReport(conds, resolution, lipschitz_margin is not None,
                    None if lipschitz_margin is None else tuple(float(v) for v in lipschitz_margin))
    if cand.kappa == 1.0:
        rep.notes.append("kappa = 1: only the linear-in-horizon bound applies")
    return rep


# --------------------------------------------------------------------------
# Probability bounds


@dataclass(frozen=True)
class KushnerBound:
    value: float
    branch: str
    candidates: dict

    def __float__(self) -> float:
        return self.value


def kushner_bound(eta: float, beta: float, kappa: float, c: float, horizon) -> KushnerBound:
    """Upper bound on the probability of reaching the unsafe set within ``horizon`` steps.

    The minimum over every applicable formula is returned, clamped to
    ``[0, 1]``. ``horizon=math.inf`` (or None) requires ``c = 0``.
    """
    if not beta > eta >= 0:
        raise ValueError("need beta > eta >= 0")
    if not 0.0 < kappa <= 1.0:
        raise ValueError("kappa must lie in (0, 1]")
    if c < 0:
        raise ValueError("c must be nonnegative")
    infinite = horizon is None or horizon == math.inf
    if infinite and c > 0:
        raise UnsupportedModel("an infinite horizon needs c = 0")
    cands: dict = {}
    if c == 0:
        cands["ratio"] = eta / beta
    if not infinite:
        T = int(horizon)
        if T < 0:
            raise ValueError("horizon must be nonnegative")
        if kappa < 1.0:
            # c / (kappa - 1) <= 0 < beta for kappa < 1, so the second case never applies
            if beta >= c / (kappa - 1.0):
                # for c >= beta the bound is vacuous; clamping keeps the power meaningful
                cands["kushner1_first"] = 1.0 - (1.0 - eta / beta) * max(0.0, 1.0 - c / beta) ** T
            else:
                cands["kushner1_second"] = ((eta / beta) * kappa**T
                                            + c / ((1.0 - kappa) * beta) * (1.0 - kappa**T))
        cands["kushner2"] = (eta + c * T) / beta
    cands = {k: min(max(v, 0.0), 1.0) for k, v in cands.items()}
    branch = min(cands, key=lambda k: (cands[k], k))
    value = cands[branch]
    return KushnerBound(value, branch, cands)


# --------------------------------------------------------------------------
# Template search


@dataclass
class SearchResult:
    certificate: BarrierCertificate
    bound: KushnerBound
    center: np.ndarray
    degree: int
    evaluated: int


def search_vertex_cbc(model: LinearDtScs, X0, Xu, X, *, degree: int = 2, centers=None,
                      gains=None, offsets=None, kappas=None, horizon: int = 10,
                      resolution: float = 0.05, input_box: Box | None = None,
                      extra_controllers=(), verify_resolution: float | None = None
                      ) -> SearchResult | None:
    """Grid sweep over ``B(x) = sum_i (x_i - m_i)**degree`` and affine controllers.

    For every centre ``m`` and controller the tightest ``eta`` (max over
    ``X0``), ``beta`` (min over ``Xu``) and, per ``kappa``, the smallest
    admissible ``c`` are derived from the check grids; the candidate with the
    smallest Kushner bound wins. The template is scale invariant, so the
    scale is fixed to one. With ``gains`` but no ``offsets`` each controller
    is anchored so the centre is a closed-loop equilibrium. With
    ``verify_resolution`` the winner's constants are re-derived on that
    finer grid. Returns None when no candidate has ``beta > eta``.
    """
    if model.state_dim > 2:
        raise ValueError("template sweep is limited to 1-D or 2-D states")
    if degree % 2 or degree < 2 or degree > MAX_DEGREE:
        raise ValueError("degree must be an even number between 2 and 6")
    n = model.state_dim
    P0 = region_points(X0, resolution)
    Pu = region_points(Xu, resolution)
    PX = region_points(X, resolution)
    if centers is None:
        lo, hi = P0.min(axis=0), P0.max(axis=0)
        centers = np.stack(np.meshgrid(*[np.linspace(a, b, 21) for a, b in zip(lo, hi)],
                                       indexing="ij"), axis=-1).reshape(-1, n)
    centers = np.atleast_2d(np.asarray(centers, dtype=float)).reshape(-1, n)
    if kappas is None:
        kappas = np.concatenate([np.linspace(0.5, 0.99, 50), [0.995, 0.999, 1.0]])
    fixed = list(extra_controllers)
    if offsets is not None:
        gains = np.atleast_1d([0.0] if gains is None else gains)
        for g, o in itertools.product(gains, np.atleast_1d(offsets)):
            K = np.full((model.input_dim, n), float(g))
            fixed.append(AffineController(K, np.full(model.input_dim, float(o)), input_box))
    anchored = gains is not None and offsets is None

    best = None
    evaluated = 0
    for m in centers:
        controllers = list(fixed)
        if anchored:
            # offsets chosen so the centre is an equilibrium of the closed loop
            u_eq = equilibrium_input(model, m)
            for g in np.atleast_1d(gains):
                K = np.full((model.input_dim, n), float(g))
                controllers.append(AffineController(K, u_eq - K @ m, input_box))
        if not controllers:
            controllers.append(AffineController(np.zeros((model.input_dim, n)),
                                                np.zeros(model.input_dim), input_box))
        poly = Polynomial.vertex(m, degree)
        eta = float(poly(P0).max())
        beta = float(poly(Pu).min()) if len(Pu) else math.inf
        if not beta > eta:
            continue
        BX = poly(PX)
        for ctrl in controllers:
            EB = expected_polynomial(poly, model.mean(PX, ctrl(PX)), model.R)
            for kappa in kappas:
                evaluated += 1
                viol = EB > kappa * BX
                c = float(EB[viol].max()) if viol.any() else 0.0
                if not math.isfinite(beta):
                    continue
                bound = kushner_bound(eta, beta, float(kappa), c, horizon)
                key = (bound.value, float(kappa))
                if best is None or key < best[0]:
                    cert = BarrierCertificate(poly, eta, beta, float(kappa), c, ctrl)
                    best = (key, cert, bound, m)
    if best is None:
        return None
    _, cert, bound, m = best
    if verify_resolution is not None:
        cert = tighten_certificate(cert, model, X0, Xu, X, verify_resolution)
        bound = kushner_bound(cert.eta, cert.beta, cert.kappa, cert.c, horizon)
    return SearchResult(cert, bound, np.array(m), degree, evaluated)


def tighten_certificate(cert: BarrierCertificate, model: LinearDtScs, X0, Xu, X,
                        resolution: float) -> BarrierCertificate:
    """Re-derive the tightest ``eta``, ``beta`` and ``c`` for ``cert`` on grids of ``resolution``."""
    P0 = region_points(X0, resolution)
    Pu = region_points(Xu, resolution)
    PX = region_points(X, resolution)
    eta = float(cert.poly(P0).max())
    beta = float(cert.poly(Pu).min())
    c = 0.0
    for s in range(0, PX.shape[0], _CHUNK):
        x = PX[s:s + _CHUNK]
        e = expected_barrier(cert.poly, model, x, cert.inputs(model, x))
        viol = e > cert.kappa * cert.poly(x)
        if viol.any():
            c = max(c, float(e[viol].max()))
    return BarrierCertificate(cert.poly, eta, beta, cert.kappa, c, cert.controller)


def equilibrium_input(model: LinearDtScs, x) -> np.ndarray:
    """Least-squares input making ``x`` a fixed point of the noise-free dynamics."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    base = model.mean(x[None, :], np.zeros((1, model.input_dim)))[0]
    cols = []
    for j in range(model.input_dim):
        e = np.zeros((1, model.input_dim))
        e[0, j] = 1.0
        cols.append(model.mean(x[None, :], e)[0] - base)
    G = np.stack(cols, axis=1)
    return np.linalg.lstsq(G, x - base, rcond=None)[0]


def search_quadratic_cbc(model: LinearDtScs, X0, Xu, X, **kwargs) -> SearchResult | None:
    return search_vertex_cbc(model, X0, Xu, X, degree=2, **kwargs)


def quadratic_noise_floor(model: LinearDtScs, X0, Xu, horizon: int) -> float:
    """Lower bound on the Kushner bound reachable by any single-vertex quadratic.

    At the vertex ``E[B'] >= s sigma^2`` while ``B = 0``, so ``c >= s sigma^2``;
    ``beta <= s D^2`` with ``D`` the largest distance from ``X0`` to the nearest
    unsafe point along a coordinate. Hence ``delta >= 1 - (1 - sigma^2/D^2)^T``.
    """
    if model.state_dim != 1:
        raise ValueError("only implemented for scalar states")
    sigma = float(model.R[0])
    x0 = as_region(X0)
    xu = as_region(Xu)
    lo = min(b.lower[0] for b in x0.boxes)
    hi = max(b.upper[0] for b in x0.boxes)
    gaps = []
    for b in xu.boxes:
        if b.upper[0] <= lo:
            gaps.append(("below", b.upper[0]))
        elif b.lower[0] >= hi:
            gaps.append(("above", b.lower[0]))
    below = max((v for s, v in gaps if s == "below"), default=-math.inf)
    above = min((v for s, v in gaps if s == "above"), default=math.inf)
    D = (above - below) / 2.0
    if not math.isfinite(D):
        return 0.0
    return 1.0 - (1.0 - min(1.0, sigma**2 / D**2)) ** horizon


def published_room_certificate(saturate: bool = True) -> BarrierCertificate:
    """The published quadratic certificate and controller for the heated room."""
    poly = Polynomial.univariate([331.57433, -33.78116, 0.86043])
    clamp = Box([0.0], [0.6]) if saturate else None
    ctrl = AffineController([[-0.0120155]], [0.9], clamp)
    return BarrierCertificate(poly, 0.13, 4.4, 0.99, 0.0099, ctrl)
