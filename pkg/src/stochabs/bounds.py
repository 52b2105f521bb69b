"""Closeness guarantees between a concrete system and its abstraction.

Conventions used throughout:

* ``SsfParams.kappa`` is the contraction factor of a simulation function
  ``V``: ``E[V+] <= kappa V + rho_ext(|u_hat|) + psi``.
* ``alpha(s) = k_alpha * s**p_alpha`` lower-bounds ``V`` by the output gap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid
from .model import LinearDtScs, UnsupportedModel

SQRT_2PI = math.sqrt(2.0 * math.pi)
PSD_PIVOT_TOL = 1e-10


@dataclass(frozen=True)
class LipschitzData:
    H: float
    H_bar: float
    L_b: float | None = None

    def __post_init__(self):
        for name in ("H", "H_bar"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.L_b is not None and self.L_b < 0:
            raise ValueError("L_b must be nonnegative")


@dataclass(frozen=True)
class SsfParams:
    k_alpha: float
    p_alpha: float
    kappa: float
    psi: float = 0.0
    k_rho: float = 0.0
    p_rho: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.kappa < 1.0:
            raise ValueError(f"kappa must lie in (0, 1), got {self.kappa}")
        if self.k_alpha <= 0 or self.p_alpha <= 0:
            raise ValueError("alpha must be a positive power form")
        if self.psi < 0 or self.k_rho < 0:
            raise ValueError("psi and rho_ext must be nonnegative")

    def alpha(self, s: float) -> float:
        return self.k_alpha * s ** self.p_alpha

    def alpha_inv(self, v: float) -> float:
        return (v / self.k_alpha) ** (1.0 / self.p_alpha)

    def rho_ext(self, s: float) -> float:
        return self.k_rho * s ** self.p_rho if self.k_rho else 0.0


@dataclass(frozen=True)
class ClosenessReport:
    kind: str
    value: float
    constants: dict = field(default_factory=dict)
    epsilon: float | None = None
    horizon: int | None = None

    def as_dict(self) -> dict:
        out = {"kind": self.kind, "value": self.value}
        if self.epsilon is not None:
            out["epsilon"] = self.epsilon
        if self.horizon is not None:
            out["horizon"] = self.horizon
        out.update(self.constants)
        return out

    def to_text(self) -> str:
        return "\n".join(f"{k}={_fmt(v)}" for k, v in self.as_dict().items())

    def csv_header(self) -> str:
        return ",".join(self.as_dict())

    def csv_row(self) -> str:
        return ",".join(_fmt(v) for v in self.as_dict().values())


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


# --------------------------------------------------------------------------
# Lipschitz-kernel bounds


def lipschitz_constants(model: LinearDtScs, u=None) -> LipschitzData:
    """Kernel Lipschitz constants of a linear Gaussian model.

    ``H`` sums ``2|a_ij| / (sigma_i sqrt(2 pi))`` over the effective state
    matrix at input ``u``; ``H_bar`` adds the same sum over ``B``.
    """
    if np.any(model.R == 0):
        raise UnsupportedModel("kernel Lipschitz constants diverge for zero noise")
    if model.bilinear and u is None:
        raise ValueError("model has an input-dependent state matrix; pass the input u")
    A = model.effective_A(u) if u is not None else model.A
    scale = 2.0 / (model.R[:, None] * SQRT_2PI)
    H = float(np.sum(scale * np.abs(A)))
    H_bar = H + float(np.sum(scale * np.abs(model.B)))
    return LipschitzData(H, H_bar)


def lambda1(H: float, delta: float, horizon: int, L_b: float = 1.0,
            kind: str = "lambda1") -> ClosenessReport:
    """``horizon * delta * H * L_b``; pass ``H_bar`` with kind ``lambda1_bar``
    or ``two_lambda1_bar`` for the optimal-policy variants."""
    if min(H, delta, horizon, L_b) < 0:
        raise ValueError("lambda1 inputs must be nonnegative")
    value = horizon * delta * H * L_b
    if kind == "two_lambda1_bar":
        value *= 2.0
    elif kind not in ("lambda1", "lambda1_bar"):
        raise ValueError(f"unknown lambda1 kind {kind!r}")
    key = "H" if kind == "lambda1" else "H_bar"
    return ClosenessReport(kind, value, {key: H, "delta": delta, "L_b": L_b}, horizon=horizon)


def lambda2(ssf: SsfParams, V0: float, u_sup: float, epsilon: float, horizon: int) -> ClosenessReport:
    """Bound on ``P(sup_k |y(k) - y_hat(k)| >= epsilon)`` over ``horizon`` steps."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    a = ssf.alpha(epsilon)
    if a <= 0:
        raise ValueError("alpha(epsilon) must be positive")
    psi_hat = ssf.rho_ext(u_sup) + ssf.psi
    k = ssf.kappa
    T = horizon
    if a >= psi_hat / (1.0 - k):
        branch = "geometric"
        value = 1.0 - (1.0 - V0 / a) * (1.0 - psi_hat / a) ** T
    else:
        branch = "contraction"
        value = (V0 / a) * k**T + (psi_hat / ((1.0 - k) * a)) * (1.0 - k**T)
    value = min(max(value, 0.0), 1.0)
    consts = {"branch": branch, "alpha_eps": a, "psi_hat": psi_hat, "kappa": k, "V0": V0}
    return ClosenessReport("lambda2", value, consts, epsilon=epsilon, horizon=T)


# --------------------------------------------------------------------------
# Quadratic simulation functions for linear systems


@dataclass(frozen=True, eq=False)
class QuadraticSsf:
    """Data of ``V(x, x_hat) = (x - P x_hat)' M (x - P x_hat)`` and its interface.

    The interface is ``u = K (x - P x_hat) + Q x_hat + R_lift u_hat``.
    ``R_lift`` defaults to the identity when input dimensions agree.
    """

    M: np.ndarray
    P: np.ndarray
    K: np.ndarray
    Q: np.ndarray
    pi: float
    kappa_hat: float
    R_lift: np.ndarray | None = None

    def __post_init__(self):
        for name in ("M", "P", "K", "Q"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        if self.R_lift is not None:
            object.__setattr__(self, "R_lift", np.atleast_2d(np.asarray(self.R_lift, dtype=float)))
        if self.pi <= 0:
            raise ValueError("pi must be positive")
        if not 0 < self.kappa_hat < 1:
            raise ValueError("kappa_hat must lie in (0, 1)")

    def value(self, x, x_hat) -> np.ndarray:
        e = np.asarray(x, dtype=float) - np.asarray(x_hat, dtype=float) @ self.P.T
        return np.einsum("...i,ij,...j->...", e, self.M, e)


def psd_margin(X: np.ndarray) -> tuple[bool, float]:
    """Decide ``X >= 0`` by a Cholesky attempt with a relative pivot tolerance.

    Returns the decision and the smallest eigenvalue as the margin.
    """
    X = 0.5 * (X + X.T)
    margin = float(np.linalg.eigvalsh(X)[0])
    shift = PSD_PIVOT_TOL * (1.0 + np.linalg.norm(X, 2))
    try:
        np.linalg.cholesky(X + shift * np.eye(X.shape[0]))
        holds = True
    except np.linalg.LinAlgError:
        holds = False
    return holds, margin


def _matrix_tol(*ops) -> float:
    return 1e-9 * (1.0 + sum(float(np.linalg.norm(o)) for o in ops))


@dataclass
class SsfVerification:
    checks: dict
    ssf: SsfParams | None
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c["holds"] for c in self.checks.values())

    def to_text(self) -> str:
        lines = []
        for name, c in self.checks.items():
            lines.append(f"{name}.holds={c['holds']}")
            lines.append(f"{name}.margin={c['margin']:.17g}")
        if self.ssf is not None:
            for k, v in self.ssf.__dict__.items():
                lines.append(f"ssf.{k}={v:.17g}")
        return "\n".join(lines)


def verify_quadratic_ssf(model: LinearDtScs, abstract: LinearDtScs, cand: QuadraticSsf,
                         shared_noise: bool = False) -> SsfVerification:
    """Check the matrix conditions that make ``cand`` a quadratic simulation function.

    The four conditions are ``C'C <= M``, the contraction inequality with
    ``(1+pi)``, ``A P = P A_hat - B Q`` and ``C P = C_hat``. Affine offsets
    must also match (``c0 = P c0_hat``). On success the derived parameters are
    ``kappa = 1 - kappa_hat``, ``alpha(s) = k s^2`` with ``k`` the smallest
    ratio ``e'Me / e'C'Ce``, ``rho_ext(s) = (1 + 1/pi) |M^(1/2)(B R_lift - P B_hat)|^2 s^2``
    and ``psi`` the noise trace.
    """
    if model.bilinear or abstract.bilinear:
        raise UnsupportedModel("quadratic simulation functions need input-independent A")
    M, P, K, Q = cand.M, cand.P, cand.K, cand.Q
    n, nh = model.state_dim, abstract.state_dim
    m = model.input_dim
    if M.shape != (n, n) or P.shape != (n, nh) or K.shape != (m, n) or Q.shape != (m, nh):
        raise ValueError("candidate matrices have inconsistent dimensions")
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * (1 + np.abs(M).max())):
        raise ValueError("M must be symmetric")
    if np.linalg.eigvalsh(M)[0] <= 0:
        raise ValueError("M must be positive definite")
    A, B, C = model.A, model.B, model.C
    Ah, Ch = abstract.A, abstract.C

    checks = {}
    holds, margin = psd_margin(M - C.T @ C)
    checks["output_bound"] = {"holds": holds, "margin": margin}

    Acl = A + B @ K
    X = -cand.kappa_hat * M - ((1 + cand.pi) * Acl.T @ M @ Acl - M)
    holds, margin = psd_margin(X)
    checks["contraction"] = {"holds": holds, "margin": margin}

    res = A @ P - P @ Ah + B @ Q
    tol = _matrix_tol(A @ P, P @ Ah, B @ Q)
    r = float(np.linalg.norm(res))
    checks["state_intertwining"] = {"holds": r <= tol, "margin": tol - r, "residual": r}

    res = C @ P - Ch
    tol = _matrix_tol(C @ P, Ch)
    r = float(np.linalg.norm(res))
    checks["output_intertwining"] = {"holds": r <= tol, "margin": tol - r, "residual": r}

    res = model.c0 - P @ abstract.c0
    tol = _matrix_tol(model.c0, P @ abstract.c0)
    r = float(np.linalg.norm(res))
    checks["offset"] = {"holds": r <= tol, "margin": tol - r, "residual": r}

    result = SsfVerification(checks, None)
    if not result.passed:
        return result

    # alpha: smallest e'Me / e'C'Ce over e with Ce != 0
    L = np.linalg.cholesky(M)
    Linv = np.linalg.inv(L)
    top = float(np.linalg.eigvalsh(Linv @ C.T @ C @ Linv.T)[-1])
    k_alpha = 1.0 / top if top > 0 else 1.0
    R_lift = cand.R_lift
    if R_lift is None:
        R_lift = np.eye(m, abstract.input_dim) if m == abstract.input_dim else np.zeros((m, abstract.input_dim))
    D = B @ R_lift - P @ abstract.B
    k_rho = (1 + 1 / cand.pi) * float(np.linalg.norm(L.T @ D, 2) ** 2)
    Rm = np.diag(model.R)
    Rh = np.diag(abstract.R)
    if shared_noise and n == nh:
        G = Rm - P @ Rh
        psi = float(np.trace(G.T @ M @ G))
    else:
        psi = float(np.trace(Rm.T @ M @ Rm) + np.trace(Rh.T @ P.T @ M @ P @ Rh))
    result.ssf = SsfParams(k_alpha=k_alpha, p_alpha=2.0, kappa=1.0 - cand.kappa_hat,
                           psi=psi, k_rho=k_rho, p_rho=2.0)
    if shared_noise and n != nh:
        result.notes.append("shared noise needs equal state dimensions; used independent-noise trace")
    return result


def grid_ssf_params(model: LinearDtScs, grid: Grid, inputs, pi: float = 1.0) -> SsfParams:
    """Simulation function ``|x - x_hat|_2^2`` between a model and its grid abstraction.

    Both systems share noise and input (identity interface); the abstract
    successor is the quantised concrete successor, so ``e+ = A(u) e + q`` with
    ``|q|_inf <= delta``. Young's inequality gives ``kappa = (1+pi) max_u |A(u)|_2^2``
    and ``psi = (1 + 1/pi) n delta^2``. ``alpha(s) = s^2 / |C|_2^2``.
    """
    u_pts = np.atleast_2d(np.asarray(inputs, dtype=float))
    if u_pts.shape[1] != model.input_dim:
        u_pts = u_pts.reshape(-1, model.input_dim)
    worst = max(float(np.linalg.norm(model.effective_A(u), 2)) ** 2 for u in u_pts)
    if model.bilinear:
        # the gain is affine in u, so its extreme lies at a vertex of the input hull
        lo, hi = u_pts.min(axis=0), u_pts.max(axis=0)
        corners = np.array(np.meshgrid(*zip(lo, hi), indexing="ij")).reshape(model.input_dim, -1).T
        worst = max([worst] + [float(np.linalg.norm(model.effective_A(u), 2)) ** 2 for u in corners])
    kappa = (1.0 + pi) * worst
    if not kappa < 1.0:
        raise ValueError(f"(1+pi)|A|^2 = {kappa:.4g} >= 1; choose a smaller pi or the model is not contractive")
    psi = (1.0 + 1.0 / pi) * model.state_dim * grid.delta**2
    cnorm = float(np.linalg.norm(model.C, 2))
    return SsfParams(k_alpha=1.0 / cnorm**2, p_alpha=2.0, kappa=kappa, psi=psi)


def check_delta_iss_quadratic(model: LinearDtScs, M) -> tuple[bool, float]:
    """Largest ``kappa_bar`` with ``A'MA <= (1 - kappa_bar) M``; holds iff positive."""
    if model.bilinear:
        raise UnsupportedModel("state matrix depends on the input; the increment is input-coupled")
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if not np.allclose(M, M.T) or np.linalg.eigvalsh(M)[0] <= 0:
        raise ValueError("M must be symmetric positive definite")
    L = np.linalg.cholesky(M)
    Linv = np.linalg.inv(L)
    A = model.A
    # generalised eigenvalues of (A'MA, M)
    top = float(np.linalg.eigvalsh(Linv @ A.T @ M @ A @ Linv.T)[-1])
    kbar = min(1.0, 1.0 - top)
    return kbar > 0, kbar


def interface(x, x_hat, u_hat, cand: QuadraticSsf | None = None) -> np.ndarray:
    """Concrete input for the abstract input ``u_hat``.

    With ``cand=None`` this is the identity interface used for grid
    abstractions of equal dimension.
    """
    u_hat = np.asarray(u_hat, dtype=float)
    if cand is None:
        return u_hat
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    R_lift = cand.R_lift
    if R_lift is None:
        if cand.K.shape[0] != u_hat.shape[-1]:
            raise ValueError("input dimensions differ; give R_lift")
        lift = u_hat
    else:
        lift = u_hat @ R_lift.T
    e = x - x_hat @ cand.P.T
    return e @ cand.K.T + x_hat @ cand.Q.T + lift
