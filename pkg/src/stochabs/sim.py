"""Monte Carlo simulation with keyed counter-based noise, exact binomial intervals
and empirical checks of the formal bounds.

Every trajectory ``t`` of a run with seed ``s`` draws its noise from a Philox
stream keyed by ``(s, t)``: first ``horizon * n`` standard normals in
(step, dimension) order, then (if needed) ``n`` uniforms for the initial
state. Results therefore do not depend on batch sizes or thread counts.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import beta as beta_dist

from .barrier import BarrierCertificate, kushner_bound
from .bounds import QuadraticSsf, SsfParams, interface, lambda2
from .grid import Grid
from .model import Box, LinearDtScs, Region, as_region
from .spec import HorizonSpec
from .synthesis import ConcreteController, ValueFunction

_MASK64 = (1 << 64) - 1
_ABSTRACT_STREAM = 1 << 63  # trajectory-key offset for independent abstract noise


class InsufficientSamples(ValueError):
    def __init__(self, required: int, given: int):
        self.required = required
        self.given = given
        super().__init__(f"{given} trajectories are too few for the requested resolution; "
                         f"need about {required}")


def trajectory_generator(seed: int, traj: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed) & _MASK64, int(traj) & _MASK64]))


def noise_block(seed: int, trajs, horizon: int, dim: int, offset: int = 0):
    """Noise ``(len(trajs), horizon, dim)`` and initial uniforms ``(len(trajs), dim)``."""
    W = np.empty((len(trajs), horizon, dim))
    U0 = np.empty((len(trajs), dim))
    for i, t in enumerate(trajs):
        g = trajectory_generator(seed, offset + int(t))
        W[i] = g.standard_normal((horizon, dim))
        U0[i] = g.random(dim)
    return W, U0


@dataclass(eq=False)
class TrajectoryBatch:
    states: np.ndarray  # (n_traj, horizon + 1, n)
    seed: int
    controller: str
    inputs: np.ndarray | None = None
    out_of_domain: int = 0

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1] - 1

    def outputs(self, C=None) -> np.ndarray:
        return self.states if C is None else self.states @ np.asarray(C, dtype=float).T

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.states.shape[2]
        w.writerow(["traj", "k"] + [f"x{i}" for i in range(n)])
        for t in range(self.n_traj):
            for k in range(self.horizon + 1):
                w.writerow([t, k] + [f"{v:.17g}" for v in self.states[t, k]])
        return buf.getvalue()


@dataclass(frozen=True)
class EstimateCI:
    p_hat: float
    lower: float
    upper: float
    n: int
    successes: int
    confidence: float

    @property
    def std(self) -> float:
        return math.sqrt(max(self.p_hat * (1 - self.p_hat), 0.0) / self.n)


def clopper_pearson(successes: int, n: int, confidence: float = 0.99) -> EstimateCI:
    if n < 1:
        raise ValueError("need at least one trial")
    a = 1.0 - confidence
    lo = 0.0 if successes == 0 else float(beta_dist.ppf(a / 2, successes, n - successes + 1))
    hi = 1.0 if successes == n else float(beta_dist.ppf(1 - a / 2, successes + 1, n - successes))
    return EstimateCI(successes / n, lo, hi, n, successes, confidence)


def _initial_states(x0, U0: np.ndarray, trajs, dim: int) -> np.ndarray:
    if isinstance(x0, (Box, Region)):
        region = as_region(x0)
        vols = np.array([max(b.volume, 1e-300) for b in region.boxes])
        cum = np.cumsum(vols / vols.sum())
        # the first uniform picks the box (only when there are several)
        X = np.empty((len(trajs), dim))
        for i in range(len(trajs)):
            if len(region.boxes) > 1:
                j = int(np.searchsorted(cum, U0[i, 0] * cum[-1], side="right"))
                j = min(j, len(region.boxes) - 1)
            else:
                j = 0
            b = region.boxes[j]
            X[i] = b.lower + U0[i] * (b.upper - b.lower)
        return X
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 2 and x0.shape[0] > 1:
        return x0[np.asarray(trajs)]
    return np.broadcast_to(x0.reshape(-1), (len(trajs), dim)).copy()


def _describe(controller) -> str:
    if isinstance(controller, ConcreteController):
        return "refined-policy"
    if isinstance(controller, BarrierCertificate):
        return "barrier-controller"
    if callable(controller):
        return getattr(controller, "__name__", type(controller).__name__)
    return "constant:" + " ".join(f"{v:.17g}" for v in np.atleast_1d(controller))


def _run_chunk(model, controller, x0, horizon, seed, trajs):
    n = model.state_dim
    W, U0 = noise_block(seed, trajs, horizon, n)
    X = np.empty((len(trajs), horizon + 1, n))
    X[:, 0] = _initial_states(x0, U0, trajs, n)
    locs = None
    out = 0
    if isinstance(controller, ConcreteController):
        locs = controller.initial_locations(X[:, 0])
    const = None
    if not callable(controller):
        const = np.broadcast_to(np.asarray(controller, dtype=float).reshape(-1),
                                (len(trajs), model.input_dim))
    for k in range(horizon):
        x = X[:, k]
        if const is not None:
            U = const
        elif locs is not None:
            out += int(np.count_nonzero(controller.grid.index(x) == controller.grid.n_cells))
            U = controller(k, x, locs)
        else:
            U = np.asarray(controller(k, x), dtype=float).reshape(len(trajs), model.input_dim)
        X[:, k + 1] = model.mean(x, U) + model.R * W[:, k]
        if locs is not None:
            locs = controller.advance(locs, X[:, k + 1])
    return X, out


def simulate(model: LinearDtScs, controller, x0, horizon: int, n_traj: int, seed: int,
             threads: int = 1, chunk: int = 2048) -> TrajectoryBatch:
    """Simulate ``n_traj`` closed-loop trajectories.

    ``controller`` is a constant input, a ConcreteController, a
    BarrierCertificate, or any callable ``(k, X) -> U`` on batches. ``x0`` is
    a point, a Box/Region (uniform initial states) or an ``(n_traj, n)`` array.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    chunks = [list(range(s, min(s + chunk, n_traj))) for s in range(0, n_traj, chunk)]
    if threads > 1 and len(chunks) > 1 and not isinstance(controller, ConcreteController):
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _run_chunk(model, controller, x0, horizon, seed, c), chunks))
    else:
        parts = [_run_chunk(model, controller, x0, horizon, seed, c) for c in chunks]
    states = np.concatenate([p[0] for p in parts])
    return TrajectoryBatch(states, int(seed), _describe(controller),
                           out_of_domain=sum(p[1] for p in parts))


def empirical_probability(batch: TrajectoryBatch, spec: HorizonSpec, C=None,
                          confidence: float = 0.99) -> EstimateCI:
    ok = spec.holds_on(batch.outputs(C))
    return clopper_pearson(int(np.count_nonzero(ok)), batch.n_traj, confidence)


def required_samples(p: float, resolution: float) -> int:
    """Trajectories needed for a 3-sigma half-width of ``resolution`` at probability ``p``."""
    p = min(max(p, 1e-6), 0.5) if p <= 0.5 else max(1 - p, 1e-6)
    return int(math.ceil(9.0 * p * (1.0 - p) / resolution**2))


@dataclass
class ValidationReport:
    kind: str
    passed: bool
    empirical: EstimateCI
    bound: float
    slack: float
    details: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"kind={self.kind}", f"passed={self.passed}",
                 f"empirical={self.empirical.p_hat:.17g}",
                 f"ci_lower={self.empirical.lower:.17g}", f"ci_upper={self.empirical.upper:.17g}",
                 f"n={self.empirical.n}", f"bound={self.bound:.17g}", f"slack={self.slack:.17g}"]
        lines += [f"{k}={v:.17g}" if isinstance(v, float) else f"{k}={v}"
                  for k, v in self.details.items()]
        return "\n".join(lines)


def _check_n(n: int, p: float, resolution: float | None):
    if resolution is not None:
        need = required_samples(p, resolution)
        if n < need:
            raise InsufficientSamples(need, n)


def _binomial_slack(p: float, n: int) -> float:
    return 3.0 * math.sqrt(max(p * (1 - p), 0.0) / n)


def validate_kushner(model: LinearDtScs, cert: BarrierCertificate, X0, Xu, horizon: int,
                     n_traj: int, seed: int, resolution: float | None = None,
                     threads: int = 1) -> ValidationReport:
    """Unsafe-hit frequency within ``horizon`` steps from uniform ``X0`` versus the Kushner bound."""
    bound = kushner_bound(cert.eta, cert.beta, cert.kappa, cert.c, horizon)
    _check_n(n_traj, bound.value, resolution)
    batch = simulate(model, cert, as_region(X0), horizon, n_traj, seed, threads)
    hit = np.any(as_region(Xu).contains(batch.states), axis=1)
    est = clopper_pearson(int(np.count_nonzero(hit)), n_traj)
    slack = _binomial_slack(bound.value, n_traj)
    return ValidationReport("kushner", est.p_hat <= bound.value + slack, est, bound.value, slack,
                            {"branch": bound.branch})


def validate_pro4(model: LinearDtScs, vf: ValueFunction, controller: ConcreteController, x0,
                  n_traj: int, seed: int, C=None, resolution: float | None = None
                  ) -> ValidationReport:
    """Concrete closed-loop satisfaction from ``x0`` versus the abstract value of its cell."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    idx = int(controller.grid.index(x0[None, :])[0])
    abstract_value = float(vf.initial()[idx])
    _check_n(n_traj, abstract_value, resolution)
    batch = simulate(model, controller, x0, vf.horizon, n_traj, seed)
    est = empirical_probability(batch, vf.spec, C)
    slack = _binomial_slack(abstract_value, n_traj)
    return ValidationReport("pro4", est.p_hat >= abstract_value - slack, est, abstract_value, slack,
                            {"state_index": idx, "out_of_domain": batch.out_of_domain})


def coupled_grid_run(model: LinearDtScs, grid: Grid, policy, x0, horizon: int, n_traj: int,
                     seed: int):
    """Concrete and quantised abstract trajectories driven by the same noise and input.

    The abstract state is the centre of the lattice cell (the grid's lattice
    extended over the whole space) containing the concrete successor of the
    abstract state. ``policy(k, X_hat)`` gives the abstract input.
    """
    n = model.state_dim
    trajs = range(n_traj)
    W, U0 = noise_block(seed, trajs, horizon, n)
    X = np.empty((n_traj, horizon + 1, n))
    Xh = np.empty_like(X)
    X[:, 0] = _initial_states(x0, U0, list(trajs), n)
    Xh[:, 0] = grid.lattice_representative(X[:, 0])
    for k in range(horizon):
        U = policy(k, Xh[:, k]) if callable(policy) else np.broadcast_to(
            np.asarray(policy, dtype=float).reshape(-1), (n_traj, model.input_dim))
        U = np.asarray(U, dtype=float).reshape(n_traj, model.input_dim)
        X[:, k + 1] = model.mean(X[:, k], U) + model.R * W[:, k]
        Xh[:, k + 1] = grid.lattice_representative(model.mean(Xh[:, k], U) + model.R * W[:, k])
    return X, Xh


def coupled_reduced_run(model: LinearDtScs, abstract: LinearDtScs, cand: QuadraticSsf, x0, x0_hat,
                        u_hat, horizon: int, n_traj: int, seed: int, shared_noise: bool = False):
    """Concrete and reduced-order trajectories under the interface of ``cand``."""
    n, nh = model.state_dim, abstract.state_dim
    trajs = list(range(n_traj))
    W, _ = noise_block(seed, trajs, horizon, n)
    if shared_noise and nh == n:
        Wh = W
    else:
        Wh, _ = noise_block(seed, trajs, horizon, nh, offset=_ABSTRACT_STREAM)
    X = np.empty((n_traj, horizon + 1, n))
    Xh = np.empty((n_traj, horizon + 1, nh))
    X[:, 0] = np.asarray(x0, dtype=float)
    Xh[:, 0] = np.asarray(x0_hat, dtype=float)
    for k in range(horizon):
        Uh = np.broadcast_to(np.asarray(u_hat(k, Xh[:, k]) if callable(u_hat) else u_hat,
                                        dtype=float).reshape(-1, abstract.input_dim),
                             (n_traj, abstract.input_dim))
        U = interface(X[:, k], Xh[:, k], Uh, cand)
        X[:, k + 1] = model.mean(X[:, k], U) + model.R * W[:, k]
        Xh[:, k + 1] = abstract.mean(Xh[:, k], Uh) + abstract.R * Wh[:, k]
    return X, Xh


def validate_pro2(X: np.ndarray, Xh: np.ndarray, C, C_hat, ssf: SsfParams, V0: float,
                  u_sup: float, epsilon: float, resolution: float | None = None
                  ) -> ValidationReport:
    """Frequency of ``sup_k |y - y_hat|_inf >= epsilon`` versus the simulation-function bound."""
    horizon = X.shape[1] - 1
    bound = lambda2(ssf, V0, u_sup, epsilon, horizon)
    _check_n(X.shape[0], bound.value, resolution)
    Y = X @ np.asarray(C, dtype=float).T
    Yh = Xh @ np.asarray(C_hat, dtype=float).T
    gap = np.max(np.abs(Y - Yh), axis=(1, 2))
    est = clopper_pearson(int(np.count_nonzero(gap >= epsilon)), X.shape[0])
    slack = _binomial_slack(bound.value, X.shape[0])
    return ValidationReport("pro2-coupled", est.p_hat <= bound.value + slack, est, bound.value,
                            slack, {"branch": bound.constants["branch"],
                                    "max_gap": float(gap.max())})


def validate_bound(kind: str, **artifacts) -> ValidationReport:
    """Dispatch to ``validate_kushner``, ``validate_pro4`` or ``validate_pro2``."""
    table = {"kushner": validate_kushner, "pro4": validate_pro4, "pro2-coupled": validate_pro2}
    if kind not in table:
        raise ValueError(f"unknown bound kind {kind!r}; expected one of {sorted(table)}")
    return table[kind](**artifacts)
