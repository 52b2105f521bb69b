"""Run configuration: TOML loading, ``--set`` overrides and schema validation.

Every block is validated (and converted into library objects) before any
computation starts, so a malformed file never produces artifacts.
"""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field

import numpy as np

from .abstraction import TruncationPolicy
from .barrier import AffineController, BarrierCertificate, Polynomial
from .bounds import QuadraticSsf, SsfParams
from .grid import Grid, build_grid
from .model import Box, InputDependentGain, LinearDtScs, Region, UnsupportedModel
from .network import GainData, Subsystem, ring_of_rooms, two_rooms
from .spec import Dfa, HorizonSpec, LabelMap

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (exit status 2)."""

    def __init__(self, message: str, code: str = "E_CONFIG"):
        self.code = code
        super().__init__(message)


BLOCKS = {
    "model": {"A", "B", "c0", "C", "R", "N", "gain"},
    "grid": {"lower", "upper", "cells", "inputs", "truncation", "memory_cap_gb"},
    "spec": {"kind", "horizon", "safe", "target", "dfa", "labels", "default_label"},
    "bounds": {"lambda1", "lambda2", "reduced"},
    "barrier": {"coeffs", "eta", "beta", "kappa", "c", "K", "k0", "clamp", "X0", "Xu", "X",
                "resolution", "horizon", "lipschitz", "search"},
    "network": {"topology", "rooms", "sigma", "theta", "gamma", "T_e", "T_h", "R", "gains",
                "delta", "epsilon", "horizon", "V0", "composition", "weights", "abstract",
                "cells", "internal_points", "u_points", "pi", "gain_matrix", "psi", "kappa",
                "k_alpha", "subsystems", "coupling"},
    "sim": {"seed", "n_traj", "horizon", "x0", "controller", "u", "dump", "confidence"},
    "validate": {"kind", "n_traj", "seed", "resolution", "epsilon", "u", "x0", "horizon", "pi"},
    "output": {"dir"},
}

REQUIRED = {
    "abstract": ("model", "grid"),
    "synthesize": ("model", "grid", "spec"),
    "bounds": ("bounds",),
    "verify-barrier": ("model", "barrier"),
    "compose": ("network",),
    "simulate": ("model", "sim"),
    "validate": ("model", "validate"),
    "reproduce-paper": (),
}


def load_text(text: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc


def apply_overrides(cfg: dict, assignments) -> dict:
    """``key.path=value`` overrides; values are parsed as TOML, falling back to strings."""
    cfg = copy.deepcopy(cfg)
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}", "E_USAGE")
        key, raw = item.split("=", 1)
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        node = cfg
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p!r} is not a table", "E_USAGE")
        node[parts[-1]] = value
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def check_blocks(cfg: dict, subcommand: str) -> None:
    for name, block in cfg.items():
        if name not in BLOCKS:
            raise ConfigError(f"unknown config block [{name}]")
        if not isinstance(block, dict):
            raise ConfigError(f"[{name}] must be a table")
        extra = set(block) - BLOCKS[name]
        if extra:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
    for name in REQUIRED[subcommand]:
        if name not in cfg:
            raise ConfigError(f"subcommand {subcommand!r} needs a [{name}] block")


# --------------------------------------------------------------------------
# Field converters


def _need(block: dict, key: str, where: str):
    if key not in block:
        raise ConfigError(f"[{where}] is missing {key!r}")
    return block[key]


def matrix(value, name: str) -> np.ndarray:
    try:
        m = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be numeric: {exc}") from exc
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise ConfigError(f"{name} must be a finite 2-D array")
    return m


def vector(value, name: str) -> np.ndarray:
    try:
        v = np.atleast_1d(np.asarray(value, dtype=float))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be numeric: {exc}") from exc
    if v.ndim != 1 or not np.all(np.isfinite(v)):
        raise ConfigError(f"{name} must be a finite 1-D array")
    return v


def number(value, name: str, lo=None, hi=None, integer=False):
    if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, float, np.number)):
        raise ConfigError(f"{name} must be a number")
    if integer and int(value) != value:
        raise ConfigError(f"{name} must be an integer")
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        raise ConfigError(f"{name}={value} is outside [{lo}, {hi}]")
    return int(value) if integer else float(value)


def box(value, name: str) -> Box:
    try:
        if isinstance(value, dict):
            return Box(vector(value["lower"], name), vector(value["upper"], name))
        lo, hi = value
        return Box(vector(lo, name), vector(hi, name))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{name} must be {{lower, upper}} or [lower, upper]: {exc}") from exc


def region(value, name: str) -> Region:
    """A single box or a list of boxes."""
    if isinstance(value, dict):
        return Region((box(value, name),))
    if isinstance(value, list) and value and isinstance(value[0], (dict, list)) and (
            isinstance(value[0], dict) or (value[0] and isinstance(value[0][0], list))):
        return Region(tuple(box(v, name) for v in value))
    return Region((box(value, name),))


# --------------------------------------------------------------------------
# Blocks


def parse_model(b: dict) -> LinearDtScs:
    A = matrix(_need(b, "A", "model"), "model.A")
    B = matrix(_need(b, "B", "model"), "model.B")
    c0 = vector(b.get("c0", [0.0] * A.shape[0]), "model.c0")
    C = matrix(b.get("C", np.eye(A.shape[0]).tolist()), "model.C")
    R = vector(_need(b, "R", "model"), "model.R")
    try:
        if "gain" in b:
            g = b["gain"]
            gain = InputDependentGain(number(_need(g, "theta", "model.gain"), "theta"),
                                      number(_need(g, "gamma", "model.gain"), "gamma"))
            return LinearDtScs.with_gain(A, B, c0, C, R, gain)
        N = np.asarray(b["N"], dtype=float) if "N" in b else None
        return LinearDtScs(A, B, c0, C, R, N=N)
    except (ValueError, UnsupportedModel) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[model]: {exc}") from exc


@dataclass(frozen=True, eq=False)
class GridConfig:
    grid: Grid
    inputs: np.ndarray
    trunc: TruncationPolicy
    memory_cap: int


def input_points(spec, dim: int, name: str) -> np.ndarray:
    """``{lower, upper, points}`` (inclusive tensor grid) or an explicit list of points."""
    if isinstance(spec, dict):
        lo = vector(_need(spec, "lower", name), f"{name}.lower")
        hi = vector(_need(spec, "upper", name), f"{name}.upper")
        pts = np.broadcast_to(np.atleast_1d(spec.get("points", 2)), lo.shape)
        if lo.size != dim or hi.size != dim:
            raise ConfigError(f"{name} must have {dim} components")
        axes = [np.linspace(a, c, int(p)) if int(p) > 1 else np.array([a]) for a, c, p in zip(lo, hi, pts)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    U = np.asarray(spec, dtype=float)
    U = U.reshape(-1, dim) if U.size % dim == 0 else None
    if U is None or U.shape[0] == 0:
        raise ConfigError(f"{name} must list points of dimension {dim}")
    return U


def parse_grid(b: dict, model: LinearDtScs) -> GridConfig:
    lo = vector(_need(b, "lower", "grid"), "grid.lower")
    hi = vector(_need(b, "upper", "grid"), "grid.upper")
    if lo.size != model.state_dim:
        raise ConfigError(f"grid is {lo.size}-D but the model state is {model.state_dim}-D")
    cells = b.get("cells", 100)
    cells = [number(c, "grid.cells", lo=1, integer=True) for c in np.atleast_1d(cells)]
    try:
        grid = build_grid(Box(lo, hi), cells if len(cells) > 1 else cells[0])
    except ValueError as exc:
        raise ConfigError(f"[grid]: {exc}") from exc
    inputs = input_points(b.get("inputs", {"lower": [0.0] * model.input_dim,
                                           "upper": [0.0] * model.input_dim, "points": 1}),
                          model.input_dim, "grid.inputs")
    gamma = number(b.get("truncation", 0.0), "grid.truncation", lo=0.0, hi=0.999)
    cap = number(b.get("memory_cap_gb", 2.0), "grid.memory_cap_gb", lo=0.0)
    return GridConfig(grid, inputs, TruncationPolicy(gamma), int(cap * 1024**3))


def parse_spec(b: dict) -> HorizonSpec:
    kind = _need(b, "kind", "spec")
    horizon = number(_need(b, "horizon", "spec"), "spec.horizon", lo=0, integer=True)
    safe = region(b["safe"], "spec.safe") if "safe" in b else None
    target = region(b["target"], "spec.target") if "target" in b else None
    dfa = labels = None
    if "dfa" in b:
        d = b["dfa"]
        try:
            dfa = Dfa.from_triples([tuple(t) for t in _need(d, "transitions", "spec.dfa")],
                                   _need(d, "initial", "spec.dfa"), d.get("accepting", []))
        except ValueError as exc:
            raise ConfigError(f"[spec.dfa]: {exc}") from exc
    if "labels" in b:
        entries = [(_need(e, "letter", "spec.labels"), region(_need(e, "region", "spec.labels"),
                                                                "spec.labels.region"))
                   for e in b["labels"]]
        try:
            labels = LabelMap(tuple(entries), b.get("default_label", "other"))
        except ValueError as exc:
            raise ConfigError(f"[spec.labels]: {exc}") from exc
    try:
        return HorizonSpec(kind, horizon, safe, target, dfa, labels)
    except ValueError as exc:
        raise ConfigError(f"[spec]: {exc}") from exc


def parse_ssf(b: dict, name: str) -> SsfParams:
    try:
        return SsfParams(k_alpha=number(b.get("k_alpha", 1.0), f"{name}.k_alpha"),
                         p_alpha=number(b.get("p_alpha", 2.0), f"{name}.p_alpha"),
                         kappa=number(_need(b, "kappa", name), f"{name}.kappa"),
                         psi=number(b.get("psi", 0.0), f"{name}.psi"),
                         k_rho=number(b.get("k_rho", 0.0), f"{name}.k_rho"),
                         p_rho=number(b.get("p_rho", 1.0), f"{name}.p_rho"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[{name}]: {exc}") from exc


@dataclass
class BoundsConfig:
    lambda1: dict | None = None
    lambda2: dict | None = None
    reduced: dict | None = None


def parse_bounds(b: dict) -> BoundsConfig:
    out = BoundsConfig()
    if "lambda1" in b:
        d = b["lambda1"]
        unknown = set(d) - {"H", "H_bar", "delta", "horizon", "L_b", "domain"}
        if unknown:
            raise ConfigError(f"unknown keys in [bounds.lambda1]: {sorted(unknown)}")
        # L_b defaults to the measure of the state domain; an explicit value overrides it
        measure = box(d["domain"], "bounds.lambda1.domain").volume if "domain" in d else None
        if "L_b" not in d and measure is None:
            raise ConfigError("[bounds.lambda1] needs L_b or a domain to measure")
        out.lambda1 = {
            "H": number(_need(d, "H", "bounds.lambda1"), "H", lo=0.0),
            "delta": number(_need(d, "delta", "bounds.lambda1"), "delta", lo=0.0),
            "horizon": number(_need(d, "horizon", "bounds.lambda1"), "horizon", lo=0, integer=True),
            "L_b": number(d["L_b"], "L_b", lo=0.0) if "L_b" in d else measure,
            "measure": measure,
            "H_bar": None if "H_bar" not in d else number(d["H_bar"], "H_bar", lo=0.0),
        }
    if "lambda2" in b:
        d = b["lambda2"]
        out.lambda2 = {
            "ssf": parse_ssf(_need(d, "ssf", "bounds.lambda2"), "bounds.lambda2.ssf"),
            **_closeness_args(d, "bounds.lambda2"),
        }
    if "reduced" in b:
        d = b["reduced"]
        concrete = parse_model(_need(d, "concrete", "bounds.reduced"))
        abstract = parse_model(_need(d, "abstract", "bounds.reduced"))
        c = _need(d, "candidate", "bounds.reduced")
        try:
            cand = QuadraticSsf(M=matrix(_need(c, "M", "candidate"), "M"),
                                P=matrix(_need(c, "P", "candidate"), "P").reshape(concrete.state_dim, -1),
                                K=matrix(_need(c, "K", "candidate"), "K"),
                                Q=matrix(_need(c, "Q", "candidate"), "Q").reshape(concrete.input_dim, -1),
                                pi=number(_need(c, "pi", "candidate"), "pi"),
                                kappa_hat=number(_need(c, "kappa_hat", "candidate"), "kappa_hat"),
                                R_lift=None if "R_lift" not in c else matrix(c["R_lift"], "R_lift")
                                .reshape(concrete.input_dim, -1))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"[bounds.reduced.candidate]: {exc}") from exc
        out.reduced = {"concrete": concrete, "abstract": abstract, "candidate": cand,
                       "shared_noise": bool(d.get("shared_noise", False)),
                       **_closeness_args(d, "bounds.reduced")}
    if out.lambda1 is None and out.lambda2 is None and out.reduced is None:
        raise ConfigError("[bounds] needs at least one of lambda1, lambda2, reduced")
    return out


def _closeness_args(d: dict, name: str) -> dict:
    return {"V0": number(d.get("V0", 0.0), f"{name}.V0", lo=0.0),
            "u_sup": number(d.get("u_sup", 0.0), f"{name}.u_sup", lo=0.0),
            "epsilon": number(_need(d, "epsilon", name), f"{name}.epsilon", lo=0.0),
            "horizon": number(_need(d, "horizon", name), f"{name}.horizon", lo=0, integer=True)}


@dataclass
class BarrierConfig:
    certificate: BarrierCertificate | None
    X0: Region
    Xu: Region
    X: Region
    resolution: float
    horizon: int
    lipschitz: tuple | None
    search: dict | None = field(default=None)


def parse_barrier(b: dict, model: LinearDtScs) -> BarrierConfig:
    X0 = region(_need(b, "X0", "barrier"), "barrier.X0")
    Xu = region(_need(b, "Xu", "barrier"), "barrier.Xu")
    X = region(_need(b, "X", "barrier"), "barrier.X")
    cert = None
    if "coeffs" in b:
        try:
            poly = Polynomial.univariate(vector(b["coeffs"], "barrier.coeffs"))
            if model.state_dim != 1:
                raise ConfigError("coefficient lists describe 1-D certificates only")
            clamp = box(b["clamp"], "barrier.clamp") if "clamp" in b else None
            ctrl = AffineController(matrix(b.get("K", [[0.0] * model.state_dim]), "barrier.K"),
                                    vector(b.get("k0", [0.0] * model.input_dim), "barrier.k0"), clamp)
            cert = BarrierCertificate(poly, number(_need(b, "eta", "barrier"), "eta"),
                                      number(_need(b, "beta", "barrier"), "beta"),
                                      number(_need(b, "kappa", "barrier"), "kappa"),
                                      number(b.get("c", 0.0), "c"), ctrl)
        except (ValueError, UnsupportedModel) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"[barrier]: {exc}") from exc
    search = b.get("search")
    if cert is None and search is None:
        raise ConfigError("[barrier] needs a certificate (coeffs, eta, beta, kappa, c) or a search table")
    lip = b.get("lipschitz")
    if lip is not None:
        lip = tuple(vector(lip, "barrier.lipschitz"))
        if len(lip) != 3:
            raise ConfigError("barrier.lipschitz needs three constants (init, unsafe, decrease)")
    return BarrierConfig(cert, X0, Xu, X,
                         number(b.get("resolution", 1e-3), "barrier.resolution", lo=1e-9),
                         number(b.get("horizon", 10), "barrier.horizon", lo=0, integer=True),
                         lip, search)


def parse_x0(value, model: LinearDtScs, name: str):
    if isinstance(value, dict):
        return box(value, name)
    v = vector(value, name)
    if v.size != model.state_dim:
        raise ConfigError(f"{name} must have {model.state_dim} components")
    return v


@dataclass
class NetworkConfig:
    subsystems: list
    coupling: object
    gains: str
    explicit: GainData | None
    delta: float
    epsilon: float
    horizon: int
    V0: float
    composition: str
    weights: np.ndarray | None
    abstract: bool
    cells: int
    internal_points: int
    u_points: np.ndarray
    pi: float


def _coupling(value, p: int, q: int):
    """Dense matrix, or a list of ``[input_port, output_port]`` (value 1) or
    ``[input_port, output_port, value]`` entries."""
    import scipy.sparse as sp

    arr = value
    if arr and isinstance(arr[0], list) and len(arr[0]) in (2, 3) and not (
            len(arr) == p and len(arr[0]) == q and all(len(r) == q for r in arr)):
        rows = [int(e[0]) for e in arr]
        cols = [int(e[1]) for e in arr]
        vals = [float(e[2]) if len(e) == 3 else 1.0 for e in arr]
        if rows and (max(rows) >= p or max(cols) >= q or min(rows + cols) < 0):
            raise ConfigError("network.coupling entry out of range")
        return sp.csr_matrix((vals, (rows, cols)), shape=(p, q))
    M = matrix(arr, "network.coupling") if p and q else np.zeros((p, q))
    if M.shape != (p, q):
        raise ConfigError(f"network.coupling must be {p}x{q}, got {M.shape}")
    return M


def parse_network(b: dict) -> NetworkConfig:
    topo = b.get("topology", "two-rooms")
    room = {k: number(b[k], f"network.{k}") for k in ("sigma", "theta", "gamma", "T_e", "T_h", "R")
            if k in b}
    try:
        if topo == "two-rooms":
            subs, M = two_rooms(**room)
        elif topo == "ring":
            subs, M = ring_of_rooms(number(b.get("rooms", 1000), "network.rooms", lo=3, integer=True),
                                    **room)
        elif topo == "custom":
            subs = []
            for i, d in enumerate(_need(b, "subsystems", "network")):
                model = parse_model({k: v for k, v in d.items() if k not in ("D", "C2")})
                subs.append(Subsystem(model, matrix(_need(d, "D", f"network.subsystems[{i}]"), "D")
                                      .reshape(model.state_dim, -1),
                                      matrix(_need(d, "C2", f"network.subsystems[{i}]"), "C2")
                                      .reshape(-1, model.state_dim)))
            p = sum(s.internal_inputs for s in subs)
            q = sum(s.internal_outputs for s in subs)
            M = _coupling(b.get("coupling", []), p, q)
        else:
            raise ConfigError(f"network.topology must be two-rooms, ring or custom, got {topo!r}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[network]: {exc}") from exc
    gains = b.get("gains", "quoted" if topo != "custom" else "explicit")
    if gains not in ("quoted", "derived", "explicit"):
        raise ConfigError("network.gains must be quoted, derived or explicit")
    if gains in ("quoted", "derived") and any(s.model.state_dim != 1 for s in subs):
        raise ConfigError(f"network.gains={gains!r} needs scalar room subsystems")
    explicit = None
    if gains == "explicit":
        try:
            explicit = GainData(matrix(_need(b, "gain_matrix", "network"), "network.gain_matrix"),
                                b.get("kappa", 0.5), b.get("psi", 0.0), b.get("k_alpha", 1.0),
                                {"source": "config"})
        except ValueError as exc:
            raise ConfigError(f"[network]: {exc}") from exc
        if explicit.size != len(subs):
            raise ConfigError("network.gain_matrix must be N x N for N subsystems")
    composition = b.get("composition", "max")
    if composition not in ("max", "sum"):
        raise ConfigError("network.composition must be max or sum")
    weights = None if "weights" not in b else vector(b["weights"], "network.weights")
    u_pts = vector(b.get("u_points", [0.0, 0.2, 0.4, 0.6]), "network.u_points")
    return NetworkConfig(
        subs, M, gains, explicit,
        delta=number(b.get("delta", 0.005), "network.delta", lo=0.0),
        epsilon=number(b.get("epsilon", 0.5), "network.epsilon", lo=1e-12),
        horizon=number(b.get("horizon", 100), "network.horizon", lo=0, integer=True),
        V0=number(b.get("V0", 0.0), "network.V0", lo=0.0),
        composition=composition, weights=weights,
        abstract=bool(b.get("abstract", False)),
        cells=number(b.get("cells", 400), "network.cells", lo=1, integer=True),
        internal_points=number(b.get("internal_points", 3), "network.internal_points", lo=1,
                               integer=True),
        u_points=u_pts,
        pi=number(b.get("pi", 1.0), "network.pi", lo=1e-12),
    )
