"""Discrete-time linear stochastic control systems with diagonal Gaussian noise.

One step of the dynamics is

    x+ = A(u) x + B u + c0 + diag(R) w,      y = C x,

with ``w`` standard normal and ``A(u) = A + sum_j u_j N_j``. The bilinear
term ``N`` is how input-dependent conduction (the heated-room models) is
represented; ``InputDependentGain`` is the scalar special case
``A(u) = (1 - theta - gamma u) A_base``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class UnsupportedModel(ValueError):
    """Raised when an operation needs a structure the model does not have."""


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def _as_vector(value, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class Box:
    """Closed hyper-rectangle ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _as_vector(self.lower, "lower")
        hi = _as_vector(self.upper, "upper")
        if lo.shape != hi.shape:
            raise ValueError("box bounds have different dimensions")
        if np.any(lo > hi):
            raise ValueError(f"box lower bound exceeds upper bound: {lo} > {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def contains(self, x) -> np.ndarray:
        """Vectorised membership test; ``x`` has shape ``(..., dim)``."""
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)

    def intersects(self, other: "Box") -> bool:
        return bool(np.all(self.lower <= other.upper) and np.all(other.lower <= self.upper))

    def __eq__(self, other):
        if not isinstance(other, Box):
            return NotImplemented
        return np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper)

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))


@dataclass(frozen=True)
class Region:
    """Finite union of boxes."""

    boxes: tuple[Box, ...]

    def __post_init__(self):
        boxes = tuple(self.boxes)
        if boxes and len({b.dim for b in boxes}) != 1:
            raise ValueError("all boxes of a region must share a dimension")
        object.__setattr__(self, "boxes", boxes)

    @classmethod
    def of(cls, *boxes) -> "Region":
        out = []
        for b in boxes:
            out.append(b if isinstance(b, Box) else Box(*b))
        return cls(tuple(out))

    @property
    def empty(self) -> bool:
        return not self.boxes

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        hit = np.zeros(x.shape[:-1], dtype=bool)
        for b in self.boxes:
            hit |= b.contains(x)
        return hit


@dataclass(frozen=True)
class InputDependentGain:
    """Scalar state gain ``a(u) = 1 - theta - gamma * u`` for a single input."""

    theta: float
    gamma: float

    def __call__(self, u) -> float:
        u = float(np.asarray(u, dtype=float).reshape(-1)[0])
        return 1.0 - self.theta - self.gamma * u


@dataclass(frozen=True, eq=False)
class SparseBilinear:
    """Coordinate form of the bilinear term: ``N[j][a, b] = value`` per entry."""

    shape: tuple
    j: np.ndarray
    a: np.ndarray
    b: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        for name in ("j", "a", "b"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
        object.__setattr__(self, "value", np.asarray(self.value, dtype=float).reshape(-1))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        if not (self.j.size == self.a.size == self.b.size == self.value.size):
            raise ValueError("bilinear coordinate arrays differ in length")
        m, n, n2 = self.shape
        if self.j.size and (self.j.max() >= m or self.a.max() >= n or self.b.max() >= n2):
            raise ValueError("bilinear coordinates out of range")

    @classmethod
    def from_dense(cls, N: np.ndarray) -> "SparseBilinear":
        N = np.asarray(N, dtype=float)
        j, a, b = np.nonzero(N)
        return cls(N.shape, j, a, b, N[j, a, b])

    def todense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        np.add.at(out, (self.j, self.a, self.b), self.value)
        return out


@dataclass(frozen=True, eq=False)
class LinearDtScs:
    """Linear (bilinear in ``u``) stochastic control system.

    ``A`` is the state matrix at ``u = 0``. ``N`` (shape ``(m, n, n)``), when
    given, adds ``sum_j u_j N[j]`` to it. ``R`` holds per-coordinate noise
    standard deviations; a zero entry makes that coordinate deterministic.
    """

    A: np.ndarray
    B: np.ndarray
    c0: np.ndarray
    C: np.ndarray
    R: np.ndarray
    N: np.ndarray | None = None
    gain: InputDependentGain | None = field(default=None, compare=False)

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        B = _as_matrix(self.B, "B")
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        c0 = _as_vector(self.c0, "c0")
        if c0.shape != (n,):
            raise ValueError(f"c0 has shape {c0.shape}, expected ({n},)")
        C = _as_matrix(self.C, "C")
        if C.shape[1] != n:
            raise ValueError(f"C has {C.shape[1]} columns, expected {n}")
        R = _as_vector(self.R, "R")
        if R.shape != (n,):
            raise ValueError(f"R has shape {R.shape}, expected ({n},)")
        if np.any(R < 0):
            raise ValueError("noise standard deviations must be nonnegative")
        N = self.N
        if N is not None:
            if not isinstance(N, SparseBilinear):
                N = np.asarray(N, dtype=float)
            if tuple(N.shape) != (B.shape[1], n, n):
                raise ValueError(f"N has shape {N.shape}, expected {(B.shape[1], n, n)}")
        for name, val in (("A", A), ("B", B), ("c0", c0), ("C", C), ("R", R), ("N", N)):
            if isinstance(val, np.ndarray):
                val.setflags(write=False)
            object.__setattr__(self, name, val)
        coo = None
        if N is not None:
            coo = N if isinstance(N, SparseBilinear) else SparseBilinear.from_dense(N)
            if not np.any(coo.value):
                coo = None
        object.__setattr__(self, "_coo", coo)
        if coo is not None:
            import scipy.sparse as sp

            k = coo.value.size
            scatter = sp.csr_matrix((coo.value, (np.arange(k), coo.a)), shape=(k, n))
            object.__setattr__(self, "_scatter", scatter)

    @classmethod
    def with_gain(cls, A_base, B, c0, C, R, gain: InputDependentGain) -> "LinearDtScs":
        """Model whose state matrix is ``gain(u) * A_base`` (single input)."""
        A_base = _as_matrix(A_base, "A_base")
        B = _as_matrix(B, "B")
        if B.shape[1] != 1:
            raise ValueError("InputDependentGain needs a single input")
        N = (-gain.gamma * A_base)[None, :, :]
        return cls((1.0 - gain.theta) * A_base, B, c0, C, R, N=N, gain=gain)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    @property
    def output_dim(self) -> int:
        return self.C.shape[0]

    @property
    def bilinear(self) -> bool:
        return self._coo is not None

    def effective_A(self, u) -> np.ndarray:
        u = self._check_u(u)
        A = np.array(self.A)
        if self._coo is not None:
            c = self._coo
            np.add.at(A, (c.a, c.b), u[c.j] * c.value)
        return A

    def mean(self, x, u) -> np.ndarray:
        """Batched kernel mean. ``x``: ``(..., n)``, ``u``: ``(..., m)``; broadcasts."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        out = x @ self.A.T + u @ self.B.T + self.c0
        if self._coo is not None:
            # sum_j u_j N[j] x, one term per stored coordinate
            c = self._coo
            lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
            terms = np.broadcast_to(u, lead + u.shape[-1:])[..., c.j] * \
                np.broadcast_to(x, lead + x.shape[-1:])[..., c.b]
            flat = terms.reshape(-1, c.value.size) @ self._scatter
            out = out + np.asarray(flat).reshape(lead + (self.state_dim,))
        return out

    def output(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.C.T

    def _check_u(self, u) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.shape != (self.input_dim,):
            raise ValueError(f"input has shape {u.shape}, expected ({self.input_dim},)")
        return u

    def _check_x(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.state_dim,):
            raise ValueError(f"state has shape {x.shape}, expected ({self.state_dim},)")
        return x

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.A, self.B, self.c0, self.C, self.R):
            h.update(np.ascontiguousarray(arr).tobytes())
            h.update(str(arr.shape).encode())
        if self._coo is not None:
            c = self._coo
            for arr in (c.j, c.a, c.b, c.value):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def step(model: LinearDtScs, x, u, w) -> np.ndarray:
    """One transition with an explicit standard-normal sample ``w``."""
    x = model._check_x(x)
    u = model._check_u(u)
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if w.shape != (model.state_dim,):
        raise ValueError(f"noise has shape {w.shape}, expected ({model.state_dim},)")
    return model.mean(x, u) + model.R * w


def kernel_mean_std(model: LinearDtScs, x, u) -> tuple[np.ndarray, np.ndarray]:
    x = model._check_x(x)
    u = model._check_u(u)
    return model.mean(x, u), np.array(model.R)


def room_model(theta: float = 0.4, gamma: float = 0.5, T_e: float = -1.0,
               T_h: float = 50.0, R: float = 0.6) -> LinearDtScs:
    """Single heated room: ``T+ = (1-theta-gamma u) T + gamma T_h u + theta T_e + R w``."""
    return LinearDtScs.with_gain(
        [[1.0]], [[gamma * T_h]], [theta * T_e], [[1.0]], [R],
        InputDependentGain(theta, gamma),
    )


def as_region(boxes: Sequence) -> Region:
    if isinstance(boxes, Region):
        return boxes
    if isinstance(boxes, Box):
        return Region((boxes,))
    return Region.of(*boxes)
