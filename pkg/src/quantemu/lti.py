"""Continuous reference dynamics, zero-order-hold discretization and the
quantized update law.

The reference system is the closed loop ``dx/dt = H x`` (``H`` Hurwitz).
The emulating system is the sampled plant ``x(k+1) = A_d x(k) + B_d u(k)``
with ternary inputs ``u`` in ``{-1, 0, 1}^m``.
"""

import csv
import io
import threading
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TOL = 1e-12


def _as_matrix(M, name="matrix"):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {M.shape}")
    return M


def matrix_exponential(M, tol=DEFAULT_TOL):
    """Return ``exp(M)`` by scaling and squaring a truncated Taylor series.

    The matrix is scaled by ``2**-s`` until its 1-norm is at most 1/2, the
    series is summed until the next term falls below the tolerance divided
    by the squaring amplification, then the result is squared ``s`` times.
    """
    M = _as_matrix(M, "M")
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"matrix_exponential needs a square matrix, got {M.shape}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix contains non-finite entries")
    n = M.shape[0]
    norm = np.abs(M).sum(axis=0).max() if n else 0.0
    s = 0
    if norm > 0.5:
        s = int(np.ceil(np.log2(norm / 0.5)))
    X = M / (2.0 ** s)

    result = np.eye(n)
    term = np.eye(n)
    # each squaring roughly doubles the absolute error
    target = tol / (2.0 ** (s + 2))
    for k in range(1, 80):
        term = term @ X / k
        result = result + term
        size = np.abs(term).max() if n else 0.0
        if size <= target or size <= np.finfo(float).eps * np.abs(result).max() * 1e-2:
            break
    for _ in range(s):
        result = result @ result
    return result


@dataclass(frozen=True)
class ContinuousLti:
    """Reference flow ``dx/dt = H x``."""

    H: np.ndarray

    def __post_init__(self):
        H = _as_matrix(self.H, "H")
        if H.shape[0] != H.shape[1]:
            raise ValueError(f"H must be square, got {H.shape}")
        H = H.copy()
        H.flags.writeable = False
        object.__setattr__(self, "H", H)

    @property
    def n(self):
        return self.H.shape[0]

    def is_stable(self):
        """True when every eigenvalue of ``H`` has negative real part."""
        H = self.H
        if self.n == 1:
            return bool(H[0, 0] < 0)
        if self.n == 2:
            # Routh-Hurwitz for s^2 - tr(H) s + det(H)
            return bool(np.trace(H) < 0 and np.linalg.det(H) > 0)
        return bool(np.all(np.linalg.eigvals(H).real < 0))


@dataclass(frozen=True)
class DiscretizedSystem:
    A_d: np.ndarray
    B_d: np.ndarray
    h: float

    @property
    def n(self):
        return self.A_d.shape[0]

    @property
    def m(self):
        return self.B_d.shape[1]


def discretize(A, B, h, tol=DEFAULT_TOL):
    """Exact zero-order-hold discretization of ``(A, B)`` with step ``h``.

    Uses the augmented exponential ``exp([[A, B], [0, 0]] h)``; its top-left
    block is ``A_d`` and its top-right block is ``B_d``.
    """
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"A must be square, got {A.shape}")
    if B.shape[0] != n:
        raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
    if not h > 0:
        raise ValueError("step size h must be positive")
    m = B.shape[1]
    if not np.any(A):
        return DiscretizedSystem(np.eye(n), h * B, float(h))
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = A
    aug[:n, n:] = B
    E = matrix_exponential(aug * h, tol)
    return DiscretizedSystem(E[:n, :n].copy(), E[:n, n:].copy(), float(h))


_flow_cache = {}
_flow_lock = threading.Lock()


def flow_matrix(sys, h, tol=DEFAULT_TOL):
    """``exp(H h)``, cached per ``(H, h)``."""
    key = (sys.H.tobytes(), sys.H.shape, float(h), tol)
    E = _flow_cache.get(key)
    if E is None:
        E = matrix_exponential(sys.H * h, tol)
        E.flags.writeable = False
        with _flow_lock:
            E = _flow_cache.setdefault(key, E)
    return E


def reference_step(x, sys, h):
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError(f"state has shape {x.shape}, expected ({sys.n},)")
    return flow_matrix(sys, h) @ x


def quantized_step(x_qs, u, disc):
    """One step of the quantized plant: ``A_d x + B_d u``."""
    x_qs = np.asarray(x_qs, dtype=float)
    u = np.asarray(u)
    if u.shape != (disc.m,):
        raise ValueError(f"pattern has shape {u.shape}, expected ({disc.m},)")
    if not np.all(np.isin(u, (-1, 0, 1))):
        raise ValueError(f"activation pattern entries must be in {{-1, 0, 1}}, got {u}")
    if x_qs.shape != (disc.n,):
        raise ValueError(f"state has shape {x_qs.shape}, expected ({disc.n},)")
    return disc.A_d @ x_qs + disc.B_d @ u.astype(float)


@dataclass
class Trajectory:
    states: np.ndarray
    h: float
    label: str = "reference"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if self.states.shape[0] == 0:
            raise ValueError("trajectory must hold at least one state")

    def __len__(self):
        return self.states.shape[0]

    @property
    def n(self):
        return self.states.shape[1]

    @property
    def times(self):
        return self.h * np.arange(len(self))

    def to_csv(self, path=None):
        """Write ``k,t,x_0,...`` rows; returns the text when ``path`` is None."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "t"] + [f"x_{i}" for i in range(self.n)])
        for k, (t, x) in enumerate(zip(self.times, self.states)):
            w.writerow([k, repr(float(t))] + [repr(float(v)) for v in x])
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, "w") as fh:
            fh.write(text)

    @classmethod
    def from_csv(cls, path, label="reference"):
        with open(path) as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        cols = [i for i, name in enumerate(header) if name.startswith("x_")]
        states = np.array([[float(r[i]) for i in cols] for r in body])
        h = float(body[1][1]) if len(body) > 1 else 1.0
        return cls(states, h, label)


def simulate_reference(x0, sys, h, T):
    """Sampled reference flow ``x(k) = exp(H h)^k x0`` for ``k = 0..T``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    x = np.asarray(x0, dtype=float)
    states = [x]
    for _ in range(T):
        x = reference_step(x, sys, h)
        states.append(x)
    return Trajectory(np.array(states), h, "reference")
