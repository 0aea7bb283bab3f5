"""Deterministic linear algebra, random generation, densities, and the
finite-difference oracle.

Everything random in this project flows through :class:`RngStream`, a
splitmix64 generator (64-bit add/shift/multiply mixing), so identical seeds
give identical sequences on every platform. Matrix factorizations are
hand-rolled LU with partial pivoting so the singularity contract (pivot
magnitude below 1e-12) is exact and documented rather than
LAPACK-version-dependent.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericsError",
    "SingularMatrixError",
    "ZeroVectorError",
    "RngStream",
    "slogdet",
    "invert",
    "gaussian_logpdf",
    "cosine_distance",
    "finite_diff_grad",
    "standard_normal",
    "check_finite",
]

PIVOT_TOL = 1e-12
ZERO_NORM_TOL = 1e-12
DEFAULT_FD_EPS = 1e-4

LOG_2PI = math.log(2.0 * math.pi)


class NumericsError(Exception):
    """Base class for numeric failures."""


class SingularMatrixError(NumericsError):
    """A pivot fell below the singularity threshold during factorization."""


class ZeroVectorError(NumericsError):
    """Cosine distance requested for a (near-)zero vector."""


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    """Raise ValueError if any entry is NaN or infinite."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite entries")
    return a


# ---------------------------------------------------------------------------
# Random generation
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15   # golden-ratio increment of splitmix64
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_SPAWN_SALT = 0xD6E8FEB86659FD93


def _mix64(z: int) -> int:
    """splitmix64 output mixing of a single 64-bit word."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class RngStream:
    """splitmix64 stream: state advances by a fixed odd gamma per draw and
    each output is the mixed state.

    The generator is fully defined by::

        state_k = seed + k * 0x9E3779B97F4A7C15          (mod 2^64)
        out_k   = mix(state_k)                           (splitmix64 mix)

    which makes bulk generation vectorizable and the sequence identical on
    every platform for a given seed. One instance is single-owner mutable;
    use :meth:`spawn` to derive independent child streams.
    """

    def __init__(self, seed: int):
        self._seed = int(seed) & _MASK64
        self._drawn = 0  # number of raw 64-bit words consumed

    def __repr__(self) -> str:
        return f"RngStream(seed={self._seed}, drawn={self._drawn})"

    @property
    def seed(self) -> int:
        return self._seed

    def spawn(self, tag: int | str) -> "RngStream":
        """Derive a deterministic, statistically independent child stream.

        The tag may be an int or a short label string; equal tags always
        yield the same child, distinct tags (almost surely) distinct ones.
        """
        if isinstance(tag, str):
            code = 0xCBF29CE484222325  # FNV-1a over the UTF-8 bytes
            for b in tag.encode("utf-8"):
                code = ((code ^ b) * 0x100000001B3) & _MASK64
        else:
            code = int(tag) & _MASK64
        child_seed = _mix64(self._seed ^ _mix64((code + 1) * _SPAWN_SALT))
        return RngStream(child_seed)

    def _raw(self, n: int) -> np.ndarray:
        """Next n raw 64-bit words as a uint64 array."""
        if n < 0:
            raise ValueError("draw count must be non-negative")
        idx = np.arange(self._drawn + 1, self._drawn + n + 1, dtype=np.uint64)
        self._drawn += n
        z = np.uint64(self._seed) + np.uint64(_GAMMA) * idx  # wraps mod 2^64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) with 53-bit resolution."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal(self, n: int) -> np.ndarray:
        """n standard-normal doubles via Box-Muller on uniform pairs."""
        if n < 0:
            raise ValueError("draw count must be non-negative")
        m = (n + 1) // 2
        w = self._raw(2 * m)
        # u1 in (0, 1] so the log is finite; u2 in [0, 1).
        u1 = ((w[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
        u2 = (w[m:] >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return out[:n]

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n ints uniform in [0, bound). Uses the 53-bit uniform; the modulo
        bias at desk-scale bounds (< 2^32) is far below 2^-20."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        vals = np.floor(self.uniform(n) * bound).astype(np.int64)
        return np.minimum(vals, bound - 1)

    def shuffled_indices(self, n: int) -> np.ndarray:
        """A deterministic permutation of range(n)."""
        return np.argsort(self.uniform(n), kind="stable")


def standard_normal(rng: RngStream, n: int) -> np.ndarray:
    """n standard-normal draws from the stream (n >= 1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.normal(n)


# ---------------------------------------------------------------------------
# LU-based linear algebra
# ---------------------------------------------------------------------------

def _require_square(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return m


def _lu_decompose(m: np.ndarray):
    """LU with partial pivoting. Returns (lu, perm, parity) where `lu` packs
    the unit-lower factor below the diagonal and U on/above it, `perm` maps
    factored rows to original rows, and parity is the swap sign.

    Raises SingularMatrixError when a pivot magnitude drops below PIVOT_TOL.
    """
    a = _require_square(m).copy()
    n = a.shape[0]
    perm = np.arange(n)
    parity = 1
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) < PIVOT_TOL:
            raise SingularMatrixError(
                f"pivot {a[p, k]:.3e} below threshold {PIVOT_TOL:g} at column {k}"
            )
        if p != k:
            a[[k, p]] = a[[p, k]]
            perm[[k, p]] = perm[[p, k]]
            parity = -parity
        a[k + 1:, k] /= a[k, k]
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    return a, perm, parity


def slogdet(m: np.ndarray) -> tuple[int, float]:
    """Sign and log-absolute-determinant; sign 0 (with -inf log) for
    singular input."""
    m = _require_square(m)
    try:
        lu, _, parity = _lu_decompose(m)
    except SingularMatrixError:
        return 0, -math.inf
    diag = np.diag(lu)
    sign = parity * int(np.prod(np.sign(diag)))
    return sign, float(np.sum(np.log(np.abs(diag))))


def invert(m: np.ndarray) -> np.ndarray:
    """Inverse via the LU factors (partial pivoting)."""
    m = _require_square(m)
    n = m.shape[0]
    lu, perm, _ = _lu_decompose(m)
    b = np.eye(n)[perm]            # P @ I
    # forward substitution with the unit-lower factor
    for k in range(1, n):
        b[k] -= lu[k, :k] @ b[:k]
    # back substitution with U
    for k in range(n - 1, -1, -1):
        b[k] = (b[k] - lu[k, k + 1:] @ b[k + 1:]) / lu[k, k]
    return b


# ---------------------------------------------------------------------------
# Densities and distances
# ---------------------------------------------------------------------------

def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, logvar: np.ndarray) -> float:
    """Log-density of a diagonal Gaussian:
    sum_i [ -0.5 ln(2 pi) - 0.5 logvar_i - 0.5 (x_i - mean_i)^2 exp(-logvar_i) ].
    """
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    if not (x.shape == mean.shape == logvar.shape):
        raise ValueError(
            f"dimension mismatch: x {x.shape}, mean {mean.shape}, logvar {logvar.shape}"
        )
    d = x - mean
    val = float(np.sum(-0.5 * LOG_2PI - 0.5 * logvar - 0.5 * d * d * np.exp(-logvar)))
    if not math.isfinite(val):
        raise ValueError("gaussian_logpdf produced a non-finite value")
    return val


def cosine_distance(v1: np.ndarray, v2: np.ndarray) -> float:
    """1 - (v1/||v1||) . (v2/||v2||); raises ZeroVectorError near zero norm."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    n1 = float(np.linalg.norm(v1))
    n2 = float(np.linalg.norm(v2))
    if n1 < ZERO_NORM_TOL or n2 < ZERO_NORM_TOL:
        raise ZeroVectorError("cosine distance undefined for (near-)zero vectors")
    # rounding can push the ratio a hair outside [-1, 1]; clamp so identical
    # vectors give exactly 0 and the result stays in [0, 2]
    cos = max(-1.0, min(1.0, float(np.dot(v1, v2)) / (n1 * n2)))
    return 1.0 - cos


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: Sequence[float] | np.ndarray,
    eps: float = DEFAULT_FD_EPS,
) -> np.ndarray:
    """Central-difference gradient (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).

    This is the independent oracle used to verify every differentiable
    component in the project; it must never call into the autodiff engine.
    """
    x = np.asarray(x, dtype=np.float64).copy()
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g
