"""Dense linear algebra, special functions and the splittable PRNG."""

import logging
from typing import Optional, Sequence, Union

import numpy as np
from numpy.typing import NDArray
from scipy import linalg, special

from .errors import DomainError, NotPositiveDefinite, ShapeMismatch, SingularTriangular

logger = logging.getLogger(__name__)

# Dense symmetric PSD matrix (Gram matrices, kernels, scales).
SymMatrix = NDArray[np.float64]
# P x min(P, nu) matrix with zero strictly-upper part (Bartlett factors, L @ A).
LowerTrapezoid = NDArray[np.float64]

PSD_TOLERANCE = 1e-10
SYMMETRY_TOLERANCE = 1e-12
PIVOT_TOLERANCE = 1e-12
JITTER = 1e-8

_MASK64 = (1 << 64) - 1


def validate_sym_psd(m: SymMatrix, name: str = "matrix") -> SymMatrix:
    """Check the SymMatrix invariants and return ``m`` as a float array.

    Symmetric to ``SYMMETRY_TOLERANCE`` relative to the largest entry, and
    eigenvalues no smaller than ``-PSD_TOLERANCE * trace``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeMismatch(f"{name} must be square, got shape {m.shape}")
    scale = max(np.max(np.abs(m)), 1.0) if m.size else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOLERANCE * scale:
        raise DomainError(f"{name} is not symmetric")
    trace = float(np.trace(m))
    if m.size and np.min(np.linalg.eigvalsh(m)) < -PSD_TOLERANCE * max(abs(trace), 1e-300):
        raise DomainError(f"{name} is not positive semi-definite")
    return m


def validate_lower_trapezoid(a: LowerTrapezoid, name: str = "factor") -> LowerTrapezoid:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] > a.shape[0]:
        raise ShapeMismatch(f"{name} must be P x min(P, nu), got shape {a.shape}")
    if np.any(np.triu(a, 1) != 0.0):
        raise DomainError(f"{name} has non-zero strictly-upper entries")
    return a


def cholesky(m: SymMatrix) -> LowerTrapezoid:
    """
    Cholesky factor of a positive definite matrix.

    Column-by-column factorisation; a pivot at or below
    ``PIVOT_TOLERANCE * max(diag(m))`` raises ``NotPositiveDefinite`` with the
    0-based index of the failing pivot.

    Args:
        m: Square symmetric positive definite matrix

    Returns:
        Lower-triangular L with L @ L.T == m
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"cholesky expects a square matrix, got shape {a.shape}")
    n = a.shape[0]
    threshold = PIVOT_TOLERANCE * max(float(np.max(np.diag(a), initial=0.0)), 0.0)
    chol = np.zeros_like(a)
    for j in range(n):
        row = chol[j, :j]
        pivot = a[j, j] - row @ row
        if not np.isfinite(pivot) or pivot <= threshold:
            raise NotPositiveDefinite(j)
        chol[j, j] = np.sqrt(pivot)
        chol[j + 1:, j] = (a[j + 1:, j] - chol[j + 1:, :j] @ row) / chol[j, j]
    return chol


def tri_solve(l: LowerTrapezoid, b: NDArray[np.float64], transpose: bool = False) -> NDArray[np.float64]:
    """Solve ``l @ x = b`` (or ``l.T @ x = b``) for square lower-triangular ``l``."""
    l = np.asarray(l, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if l.ndim != 2 or l.shape[0] != l.shape[1]:
        raise ShapeMismatch(f"tri_solve expects a square factor, got shape {l.shape}")
    if b.shape[0] != l.shape[0]:
        raise ShapeMismatch(f"tri_solve: factor {l.shape} incompatible with rhs {b.shape}")
    zeros = np.flatnonzero(np.diag(l) == 0.0)
    if zeros.size:
        raise SingularTriangular(int(zeros[0]))
    return linalg.solve_triangular(l, b, lower=True, trans=1 if transpose else 0)


def lgamma(x: Union[float, NDArray[np.float64]]) -> Union[float, NDArray[np.float64]]:
    """log Gamma(x) for x > 0."""
    x_arr = np.asarray(x, dtype=np.float64)
    if np.any(x_arr <= 0):
        raise DomainError(f"lgamma is defined for x > 0, got {x}")
    out = special.gammaln(x_arr)
    return float(out) if out.ndim == 0 else out


def log_multigamma(p: int, a: float) -> float:
    """log of the multivariate Gamma function Gamma_p(a)."""
    if p < 1:
        raise DomainError(f"log_multigamma needs p >= 1, got {p}")
    args = a - 0.5 * np.arange(p)
    if np.any(args <= 0):
        raise DomainError(f"log_multigamma needs a > (p - 1) / 2, got p={p}, a={a}")
    return float(0.25 * p * (p - 1) * np.log(np.pi) + np.sum(special.gammaln(args)))


def reg_inc_gamma(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if np.any(np.asarray(a) <= 0) or np.any(np.asarray(x) < 0):
        raise DomainError(f"reg_inc_gamma needs a > 0 and x >= 0, got a={a}, x={x}")
    out = special.gammainc(a, x)
    return float(out) if np.ndim(out) == 0 else out


class RngStream:
    """
    Counter-based random stream (Philox) keyed by ``(seed, stream_id)``.

    Identical keys replay bit-identical draws on every platform. ``split``
    derives a child key, so child streams never share a counter sequence.
    A stream has a single owner; parallel work takes its own ``split``.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.random.SeedSequence([self.seed, self.stream_id]).generate_state(2, dtype=np.uint64)
        self._bit_generator = np.random.Philox(key=key)
        self._generator = np.random.Generator(self._bit_generator)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"

    @property
    def counter(self) -> int:
        return int(self._bit_generator.state["state"]["counter"][0])

    def split(self, index: int) -> "RngStream":
        child_id = np.random.SeedSequence([self.seed, self.stream_id, int(index)]).generate_state(
            1, dtype=np.uint64)[0]
        return RngStream(self.seed, int(child_id))

    def normal(self, size: Optional[Union[int, Sequence[int]]] = None) -> NDArray[np.float64]:
        return self._generator.standard_normal(size)

    def uniform(self, size: Optional[Union[int, Sequence[int]]] = None) -> NDArray[np.float64]:
        """Uniform draws on the open interval (0, 1)."""
        u = self._generator.random(size)
        return np.clip(u, 2.0 ** -60, 1.0 - 2.0 ** -53)

    def chisquare(self, df: Union[float, NDArray[np.float64]],
                  size: Optional[Union[int, Sequence[int]]] = None) -> NDArray[np.float64]:
        return self._generator.chisquare(df, size)

    def permutation(self, n: int) -> NDArray[np.int64]:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> NDArray[np.int64]:
        return self._generator.choice(n, size=size, replace=replace)

    def orthogonal(self, n: int) -> NDArray[np.float64]:
        """Haar-distributed orthogonal n x n matrix."""
        q, r = np.linalg.qr(self.normal((n, n)))
        return q * np.sign(np.diag(r))
