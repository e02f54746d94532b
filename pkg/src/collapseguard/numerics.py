"""Small dense linear algebra and seeded randomness used everywhere else.

Vectors and symmetric matrices are plain float64 numpy arrays; the helpers
here only validate and compute, they never mutate their inputs. Randomness
flows through :class:`RngState`, a (seed, stream) pair backed by the Philox
counter-based generator, so any consumer can derive independent substreams
from its own state without coordination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputValidationError

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def as_vector(x, dim: int | None = None, name: str = "vector") -> np.ndarray:
    """Validate and return a finite 1-d float64 array."""
    v = np.asarray(x, dtype=float)
    if v.ndim != 1:
        raise InputValidationError(f"{name} must be 1-dimensional, got shape {v.shape}")
    if v.shape[0] == 0:
        raise InputValidationError(f"{name} must be non-empty")
    if not np.all(np.isfinite(v)):
        raise InputValidationError(f"{name} must be finite")
    if dim is not None and v.shape[0] != dim:
        raise InputValidationError(f"{name} must have dimension {dim}, got {v.shape[0]}")
    return v


def as_symmetric_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate and return a finite, exactly symmetric square float64 array."""
    a = np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputValidationError(f"{name} must be square, got shape {a.shape}")
    if a.shape[0] == 0:
        raise InputValidationError(f"{name} must be non-empty")
    if not np.all(np.isfinite(a)):
        raise InputValidationError(f"{name} must be finite")
    if not np.array_equal(a, a.T):
        raise InputValidationError(f"{name} must be symmetric (entry [i,j] == entry [j,i])")
    return a


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Average a nearly-symmetric matrix with its transpose, exactly symmetric result."""
    return (m + m.T) / 2.0


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------


def _splitmix64(z: int) -> int:
    z = z & _MASK64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return (z ^ (z >> 31)) & _MASK64


@dataclass(frozen=True)
class RngState:
    """Immutable (seed, stream) label for a Philox random stream.

    Identical states replay identical draw sequences. ``derive`` maps an
    integer index to a fresh, statistically independent stream, so callers
    can hand one state per trial (or per generation) to parallel work
    without any shared cursor.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        for field_name, value in (("seed", self.seed), ("stream", self.stream)):
            if not isinstance(value, (int, np.integer)):
                raise InputValidationError(f"{field_name} must be an integer")
            if not 0 <= int(value) <= _MASK64:
                raise InputValidationError(f"{field_name} must fit in 64 unsigned bits")

    def derive(self, index: int) -> "RngState":
        """Return the ``index``-th child stream of this state."""
        if index < 0:
            raise InputValidationError("derive index must be nonnegative")
        mixed = _splitmix64(self.stream ^ _splitmix64((index + _SPLITMIX_GAMMA) & _MASK64))
        return RngState(self.seed, mixed)

    def generator(self) -> np.random.Generator:
        """Fresh numpy Generator positioned at the start of this stream."""
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def as_generator(rng) -> np.random.Generator:
    """Accept an RngState or an already-open Generator and return a Generator."""
    if isinstance(rng, RngState):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise InputValidationError(f"rng must be an RngState or numpy Generator, got {type(rng)!r}")


# ---------------------------------------------------------------------------
# Symmetric eigenproblems
# ---------------------------------------------------------------------------


def sym_eig(m, max_sweeps: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Parameters
    ----------
    m : array_like
        Symmetric square matrix (validated).
    max_sweeps : int
        Safety cap on full sweeps; the rotation set always converges for
        the small dimensions used here long before this limit.

    Returns
    -------
    (eigenvalues, eigenvectors)
        Eigenvalues ascending; eigenvectors as orthonormal columns, so
        ``Q @ diag(w) @ Q.T`` reconstructs ``m``.
    """
    a = as_symmetric_matrix(m)
    d = a.shape[0]
    if d == 1:
        return a[0, :1].copy(), np.ones((1, 1))

    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        return np.zeros(d), np.eye(d)

    work = a.copy()
    vecs = np.eye(d)
    stop = 1e-14 * scale
    for _ in range(max_sweeps):
        off = work - np.diag(np.diag(work))
        if float(np.max(np.abs(off))) <= stop:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = work[p, q]
                if abs(apq) <= 1e-18 * scale:
                    continue
                tau = (work[q, q] - work[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c

                app, aqq = work[p, p], work[q, q]
                row_p = work[p, :].copy()
                row_q = work[q, :].copy()
                work[p, :] = c * row_p - s * row_q
                work[q, :] = s * row_p + c * row_q
                col_p = work[:, p].copy()
                col_q = work[:, q].copy()
                work[:, p] = c * col_p - s * col_q
                work[:, q] = s * col_p + c * col_q
                work[p, p] = app - t * apq
                work[q, q] = aqq + t * apq
                work[p, q] = 0.0
                work[q, p] = 0.0

                vec_p = vecs[:, p].copy()
                vec_q = vecs[:, q].copy()
                vecs[:, p] = c * vec_p - s * vec_q
                vecs[:, q] = s * vec_p + c * vec_q

    values = np.diag(work).copy()
    order = np.argsort(values, kind="stable")
    return values[order], vecs[:, order]


def quad_form(m, v) -> float:
    """The scalar v' m v, validated for matching dimensions."""
    a = as_symmetric_matrix(m)
    x = as_vector(v, dim=a.shape[0])
    return float(x @ (a @ x))


def is_spd(m, tol: float = 1e-12) -> bool:
    """True when every eigenvalue of the symmetric matrix exceeds ``tol``."""
    values, _ = sym_eig(m)
    return bool(values[0] > tol)


def gaussian_sample(rng, mean, covariance) -> np.ndarray:
    """One multivariate normal draw.

    The zero matrix returns the mean exactly, identity covariance short-
    circuits to per-coordinate standard normals, and anything else goes
    through a Cholesky factor. Indefinite covariance is rejected.
    """
    mu = as_vector(mean, name="mean")
    cov = as_symmetric_matrix(covariance, name="covariance")
    d = mu.shape[0]
    if cov.shape[0] != d:
        raise InputValidationError(
            f"covariance dimension {cov.shape[0]} does not match mean dimension {d}"
        )
    if not cov.any():
        return mu.copy()
    gen = as_generator(rng)
    if np.array_equal(cov, np.eye(d)):
        return mu + gen.standard_normal(d)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise InputValidationError("covariance must be positive definite or exactly zero") from exc
    return mu + chol @ gen.standard_normal(d)
