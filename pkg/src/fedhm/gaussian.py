"""Gaussian algebra in natural parameters plus positive-definite helpers.

A Gaussian with mean ``mu`` and covariance ``Sigma`` is stored through its
natural parameters ``r = Sigma^{-1} mu`` and ``Q = Sigma^{-1}``.  Products and
quotients of densities then reduce to sums and differences of ``(r, Q)``.
Quotients may produce an indefinite ``Q``; such *improper* values are kept as
first-class objects and only :meth:`NaturalGaussian.to_moments` insists on
properness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

__all__ = [
    "ImproperDensityError",
    "SingularMatrixError",
    "NaturalGaussian",
    "MomentGaussian",
    "MatrixNormalSpec",
    "gaussian_product",
    "gaussian_quotient",
    "to_moments",
    "from_moments",
    "properness_threshold",
    "sqrtm_psd",
    "sample_matrix_normal",
    "random_pd",
    "nearest_jitter_pd",
]

SYMMETRY_RTOL = 1e-10


class ImproperDensityError(ValueError):
    """Raised when a moment conversion meets a non positive-definite precision."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when jitter repair cannot make a matrix positive definite."""


def _check_symmetric(m: np.ndarray, name: str) -> None:
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if not np.allclose(m, m.T, rtol=0.0, atol=SYMMETRY_RTOL * scale):
        raise ValueError(f"{name} is not symmetric")


def properness_threshold(Q: np.ndarray) -> float:
    """Smallest admissible eigenvalue of a precision matrix ``Q``."""
    diag = np.abs(np.diag(Q))
    return 1e-10 * (1.0 + (float(diag.max()) if diag.size else 0.0))


@dataclass(frozen=True)
class NaturalGaussian:
    """Gaussian (possibly improper) in natural parameters ``(r, Q)``."""

    r: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        r = np.array(self.r, dtype=float).reshape(-1)
        Q = np.array(self.Q, dtype=float)
        if Q.ndim == 0:
            Q = Q.reshape(1, 1)
        if Q.shape != (r.size, r.size):
            raise ValueError(
                f"Q has shape {Q.shape} but r has length {r.size}"
            )
        _check_symmetric(Q, "Q")
        Q = 0.5 * (Q + Q.T)
        r.setflags(write=False)
        Q.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "Q", Q)

    @property
    def dim(self) -> int:
        return self.r.size

    @classmethod
    def zeros(cls, dim: int) -> "NaturalGaussian":
        """Improper uniform density (the identity of the product)."""
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    @classmethod
    def from_moments(cls, mu, sigma) -> "NaturalGaussian":
        return from_moments(MomentGaussian(mu, sigma))

    def min_eigenvalue(self) -> float:
        if self.dim == 0:
            return np.inf
        return float(np.linalg.eigvalsh(self.Q)[0])

    def is_proper(self) -> bool:
        return self.min_eigenvalue() > properness_threshold(self.Q)

    def to_moments(self) -> "MomentGaussian":
        return to_moments(self)

    def __mul__(self, other: "NaturalGaussian") -> "NaturalGaussian":
        return gaussian_product(self, other)

    def __truediv__(self, other: "NaturalGaussian") -> "NaturalGaussian":
        return gaussian_quotient(self, other)

    def scaled(self, c: float) -> "NaturalGaussian":
        """The density raised to the power ``c`` (natural parameters times c)."""
        return NaturalGaussian(c * self.r, c * self.Q)

    def logpdf(self, x) -> np.ndarray:
        """Normalized log density at rows of ``x``; requires properness."""
        return self.to_moments().logpdf(x)

    def allclose(self, other: "NaturalGaussian", atol: float = 1e-12) -> bool:
        return (
            self.dim == other.dim
            and np.allclose(self.r, other.r, rtol=0, atol=atol)
            and np.allclose(self.Q, other.Q, rtol=0, atol=atol)
        )


@dataclass(frozen=True)
class MomentGaussian:
    """Proper Gaussian in moment form."""

    mu: np.ndarray
    sigma: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        sigma = np.array(self.sigma, dtype=float)
        if sigma.ndim == 0:
            sigma = sigma.reshape(1, 1)
        if sigma.shape != (mu.size, mu.size):
            raise ValueError(
                f"sigma has shape {sigma.shape} but mu has length {mu.size}"
            )
        _check_symmetric(sigma, "sigma")
        sigma = 0.5 * (sigma + sigma.T)
        try:
            chol = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            w = np.linalg.eigvalsh(sigma)[0]
            raise ImproperDensityError(
                f"covariance is not positive definite (smallest eigenvalue {w:.3e})"
            ) from None
        for a in (mu, sigma, chol):
            a.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.mu.size

    def logpdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = linalg.solve_triangular(self._chol, (x - self.mu).T, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        return -0.5 * (np.sum(z * z, axis=0) + logdet + self.dim * np.log(2 * np.pi))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mu + z @ self._chol.T


def _check_dims(a: NaturalGaussian, b: NaturalGaussian) -> None:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def gaussian_product(a: NaturalGaussian, b: NaturalGaussian) -> NaturalGaussian:
    """Unnormalized density product ``a * b``."""
    _check_dims(a, b)
    return NaturalGaussian(a.r + b.r, a.Q + b.Q)


def gaussian_quotient(a: NaturalGaussian, b: NaturalGaussian) -> NaturalGaussian:
    """Unnormalized density quotient ``a / b``; may be improper."""
    _check_dims(a, b)
    return NaturalGaussian(a.r - b.r, a.Q - b.Q)


def to_moments(g: NaturalGaussian) -> MomentGaussian:
    w = g.min_eigenvalue()
    if not w > properness_threshold(g.Q):
        raise ImproperDensityError(
            f"improper density: smallest precision eigenvalue {w:.3e}"
        )
    c = linalg.cho_factor(g.Q, lower=True)
    sigma = linalg.cho_solve(c, np.eye(g.dim))
    mu = linalg.cho_solve(c, g.r)
    return MomentGaussian(mu, 0.5 * (sigma + sigma.T))


def from_moments(m: MomentGaussian) -> NaturalGaussian:
    c = linalg.cho_factor(m.sigma, lower=True)
    Q = linalg.cho_solve(c, np.eye(m.dim))
    return NaturalGaussian(linalg.cho_solve(c, m.mu), 0.5 * (Q + Q.T))


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues within rounding noise of zero (relative to the largest) are
    set to zero before the square root, so singular inputs such as a
    rank-deficient ``Theta.T @ Theta`` keep their rank.
    """
    w, V = np.linalg.eigh(0.5 * (m + m.T))
    tol = w.size * np.finfo(float).eps * max(float(np.max(np.abs(w))), 0.0) if w.size else 0.0
    w = np.where(w > tol, w, 0.0)
    return (V * np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class MatrixNormalSpec:
    """Matrix normal ``MN(mean, rowCov, colCov)`` for a ``d x K`` matrix."""

    mean: np.ndarray
    row_cov: np.ndarray
    col_cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_2d(np.asarray(self.mean, dtype=float))
        A = np.atleast_2d(np.asarray(self.row_cov, dtype=float))
        B = np.atleast_2d(np.asarray(self.col_cov, dtype=float))
        d, K = mean.shape
        if A.shape != (d, d) or B.shape != (K, K):
            raise ValueError(
                f"covariances {A.shape}, {B.shape} do not fit a {d}x{K} mean"
            )
        for name, m in (("row_cov", A), ("col_cov", B)):
            _check_symmetric(m, name)
            if np.linalg.eigvalsh(m)[0] <= 0:
                raise ValueError(f"{name} is not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "row_cov", A)
        object.__setattr__(self, "col_cov", B)


def sample_matrix_normal(spec: MatrixNormalSpec, seed) -> np.ndarray:
    """Draw ``M + A^{1/2} Z B^{1/2}`` with i.i.d. standard normal ``Z``.

    ``seed`` is an integer or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    Z = rng.standard_normal(spec.mean.shape)
    return spec.mean + sqrtm_psd(spec.row_cov) @ Z @ sqrtm_psd(spec.col_cov)


def random_pd(n: int, seed, low: float = 0.1, high: float = 1.0) -> np.ndarray:
    """Random symmetric PD matrix with eigenvalues uniform in ``[low, high]``.

    Eigenvalues are rotated by a Haar-distributed orthogonal matrix, in the
    spirit of the "eigen" method of R's ``clusterGeneration``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ev = rng.uniform(low, high, size=n)
    G = rng.standard_normal((n, n))
    Qm, R = np.linalg.qr(G)
    Qm = Qm * np.sign(np.diag(R))
    m = (Qm * ev) @ Qm.T
    return 0.5 * (m + m.T)


def nearest_jitter_pd(m: np.ndarray, jitter: float = 1e-8, max_doublings: int = 20) -> np.ndarray:
    """Add ``jitter * I`` (doubling each attempt) until Cholesky succeeds.

    An already positive-definite input still receives the first jitter.
    """
    m = np.asarray(m, dtype=float)
    _check_symmetric(m, "matrix")
    eye = np.eye(m.shape[0])
    j = jitter
    for _ in range(max_doublings + 1):
        out = m + j * eye
        try:
            np.linalg.cholesky(out)
            return out
        except np.linalg.LinAlgError:
            j *= 2.0
    raise SingularMatrixError(
        f"irrecoverably singular: Cholesky failed after {max_doublings} jitter doublings"
    )
