"""Dense symmetric/PSD matrix kernel.

Everything downstream (ambiguity sets, the stage SDP, the filters) works with
small dense covariance matrices, so this module keeps the primitives simple:
eigendecomposition-based square roots, the Bures and Gelbrich distances
between Gaussians, Schur-complement PSD tests, and Gaussian sampling.

All wrapper types are immutable after construction; the functions here are
pure and safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, NumericInputError

# Module-level tolerance defaults; callers may override per operation.
PSD_TOL = 1e-9        # negative-eigenvalue tolerance, relative to spectral norm
SQRT_RTOL = 1e-10     # relative round-trip error budget for matrix_sqrt


def symmetrize(a):
    """Return the symmetric part 0.5*(A + A^T) of a square array."""
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + a.T)


def _as_readonly(a):
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SymMatrix:
    """Exactly symmetric square matrix.

    Construction rejects asymmetric input; use :func:`symmetrize` first when
    handing over a numerically almost-symmetric product.
    """

    values: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.values, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatchError(f"expected a square matrix, got shape {a.shape}")
        if a.shape[0] < 1:
            raise DimensionMismatchError("matrix dimension must be >= 1")
        if not np.all(np.isfinite(a)):
            raise NumericInputError("matrix entries must be finite")
        if not np.array_equal(a, a.T):
            raise NumericInputError("matrix must be exactly symmetric; call symmetrize() first")
        object.__setattr__(self, "values", _as_readonly(a))

    @property
    def dim(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class PsdMatrix:
    """PSD matrix with eigenvalue clamping applied at construction.

    Eigenvalues in ``[-tol, eig_floor)`` with ``tol = PSD_TOL * spectral_norm``
    are clamped up to ``eig_floor``; anything more negative is an error, since
    it indicates a genuinely indefinite input rather than round-off.
    """

    base: SymMatrix
    eig_floor: float = 0.0
    _clamped: np.ndarray = field(init=False, repr=False, compare=False)
    _eigvals: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.eig_floor < 0:
            raise NumericInputError("eig_floor must be nonnegative")
        w, v = np.linalg.eigh(self.base.values)
        spectral = float(np.max(np.abs(w))) if w.size else 0.0
        tol = PSD_TOL * max(spectral, 1.0)
        if w[0] < -tol:
            raise NumericInputError(
                f"matrix is not PSD: min eigenvalue {w[0]:.3e} below -{tol:.3e}"
            )
        w_cl = np.maximum(w, self.eig_floor)
        if np.all(w_cl == w):
            a = self.base.values
        else:
            a = symmetrize(v @ (w_cl[:, None] * v.T))
        object.__setattr__(self, "_clamped", _as_readonly(a))
        object.__setattr__(self, "_eigvals", _as_readonly(w_cl))

    @classmethod
    def from_array(cls, a, eig_floor=0.0):
        """Build from an array, symmetrizing numerical round-off first."""
        return cls(SymMatrix(symmetrize(a)), eig_floor)

    @property
    def values(self):
        return self._clamped

    @property
    def dim(self):
        return self.base.dim

    @property
    def eigvals(self):
        return self._eigvals

    def min_eig(self):
        return float(self._eigvals[0])

    def trace(self):
        return float(np.trace(self._clamped))


@dataclass(frozen=True)
class GaussianLaw:
    """Gaussian distribution given by mean vector and PSD covariance."""

    mean: np.ndarray
    cov: PsdMatrix

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=float).reshape(-1)
        if not np.all(np.isfinite(m)):
            raise NumericInputError("mean entries must be finite")
        if m.shape[0] != self.cov.dim:
            raise DimensionMismatchError(
                f"mean length {m.shape[0]} != covariance dim {self.cov.dim}"
            )
        object.__setattr__(self, "mean", _as_readonly(m))

    @property
    def dim(self):
        return self.cov.dim


def sqrtm_psd(a):
    """Symmetric PSD square root of a raw ndarray (clips tiny negatives)."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NumericInputError("matrix entries must be finite")
    w, v = np.linalg.eigh(a)
    w = np.clip(w, 0.0, None)
    return symmetrize(v @ (np.sqrt(w)[:, None] * v.T))


def matrix_sqrt(a: PsdMatrix) -> PsdMatrix:
    """Symmetric PSD square root, r @ r == a to ~1e-10 relative Frobenius."""
    r = sqrtm_psd(a.values)
    return PsdMatrix.from_array(r)


def _bures_squared(a, b):
    """Squared Bures distance between raw PSD arrays (clamped at 0)."""
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if np.array_equal(a, b):
        return 0.0
    rb = sqrtm_psd(b)
    cross = np.linalg.eigvalsh(rb @ a @ rb)
    cross_tr = float(np.sum(np.sqrt(np.clip(cross, 0.0, None))))
    val = float(np.trace(a) + np.trace(b)) - 2.0 * cross_tr
    return max(val, 0.0)


def bures_distance(a: PsdMatrix, b: PsdMatrix) -> float:
    """Bures distance sqrt(Tr a + Tr b - 2 Tr (b^1/2 a b^1/2)^1/2)."""
    return float(np.sqrt(_bures_squared(a.values, b.values)))


def gelbrich_distance(p: GaussianLaw, q: GaussianLaw) -> float:
    """Gaussian 2-Wasserstein distance: mean gap plus Bures term."""
    if p.dim != q.dim:
        raise DimensionMismatchError(f"dimension mismatch: {p.dim} vs {q.dim}")
    dm = float(np.dot(p.mean - q.mean, p.mean - q.mean))
    return float(np.sqrt(dm + _bures_squared(p.cov.values, q.cov.values)))


def schur_psd_check(block_11: SymMatrix, block_12, block_22: SymMatrix, tol: float) -> bool:
    """True iff the assembled 2x2 block matrix has min eigenvalue >= -tol."""
    b12 = np.asarray(block_12, dtype=float)
    if b12.ndim == 1:
        b12 = b12.reshape(block_11.dim, -1)
    if b12.shape != (block_11.dim, block_22.dim):
        raise DimensionMismatchError(
            f"off-diagonal block {b12.shape} does not conform to "
            f"({block_11.dim}, {block_22.dim})"
        )
    top = np.hstack([block_11.values, b12])
    bot = np.hstack([b12.T, block_22.values])
    assembled = np.vstack([top, bot])
    return bool(np.linalg.eigvalsh(assembled)[0] >= -tol)


def sample_gaussian(law: GaussianLaw, rng: np.random.Generator) -> np.ndarray:
    """Draw one sample mean + cov^1/2 z with z standard normal from rng."""
    z = rng.standard_normal(law.dim)
    return law.mean + sqrtm_psd(law.cov.values) @ z
