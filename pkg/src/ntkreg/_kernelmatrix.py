"""Container for symmetric PSD Gram matrices with cached spectral statistics.

Lives in its own module (re-exported by ``kernel``) so that the kernel cache
I/O in ``data`` can construct instances without a circular import.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

# Tolerances for the structural checks every kernel matrix must pass.
SYMMETRY_RTOL = 1e-10
PSD_RTOL = 1e-8


def _power_iteration(values: np.ndarray, tol: float = 1e-13, max_iter: int = 2000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix, deterministic start vector."""
    n = values.shape[0]
    # Non-uniform start avoids pathological orthogonality to the top eigenvector.
    v = 1.0 + 0.01 * np.cos(np.arange(n, dtype=np.float64))
    v /= np.linalg.norm(v)
    estimate = 0.0
    for _ in range(max_iter):
        w = values @ v
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0
        new_estimate = float(v @ w)
        v = w / norm_w
        if abs(new_estimate - estimate) <= tol * max(abs(new_estimate), 1.0):
            estimate = new_estimate
            break
        estimate = new_estimate
    return abs(estimate)


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    """An n-by-n Gram matrix together with its trace and spectral norm.

    Instances are built through :meth:`from_values`, which verifies symmetry
    (max |K_ij - K_ji| <= 1e-10 * max|K|) and positive semidefiniteness up to
    tolerance (lambda_min >= -1e-8 * tr/n).
    """

    values: np.ndarray
    trace: float
    op_norm: float
    min_eig: float

    @classmethod
    def from_values(cls, values) -> "KernelMatrix":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValidationError(f"kernel matrix must be square, got shape {values.shape}")
        n = values.shape[0]
        if not np.all(np.isfinite(values)):
            raise ValidationError("kernel matrix contains non-finite entries")
        trace = float(np.trace(values))
        scale = max(float(np.max(np.abs(values))), np.finfo(np.float64).tiny)
        asym = float(np.max(np.abs(values - values.T)))
        if asym > SYMMETRY_RTOL * scale:
            raise ValidationError(
                f"kernel matrix is not symmetric: max|K - K^T| = {asym:.3e} "
                f"exceeds {SYMMETRY_RTOL:.0e} * max|K| = {SYMMETRY_RTOL * scale:.3e}"
            )
        min_eig = float(np.linalg.eigvalsh(values)[0])
        if min_eig < -PSD_RTOL * max(trace, 0.0) / n:
            raise ValidationError(
                f"kernel matrix is not PSD within tolerance: lambda_min = {min_eig:.3e}"
            )
        op_norm = _power_iteration(values)
        return cls(values=values, trace=trace, op_norm=op_norm, min_eig=min_eig)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def mirror_upper(values: np.ndarray) -> np.ndarray:
    """Copy the upper triangle onto the lower one, enforcing exact symmetry."""
    upper = np.triu(values)
    return upper + np.triu(values, 1).T
