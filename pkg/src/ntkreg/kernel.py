"""Tangent kernels for fully-connected ReLU networks.

Two routes to the same object:

* ``empirical_ntk`` builds the Gram matrix of per-example parameter
  gradients at initialization, K_ij = <phi(x_i), phi(x_j)> with
  phi(x) = grad_theta f(theta(0), x); it concentrates around the
  infinite-width limit at rate O(width^-1/2).

* ``analytic_ntk`` evaluates that limit directly for unit-norm inputs via
  the arc-cosine recursion. With u = x_i . x_j,

      k0(u) = (pi - arccos u) / pi
      k1(u) = (u (pi - arccos u) + sqrt(1 - u^2)) / pi
      S_0 = u,  T_0 = S_0
      S_h = k1(S_{h-1}),  T_h = T_{h-1} k0(S_{h-1}) + S_h

  and the depth-L kernel is T_{L-1}. For unit-norm inputs the diagonal is
  exactly L.

Cosines are clamped to [-1, 1] with a 1e-12 tolerance (values within 1e-12
of +-1 are snapped, so duplicated rows and self-queries hit the endpoint
identities exactly); anything further out is an error.
"""

import numpy as np

from ._kernelmatrix import KernelMatrix, mirror_upper
from .data import DataSet
from .errors import ValidationError
from .net import MLP, gradient_factors

COS_CLAMP_TOL = 1e-12
UNIT_NORM_TOL = 1e-8


def arccos_kernel0(u):
    """Degree-0 arc-cosine kernel: expected product of ReLU derivatives."""
    u = np.asarray(u, dtype=np.float64)
    return (np.pi - np.arccos(u)) / np.pi


def arccos_kernel1(u):
    """Degree-1 arc-cosine kernel: 2 E[relu(a) relu(b)] for unit correlated Gaussians."""
    u = np.asarray(u, dtype=np.float64)
    return (u * (np.pi - np.arccos(u)) + np.sqrt(np.maximum(1.0 - u * u, 0.0))) / np.pi


def _clean_cosines(u: np.ndarray) -> np.ndarray:
    worst = float(np.max(np.abs(u))) if u.size else 0.0
    if worst > 1.0 + COS_CLAMP_TOL:
        raise ValidationError(
            f"cosine {worst!r} exceeds 1 + {COS_CLAMP_TOL:.0e}; inputs are not unit-norm"
        )
    u = np.clip(u, -1.0, 1.0)
    u = np.where(u > 1.0 - COS_CLAMP_TOL, 1.0, u)
    u = np.where(u < -1.0 + COS_CLAMP_TOL, -1.0, u)
    return u


def _require_unit_rows(x: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(x, axis=1)
    worst = float(np.max(np.abs(norms - 1.0)))
    if worst > UNIT_NORM_TOL:
        raise ValidationError(
            f"{what} must have unit-norm rows for the analytic kernel "
            f"(worst |norm - 1| = {worst:.3e})"
        )


def _analytic_recursion(u: np.ndarray, depth: int) -> np.ndarray:
    s = u
    t = u.copy()
    for _ in range(depth - 1):
        k0 = arccos_kernel0(s)
        s = arccos_kernel1(s)
        t = t * k0 + s
    return t


def analytic_ntk(depth: int, data: DataSet) -> KernelMatrix:
    """Infinite-width tangent kernel matrix for a depth-``depth`` ReLU network."""
    if depth < 2:
        raise ValidationError(f"depth must be >= 2, got {depth}")
    x = data.inputs
    _require_unit_rows(x, "inputs")
    u = mirror_upper(x @ x.T)
    u = _clean_cosines(u)
    # Unit-norm rows make the true diagonal exactly 1; snap away the fp dot noise.
    np.fill_diagonal(u, 1.0)
    return KernelMatrix.from_values(_analytic_recursion(u, depth))


def analytic_ntk_cross(depth: int, queries: np.ndarray, data: DataSet) -> np.ndarray:
    if depth < 2:
        raise ValidationError(f"depth must be >= 2, got {depth}")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != data.d:
        raise ValidationError(f"query dimension {queries.shape[1]} != data dimension {data.d}")
    _require_unit_rows(data.inputs, "inputs")
    _require_unit_rows(queries, "queries")
    u = _clean_cosines(queries @ data.inputs.T)
    return _analytic_recursion(u, depth)


def _factor_gram(factors_a, factors_b=None) -> np.ndarray:
    """Sum over layers of (Da Db^T) * (Ia Ib^T); equals Za Zb^T exactly in algebra."""
    if factors_b is None:
        factors_b = factors_a
    total = None
    for (da, ia), (db, ib) in zip(factors_a, factors_b):
        block = (da @ db.T) * (ia @ ib.T)
        total = block if total is None else total + block
    return total


def empirical_ntk(mlp: MLP, data: DataSet) -> KernelMatrix:
    """Gram matrix of parameter gradients at initialization (output 0).

    Multi-output networks share one tangent kernel across outputs, so only
    the first output's gradients are used. Entries are assembled layer by
    layer and the upper triangle is mirrored, enforcing exact symmetry.
    """
    factors = gradient_factors(mlp, data.inputs, output_index=0, at_init=True)
    values = mirror_upper(_factor_gram(factors))
    return KernelMatrix.from_values(values)


def empirical_ntk_cross(mlp: MLP, queries: np.ndarray, data: DataSet) -> np.ndarray:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    factors_q = gradient_factors(mlp, queries, output_index=0, at_init=True)
    factors_t = gradient_factors(mlp, data.inputs, output_index=0, at_init=True)
    return _factor_gram(factors_q, factors_t)


class AnalyticNTK:
    """Kernel source backed by the infinite-width recursion."""

    kind = "analytic"

    def __init__(self, depth: int):
        if depth < 2:
            raise ValidationError(f"depth must be >= 2, got {depth}")
        self.depth = depth

    def gram(self, data: DataSet) -> KernelMatrix:
        return analytic_ntk(self.depth, data)

    def cross(self, queries, data: DataSet) -> np.ndarray:
        return analytic_ntk_cross(self.depth, queries, data)


class EmpiricalNTK:
    """Kernel source backed by a finite-width network's gradients at init."""

    kind = "empirical"

    def __init__(self, mlp: MLP):
        self.mlp = mlp

    def gram(self, data: DataSet) -> KernelMatrix:
        return empirical_ntk(self.mlp, data)

    def cross(self, queries, data: DataSet) -> np.ndarray:
        return empirical_ntk_cross(self.mlp, queries, data)


def as_kernel_source(source):
    """Accept an MLP, an integer depth, or an existing kernel source."""
    if isinstance(source, (AnalyticNTK, EmpiricalNTK)):
        return source
    if isinstance(source, MLP):
        return EmpiricalNTK(source)
    if isinstance(source, (int, np.integer)):
        return AnalyticNTK(int(source))
    raise ValidationError(f"cannot interpret {type(source).__name__} as a kernel source")


def kernel_cross(source, x, data: DataSet) -> np.ndarray:
    """Vector k(x, X) (or matrix for a batch of queries) under ``source``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    values = as_kernel_source(source).cross(x, data)
    return values[0] if single else values
