"""Gradient descent on the linearized objectives and their closed-form limit.

Around the initialization theta0 the network is replaced by its tangent
model f(theta, x) ~= phi(x)^T (theta - theta0). Both regularized objectives,

    distance-to-init:  1/2 sum_i (phi_i^T d - y_i)^2 + lam^2/2 ||d||^2
    auxiliary:         1/2 sum_i (phi_i^T d + lam b_i - y_i)^2,  b(0) = 0

(with d = theta - theta0) produce *identical* gradient-descent iterates for
every step and learning rate, and both converge to the kernel ridge
solution theta* = theta0 + Z (K + lam^2 I)^-1 y when
eta <= 1/(||K|| + lam^2).

Displacements always live in the span of the feature columns Z, so
trajectories are stored as span coefficients a(t) with
theta(t) = theta0 + Z a(t); all norms are evaluated through quadratic forms
with K = Z^T Z, which keeps the iteration O(n^2) regardless of the
parameter count.
"""

from dataclasses import dataclass

import numpy as np

from ._kernelmatrix import KernelMatrix
from .data import DataSet
from .errors import DivergenceError, TrickViolationError, ValidationError
from .kernel import empirical_ntk, kernel_cross
from .krr import PSDSolver
from .net import MLP, forward, gradients_matrix

INIT_OUTPUT_TOL = 1e-8
DIVERGENCE_LIMIT = 1e12
EQUIVALENCE_TOL = 1e-10

KIND_RDI = "rdi"
KIND_AUX = "aux"


@dataclass(eq=False)
class LinearizedModel:
    """Tangent features of an MLP at initialization.

    ``Z`` holds one feature column phi(x_i) per training example, ``theta0``
    the flattened trainable initialization, and ``K`` the Gram matrix
    Z^T Z (assembled by the same layerwise reduction as ``empirical_ntk``).
    ``mlp``/``data`` stay attached for held-out prediction.
    """

    Z: np.ndarray
    theta0: np.ndarray
    K: KernelMatrix
    mlp: MLP = None
    data: DataSet = None

    @property
    def n(self) -> int:
        return self.Z.shape[1]

    def default_eta(self, lam: float) -> float:
        """Largest certified step size, 1/(||K|| + lam^2)."""
        return 1.0 / (self.K.op_norm + lam * lam)

    def theta_at(self, coeffs: np.ndarray) -> np.ndarray:
        return self.theta0 + self.Z @ coeffs

    def predict(self, coeffs: np.ndarray, queries) -> np.ndarray:
        """Tangent-model prediction phi(x)^T Z a = k(x, X)^T a."""
        if self.mlp is None or self.data is None:
            raise ValidationError("linearized model has no MLP attached; cannot predict")
        cross = kernel_cross(self.mlp, queries, self.data)
        return cross @ coeffs


def linearize(mlp: MLP, data: DataSet) -> LinearizedModel:
    """Extract tangent features; requires an exactly-zero initial output.

    The Gram matrix is taken from ``empirical_ntk`` (identical reduction
    order) and cross-checked against Z^T Z at 1e-10 relative tolerance.
    """
    if not mlp.config.difference_trick:
        raise ValidationError("linearize requires a difference-trick network")
    init_out = np.atleast_2d(forward(mlp, data.inputs))
    worst = float(np.max(np.abs(init_out)))
    if worst > INIT_OUTPUT_TOL:
        raise TrickViolationError(
            f"initial output magnitude {worst:.3e} exceeds {INIT_OUTPUT_TOL:.0e}"
        )
    z = gradients_matrix(mlp, data.inputs, output_index=0, at_init=True).T
    k = empirical_ntk(mlp, data)
    gram = z.T @ z
    scale = max(float(np.max(np.abs(k.values))), np.finfo(np.float64).tiny)
    mismatch = float(np.max(np.abs(gram - k.values)))
    if mismatch > 1e-10 * scale:
        raise ValidationError(
            f"Z^T Z deviates from the kernel matrix by {mismatch:.3e} (> 1e-10 relative)"
        )
    theta0 = np.concatenate(
        [
            branch[l].ravel()
            for branch in mlp.params0
            for l in mlp.config.trainable_layers
        ]
    )
    return LinearizedModel(Z=z, theta0=theta0, K=k, mlp=mlp, data=data)


@dataclass(eq=False)
class LinTrajectory:
    """Iterates of one linearized run, stored as span coefficients.

    ``coeffs[t]`` gives theta(t) = theta0 + Z coeffs[t]; ``aux`` holds b(t)
    for auxiliary runs. ``identity_gap`` tracks the representation identity
    theta(t) - theta0 = Z b(t)/lam, which auxiliary gradient descent
    maintains for free.
    """

    kind: str
    lam: float
    eta: float
    coeffs: np.ndarray  # (steps+1, n)
    objectives: np.ndarray
    dist_from_init: np.ndarray
    aux: np.ndarray = None
    identity_gap: np.ndarray = None
    lm: LinearizedModel = None

    @property
    def steps(self) -> int:
        return self.coeffs.shape[0] - 1

    def final_coeffs(self) -> np.ndarray:
        return self.coeffs[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write("t,objective,dist_from_init\n")
            for t in range(self.coeffs.shape[0]):
                f.write(
                    f"{t},{float(self.objectives[t])!r},{float(self.dist_from_init[t])!r}\n"
                )


def _quad_norm(K: np.ndarray, v: np.ndarray) -> float:
    return float(np.sqrt(max(float(v @ (K @ v)), 0.0)))


def _check_finite(objective: float, step: int) -> None:
    if not np.isfinite(objective) or objective > DIVERGENCE_LIMIT:
        raise DivergenceError(
            f"linearized objective became {objective:.3e} at step {step}; reduce eta"
        )


def run_gd_rdi(lm: LinearizedModel, y, lam: float, eta=None, steps: int = 1000) -> LinTrajectory:
    """Gradient descent on the distance-to-init objective.

    Update: a <- a - eta ((K a - y) + lam^2 a), i.e. the span coordinates of
    theta <- theta - eta (Z (Z^T (theta - theta0) - y) + lam^2 (theta - theta0)).
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (lm.n,):
        raise ValidationError(f"targets must have shape ({lm.n},), got {y.shape}")
    if lam < 0.0:
        raise ValidationError(f"lam must be >= 0, got {lam}")
    if eta is None:
        eta = lm.default_eta(lam)
    if not eta > 0.0:
        raise ValidationError(f"eta must be positive, got {eta}")
    k = lm.K.values
    reg = lam * lam
    a = np.zeros(lm.n)
    coeffs = np.zeros((steps + 1, lm.n))
    objectives = np.zeros(steps + 1)
    dist = np.zeros(steps + 1)
    for t in range(steps + 1):
        ka = k @ a
        residual = ka - y
        objective = 0.5 * float(residual @ residual) + 0.5 * reg * float(a @ ka)
        _check_finite(objective, t)
        coeffs[t] = a
        objectives[t] = objective
        dist[t] = _quad_norm(k, a)
        if t == steps:
            break
        a = a - eta * (residual + reg * a)
    return LinTrajectory(
        kind=KIND_RDI, lam=lam, eta=eta, coeffs=coeffs,
        objectives=objectives, dist_from_init=dist, lm=lm,
    )


def run_gd_aux(lm: LinearizedModel, y, lam: float, eta=None, steps: int = 1000) -> LinTrajectory:
    """Joint gradient descent on the auxiliary-variable objective.

    With residual r = K a + lam b - y the updates are a <- a - eta r and
    b <- b - eta lam r from b(0) = 0, which keeps theta(t) - theta0 equal to
    Z b(t)/lam at every step; the recorded ``identity_gap`` measures that
    relation in the parameter norm, relative to the displacement size.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (lm.n,):
        raise ValidationError(f"targets must have shape ({lm.n},), got {y.shape}")
    if not lam > 0.0:
        raise ValidationError(f"the auxiliary objective needs lam > 0, got {lam}")
    if eta is None:
        eta = lm.default_eta(lam)
    if not eta > 0.0:
        raise ValidationError(f"eta must be positive, got {eta}")
    k = lm.K.values
    a = np.zeros(lm.n)
    b = np.zeros(lm.n)
    coeffs = np.zeros((steps + 1, lm.n))
    aux = np.zeros((steps + 1, lm.n))
    objectives = np.zeros(steps + 1)
    dist = np.zeros(steps + 1)
    identity_gap = np.zeros(steps + 1)
    for t in range(steps + 1):
        residual = k @ a + lam * b - y
        objective = 0.5 * float(residual @ residual)
        _check_finite(objective, t)
        coeffs[t] = a
        aux[t] = b
        objectives[t] = objective
        displacement = dist[t] = _quad_norm(k, a)
        gap = _quad_norm(k, a - b / lam)
        identity_gap[t] = gap / displacement if displacement > 0.0 else gap
        if t == steps:
            break
        a = a - eta * residual
        b = b - eta * lam * residual
    return LinTrajectory(
        kind=KIND_AUX, lam=lam, eta=eta, coeffs=coeffs, aux=aux,
        objectives=objectives, dist_from_init=dist, identity_gap=identity_gap, lm=lm,
    )


@dataclass
class EquivalenceReport:
    """Step-by-step distance between two trajectories in parameter norm."""

    max_abs: float
    max_rel: float
    gaps: np.ndarray
    rel_gaps: np.ndarray
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel <= self.tol)


def check_equivalence(traj_rdi: LinTrajectory, traj_aux: LinTrajectory,
                      tol: float = EQUIVALENCE_TOL) -> EquivalenceReport:
    """Max over t of ||theta_rdi(t) - theta_aux(t)||, absolute and relative.

    The relative gap at step t divides by ||theta_rdi(t) - theta0||; steps
    with zero displacement and zero gap contribute zero, while a nonzero gap
    at zero displacement is an immediate failure (reported as inf).
    """
    if traj_rdi.coeffs.shape != traj_aux.coeffs.shape:
        raise ValidationError(
            f"trajectory shapes differ: {traj_rdi.coeffs.shape} vs {traj_aux.coeffs.shape}"
        )
    lm = traj_rdi.lm if traj_rdi.lm is not None else traj_aux.lm
    if lm is None:
        raise ValidationError("trajectories carry no linearized model to measure norms with")
    k = lm.K.values
    steps = traj_rdi.coeffs.shape[0]
    gaps = np.zeros(steps)
    rel_gaps = np.zeros(steps)
    for t in range(steps):
        gap = _quad_norm(k, traj_rdi.coeffs[t] - traj_aux.coeffs[t])
        denom = _quad_norm(k, traj_rdi.coeffs[t])
        gaps[t] = gap
        if denom > 0.0:
            rel_gaps[t] = gap / denom
        else:
            rel_gaps[t] = 0.0 if gap == 0.0 else np.inf
    return EquivalenceReport(
        max_abs=float(np.max(gaps)),
        max_rel=float(np.max(rel_gaps)),
        gaps=gaps,
        rel_gaps=rel_gaps,
        tol=tol,
    )


def closed_form_limit(lm: LinearizedModel, y, lam: float):
    """Limit solution theta* = theta0 + Z (K + lam^2 I)^-1 y.

    Returns (theta_star, alpha) where alpha are the ridge coefficients; the
    limiting predictor is x |-> k(x, X)^T alpha. Requires lam > 0, or an
    invertible kernel matrix when lam = 0.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (lm.n,):
        raise ValidationError(f"targets must have shape ({lm.n},), got {y.shape}")
    if lam < 0.0:
        raise ValidationError(f"lam must be >= 0, got {lam}")
    alpha = PSDSolver(lm.K.values, lam * lam).solve_checked(y)
    theta_star = lm.theta0 + lm.Z @ alpha
    return theta_star, alpha


def span_residual(lm: LinearizedModel, theta: np.ndarray) -> float:
    """Relative norm of the part of theta - theta0 outside span(Z)."""
    displacement = theta - lm.theta0
    norm = float(np.linalg.norm(displacement))
    if norm == 0.0:
        return 0.0
    coeffs = np.linalg.lstsq(lm.Z, displacement, rcond=None)[0]
    return float(np.linalg.norm(displacement - lm.Z @ coeffs)) / norm
