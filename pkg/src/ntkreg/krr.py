"""Kernel ridge regression: fitting, prediction, and RKHS norms.

The regularization strength lam enters the normal equations as lam^2, i.e.
alpha = (K + lam^2 I)^-1 y, so callers never have to remember which power
of lam the solver adds. Solves go through a Cholesky factorization with an
escalating-jitter fallback; every fit is verified against its residual and
fails loudly instead of returning a silently wrong coefficient vector.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._kernelmatrix import KernelMatrix
from .data import TASK_BINARY, TASK_MULTICLASS, DataSet
from .errors import SingularityError, ValidationError
from .kernel import as_kernel_source, kernel_cross

RESIDUAL_RTOL = 1e-8
BASE_JITTER_FACTOR = 1e-10
JITTER_ESCALATIONS = 3


class PSDSolver:
    """Cholesky solve of (K + shift I) x = b with escalating diagonal jitter.

    On factorization failure, adds jitter 1e-10 tr(K)/n to the diagonal and
    escalates tenfold up to three times before raising SingularityError.
    Solutions are checked against the unjittered system, so a jitter that
    large enough to distort the solve is also a loud failure.
    """

    def __init__(self, values: np.ndarray, shift: float):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValidationError(f"expected a square matrix, got shape {values.shape}")
        n = values.shape[0]
        self.matrix = values + shift * np.eye(n)
        base_jitter = BASE_JITTER_FACTOR * max(float(np.trace(values)), 0.0) / n
        jitters = [0.0] + [base_jitter * 10.0**k for k in range(JITTER_ESCALATIONS)]
        self.factor = None
        self.jitter = 0.0
        for jitter in jitters:
            try:
                self.factor = cho_factor(self.matrix + jitter * np.eye(n), lower=True)
                self.jitter = jitter
                break
            except np.linalg.LinAlgError:
                continue
        if self.factor is None:
            raise SingularityError(
                f"Cholesky failed for shift {shift:.3e} even with jitter up to "
                f"{jitters[-1]:.3e}"
            )

    def solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve(self.factor, b)

    def solve_checked(self, b: np.ndarray) -> np.ndarray:
        x = self.solve(b)
        residual = float(np.linalg.norm(self.matrix @ x - b))
        scale = max(float(np.linalg.norm(b)), np.finfo(np.float64).tiny)
        if residual > RESIDUAL_RTOL * scale:
            raise SingularityError(
                f"solve residual {residual / scale:.3e} exceeds {RESIDUAL_RTOL:.0e}; "
                "the shifted kernel matrix is numerically singular"
            )
        return x


@dataclass
class KRRPredictor:
    """Ridge coefficients bound to a kernel source and the training inputs.

    ``alpha`` is an n-vector for single-output fits or a (num_outputs, n)
    matrix for multi-output fits. Prediction requires ``kernel_source`` and
    ``train_data``; purely algebraic fits may leave them unset.
    """

    alpha: np.ndarray
    lam: float
    kernel_source: object = None
    train_data: DataSet = None

    @property
    def multi_output(self) -> bool:
        return self.alpha.ndim == 2

    def _cross(self, x) -> np.ndarray:
        if self.kernel_source is None or self.train_data is None:
            raise ValidationError("predictor has no kernel source bound; cannot predict")
        return kernel_cross(self.kernel_source, x, self.train_data)

    def predict(self, x) -> np.ndarray:
        """k(x, X)^T alpha per output; scalar rows for single-output fits."""
        cross = self._cross(x)
        return cross @ self.alpha.T if self.multi_output else cross @ self.alpha

    def classify(self, x) -> np.ndarray:
        """Class labels: sign for binary (0 maps to +1), argmax for multi-output.

        Argmax ties resolve to the lowest class index.
        """
        values = self.predict(x)
        if self.multi_output:
            return np.argmax(np.atleast_2d(values), axis=1) + 1
        values = np.atleast_1d(values)
        return np.where(values >= 0.0, 1.0, -1.0)


def krr_fit(K: KernelMatrix, y, lam: float, kernel_source=None, train_data=None) -> KRRPredictor:
    """Solve (K + lam^2 I) alpha = y with the jittered Cholesky solver."""
    if lam < 0.0:
        raise ValidationError(f"lam must be >= 0, got {lam}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (K.n,):
        raise ValidationError(f"targets must have shape ({K.n},), got {y.shape}")
    solver = PSDSolver(K.values, lam * lam)
    alpha = solver.solve_checked(y)
    source = as_kernel_source(kernel_source) if kernel_source is not None else None
    return KRRPredictor(alpha=alpha, lam=lam, kernel_source=source, train_data=train_data)


def krr_fit_multi(K: KernelMatrix, targets, lam: float, kernel_source=None, train_data=None) -> KRRPredictor:
    """Multi-output fit sharing one factorization across all target rows.

    ``targets`` is (num_outputs, n); row h produces the coefficients of
    output h. Each row solves exactly as an independent single-output fit.
    """
    if lam < 0.0:
        raise ValidationError(f"lam must be >= 0, got {lam}")
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[1] != K.n:
        raise ValidationError(f"targets must have shape (num_outputs, {K.n}), got {targets.shape}")
    solver = PSDSolver(K.values, lam * lam)
    alpha = np.stack([solver.solve_checked(row) for row in targets])
    source = as_kernel_source(kernel_source) if kernel_source is not None else None
    return KRRPredictor(alpha=alpha, lam=lam, kernel_source=source, train_data=train_data)


def krr_predict(predictor: KRRPredictor, x) -> np.ndarray:
    """Evaluate the fitted predictor at one point or a batch of points."""
    return predictor.predict(x)


def rkhs_norm(predictor: KRRPredictor, K: KernelMatrix):
    """sqrt(alpha^T K alpha), clamped at zero against fp noise.

    Multi-output predictors get one norm per output row.
    """
    alpha = predictor.alpha
    if alpha.ndim == 1:
        if alpha.shape != (K.n,):
            raise ValidationError(f"alpha has shape {alpha.shape}, kernel is {K.n}x{K.n}")
        return float(np.sqrt(max(float(alpha @ K.values @ alpha), 0.0)))
    return np.sqrt(np.maximum(np.einsum("hi,ij,hj->h", alpha, K.values, alpha), 0.0))


def export_predictions(predictor: KRRPredictor, queries, path) -> None:
    """CSV of per-query outputs, plus the predicted class for classifiers."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    values = np.atleast_1d(predictor.predict(queries))
    task = predictor.train_data.task if predictor.train_data is not None else None
    classes = None
    if task in (TASK_BINARY, TASK_MULTICLASS):
        classes = predictor.classify(queries)
    n_out = values.shape[1] if values.ndim == 2 else 1
    header = ["query_id"] + [f"output_{h + 1}" for h in range(n_out)]
    if classes is not None:
        header.append("predicted_class")
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for i in range(queries.shape[0]):
            row = [str(i)]
            if values.ndim == 2:
                row += [repr(float(v)) for v in values[i]]
            else:
                row.append(repr(float(values[i])))
            if classes is not None:
                value = classes[i]
                row.append(str(int(value)) if task == TASK_MULTICLASS else repr(float(value)))
            f.write(",".join(row) + "\n")
