"""Finite-width fully-connected ReLU networks with tangent-kernel scaling.

The forward pass is

    f(x) = W_L @ s_L relu(W_{L-1} @ s_{L-1} relu( ... relu(W_1 @ x)))

with s_l = sqrt(scale_c / fan_in_l) applied from the second layer on (the
first layer consumes unit-norm inputs directly, so its pre-activations
already have unit variance under i.i.d. N(0, 1) weights). ReLU's derivative
at 0 is taken to be 0.

With ``difference_trick`` enabled the model is the scaled difference of two
identically initialized copies, f = sqrt(2)/2 (g(theta_1, x) - g(theta_2, x)),
which makes the initial output exactly zero while leaving the gradient Gram
matrix unchanged.

Parameter flattening order (fixed; it defines the feature map): branch 1
before branch 2, layers in forward order within a branch, trainable layers
only, each weight matrix raveled row-major.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .data import TASK_BINARY, TASK_MULTICLASS, DataSet
from .errors import DivergenceError, ValidationError
from .noise import onehot_matrix

BRANCH_COEFF = math.sqrt(2.0) / 2.0
DIVERGENCE_LIMIT = 1e12

OBJECTIVE_VANILLA = "vanilla"
OBJECTIVE_RDI = "rdi"
OBJECTIVE_AUX = "aux"
_OBJECTIVES = (OBJECTIVE_VANILLA, OBJECTIVE_RDI, OBJECTIVE_AUX)


@dataclass(frozen=True)
class NetConfig:
    """Architecture of a bias-free fully-connected ReLU network.

    ``widths`` lists the hidden layer sizes, so the network has
    ``len(widths) + 1`` weight matrices. ``freeze_first_last`` freezes the
    first and last weight matrices for depth >= 3; for two-layer networks it
    freezes only the last one (freezing both would leave nothing trainable).
    """

    input_dim: int
    widths: tuple
    outputs: int = 1
    scale_c: float = 2.0
    freeze_first_last: bool = True
    difference_trick: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_dim < 1:
            raise ValidationError(f"input_dim must be >= 1, got {self.input_dim}")
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise ValidationError(f"need at least one hidden layer of width >= 1, got {self.widths}")
        if self.outputs < 1:
            raise ValidationError(f"outputs must be >= 1, got {self.outputs}")
        if not self.scale_c > 0.0:
            raise ValidationError(f"scale_c must be positive, got {self.scale_c}")

    @property
    def depth(self) -> int:
        return len(self.widths) + 1

    @property
    def dims(self) -> tuple:
        return (self.input_dim, *self.widths, self.outputs)

    @property
    def frozen_layers(self) -> frozenset:
        if not self.freeze_first_last:
            return frozenset()
        if self.depth == 2:
            return frozenset({self.depth - 1})
        return frozenset({0, self.depth - 1})

    @property
    def trainable_layers(self) -> tuple:
        return tuple(l for l in range(self.depth) if l not in self.frozen_layers)

    def layer_scale(self, layer: int) -> float:
        return 1.0 if layer == 0 else math.sqrt(self.scale_c / self.dims[layer])


@dataclass(eq=False)
class MLP:
    """Weight matrices per branch plus a snapshot of their initialization."""

    config: NetConfig
    params: list
    params0: list = field(repr=False)

    @property
    def branch_coeffs(self) -> tuple:
        if self.config.difference_trick:
            return (BRANCH_COEFF, -BRANCH_COEFF)
        return (1.0,)

    @property
    def n_trainable_params(self) -> int:
        per_branch = sum(
            self.config.dims[l + 1] * self.config.dims[l] for l in self.config.trainable_layers
        )
        return per_branch * len(self.params)

    def copy(self) -> "MLP":
        return MLP(
            config=self.config,
            params=[[w.copy() for w in branch] for branch in self.params],
            params0=[[w.copy() for w in branch] for branch in self.params0],
        )


def init_mlp(config: NetConfig, seed: int) -> MLP:
    """I.i.d. standard-normal weights; both branches share the draw exactly."""
    rng = np.random.default_rng(seed)
    dims = config.dims
    base = [rng.standard_normal((dims[l + 1], dims[l])) for l in range(config.depth)]
    if config.difference_trick:
        params = [base, [w.copy() for w in base]]
    else:
        params = [base]
    params0 = [[w.copy() for w in branch] for branch in params]
    return MLP(config=config, params=params, params0=params0)


def _branch_forward(config: NetConfig, weights, x, keep_cache=False):
    """Forward one branch; optionally cache (scaled input, relu mask) per layer."""
    caches = []
    h = x
    for l, w in enumerate(weights):
        scale = config.layer_scale(l)
        inp = h if scale == 1.0 else h * scale
        z = inp @ w.T
        last = l == config.depth - 1
        mask = None if last else z > 0.0
        if keep_cache:
            caches.append((inp, mask))
        h = z if last else np.where(mask, z, 0.0)
    return h, caches


def _as_batch(config: NetConfig, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ValidationError(
            f"input has shape {x.shape}, expected (*, {config.input_dim})"
        )
    return x, single


def forward(mlp: MLP, x) -> np.ndarray:
    """Network output; accepts a single d-vector or an (m, d) batch."""
    batch, single = _as_batch(mlp.config, x)
    out = None
    for coeff, weights in zip(mlp.branch_coeffs, mlp.params):
        branch_out, _ = _branch_forward(mlp.config, weights, batch)
        contribution = coeff * branch_out
        out = contribution if out is None else out + contribution
    return out[0] if single else out


def _branch_backward_factors(config: NetConfig, weights, caches, out_sens):
    """Per-layer (delta, scaled input) pairs for per-example weight gradients.

    The per-example gradient of the selected output w.r.t. W_l is the outer
    product delta_l[i] x input_l[i]; returning the factors lets callers form
    either summed gradients or Gram matrices without materializing them.
    """
    factors = [None] * config.depth
    delta = out_sens
    for l in range(config.depth - 1, -1, -1):
        inp, _ = caches[l]
        factors[l] = (delta, inp)
        if l > 0:
            back = delta @ weights[l]
            scale = config.layer_scale(l)
            if scale != 1.0:
                back = back * scale
            mask = caches[l - 1][1]
            delta = np.where(mask, back, 0.0)
    return factors


def gradient_factors(mlp: MLP, x, output_index: int = 0, at_init: bool = True):
    """Factor pairs of the per-example parameter gradient, flattening order.

    Returns a list over (branch, trainable layer) of (delta, input) arrays
    with per-example rows. ``at_init`` selects the initialization snapshot
    (the reference point for tangent features) instead of current weights.
    """
    batch, _ = _as_batch(mlp.config, x)
    config = mlp.config
    if not 0 <= output_index < config.outputs:
        raise ValidationError(f"output_index {output_index} out of range 0..{config.outputs - 1}")
    params = mlp.params0 if at_init else mlp.params
    out = []
    for coeff, weights in zip(mlp.branch_coeffs, params):
        _, caches = _branch_forward(config, weights, batch, keep_cache=True)
        sens = np.zeros((batch.shape[0], config.outputs))
        sens[:, output_index] = coeff
        factors = _branch_backward_factors(config, weights, caches, sens)
        out.extend(factors[l] for l in config.trainable_layers)
    return out


def gradients_matrix(mlp: MLP, x, output_index: int = 0, at_init: bool = True) -> np.ndarray:
    """(m, N) matrix of flattened per-example gradients over trainable params."""
    factors = gradient_factors(mlp, x, output_index, at_init)
    m = factors[0][0].shape[0]
    blocks = [
        np.einsum("mi,mj->mij", delta, inp).reshape(m, -1) for delta, inp in factors
    ]
    return np.concatenate(blocks, axis=1)


def gradient(mlp: MLP, x, output_index: int = 0, at_init: bool = False) -> np.ndarray:
    """Exact reverse-mode gradient of one output w.r.t. all trainable weights.

    Evaluated at the current parameters by default; pass ``at_init=True`` for
    the tangent feature map at initialization.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"gradient expects a single d-vector, got shape {x.shape}")
    return gradients_matrix(mlp, x[None, :], output_index, at_init)[0]


def distance_to_init(mlp: MLP) -> np.ndarray:
    """Per-layer Frobenius distance ||W_l - W_l(0)||_F.

    For difference-trick networks the two branches are combined in
    quadrature, so the result is the distance of the full parameter vector
    restricted to each layer.
    """
    depth = mlp.config.depth
    sq = np.zeros(depth)
    for branch, branch0 in zip(mlp.params, mlp.params0):
        for l in range(depth):
            diff = branch[l] - branch0[l]
            sq[l] += float(np.sum(diff * diff))
    return np.sqrt(sq)


def layer_norms(mlp: MLP) -> np.ndarray:
    """Per-layer ||W_l||_F, branches combined in quadrature."""
    depth = mlp.config.depth
    sq = np.zeros(depth)
    for branch in mlp.params:
        for l in range(depth):
            sq[l] += float(np.sum(branch[l] * branch[l]))
    return np.sqrt(sq)


@dataclass(frozen=True)
class TrainConfig:
    """Gradient descent settings for the nonlinear objectives.

    ``objective``: "vanilla" (plain l2 loss), "rdi" (adds lam^2/2 times the
    squared distance to initialization), or "aux" (adds a trainable per-example
    offset lam * b_i to the output inside the loss; b starts at zero and is
    discarded at prediction time).

    Training is full-batch with a fixed learning rate by default. Setting
    ``batch_size`` switches to mini-batch mode for large n: each step
    consumes the next chunk of a seeded per-epoch shuffle, the regularizer
    acts at full strength every step, and the logged objective is still the
    full-batch value. Mini-batch runs trade the exact trajectory identities
    for throughput, so equivalence checks always use full batches.
    """

    objective: str
    eta: float
    steps: int
    lam: float = 0.0
    batch_size: int = 0  # 0 means full batch
    batch_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objective", str(self.objective).lower())
        if self.objective not in _OBJECTIVES:
            raise ValidationError(f"unknown objective {self.objective!r}")
        if not self.eta > 0.0:
            raise ValidationError(f"learning rate must be positive, got {self.eta}")
        if self.steps < 0:
            raise ValidationError(f"steps must be >= 0, got {self.steps}")
        if self.lam < 0.0:
            raise ValidationError(f"lam must be >= 0, got {self.lam}")
        if self.batch_size < 0:
            raise ValidationError(f"batch_size must be >= 0, got {self.batch_size}")


@dataclass
class AuxState:
    """Trained per-example auxiliary variables: (n,) or (num_outputs, n)."""

    b: np.ndarray


@dataclass
class TrainLog:
    """Per-step trajectory: objective, training errors, weight movement.

    ``train_error`` scores the network output alone against noisy labels
    (zero-one error for classification, mean squared error for regression);
    ``train_error_with_aux`` scores output + lam * b, which only differs for
    the aux objective. Distances and norms are per layer, branches combined
    in quadrature.
    """

    steps: np.ndarray
    objective: np.ndarray
    train_error: np.ndarray
    train_error_with_aux: np.ndarray
    dist_to_init: np.ndarray  # (steps+1, depth)
    weight_norms: np.ndarray  # (steps+1, depth)

    def to_csv(self, path) -> None:
        depth = self.dist_to_init.shape[1]
        header = ["step", "objective", "train_error", "train_error_with_aux"]
        header += [f"dist_l{l + 1}" for l in range(depth)]
        header += [f"norm_l{l + 1}" for l in range(depth)]
        with open(path, "w", newline="") as f:
            f.write(",".join(header) + "\n")
            for i in range(self.steps.size):
                row = [str(int(self.steps[i]))]
                row.append(repr(float(self.objective[i])))
                row.append(repr(float(self.train_error[i])))
                row.append(repr(float(self.train_error_with_aux[i])))
                row += [repr(float(v)) for v in self.dist_to_init[i]]
                row += [repr(float(v)) for v in self.weight_norms[i]]
                f.write(",".join(row) + "\n")


def _targets_for(data: DataSet, outputs: int) -> np.ndarray:
    if data.task == TASK_MULTICLASS:
        if outputs != data.num_classes:
            raise ValidationError(
                f"multiclass training needs outputs == num_classes ({data.num_classes}), got {outputs}"
            )
        return onehot_matrix(data.noisy_labels, data.num_classes).T  # (n, K)
    if outputs != 1:
        raise ValidationError(f"{data.task} training needs a single-output network, got {outputs}")
    return np.asarray(data.noisy_labels, dtype=np.float64)[:, None]


def _batch_error(data: DataSet, predictions: np.ndarray) -> float:
    if data.task == TASK_MULTICLASS:
        predicted = np.argmax(predictions, axis=1) + 1
        return float(np.mean(predicted != data.noisy_labels))
    values = predictions[:, 0]
    if data.task == TASK_BINARY:
        wrong = (values == 0.0) | (np.sign(values) != data.noisy_labels)
        return float(np.mean(wrong))
    return float(np.mean((values - data.noisy_labels) ** 2))


def train_full(mlp: MLP, data: DataSet, cfg: TrainConfig):
    """Full-batch gradient descent on the nonlinear objective.

    Returns (trained MLP, AuxState, TrainLog); the input model is untouched.
    Aborts with DivergenceError if the objective exceeds 1e12 or turns
    non-finite, naming the offending step.
    """
    config = mlp.config
    targets = _targets_for(data, config.outputs)
    n, n_out = targets.shape
    x = data.inputs
    model = mlp.copy()
    aux = np.zeros((n, n_out))
    lam = cfg.lam
    reg_sq = lam * lam

    depth = config.depth
    total = cfg.steps
    log_obj = np.zeros(total + 1)
    log_err = np.zeros(total + 1)
    log_err_aux = np.zeros(total + 1)
    log_dist = np.zeros((total + 1, depth))
    log_norm = np.zeros((total + 1, depth))

    minibatch = 0 < cfg.batch_size < n
    if minibatch:
        batch_rng = np.random.default_rng(cfg.batch_seed)
        order = batch_rng.permutation(n)
        position = 0

    for t in range(total + 1):
        outs = []
        caches = []
        for weights in model.params:
            branch_out, cache = _branch_forward(config, weights, x, keep_cache=True)
            outs.append(branch_out)
            caches.append(cache)
        f_out = None
        for coeff, branch_out in zip(model.branch_coeffs, outs):
            contribution = coeff * branch_out
            f_out = contribution if f_out is None else f_out + contribution

        effective = f_out + lam * aux if cfg.objective == OBJECTIVE_AUX else f_out
        residual = effective - targets
        objective = 0.5 * float(np.sum(residual * residual))
        if cfg.objective == OBJECTIVE_RDI and lam > 0.0:
            dist = distance_to_init(model)
            objective += 0.5 * reg_sq * float(np.sum(dist * dist))
        if not np.isfinite(objective) or objective > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"objective became {objective:.3e} at step {t}; reduce the learning rate"
            )

        log_obj[t] = objective
        log_err[t] = _batch_error(data, f_out)
        log_err_aux[t] = _batch_error(data, effective)
        log_dist[t] = distance_to_init(model)
        log_norm[t] = layer_norms(model)

        if t == total:
            break

        rows = None
        if minibatch:
            if position + cfg.batch_size > n:
                order = batch_rng.permutation(n)
                position = 0
            rows = order[position : position + cfg.batch_size]
            position += cfg.batch_size
        step_residual = residual if rows is None else residual[rows]
        for coeff, weights, weights0, cache in zip(
            model.branch_coeffs, model.params, model.params0, caches
        ):
            if rows is None:
                step_cache = cache
            else:
                step_cache = [
                    (inp[rows], None if mask is None else mask[rows])
                    for inp, mask in cache
                ]
            factors = _branch_backward_factors(config, weights, step_cache, coeff * step_residual)
            for l in config.trainable_layers:
                delta, inp = factors[l]
                grad = delta.T @ inp
                if cfg.objective == OBJECTIVE_RDI and lam > 0.0:
                    grad = grad + reg_sq * (weights[l] - weights0[l])
                weights[l] -= cfg.eta * grad
        if cfg.objective == OBJECTIVE_AUX and lam > 0.0:
            if rows is None:
                aux -= cfg.eta * lam * residual
            else:
                aux[rows] -= cfg.eta * lam * step_residual

    if n_out == 1:
        aux_state = AuxState(b=aux[:, 0].copy())
    else:
        aux_state = AuxState(b=aux.T.copy())
    log = TrainLog(
        steps=np.arange(total + 1),
        objective=log_obj,
        train_error=log_err,
        train_error_with_aux=log_err_aux,
        dist_to_init=log_dist,
        weight_norms=log_norm,
    )
    return model, aux_state, log
