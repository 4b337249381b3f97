"""Network forward/gradient correctness and full nonlinear training."""

import numpy as np
import pytest

from ntkreg.data import synth_sphere
from ntkreg.errors import DivergenceError, ValidationError
from ntkreg.kernel import empirical_ntk
from ntkreg.net import (
    NetConfig,
    TrainConfig,
    distance_to_init,
    forward,
    gradient,
    gradients_matrix,
    init_mlp,
    layer_norms,
    train_full,
)
from ntkreg.noise import BinaryFlip, corrupt


def unit_vector(d, seed):
    x = np.random.default_rng(seed).standard_normal(d)
    return x / np.linalg.norm(x)


def finite_difference_gradient(mlp, x, output_index, h=1e-4):
    """Central differences over every trainable coordinate, in flatten order."""
    fd = []
    for branch in mlp.params:
        for l in mlp.config.trainable_layers:
            w = branch[l]
            block = np.zeros_like(w)
            for r in range(w.shape[0]):
                for c in range(w.shape[1]):
                    orig = w[r, c]
                    w[r, c] = orig + h
                    fp = np.atleast_1d(forward(mlp, x))[output_index]
                    w[r, c] = orig - h
                    fm = np.atleast_1d(forward(mlp, x))[output_index]
                    w[r, c] = orig
                    block[r, c] = (fp - fm) / (2.0 * h)
            fd.append(block.ravel())
    return np.concatenate(fd)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValidationError):
            NetConfig(input_dim=0, widths=(4,))
        with pytest.raises(ValidationError):
            NetConfig(input_dim=3, widths=())
        with pytest.raises(ValidationError):
            NetConfig(input_dim=3, widths=(4,), scale_c=0.0)

    def test_frozen_layers(self):
        two = NetConfig(input_dim=3, widths=(4,), freeze_first_last=True)
        assert two.frozen_layers == frozenset({1})  # two-layer nets keep the first trainable
        deep = NetConfig(input_dim=3, widths=(4, 4, 4), freeze_first_last=True)
        assert deep.frozen_layers == frozenset({0, 3})
        free = NetConfig(input_dim=3, widths=(4,), freeze_first_last=False)
        assert free.trainable_layers == (0, 1)


class TestInitAndForward:
    def test_same_seed_bit_identical(self):
        cfg = NetConfig(input_dim=5, widths=(16,), freeze_first_last=False)
        a = init_mlp(cfg, seed=42)
        b = init_mlp(cfg, seed=42)
        for wa, wb in zip(a.params[0], b.params[0]):
            assert np.array_equal(wa, wb)

    def test_difference_branches_share_draw(self):
        cfg = NetConfig(input_dim=5, widths=(16,), difference_trick=True, freeze_first_last=False)
        mlp = init_mlp(cfg, seed=0)
        for w1, w2 in zip(mlp.params0[0], mlp.params0[1]):
            assert np.array_equal(w1, w2)

    def test_zero_initial_output_exact(self):
        cfg = NetConfig(input_dim=7, widths=(32,), difference_trick=True, freeze_first_last=False)
        mlp = init_mlp(cfg, seed=1)
        x = np.random.default_rng(0).standard_normal((100, 7))
        out = forward(mlp, x)
        assert np.all(out == 0.0)

    def test_zero_input_gives_zero_output(self):
        cfg = NetConfig(input_dim=4, widths=(8, 8), difference_trick=False, freeze_first_last=False)
        mlp = init_mlp(cfg, seed=2)
        assert np.all(forward(mlp, np.zeros(4)) == 0.0)

    def test_positive_homogeneity(self):
        # Bias-free ReLU nets are degree-1 positively homogeneous in the input
        # once the output layer scaling is included; direct evaluation oracle.
        cfg = NetConfig(input_dim=4, widths=(8,), difference_trick=False, freeze_first_last=False)
        mlp = init_mlp(cfg, seed=3)
        x = unit_vector(4, 11)
        base = forward(mlp, x)
        for c in (2.0, 3.0, 0.25):
            scaled = forward(mlp, c * x)
            assert np.allclose(scaled, c * base, rtol=1e-12, atol=1e-14)

    def test_dimension_mismatch(self):
        cfg = NetConfig(input_dim=4, widths=(8,))
        mlp = init_mlp(cfg, seed=0)
        with pytest.raises(ValidationError):
            forward(mlp, np.zeros(5))

    def test_initial_output_variance_matches_limit(self):
        # Monte-Carlo over init seeds: for unit-norm inputs, the initial
        # output variance converges to 1 at large width (pooled estimator).
        cfg = NetConfig(input_dim=6, widths=(1024,), difference_trick=False, freeze_first_last=False)
        x = np.vstack([unit_vector(6, s) for s in range(40)])
        samples = np.stack([forward(init_mlp(cfg, seed=s), x) for s in range(50)])
        pooled_var = float(np.mean(np.var(samples, axis=0)))
        assert 1.0 / 3.0 <= pooled_var <= 3.0


class TestGradient:
    @pytest.mark.parametrize(
        "cfg,seed,xseed,out_idx",
        [
            (NetConfig(input_dim=4, widths=(6, 5), outputs=2, freeze_first_last=False, difference_trick=False), 2, 2, 1),
            (NetConfig(input_dim=4, widths=(8,), outputs=1, freeze_first_last=False, difference_trick=True), 3, 7, 0),
            (NetConfig(input_dim=5, widths=(7, 6, 4), outputs=3, freeze_first_last=True, difference_trick=True), 1, 9, 2),
        ],
    )
    def test_matches_finite_differences(self, cfg, seed, xseed, out_idx):
        mlp = init_mlp(cfg, seed=seed)
        x = unit_vector(cfg.input_dim, xseed)
        g = gradient(mlp, x, output_index=out_idx)
        fd = finite_difference_gradient(mlp, x, out_idx)
        scale = max(np.abs(g).max(), np.abs(fd).max(), 1e-12)
        rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-2 * scale)
        assert rel.max() <= 1e-5

    def test_frozen_layers_excluded(self):
        cfg = NetConfig(input_dim=4, widths=(6,), freeze_first_last=True, difference_trick=True)
        mlp = init_mlp(cfg, seed=0)
        g = gradient(mlp, unit_vector(4, 0))
        assert g.size == mlp.n_trainable_params == 2 * 6 * 4  # last layer frozen, two branches

    def test_self_inner_product_nonnegative(self):
        cfg = NetConfig(input_dim=4, widths=(6,), freeze_first_last=False, difference_trick=True)
        mlp = init_mlp(cfg, seed=4)
        for s in range(5):
            g = gradient(mlp, unit_vector(4, s))
            assert g @ g >= 0.0

    def test_gradients_matrix_rows_match_single(self):
        cfg = NetConfig(input_dim=5, widths=(9,), freeze_first_last=False, difference_trick=False)
        mlp = init_mlp(cfg, seed=5)
        x = np.vstack([unit_vector(5, s) for s in range(4)])
        z = gradients_matrix(mlp, x)
        for i in range(4):
            # batched and single-row GEMMs may round differently; demand
            # agreement at a few ulps
            assert np.allclose(z[i], gradient(mlp, x[i]), rtol=1e-13, atol=1e-15)

    def test_output_index_out_of_range(self):
        cfg = NetConfig(input_dim=4, widths=(6,), outputs=2, freeze_first_last=False)
        mlp = init_mlp(cfg, seed=0)
        with pytest.raises(ValidationError):
            gradient(mlp, unit_vector(4, 0), output_index=2)


def small_problem(p=0.2, n=24, d=6, width=128, seed=4, noise_seed=9):
    ds = synth_sphere(n, d, "linear-sign", seed=seed)
    if p > 0:
        ds = corrupt(ds, BinaryFlip(p), seed=noise_seed)
    cfg = NetConfig(input_dim=d, widths=(width,), freeze_first_last=True, difference_trick=True)
    mlp = init_mlp(cfg, 0)
    return ds, mlp


class TestTrainFull:
    def test_rdi_lambda_zero_equals_vanilla(self):
        ds, mlp = small_problem()
        eta = 0.02
        m1, _, log1 = train_full(mlp, ds, TrainConfig("vanilla", eta=eta, steps=40))
        m2, _, log2 = train_full(mlp, ds, TrainConfig("rdi", eta=eta, steps=40, lam=0.0))
        assert np.array_equal(log1.objective, log2.objective)
        assert np.array_equal(m1.params[0][0], m2.params[0][0])

    def test_aux_first_step_absorbs_labels(self):
        # Hand gradient at step 0: residual is -y (zero initial output),
        # so b(1) = eta * lam * y exactly.
        ds, mlp = small_problem()
        lam, eta = 1.5, 0.01
        _, aux, _ = train_full(mlp, ds, TrainConfig("aux", eta=eta, steps=1, lam=lam))
        assert np.array_equal(aux.b, eta * lam * ds.noisy_labels)

    def test_objective_non_increasing_at_small_eta(self):
        ds, mlp = small_problem(width=256)
        K = empirical_ntk(mlp, ds)
        lam = 1.0
        # well below the linearized-certified rate: the nonlinear objective
        # has non-PSD curvature terms that allow tiny ascents at larger eta
        eta = 0.05 / (K.op_norm + lam * lam)
        _, _, log = train_full(mlp, ds, TrainConfig("rdi", eta=eta, steps=100, lam=lam))
        diffs = np.diff(log.objective)
        assert np.all(diffs <= 1e-12 * np.abs(log.objective[:-1]))

    def test_divergence_detected_with_step(self):
        ds, mlp = small_problem()
        with pytest.raises(DivergenceError, match="step"):
            train_full(mlp, ds, TrainConfig("vanilla", eta=50.0, steps=200))

    def test_determinism(self):
        ds, mlp = small_problem()
        cfg = TrainConfig("aux", eta=0.02, steps=30, lam=1.0)
        _, a1, log1 = train_full(mlp, ds, cfg)
        _, a2, log2 = train_full(mlp, ds, cfg)
        assert np.array_equal(log1.objective, log2.objective)
        assert np.array_equal(a1.b, a2.b)

    def test_input_model_untouched(self):
        ds, mlp = small_problem()
        before = [w.copy() for w in mlp.params[0]]
        train_full(mlp, ds, TrainConfig("vanilla", eta=0.02, steps=10))
        for w0, w1 in zip(before, mlp.params[0]):
            assert np.array_equal(w0, w1)

    def test_multiclass_training_runs(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((30, 5))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        labels = rng.integers(1, 4, size=30)
        from ntkreg.data import DataSet

        ds = DataSet(x, labels, labels.copy(), "multiclass", num_classes=3)
        cfg = NetConfig(input_dim=5, widths=(64,), outputs=3, freeze_first_last=True)
        mlp = init_mlp(cfg, 0)
        trained, aux, log = train_full(mlp, ds, TrainConfig("aux", eta=0.01, steps=20, lam=1.0))
        assert aux.b.shape == (3, 30)
        assert log.objective[-1] < log.objective[0]

    def test_minibatch_mode(self):
        ds, mlp = small_problem(n=32)
        cfg = TrainConfig("aux", eta=0.02, steps=60, lam=1.0, batch_size=8, batch_seed=3)
        trained, aux, log = train_full(mlp, ds, cfg)
        assert log.objective[-1] < log.objective[0]
        # deterministic given the batch seed
        _, aux2, log2 = train_full(mlp, ds, cfg)
        assert np.array_equal(log.objective, log2.objective)
        assert np.array_equal(aux.b, aux2.b)
        # a different batch seed takes a different path
        _, _, log3 = train_full(
            mlp, ds, TrainConfig("aux", eta=0.02, steps=60, lam=1.0, batch_size=8, batch_seed=4)
        )
        assert not np.array_equal(log.objective, log3.objective)

    def test_batch_size_at_least_n_is_full_batch(self):
        ds, mlp = small_problem(n=16)
        full = TrainConfig("vanilla", eta=0.02, steps=20)
        capped = TrainConfig("vanilla", eta=0.02, steps=20, batch_size=16)
        _, _, log_a = train_full(mlp, ds, full)
        _, _, log_b = train_full(mlp, ds, capped)
        assert np.array_equal(log_a.objective, log_b.objective)

    def test_trajectory_csv(self, tmp_path):
        ds, mlp = small_problem()
        _, _, log = train_full(mlp, ds, TrainConfig("rdi", eta=0.02, steps=5, lam=0.5))
        path = tmp_path / "traj.csv"
        log.to_csv(path)
        lines = open(path).read().strip().split("\n")
        assert lines[0] == (
            "step,objective,train_error,train_error_with_aux,dist_l1,dist_l2,norm_l1,norm_l2"
        )
        assert len(lines) == 7  # header + steps 0..5


class TestDistanceToInit:
    def test_untrained_all_zero(self):
        _, mlp = small_problem()
        assert np.array_equal(distance_to_init(mlp), np.zeros(2))

    def test_nonnegative_after_training(self):
        ds, mlp = small_problem()
        trained, _, _ = train_full(mlp, ds, TrainConfig("rdi", eta=0.02, steps=50, lam=1.0))
        dist = distance_to_init(trained)
        assert np.all(dist >= 0.0)
        assert dist[0] > 0.0  # the trainable layer moved
        assert dist[1] == 0.0  # the frozen layer did not

    def test_distance_non_decreasing_in_noise(self):
        # Directional relationship at small lambda, shared flip coupling.
        ds = synth_sphere(80, 8, "linear-sign", seed=4)
        cfg = NetConfig(input_dim=8, widths=(256,), freeze_first_last=True)
        mlp = init_mlp(cfg, 0)
        lam = 0.25
        K = empirical_ntk(mlp, ds)
        eta = 1.0 / (K.op_norm + lam * lam)
        totals = []
        for p in (0.0, 0.2, 0.4):
            noisy = corrupt(ds, BinaryFlip(p), seed=9) if p > 0 else ds
            trained, _, _ = train_full(mlp, noisy, TrainConfig("rdi", eta=eta, steps=500, lam=lam))
            totals.append(float(np.linalg.norm(distance_to_init(trained))))
        assert totals[0] <= totals[1] <= totals[2]

    def test_layer_norms_positive(self):
        _, mlp = small_problem()
        assert np.all(layer_norms(mlp) > 0.0)
