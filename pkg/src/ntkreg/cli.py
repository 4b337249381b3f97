"""Batch experiment runner.

Subcommands: ``kernel``, ``equivalence``, ``train``, ``krr``, ``bounds``,
``sweep``. Configuration comes from a JSON file plus flag overrides; the
fully resolved configuration is always written to the output directory as
``resolved_config.json`` so every run is auditable. CSV payloads are
deterministic given (config, seeds); timestamps appear only in log lines.

Exit codes: 0 success, 2 validation failure, 3 numerical failure,
4 I/O or file-format failure, 5 a requested check did not meet its
tolerance, 1 anything unexpected.
"""

import argparse
import concurrent.futures
import copy
import json
import os
import sys
import time

import numpy as np

from . import bounds as bounds_mod
from . import noise as noise_mod
from .data import (
    TASK_BINARY,
    TASK_MULTICLASS,
    DataSet,
    Provenance,
    load_kernel,
    load_mnist_binary,
    make_kernel_cache,
    save_kernel,
    split_dataset,
    synth_sphere,
)
from .errors import (
    DataFormatError,
    DivergenceError,
    EmptyDatasetError,
    SingularityError,
    StaleCacheError,
    ToolkitError,
    TrickViolationError,
    ValidationError,
)
from .kernel import AnalyticNTK, EmpiricalNTK, empirical_ntk
from .krr import krr_fit, export_predictions
from .linmodel import check_equivalence, linearize, run_gd_aux, run_gd_rdi
from .net import NetConfig, TrainConfig, distance_to_init, forward, init_mlp, train_full

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4
EXIT_CHECK_FAILED = 5

DEFAULT_CONFIG = {
    "dataset": {"kind": "synth-sphere", "n": 200, "d": 10, "target": "linear-sign", "seed": 1},
    "test_dataset": None,
    "noise": {"kind": "none"},
    "model": {"kind": "analytic", "depth": 2},
    "method": "krr",
    "lambda": 1.0,
    "lambda_grid": [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
    "noise_grid": [0.0],
    "eta": None,
    "steps": 1000,
    "seeds": [0],
    "delta": 0.1,
    "sigma": 0.1,
    "constant_mode": "explicit-appendix",
    "tolerance": 1e-10,
    "workers": 1,
    "out": "ntkreg-out",
}

_METHODS = ("krr", "linear-rdi", "linear-aux", "net-rdi", "net-aux", "net-vanilla")


def _log(message: str) -> None:
    stamp = time.strftime("%H:%M:%S")
    print(f"[ntkreg {stamp}] {message}")


def load_config(path=None, overrides=None) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
        unknown = set(user) - set(DEFAULT_CONFIG)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        config.update(user)
    for key, value in (overrides or {}).items():
        if value is not None:
            config[key] = value
    _validate_config(config)
    return config


def _validate_config(config: dict) -> None:
    if not config["seeds"]:
        raise ValidationError("config needs at least one seed")
    if any(lam < 0.0 for lam in config["lambda_grid"]):
        raise ValidationError("lambda grid values must be >= 0")
    if config["lambda"] < 0.0:
        raise ValidationError("lambda must be >= 0")
    if config["method"] not in _METHODS:
        raise ValidationError(f"unknown method {config['method']!r}; choose from {_METHODS}")
    dataset = config["dataset"]
    if dataset["kind"] == "mnist-binary":
        for key in ("images", "labels"):
            if not os.path.exists(dataset[key]):
                raise ValidationError(f"referenced file does not exist: {dataset[key]}")
    noise = config["noise"]
    if noise.get("kind") == "class-transition" and not os.path.exists(noise["csv"]):
        raise ValidationError(f"referenced file does not exist: {noise['csv']}")


def _synth_multiclass(n: int, d: int, classes: int, seed: int) -> DataSet:
    """Sphere inputs with labels from quantile bins of a random margin.

    Gives the multiclass commands a synthetic source; classes are balanced
    by construction (rank of w.x cut into equal bins).
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    w = rng.standard_normal(d)
    w /= np.linalg.norm(w)
    rank = np.argsort(np.argsort(x @ w))
    labels = 1 + (rank * classes) // n
    return DataSet(x, labels, labels.copy(), TASK_MULTICLASS, num_classes=classes)


def build_dataset(spec: dict) -> DataSet:
    kind = spec.get("kind")
    if kind == "synth-sphere":
        return synth_sphere(int(spec["n"]), int(spec["d"]), spec["target"], int(spec["seed"]))
    if kind == "synth-multiclass":
        return _synth_multiclass(
            int(spec["n"]), int(spec["d"]), int(spec.get("classes", 3)), int(spec["seed"])
        )
    if kind == "mnist-binary":
        return load_mnist_binary(
            spec["images"], spec["labels"], int(spec["class_a"]), int(spec["class_b"]),
            limit=spec.get("limit"),
        )
    raise ValidationError(f"unknown dataset kind {kind!r}")


def build_train_test(config: dict):
    """Training set plus matched test set (or None).

    A ``test_n`` field on a synth-sphere dataset draws one larger sample and
    splits it, so train and test share the target direction; an explicit
    ``test_dataset`` spec (for example the MNIST test files) takes priority.
    """
    spec = config["dataset"]
    if config["test_dataset"]:
        return build_dataset(spec), build_dataset(config["test_dataset"])
    test_n = spec.get("test_n")
    if test_n and spec.get("kind") in ("synth-sphere", "synth-multiclass"):
        joint = dict(spec, n=int(spec["n"]) + int(test_n))
        full = build_dataset(joint)
        return split_dataset(full, int(spec["n"]))
    return build_dataset(spec), None


def build_noise_model(spec: dict, override_level=None):
    kind = spec.get("kind", "none")
    if override_level is not None and kind in ("none", "binary-flip"):
        if override_level == 0.0:
            return None
        return noise_mod.BinaryFlip(float(override_level))
    if override_level is not None and kind == "additive":
        return noise_mod.AdditiveNoise(float(override_level), spec.get("shape", "gaussian"))
    if kind == "none":
        return None
    if kind == "binary-flip":
        return noise_mod.BinaryFlip(float(spec["p"]))
    if kind == "additive":
        return noise_mod.AdditiveNoise(float(spec["sigma"]), spec.get("shape", "gaussian"))
    if kind == "class-transition":
        return noise_mod.read_transition_csv(spec["csv"])
    raise ValidationError(f"unknown noise kind {kind!r}")


def apply_noise(data: DataSet, model, seed) -> DataSet:
    if model is None:
        return data
    return noise_mod.corrupt(data, model, seed)


def build_net_config(spec: dict, input_dim: int, outputs: int) -> NetConfig:
    widths = tuple(int(w) for w in spec.get("widths", [512]))
    return NetConfig(
        input_dim=input_dim,
        widths=widths,
        outputs=outputs,
        freeze_first_last=bool(spec.get("freeze_first_last", True)),
        difference_trick=bool(spec.get("difference_trick", True)),
    )


def build_kernel_source(config: dict, data: DataSet, seed=0):
    model = config["model"]
    kind = model.get("kind")
    if kind == "analytic":
        return AnalyticNTK(int(model.get("depth", 2)))
    if kind == "net":
        outputs = data.num_classes if data.task == TASK_MULTICLASS else 1
        net_cfg = build_net_config(model, data.d, outputs)
        mlp = init_mlp(net_cfg, (int(model.get("init_seed", 0)), int(seed)))
        return EmpiricalNTK(mlp)
    raise ValidationError(f"unknown model kind {kind!r}")


def _ensure_out(config: dict) -> str:
    out = config["out"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved_config.json"), "w") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_format_cell(v) for v in row) + "\n")


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _zero_one_error(predictions, data: DataSet, labels) -> float:
    if data.task == TASK_MULTICLASS:
        predicted = np.argmax(np.atleast_2d(predictions), axis=1) + 1
        return float(np.mean(predicted != labels))
    values = np.asarray(predictions, dtype=np.float64)
    if values.ndim == 2 and values.shape[1] == 1:
        values = values[:, 0]  # single-output nets predict (m, 1)
    values = np.atleast_1d(values)
    labels = np.asarray(labels, dtype=np.float64)
    if values.shape != labels.shape:
        raise ValidationError(
            f"prediction shape {values.shape} does not match labels {labels.shape}"
        )
    if data.task == TASK_BINARY:
        wrong = (values == 0.0) | (np.sign(values) != labels)
        return float(np.mean(wrong))
    return float(np.mean((values - labels) ** 2))


# ---------------------------------------------------------------------------
# kernel command


def cmd_kernel(config: dict) -> int:
    out = _ensure_out(config)
    data, _ = build_train_test(config)
    source = build_kernel_source(config, data)
    cache_path = os.path.join(out, "kernel.ntkk")
    matrix = None
    if os.path.exists(cache_path):
        try:
            cache = load_kernel(cache_path, data)
            if cache.provenance.kind == source.kind:
                matrix = cache.matrix
                _log(f"cache hit: reusing {cache_path}")
        except StaleCacheError:
            _log(f"stale cache at {cache_path}; rebuilding")
        except DataFormatError:
            _log(f"malformed cache at {cache_path}; rebuilding")
    if matrix is None:
        _log(f"building {source.kind} kernel for n={data.n}")
        matrix = source.gram(data)
        model = config["model"]
        if source.kind == "analytic":
            provenance = Provenance(kind="analytic", depth=int(model.get("depth", 2)))
        else:
            provenance = Provenance(
                kind="empirical",
                width=int(model.get("widths", [512])[0]),
                depth=len(model.get("widths", [512])) + 1,
                seed=int(model.get("init_seed", 0)),
            )
        save_kernel(make_kernel_cache(matrix, provenance, data), cache_path)
        _log(f"wrote cache {cache_path}")
    print(f"trace = {matrix.trace!r}")
    print(f"op_norm = {matrix.op_norm!r}")
    print(f"min_eig = {matrix.min_eig!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# equivalence command


def cmd_equivalence(config: dict) -> int:
    out = _ensure_out(config)
    model = config["model"]
    if model.get("kind") != "net":
        raise ValidationError("the equivalence check needs a finite-width net model")
    seed = int(config["seeds"][0])
    data, _ = build_train_test(config)
    noise_model = build_noise_model(config["noise"])
    data = apply_noise(data, noise_model, (seed, 0))
    net_cfg = build_net_config(model, data.d, 1)
    mlp = init_mlp(net_cfg, (int(model.get("init_seed", 0)), seed))
    lm = linearize(mlp, data)
    y = np.asarray(data.noisy_labels, dtype=np.float64)
    lambdas = [lam for lam in config["lambda_grid"] if lam > 0.0] or [config["lambda"]]
    steps = int(config["steps"])
    tol = float(config["tolerance"])
    rows = []
    summary = {}
    all_pass = True
    for lam in lambdas:
        eta = config["eta"] if config["eta"] else lm.default_eta(lam)
        traj_rdi = run_gd_rdi(lm, y, lam, eta=eta, steps=steps)
        traj_aux = run_gd_aux(lm, y, lam, eta=eta, steps=steps)
        report = check_equivalence(traj_rdi, traj_aux, tol=tol)
        summary[str(lam)] = {
            "eta": eta,
            "max_abs": report.max_abs,
            "max_rel": report.max_rel,
            "passed": report.passed,
        }
        all_pass = all_pass and report.passed
        for t in range(steps + 1):
            rows.append(
                (
                    lam,
                    t,
                    float(traj_rdi.objectives[t]),
                    float(traj_aux.objectives[t]),
                    float(traj_rdi.dist_from_init[t]),
                    float(report.gaps[t]),
                    float(report.rel_gaps[t]),
                )
            )
        _log(f"lambda={lam}: max relative gap {report.max_rel:.3e} ({'pass' if report.passed else 'FAIL'})")
    _write_csv(
        os.path.join(out, "trajectory.csv"),
        ["lambda", "t", "objective_rdi", "objective_aux", "dist_from_init", "gap", "rel_gap"],
        rows,
    )
    with open(os.path.join(out, "equivalence.json"), "w") as f:
        json.dump({"tolerance": tol, "runs": summary}, f, indent=2, sort_keys=True)
        f.write("\n")
    return EXIT_OK if all_pass else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# train command


def cmd_train(config: dict) -> int:
    out = _ensure_out(config)
    method = config["method"]
    if not method.startswith("net-"):
        raise ValidationError("the train command needs a net-* method")
    seed = int(config["seeds"][0])
    data, test = build_train_test(config)
    noise_model = build_noise_model(config["noise"])
    data = apply_noise(data, noise_model, (seed, 0))
    outputs = data.num_classes if data.task == TASK_MULTICLASS else 1
    net_cfg = build_net_config(config["model"], data.d, outputs)
    mlp = init_mlp(net_cfg, (int(config["model"].get("init_seed", 0)), seed))
    lam = float(config["lambda"])
    eta = config["eta"]
    if not eta:
        eta = 1.0 / (empirical_ntk(mlp, data).op_norm + lam * lam)
        _log(f"using default eta = {eta:.6g}")
    objective = method.removeprefix("net-")
    trained, aux, log = train_full(
        mlp, data, TrainConfig(objective=objective, eta=float(eta), steps=int(config["steps"]), lam=lam)
    )
    log.to_csv(os.path.join(out, "trajectory.csv"))
    dist = distance_to_init(trained)
    _log(f"final objective {log.objective[-1]:.6g}, train error {log.train_error[-1]:.4f}")
    _log(f"distance to init per layer: {[round(float(v), 6) for v in dist]}")
    if test is not None:
        predictions = forward(trained, test.inputs)
        err = _zero_one_error(predictions, test, test.clean_labels)
        _log(f"clean test error {err:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# krr command


def cmd_krr(config: dict) -> int:
    out = _ensure_out(config)
    seed = int(config["seeds"][0])
    data, test = build_train_test(config)
    noise_model = build_noise_model(config["noise"])
    data = apply_noise(data, noise_model, (seed, 0))
    source = build_kernel_source(config, data, seed)
    gram = source.gram(data)
    lam = float(config["lambda"])
    predictor = krr_fit(gram, data.noisy_labels.astype(np.float64), lam,
                        kernel_source=source, train_data=data)
    train_err = _zero_one_error(predictor.predict(data.inputs), data, data.noisy_labels)
    row = {"lambda": lam, "train_error_noisy": train_err, "test_error_clean": None}
    if test is not None:
        row["test_error_clean"] = _zero_one_error(predictor.predict(test.inputs), test, test.clean_labels)
        export_predictions(predictor, test.inputs, os.path.join(out, "predictions.csv"))
    _write_csv(
        os.path.join(out, "results.csv"),
        ["lambda", "train_error_noisy", "test_error_clean"],
        [(row["lambda"], row["train_error_noisy"], row["test_error_clean"])],
    )
    _log(f"lambda={lam}: train error (noisy) {train_err:.4f}, test error {row['test_error_clean']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bounds command


def cmd_bounds(config: dict) -> int:
    out = _ensure_out(config)
    seed = int(config["seeds"][0])
    data, _ = build_train_test(config)
    noise_spec = config["noise"]
    source = build_kernel_source(config, data, seed)
    gram = source.gram(data)
    lam = float(config["lambda"])
    if lam <= 0.0:
        raise ValidationError("bound reports need lambda > 0")
    delta = float(config["delta"])
    mode = config["constant_mode"]
    kind = noise_spec.get("kind", "none")
    if kind == "binary-flip":
        report = bounds_mod.bound_binary(
            gram, data.clean_labels, float(noise_spec["p"]), lam, delta, data.n, constant_mode=mode
        )
    elif kind == "class-transition":
        transition = noise_mod.read_transition_csv(noise_spec["csv"])
        Y = noise_mod.onehot_matrix(data.clean_labels, data.num_classes)
        report = bounds_mod.bound_multiclass(
            gram, Y, transition.matrix, lam, delta, data.n, constant_mode=mode
        )
    else:
        sigma = float(noise_spec.get("sigma", config["sigma"]))
        cfg = bounds_mod.BoundConfig(lam=lam, sigma=sigma, delta=delta, constant_mode=mode)
        report = bounds_mod.bound_additive(gram, data.clean_labels, cfg, data.n)
    report.to_json(os.path.join(out, "bound_report.json"))
    _log(f"bound total = {report.total:.6g} (mode {mode})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep command


def _sweep_cells(config: dict):
    cells = []
    index = 0
    for noise_idx, noise_level in enumerate(config["noise_grid"]):
        for lam in config["lambda_grid"]:
            for seed in config["seeds"]:
                cells.append(
                    {
                        "index": index,
                        "noise_idx": noise_idx,
                        "noise": float(noise_level),
                        "lambda": float(lam),
                        "seed": int(seed),
                    }
                )
                index += 1
    return cells


# Gram matrices depend on (dataset, model, seed) but not on the noise level
# or lambda, so sweep cells within one seed can share them. Per-process memo;
# bounded so big kernels do not accumulate.
_GRAM_MEMO = {}
_GRAM_MEMO_LIMIT = 8


def _memoized_gram(config: dict, train, seed: int):
    key = (
        json.dumps(config["dataset"], sort_keys=True),
        json.dumps(config["model"], sort_keys=True),
        seed,
    )
    if key not in _GRAM_MEMO:
        if len(_GRAM_MEMO) >= _GRAM_MEMO_LIMIT:
            _GRAM_MEMO.clear()
        source = build_kernel_source(config, train, seed)
        _GRAM_MEMO[key] = (source, source.gram(train))
    return _GRAM_MEMO[key]


def _run_sweep_cell(config: dict, cell: dict) -> dict:
    method = config["method"]
    train, test = build_train_test(config)
    noise_model = build_noise_model(config["noise"], override_level=cell["noise"])
    train = apply_noise(train, noise_model, (cell["seed"], cell["noise_idx"]))
    lam = cell["lambda"]
    seed = cell["seed"]
    distance = None
    bound_total = None

    if method == "krr":
        source, gram = _memoized_gram(config, train, seed)
        predictor = krr_fit(gram, train.noisy_labels.astype(np.float64), lam,
                            kernel_source=source, train_data=train)
        train_predictions = predictor.predict(train.inputs)
        test_predictions = predictor.predict(test.inputs) if test is not None else None
        if train.task == TASK_BINARY and cell["noise"] > 0.0 and lam > 0.0:
            bound_total = bounds_mod.bound_binary(
                gram, train.clean_labels, cell["noise"], lam, float(config["delta"]),
                train.n, constant_mode=config["constant_mode"],
            ).total
    elif method.startswith("linear-"):
        model = config["model"]
        if model.get("kind") != "net":
            raise ValidationError("linear-* methods need a finite-width net model")
        net_cfg = build_net_config(model, train.d, 1)
        mlp = init_mlp(net_cfg, (int(model.get("init_seed", 0)), seed))
        lm = linearize(mlp, train)
        y = np.asarray(train.noisy_labels, dtype=np.float64)
        eta = config["eta"] if config["eta"] else lm.default_eta(lam)
        if method == "linear-rdi":
            traj = run_gd_rdi(lm, y, lam, eta=eta, steps=int(config["steps"]))
        else:
            if lam <= 0.0:
                raise ValidationError("linear-aux needs lambda > 0")
            traj = run_gd_aux(lm, y, lam, eta=eta, steps=int(config["steps"]))
        coeffs = traj.final_coeffs()
        train_predictions = lm.K.values @ coeffs
        test_predictions = lm.predict(coeffs, test.inputs) if test is not None else None
        distance = float(traj.dist_from_init[-1])
    elif method.startswith("net-"):
        outputs = train.num_classes if train.task == TASK_MULTICLASS else 1
        net_cfg = build_net_config(config["model"], train.d, outputs)
        mlp = init_mlp(net_cfg, (int(config["model"].get("init_seed", 0)), seed))
        eta = config["eta"]
        if not eta:
            eta = 1.0 / (empirical_ntk(mlp, train).op_norm + lam * lam)
        trained, _, log = train_full(
            mlp, train,
            TrainConfig(method.removeprefix("net-"), eta=float(eta), steps=int(config["steps"]), lam=lam),
        )
        train_predictions = forward(trained, train.inputs)
        test_predictions = forward(trained, test.inputs) if test is not None else None
        distance = float(np.linalg.norm(distance_to_init(trained)))
    else:
        raise ValidationError(f"unknown method {method!r}")

    row = {
        "noise": cell["noise"],
        "lambda": lam,
        "seed": seed,
        "method": method,
        "train_error_noisy": _zero_one_error(train_predictions, train, train.noisy_labels),
        "test_error_clean": (
            _zero_one_error(test_predictions, test, test.clean_labels) if test is not None else None
        ),
        "distance_to_init": distance,
        "bound_total": bound_total,
        "status": "ok",
    }
    return row


def _cell_worker(payload):
    config, cell = payload
    try:
        return cell["index"], _run_sweep_cell(config, cell)
    except ToolkitError as exc:
        return cell["index"], {
            "noise": cell["noise"],
            "lambda": cell["lambda"],
            "seed": cell["seed"],
            "method": config["method"],
            "train_error_noisy": None,
            "test_error_clean": None,
            "distance_to_init": None,
            "bound_total": None,
            "status": f"error:{type(exc).__name__}",
        }


def cmd_sweep(config: dict) -> int:
    out = _ensure_out(config)
    if not config["lambda_grid"]:
        raise ValidationError("sweep needs a nonempty lambda grid")
    if not config["noise_grid"]:
        raise ValidationError("sweep needs a nonempty noise grid")
    cells = _sweep_cells(config)
    _log(f"running {len(cells)} sweep cells with method {config['method']}")
    workers = int(config["workers"])
    results = [None] * len(cells)
    payloads = [(config, cell) for cell in cells]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            for index, row in pool.map(_cell_worker, payloads):
                results[index] = row
    else:
        for payload in payloads:
            index, row = _cell_worker(payload)
            results[index] = row
    header = [
        "noise", "lambda", "seed", "method", "train_error_noisy",
        "test_error_clean", "distance_to_init", "bound_total", "status",
    ]
    _write_csv(
        os.path.join(out, "results.csv"),
        header,
        [tuple(row[h] for h in header) for row in results],
    )

    # Best-lambda-per-noise summary over seed-averaged clean test error.
    summary_rows = []
    for noise_level in config["noise_grid"]:
        noise_level = float(noise_level)
        by_lambda = {}
        for row in results:
            if row["noise"] != noise_level or row["status"] != "ok":
                continue
            if row["test_error_clean"] is None:
                continue
            by_lambda.setdefault(row["lambda"], []).append(row["test_error_clean"])
        if not by_lambda:
            continue
        means = {lam: float(np.mean(v)) for lam, v in by_lambda.items()}
        best_lambda = min(means, key=lambda lam: (means[lam], lam))
        summary_rows.append(
            (noise_level, best_lambda, means[best_lambda], means.get(0.0))
        )
    _write_csv(
        os.path.join(out, "summary.csv"),
        ["noise", "best_lambda", "best_test_error", "lambda0_test_error"],
        summary_rows,
    )

    # Distance-vs-hyperparameter table (seed-averaged) for methods that track it.
    distance_rows = []
    for noise_level in config["noise_grid"]:
        for lam in config["lambda_grid"]:
            values = [
                row["distance_to_init"]
                for row in results
                if row["noise"] == float(noise_level)
                and row["lambda"] == float(lam)
                and row["status"] == "ok"
                and row["distance_to_init"] is not None
            ]
            if values:
                distance_rows.append((float(noise_level), float(lam), float(np.mean(values))))
    if distance_rows:
        _write_csv(
            os.path.join(out, "distance_summary.csv"),
            ["noise", "lambda", "mean_distance_to_init"],
            distance_rows,
        )
    failures = sum(1 for row in results if row["status"] != "ok")
    _log(f"sweep finished: {len(cells) - failures} ok, {failures} failed cells")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ntkreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("kernel", "build (or reuse) a kernel matrix cache and print its statistics"),
        ("equivalence", "check that the two regularized trajectories coincide step for step"),
        ("train", "train a finite-width network with the chosen objective"),
        ("krr", "fit kernel ridge regression and report errors"),
        ("bounds", "write an itemized generalization bound report"),
        ("sweep", "run a (noise x lambda x seed) experiment grid"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override: single seed")
        p.add_argument("--out", type=str, default=None, help="override: output directory")
        p.add_argument("--lambda", dest="lam", type=float, default=None, help="override: lambda")
        p.add_argument("--noise", type=float, default=None, help="override: flip probability")
        p.add_argument("--width", type=int, default=None, help="override: hidden width")
        p.add_argument("--depth", type=int, default=None, help="override: analytic kernel depth")
        p.add_argument("--eta", type=float, default=None, help="override: learning rate")
        p.add_argument("--steps", type=int, default=None, help="override: GD steps")
        p.add_argument("--constant-mode", type=str, default=None,
                       choices=["explicit-appendix", "unit-constants"])
        p.add_argument("--workers", type=int, default=None, help="parallel sweep cells")
    return parser


def _apply_flag_overrides(config: dict, args) -> dict:
    if args.seed is not None:
        config["seeds"] = [args.seed]
    if args.out is not None:
        config["out"] = args.out
    if args.lam is not None:
        config["lambda"] = args.lam
    if args.noise is not None:
        config["noise"] = {"kind": "binary-flip", "p": args.noise} if args.noise > 0 else {"kind": "none"}
    if args.width is not None:
        config.setdefault("model", {})
        config["model"] = dict(config["model"], kind="net", widths=[args.width])
    if args.depth is not None:
        config["model"] = dict(config["model"], depth=args.depth)
    if args.eta is not None:
        config["eta"] = args.eta
    if args.steps is not None:
        config["steps"] = args.steps
    if args.constant_mode is not None:
        config["constant_mode"] = args.constant_mode
    if args.workers is not None:
        config["workers"] = args.workers
    _validate_config(config)
    return config


_COMMANDS = {
    "kernel": cmd_kernel,
    "equivalence": cmd_equivalence,
    "train": cmd_train,
    "krr": cmd_krr,
    "bounds": cmd_bounds,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        config = _apply_flag_overrides(config, args)
        return _COMMANDS[args.command](config)
    except (ValidationError, EmptyDatasetError, TrickViolationError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SingularityError, DivergenceError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataFormatError, StaleCacheError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
