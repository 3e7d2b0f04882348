"""Batched, seeded decoupling experiments with CSV/JSON result tables.

Targets are two-layer polynomial benchmark systems shipped with the package
(``f1``, ``f2``, ``f3``), freshly generated random systems under a
collinearity cap, or models loaded from JSON files.  Each run samples its
own training and validation points, builds the Jacobian tensor and the
evaluation matrix, drives the adaptive-weight tuner and records the
relative decomposition errors plus per-output validation errors.

Randomness is derived from the counter-based Philox generator through
``numpy.random.SeedSequence`` so results reproduce across platforms.  Run r
of an experiment with base seed s uses the streams

    SeedSequence(s, spawn_key=(r, 0))  training points
    SeedSequence(s, spawn_key=(r, 1))  validation points
    SeedSequence(s, spawn_key=(r, 2))  held-out test points (optional)
    SeedSequence(s, spawn_key=(r, 3))  solver initialization seed

and the tuner XORs the stage index into the solver seed per stage.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import BasisSpec, build_Y
from .model import (
    DecoupledModel,
    build_f_matrix,
    build_jacobian_tensor,
    eval_batch,
    internal_inputs_batch,
    load_model,
    true_pt_factors,
)
from .solver import SolverConfig, SolverState, fit, state_to_model
from .tensor_ops import fro_norm
from .tuner import StageResult, TunerConfig, TunerReport, tune, validation_metric

__all__ = [
    "SyntheticSpec",
    "ExperimentConfig",
    "RunResult",
    "ResultTable",
    "builtin_system",
    "builtin_names",
    "generate_system",
    "collinearity",
    "error_metrics",
    "rrmse",
    "run_experiment",
    "write_results",
]

BUILTINS = ("f1", "f2", "f3")


def builtin_names():
    return BUILTINS


def builtin_system(name):
    """One of the shipped two-layer benchmark systems, reconstructed exactly."""
    if name == "f1":
        w2 = [[1.61, -1.9], [-0.03, 0.11]]
        w1 = [[0.87, -0.99], [-1.42, 0.9]]
        w0 = [[1.72, -0.73], [-1.26, -1.18]]
        g1 = [
            [0.0, 0.58, -2.69, 2.37, 1.37, 1.91],
            [0.0, 0.0, 1.86, -2.42, -1.69, -1.45],
        ]
        g2 = [
            [-0.19, -0.24, 1.26],
            [-1.93, 0.19, -1.99],
        ]
    elif name == "f2":
        w2 = [[-0.59, 0.86], [0.02, -1.1], [-1.02, 1.17]]
        w1 = [[0.21, -0.94], [-1.12, 0.56]]
        w0 = [[1.08, 1.71, 0.44], [-1.4, -0.04, -0.49]]
        g1 = [
            [0.0, -0.03, 2.49, 2.67],
            [0.0, 0.2, -1.49, 1.33],
        ]
        g2 = [
            [-0.8, -0.01, -1.64, -0.88],
            [0.91, -1.12, -1.61, 1.69],
        ]
    elif name == "f3":
        w2 = [[1.05, -1.11], [-0.95, -0.17], [-1.0, 0.27]]
        w1 = [[1.49, -1.05, -1.0], [0.78, -1.29, 0.62]]
        w0 = [
            [-1.43, 0.06, 0.76, 1.43],
            [0.59, 0.33, 0.84, -0.99],
            [1.6, -0.23, -1.92, 1.84],
        ]
        g1 = [
            [0.0, 2.08, -0.73, -0.41],
            [0.0, 2.0, -0.77, -2.76],
            [0.0, 0.33, -0.29, 1.35],
        ]
        g2 = [
            [-0.73, 2.04, -0.18, 0.38, 0.97],
            [-0.23, 0.74, -1.67, 1.4, -0.71],
        ]
    else:
        raise ValueError(f"unknown builtin system {name!r}")
    return DecoupledModel(
        weights=(np.array(w0), np.array(w1), np.array(w2)),
        coeffs=(np.array(g1), np.array(g2)),
    )


def collinearity(w):
    """Largest normalized pairwise column inner product; -inf below two columns."""
    w = np.asarray(w, dtype=float)
    r = w.shape[1]
    if r < 2:
        return -np.inf
    norms = np.linalg.norm(w, axis=0)
    gram = (w.T @ w) / np.outer(norms, norms)
    return float(np.max(gram[~np.eye(r, dtype=bool)]))


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a random decoupled system with bounded factor collinearity.

    Outer weight matrices are drawn uniformly from [-2, 2], middle layers
    from [-1.5, 1.5], each redrawn until its collinearity factor is below
    ``collinearity_max``.  Polynomial coefficients come from [-3, 3]; the
    constant terms of all but the last layer are zero, matching the shipped
    benchmark systems.
    """

    n_inputs: int
    n_outputs: int
    ranks: tuple
    degrees: tuple
    outer_range: tuple = (-2.0, 2.0)
    middle_range: tuple = (-1.5, 1.5)
    coeff_range: tuple = (-3.0, 3.0)
    collinearity_max: float = 0.5
    seed: int = 0
    max_tries: int = 10000

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        object.__setattr__(self, "degrees", tuple(int(d) for d in self.degrees))
        if len(self.ranks) != len(self.degrees) or not self.ranks:
            raise ValueError("ranks and degrees must be non-empty and equally long")
        if self.n_inputs < 1 or self.n_outputs < 1:
            raise ValueError("need positive input and output dims")

    def to_dict(self):
        return {
            "n_inputs": self.n_inputs,
            "n_outputs": self.n_outputs,
            "ranks": list(self.ranks),
            "degrees": list(self.degrees),
            "outer_range": list(self.outer_range),
            "middle_range": list(self.middle_range),
            "coeff_range": list(self.coeff_range),
            "collinearity_max": self.collinearity_max,
            "seed": int(self.seed),
            "max_tries": self.max_tries,
        }


def generate_system(spec):
    """Draw a random decoupled system per the spec; deterministic in the seed."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(spec.seed))))
    L = len(spec.ranks)
    shapes = [(spec.ranks[0], spec.n_inputs)]
    shapes += [(spec.ranks[i + 1], spec.ranks[i]) for i in range(L - 1)]
    shapes += [(spec.n_outputs, spec.ranks[-1])]
    weights = []
    for i, shape in enumerate(shapes):
        lo, hi = spec.middle_range if 0 < i < L else spec.outer_range
        for _ in range(spec.max_tries):
            w = rng.uniform(lo, hi, size=shape)
            if collinearity(w) < spec.collinearity_max:
                weights.append(w)
                break
        else:
            raise RuntimeError(
                f"rejection budget exceeded for weight matrix {i}; "
                f"collinearity cap {spec.collinearity_max} may be infeasible"
            )
    lo, hi = spec.coeff_range
    coeffs = []
    for l, (r, d) in enumerate(zip(spec.ranks, spec.degrees)):
        c = rng.uniform(lo, hi, size=(r, d + 1))
        if l < L - 1:
            c[:, 0] = 0.0
        coeffs.append(c)
    return DecoupledModel(weights=tuple(weights), coeffs=tuple(coeffs))


def error_metrics(j_true, j_hat, f_true, f_hat):
    """Relative squared errors (||J - Jhat||^2/||J||^2, ||F - Fhat||^2/||F||^2)."""
    j_true = np.asarray(j_true, dtype=float)
    j_hat = np.asarray(j_hat, dtype=float)
    f_true = np.asarray(f_true, dtype=float)
    f_hat = np.asarray(f_hat, dtype=float)
    if j_true.shape != j_hat.shape or f_true.shape != f_hat.shape:
        raise ValueError("shape mismatch between true and estimated arrays")
    den_j = fro_norm(j_true) ** 2
    den_f = fro_norm(f_true) ** 2
    if den_j == 0 or den_f == 0:
        raise ValueError("zero norm in error denominator")
    return (
        fro_norm(j_true - j_hat) ** 2 / den_j,
        fro_norm(f_true - f_hat) ** 2 / den_f,
    )


def rrmse(outputs_true, outputs_pred):
    """Per-output relative root-mean-squared errors, in percent.

    Both arguments are n x S with S >= 2; output i is normalized by the
    spread of the true values around their mean.
    """
    t = np.asarray(outputs_true, dtype=float)
    p = np.asarray(outputs_pred, dtype=float)
    if t.shape != p.shape or t.ndim != 2:
        raise ValueError("outputs must be matching n x S matrices")
    if t.shape[1] < 2:
        raise ValueError("need at least two sampling points")
    centered = t - t.mean(axis=1, keepdims=True)
    den = np.sum(centered * centered, axis=1)
    if np.any(den == 0):
        raise ValueError("zero variance in some output")
    num = np.sum((t - p) ** 2, axis=1)
    return np.sqrt(num / den) * 100.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings for a batch of decoupling runs against one target.

    Exactly one of ``builtin``, ``model_file`` or ``generate`` selects the
    target.  ``init_perturb`` is a debug option: when set, every run starts
    the solver at the target's true factors perturbed entrywise by the given
    relative amount instead of a random initialization (requires ranks and
    degrees to match the target).
    """

    solver: SolverConfig
    builtin: str = None
    model_file: str = None
    generate: SyntheticSpec = None
    n_samples: int = 30
    n_validation: int = 30
    n_test: int = 0
    runs: int = 1
    seed: int = 0
    lambda0: float = 1e-6
    beta: float = 100.0
    max_stages: int = 8
    jobs: int = 1
    init_perturb: float = None

    def __post_init__(self):
        picked = [x for x in (self.builtin, self.model_file, self.generate) if x is not None]
        if len(picked) != 1:
            raise ValueError("exactly one of builtin, model_file or generate must be set")
        if self.builtin is not None and self.builtin not in BUILTINS:
            raise ValueError(f"unknown builtin {self.builtin!r}")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.n_samples < 1:
            raise ValueError("need at least one sampling point")
        if self.n_validation < 2:
            raise ValueError("need at least two validation points")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    def target_model(self):
        if self.builtin is not None:
            return builtin_system(self.builtin)
        if self.model_file is not None:
            return load_model(self.model_file)
        return generate_system(self.generate)

    def to_dict(self):
        out = {
            "solver": self.solver.to_dict(),
            "n_samples": self.n_samples,
            "n_validation": self.n_validation,
            "n_test": self.n_test,
            "runs": self.runs,
            "seed": int(self.seed),
            "lambda0": self.lambda0,
            "beta": self.beta,
            "max_stages": self.max_stages,
            "jobs": self.jobs,
        }
        if self.builtin is not None:
            out["target"] = {"builtin": self.builtin}
        elif self.model_file is not None:
            out["target"] = {"model_file": self.model_file}
        else:
            out["target"] = {"generate": self.generate.to_dict()}
        if self.init_perturb is not None:
            out["init_perturb"] = self.init_perturb
        return out


@dataclass
class RunResult:
    run_id: int
    seed: int
    lambda_selected: float = None
    iterations: int = None
    stop_reason: str = None
    error_j: float = None
    error_f: float = None
    output_errors: list = field(default_factory=list)
    test_errors: list = None
    error: str = None

    @property
    def failed(self):
        return self.error is not None


@dataclass
class ResultTable:
    rows: list
    aggregates: dict
    config: ExperimentConfig


def _rng(base_seed, run_id, stream):
    seq = np.random.SeedSequence(int(base_seed), spawn_key=(int(run_id), stream))
    return np.random.Generator(np.random.Philox(seq))


def _solver_seed(base_seed, run_id):
    seq = np.random.SeedSequence(int(base_seed), spawn_key=(int(run_id), 3))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def _perturbed_truth(target, cfg, points, seed):
    """Solver state at the target's exact factors, entrywise perturbed."""
    if tuple(target.ranks) != cfg.solver.ranks or tuple(target.degrees) != cfg.solver.degrees:
        raise ValueError("init_perturb requires solver ranks/degrees matching the target")
    factors = true_pt_factors(target, points)
    us = internal_inputs_batch(target.weights, target.coeffs, points)
    yb = build_Y(us[-1], BasisSpec(target.degrees[-1]))
    R = np.stack(
        [yb.blocks[j] @ target.coeffs[-1][j] for j in range(len(yb.blocks))], axis=1
    )
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(4,))))
    scale = cfg.init_perturb

    def wiggle(a):
        return a * (1.0 + scale * rng.uniform(-1.0, 1.0, size=a.shape))

    return SolverState(
        weights=[wiggle(w) for w in factors.weights],
        G=[wiggle(g) for g in factors.G],
        R=wiggle(R),
        coeffs=[wiggle(c) for c in target.coeffs],
    )


def _single_run(cfg, run_id):
    target = cfg.target_model()
    m = target.n_inputs
    solver_seed = _solver_seed(cfg.seed, run_id)
    row = RunResult(run_id=run_id, seed=solver_seed)
    try:
        train = _rng(cfg.seed, run_id, 0).uniform(-1.0, 1.0, size=(cfg.n_samples, m))
        val = _rng(cfg.seed, run_id, 1).uniform(-1.0, 1.0, size=(cfg.n_validation, m))
        j_tensor = build_jacobian_tensor(target, train)
        f_matrix = build_f_matrix(target, train)
        val_targets = eval_batch(target, val)

        solver_cfg = replace(cfg.solver, rng_seed=solver_seed)
        tuner_cfg = TunerConfig(
            solver=solver_cfg,
            lambda0=cfg.lambda0,
            beta=cfg.beta,
            max_stages=cfg.max_stages,
        )
        if cfg.init_perturb is not None:
            # debug path: single stage from the perturbed truth
            state0 = _perturbed_truth(target, cfg, train, solver_seed)
            fr = fit(
                replace(solver_cfg, lam=cfg.lambda0),
                j_tensor,
                f_matrix,
                train,
                initial_state=state0,
            )
            metric = validation_metric(fr.state, val, val_targets)
            report = TunerReport(
                stages=[StageResult(lam=cfg.lambda0, report=fr, metric=metric)],
                selected=0,
            )
        else:
            report = tune(tuner_cfg, j_tensor, f_matrix, train, (val, val_targets))

        best = report.best
        fitted = best.report
        row.lambda_selected = best.lam
        row.iterations = fitted.iterations
        row.stop_reason = fitted.stop_reason
        row.error_j = fitted.error_j
        row.error_f = fitted.error_f
        fitted_model = state_to_model(fitted.state)
        row.output_errors = list(rrmse(val_targets, eval_batch(fitted_model, val)))
        if cfg.n_test >= 2:
            test = _rng(cfg.seed, run_id, 2).uniform(-1.0, 1.0, size=(cfg.n_test, m))
            test_targets = eval_batch(target, test)
            row.test_errors = list(rrmse(test_targets, eval_batch(fitted_model, test)))
    except Exception as exc:  # noqa: BLE001 - failed runs are recorded, not dropped
        row.error = f"{type(exc).__name__}: {exc}"
        row.stop_reason = "error"
    return row


def _single_run_star(args):
    return _single_run(*args)


def _aggregate(values):
    a = np.asarray(values, dtype=float)
    return {
        "mean": float(np.mean(a)),
        "median": float(np.median(a)),
        "std": float(np.std(a, ddof=1)) if a.size > 1 else 0.0,
    }


def run_experiment(cfg):
    """Execute all runs (optionally in parallel) and aggregate the metrics.

    Rows are ordered by run id regardless of completion order; aggregates
    cover the successful runs only and are recomputable from the rows.
    """
    n_outputs = cfg.target_model().n_outputs
    args = [(cfg, r) for r in range(cfg.runs)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            rows = list(pool.map(_single_run_star, args))
    else:
        rows = [_single_run(cfg, r) for r in range(cfg.runs)]
    rows.sort(key=lambda r: r.run_id)

    ok = [r for r in rows if not r.failed]
    aggregates = {"runs": cfg.runs, "failed": len(rows) - len(ok)}
    if ok:
        aggregates["error_j"] = _aggregate([r.error_j for r in ok])
        aggregates["error_f"] = _aggregate([r.error_f for r in ok])
        for i in range(n_outputs):
            aggregates[f"e_{i + 1}"] = _aggregate([r.output_errors[i] for r in ok])
        if all(r.test_errors is not None for r in ok) and cfg.n_test >= 2:
            for i in range(n_outputs):
                aggregates[f"test_e_{i + 1}"] = _aggregate(
                    [r.test_errors[i] for r in ok]
                )
    return ResultTable(rows=rows, aggregates=aggregates, config=cfg)


def _fmt(x):
    return "" if x is None else repr(float(x))


def write_results(table, csv_path, json_path):
    """Write the per-run CSV and the aggregate JSON.

    CSV columns: run_id, seed, lambda_selected, iters, stop_reason, err_J,
    err_F, e_1..e_n, error.  Reruns of the same configuration produce
    byte-identical files.
    """
    n_outputs = table.config.target_model().n_outputs
    header = ["run_id", "seed", "lambda_selected", "iters", "stop_reason", "err_J", "err_F"]
    header += [f"e_{i + 1}" for i in range(n_outputs)]
    header += ["error"]
    lines = [",".join(header)]
    for r in table.rows:
        parts = [
            str(r.run_id),
            str(r.seed),
            _fmt(r.lambda_selected),
            "" if r.iterations is None else str(r.iterations),
            r.stop_reason or "",
            _fmt(r.error_j),
            _fmt(r.error_f),
        ]
        errs = r.output_errors or []
        parts += [_fmt(errs[i]) if i < len(errs) else "" for i in range(n_outputs)]
        parts += ['"' + r.error.replace('"', "'") + '"' if r.error else ""]
        lines.append(",".join(parts))
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

    doc = {"config": table.config.to_dict(), "aggregates": table.aggregates}
    if any(r.test_errors for r in table.rows):
        doc["test_errors"] = {
            str(r.run_id): r.test_errors for r in table.rows if r.test_errors
        }
    with open(json_path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
