"""Adaptive coupling-weight driver around the alternating solver.

The coupling weight lam balances the tensor term against the function-value
term, and its useful magnitude is rarely known upfront.  This module runs
the solver at geometrically increasing weights lam0, lam0*beta, lam0*beta^2,
... and gates the escalation by a task-level metric computed on a held-out
validation set: the loop continues while the metric is non-increasing
(ties included) and returns the last stage before it got worse.

Each stage starts from an independent seeded initialization with seed
``base_seed XOR stage``; pass ``warm_start=True`` to reuse the previous
stage's best factors instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .model import eval_batch
from .solver import SolverConfig, SolverDivergenceError, fit, state_to_model

__all__ = [
    "TunerConfig",
    "StageResult",
    "TunerReport",
    "tune",
    "validation_metric",
]


@dataclass(frozen=True)
class TunerConfig:
    solver: SolverConfig
    lambda0: float = 1e-6
    beta: float = 100.0
    max_stages: int = 8
    warm_start: bool = False
    metric: str = "rrmse_sum"

    def __post_init__(self):
        if self.lambda0 <= 0:
            raise ValueError("lambda0 must be positive")
        if self.beta <= 1:
            raise ValueError("beta must exceed 1")
        if self.max_stages < 1:
            raise ValueError("max_stages must be >= 1")
        if self.metric != "rrmse_sum":
            raise ValueError(f"unknown stop metric {self.metric!r}")

    def to_dict(self):
        return {
            "solver": self.solver.to_dict(),
            "lambda0": self.lambda0,
            "beta": self.beta,
            "max_stages": self.max_stages,
            "warm_start": self.warm_start,
            "metric": self.metric,
        }


@dataclass
class StageResult:
    lam: float
    report: object  # FitReport
    metric: float


@dataclass
class TunerReport:
    """Per-stage fits with the recorded weight actually used, plus the pick.

    ``selected`` indexes the last stage whose metric did not exceed its
    predecessor's; every earlier stage has a metric at least as large.
    """

    stages: list
    selected: int

    @property
    def best(self):
        return self.stages[self.selected]

    def to_dict(self):
        return {
            "stages": [
                {
                    "stage": t,
                    "lam": st.lam,
                    "metric": st.metric,
                    "report": st.report.to_dict(),
                }
                for t, st in enumerate(self.stages)
            ],
            "selected": self.selected,
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def validation_metric(state_or_model, points, targets):
    """Sum of per-output relative root-mean-squared error percentages.

    ``targets`` is the n x S matrix of true outputs at the points; the
    decoupled model is reconstructed from the solver state (fitted weights
    and coefficients, frozen constants included) when a state is passed.
    """
    model = (
        state_or_model
        if hasattr(state_or_model, "weights") and hasattr(state_or_model, "basis")
        else state_to_model(state_or_model)
    )
    points = np.asarray(points, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if points.shape[0] < 2:
        raise ValueError("need at least two validation points")
    if not np.all(np.isfinite(targets)):
        raise ValueError("non-finite validation targets")
    preds = eval_batch(model, points)
    if preds.shape != targets.shape:
        raise ValueError(f"target shape {targets.shape} != prediction shape {preds.shape}")
    centered = targets - targets.mean(axis=1, keepdims=True)
    den = np.sum(centered * centered, axis=1)
    if np.any(den == 0):
        raise ValueError("zero variance in some output: degenerate validation set")
    num = np.sum((targets - preds) ** 2, axis=1)
    return float(np.sum(np.sqrt(num / den) * 100.0))


def tune(cfg, j_tensor, f_matrix, points, validation):
    """Escalate lam geometrically until the validation metric worsens.

    Parameters
    ----------
    cfg : TunerConfig
    j_tensor, f_matrix, points : solver inputs
    validation : (val_points, val_targets)
        Non-empty held-out points with the true outputs, n x S_val.

    Returns
    -------
    TunerReport
        One entry per stage run; ``selected`` is the stage before the first
        worsening (the last stage if none worsened within ``max_stages``).
    """
    val_points, val_targets = validation
    val_points = np.asarray(val_points, dtype=float)
    val_targets = np.asarray(val_targets, dtype=float)
    if val_points.shape[0] < 1:
        raise ValueError("validation set must be non-empty")

    stages = []
    prev_metric = np.inf  # sentinel for the stage before the first
    lam = cfg.lambda0
    selected = None
    prev_state = None
    for t in range(cfg.max_stages):
        inner = replace(
            cfg.solver, lam=lam, rng_seed=int(cfg.solver.rng_seed) ^ t
        )
        try:
            report = fit(
                inner,
                j_tensor,
                f_matrix,
                points,
                initial_state=prev_state if cfg.warm_start else None,
            )
        except SolverDivergenceError as exc:
            raise SolverDivergenceError(
                f"stage {t} (lam={lam:g}): {exc}", exc.trace
            ) from exc
        metric = validation_metric(report.state, val_points, val_targets)
        stages.append(StageResult(lam=lam, report=report, metric=metric))
        if metric > prev_metric:
            selected = t - 1
            break
        prev_metric = metric
        prev_state = report.state
        lam *= cfg.beta
    if selected is None:
        selected = len(stages) - 1
    return TunerReport(stages=stages, selected=selected)
