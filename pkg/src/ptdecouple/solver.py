"""Alternating minimizer for the coupled matrix-tensor decoupling objective.

Given a Jacobian tensor J (n x m x S), a function-evaluation matrix
F (n x S) and the sampling points, the solver minimizes

    || J - PT(W_0..W_L, G_1..G_L) ||^2  +  lam * || F - W_L @ R.T ||^2

subject to every G column being a derivative-structure combination of the
per-neuron polynomial coefficients and every R column the matching
function-value combination.  One sweep updates, in order,

    W_0, (c_1 / G_1, W_1), ..., (c_{L-1} / G_{L-1}, W_{L-1}),
    (c_L / G_L, R), W_L,

where each W update is an unconstrained linear least-squares subproblem and
the coefficient updates come in two flavours:

* ``proj``   - free least-squares update of the factor rows followed by a
  projection onto the coefficient constraint set;
* ``constr`` - direct least-squares update of the coefficients with the
  constraints satisfied by construction.

Constant coefficients of layers below the last multiply a structurally zero
column of the derivative structure, so they are unidentifiable from J; they
are frozen at their initial values and reported in the fit report.  The
last layer's constants are estimated through the coupled F term.

A fit is single-threaded and deterministic given its configuration;
separate fits share no mutable state and may run concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec, build_per_slice_X, build_X, build_Y
from .model import DecoupledModel, PTFactors, internal_inputs_batch, pt_slices
from .tensor_ops import fro_norm, khatri_rao, lstsq_info, unfold, vec, vec3

__all__ = [
    "SolverConfig",
    "SolverState",
    "FitReport",
    "SolverDivergenceError",
    "init_state",
    "build_MW",
    "build_MG",
    "rebalance",
    "update_W",
    "update_c_proj",
    "update_c_constr",
    "objective",
    "fit",
    "state_to_model",
]

STRATEGIES = ("proj", "constr")

# relative decrease below which an iteration does not count as an improvement
_IMPROVE_RTOL = 1e-12


class SolverDivergenceError(RuntimeError):
    """Raised when the objective turns non-finite; carries the trace so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class SolverConfig:
    """Settings for one alternating fit.

    ``ranks`` and ``degrees`` give the per-layer neuron counts and
    polynomial degrees (innermost layer first).  Initial factor entries are
    drawn uniformly from [init_low, init_high) by a seeded Philox generator.
    """

    ranks: tuple
    degrees: tuple
    lam: float = 1e-6
    min_iters: int = 10
    max_iters: int = 500
    patience: int = 50
    rng_seed: int = 0
    strategy: str = "constr"
    init_low: float = 0.1
    init_high: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        object.__setattr__(self, "degrees", tuple(int(d) for d in self.degrees))
        if len(self.ranks) != len(self.degrees) or not self.ranks:
            raise ValueError("ranks and degrees must be non-empty and equally long")
        if any(r < 1 for r in self.ranks) or any(d < 1 for d in self.degrees):
            raise ValueError("ranks and degrees must be positive")
        if not 0 < self.min_iters <= self.max_iters:
            raise ValueError("need 0 < min_iters <= max_iters")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.init_low < self.init_high:
            raise ValueError("init_low must be below init_high")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def n_layers(self):
        return len(self.ranks)

    def to_dict(self):
        return {
            "ranks": list(self.ranks),
            "degrees": list(self.degrees),
            "lam": self.lam,
            "min_iters": self.min_iters,
            "max_iters": self.max_iters,
            "patience": self.patience,
            "rng_seed": int(self.rng_seed),
            "strategy": self.strategy,
            "init_low": self.init_low,
            "init_high": self.init_high,
        }


@dataclass
class SolverState:
    """Mutable factor set: weights W_0..W_L, factors G_1..G_L, R and coefficients.

    ``trace`` records (iteration, j_term, f_term, total) per sweep with
    total = j_term + lam * f_term; ``n_truncated`` counts singular values
    truncated across all least-squares subproblems so far.
    """

    weights: list
    G: list
    R: np.ndarray
    coeffs: list
    trace: list = field(default_factory=list)
    n_truncated: int = 0

    @property
    def n_layers(self):
        return len(self.G)

    def factors(self):
        return PTFactors(weights=tuple(self.weights), G=tuple(self.G))

    def copy(self):
        return SolverState(
            weights=[w.copy() for w in self.weights],
            G=[g.copy() for g in self.G],
            R=self.R.copy(),
            coeffs=[c.copy() for c in self.coeffs],
            trace=list(self.trace),
            n_truncated=self.n_truncated,
        )


@dataclass
class FitReport:
    """Outcome of one fit: best state seen plus summary diagnostics."""

    state: SolverState
    error_j: float
    error_f: float
    iterations: int
    stop_reason: str
    config: SolverConfig
    n_truncated: int = 0

    @property
    def frozen_constants(self):
        """Constant coefficients of the layers below the last (frozen at init)."""
        return [c[:, 0].copy() for c in self.state.coeffs[:-1]]

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "trace": [list(rec) for rec in self.state.trace],
            "error_j": self.error_j,
            "error_f": self.error_f,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "truncated_singular_values": self.n_truncated,
            "frozen_constants": [c.tolist() for c in self.frozen_constants],
        }

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def init_state(cfg, dims):
    """Random starting state for problem dims (n, m, S).

    All entries of W_0..W_L, G_1..G_L, R and the coefficient vectors are
    drawn uniformly from [init_low, init_high), in that order, from a
    Philox generator seeded with ``rng_seed``; identical configs produce
    identical states on any platform.
    """
    n, m, S = dims
    if n < 1 or m < 1 or S < 1:
        raise ValueError(f"invalid dims {dims}")
    rng = np.random.Generator(np.random.Philox(int(cfg.rng_seed)))
    lo, hi = cfg.init_low, cfg.init_high
    ranks = cfg.ranks
    L = cfg.n_layers
    shapes = [(ranks[0], m)]
    shapes += [(ranks[i + 1], ranks[i]) for i in range(L - 1)]
    shapes += [(n, ranks[-1])]
    weights = [rng.uniform(lo, hi, size=s) for s in shapes]
    G = [rng.uniform(lo, hi, size=(S, r)) for r in ranks]
    R = rng.uniform(lo, hi, size=(S, ranks[-1]))
    coeffs = [
        rng.uniform(lo, hi, size=(r, d + 1)) for r, d in zip(ranks, cfg.degrees)
    ]
    return SolverState(weights=weights, G=G, R=R, coeffs=coeffs)


def _slice_chains(weights, G, s):
    """Partial chain products around each layer for slice s.

    left[l]  = W_L D_L(s) ... W_l          (n x r_l), defined for l = 1..L
    right[l] = W_{l-1} D_{l-1}(s) ... W_0  (r_l x m), defined for l = 1..L+1

    so the full slice is left[l] @ D_l(s) @ right[l] for every l, and also
    right[L+1].
    """
    L = len(G)
    left = {L: weights[L]}
    for l in range(L - 1, 0, -1):
        left[l] = (left[l + 1] * G[l][s][None, :]) @ weights[l]
    right = {1: weights[0]}
    for l in range(2, L + 2):
        right[l] = (weights[l - 1] * G[l - 2][s][None, :]) @ right[l - 1]
    return left, right


def build_MW(state, layer):
    """Coefficient matrix of the linear subproblem for W_layer.

    layer 0: (n*S x r_1) vertical stack, target unfold(J, 2).T
    layer L: (r_L x m*S) horizontal stack, target unfold(J, 1) from the left
    middle:  (n*m*S x r_l*r_{l+1}) Kronecker stack, target vec3(J)
    """
    L = state.n_layers
    if not 0 <= layer <= L:
        raise ValueError(f"layer must be in 0..{L}, got {layer}")
    S = state.G[0].shape[0]
    blocks = []
    for s in range(S):
        left, right = _slice_chains(state.weights, state.G, s)
        if layer == 0:
            blocks.append(left[1] * state.G[0][s][None, :])
        elif layer == L:
            blocks.append(state.G[L - 1][s][:, None] * right[L])
        else:
            A = left[layer + 1] * state.G[layer][s][None, :]
            B = state.G[layer - 1][s][:, None] * right[layer]
            blocks.append(np.kron(B.T, A))
    if layer == L:
        return np.concatenate(blocks, axis=1)
    return np.concatenate(blocks, axis=0)


def build_MG(state, layer, s):
    """Khatri-Rao coefficient matrix of the row subproblem for G_layer at slice s.

    Satisfies vec(J[:, :, s]) == build_MG(...) @ G_layer[s, :] for exact factors.
    """
    L = state.n_layers
    if not 1 <= layer <= L:
        raise ValueError(f"layer must be in 1..{L}, got {layer}")
    left, right = _slice_chains(state.weights, state.G, s)
    return khatri_rao(right[layer].T, left[layer])


def _lstsq(state, a, b):
    x, trunc = lstsq_info(a, b)
    state.n_truncated += trunc
    return x


def update_W(state, layer, j_tensor, f_matrix, lam):
    """Replace W_layer with the least-squares minimizer of its subproblem.

    For the last layer the tensor block is stacked with the sqrt(lam)-scaled
    F factorization block so both terms are fit jointly in one system.
    """
    L = state.n_layers
    M = build_MW(state, layer)
    if layer == 0:
        state.weights[0] = _lstsq(state, M, unfold(j_tensor, 2).T)
    elif layer == L:
        if lam > 0:
            a = np.concatenate([M.T, np.sqrt(lam) * state.R], axis=0)
            b = np.concatenate(
                [unfold(j_tensor, 1).T, np.sqrt(lam) * f_matrix.T], axis=0
            )
        else:
            a = M.T
            b = unfold(j_tensor, 1).T
        state.weights[L] = _lstsq(state, a, b).T
    else:
        w = _lstsq(state, M, vec3(j_tensor))
        r_next, r_this = state.weights[layer].shape
        state.weights[layer] = w.reshape((r_next, r_this), order="F")
    return state


def _layer_inputs(state, points, layer):
    """Fresh u values (S x r_layer) from the current weights and coefficients."""
    us = internal_inputs_batch(state.weights, state.coeffs, points)
    return us[layer - 1]


def update_c_proj(state, layer, j_tensor, f_matrix, points, lam):
    """Projection update: free factor rows first, then fit coefficients.

    Every row of G_layer (and, for the last layer, R as a whole) is updated
    by unconstrained least squares; the structure matrices are then rebuilt
    from fresh layer inputs and the coefficients fit to the updated factors,
    after which the factors are overwritten by their structured versions.
    """
    L = state.n_layers
    S = j_tensor.shape[2]
    basis = BasisSpec(state.coeffs[layer - 1].shape[1] - 1)
    for s in range(S):
        M = build_MG(state, layer, s)
        state.G[layer - 1][s, :] = _lstsq(state, M, vec(j_tensor[:, :, s]))
    if layer == L:
        state.R = _lstsq(state, state.weights[L], f_matrix).T

    U = _layer_inputs(state, points, layer)
    Xb = build_X(U, basis)
    if layer == L:
        Yb = build_Y(U, basis)
        for j in range(len(Xb.blocks)):
            if lam > 0:
                a = np.concatenate([Xb.blocks[j], np.sqrt(lam) * Yb.blocks[j]], axis=0)
                b = np.concatenate(
                    [state.G[L - 1][:, j], np.sqrt(lam) * state.R[:, j]]
                )
            else:
                a = Xb.blocks[j]
                b = state.G[L - 1][:, j]
            state.coeffs[L - 1][j, :] = _lstsq(state, a, b)
            state.G[L - 1][:, j] = Xb.blocks[j] @ state.coeffs[L - 1][j, :]
            state.R[:, j] = Yb.blocks[j] @ state.coeffs[L - 1][j, :]
    else:
        for j in range(len(Xb.blocks)):
            # drop the zero constant column; the constant stays frozen
            sol = _lstsq(state, Xb.blocks[j][:, 1:], state.G[layer - 1][:, j])
            state.coeffs[layer - 1][j, 1:] = sol
            state.G[layer - 1][:, j] = Xb.blocks[j] @ state.coeffs[layer - 1][j, :]
    return state


def _constr_system(state, layer, points):
    """Pruned coefficient matrix (M_C)_0 and structure blocks for one layer.

    Per slice the tensor slice factors as F_le @ C @ F_ri with C the
    block-diagonal coefficient matrix, so vec(J) is linear in vec(C); the
    structurally zero entries of vec(C) (off-block, plus the constant rows
    for layers below the last) are pruned from the system columns.
    """
    L = state.n_layers
    S = state.G[0].shape[0]
    r = state.G[layer - 1].shape[1]
    d = state.coeffs[layer - 1].shape[1] - 1
    basis = BasisSpec(d)
    U = _layer_inputs(state, points, layer)
    x_slices = [build_per_slice_X(U[s], basis) for s in range(S)]
    blocks = []
    for s in range(S):
        left, right = _slice_chains(state.weights, state.G, s)
        f_le = left[layer] @ x_slices[s]
        blocks.append(np.kron(right[layer].T, f_le))
    M = np.concatenate(blocks, axis=0)
    i0 = 0 if layer == L else 1
    keep = [
        j * r * (d + 1) + j * (d + 1) + i
        for j in range(r)
        for i in range(i0, d + 1)
    ]
    return M[:, keep], U, basis, i0


def update_c_constr(state, layer, j_tensor, f_matrix, points, lam):
    """Direct coefficient update with the constraints satisfied by construction.

    Solves for the coefficient vector against vec(J) through the pruned
    structure-incorporated system; the last layer stacks the sqrt(lam)-scaled
    F factorization block on top.  G (and R) are then written from the
    coefficients, so they satisfy the constraints exactly.
    """
    L = state.n_layers
    S = j_tensor.shape[2]
    M0, U, basis, i0 = _constr_system(state, layer, points)
    r = state.G[layer - 1].shape[1]
    d = basis.degree
    width = d + 1 - i0
    Yb = build_Y(U, basis) if layer == L else None
    if layer == L and lam > 0:
        coupling = np.sqrt(lam) * (np.kron(state.weights[L], np.eye(S)) @ Yb.stacked)
        a = np.concatenate([M0, coupling], axis=0)
        b = np.concatenate([vec3(j_tensor), np.sqrt(lam) * vec(f_matrix.T)])
    else:
        a = M0
        b = vec3(j_tensor)
    sol = _lstsq(state, a, b)
    for j in range(r):
        state.coeffs[layer - 1][j, i0:] = sol[j * width : (j + 1) * width]
    Xb = build_X(U, basis)
    for j in range(r):
        state.G[layer - 1][:, j] = Xb.blocks[j] @ state.coeffs[layer - 1][j, :]
    if layer == L:
        for j in range(r):
            state.R[:, j] = Yb.blocks[j] @ state.coeffs[layer - 1][j, :]
    return state


def rebalance(state, points):
    """Normalize per-neuron input scales by an exact reparameterization.

    The monomial basis is scale invariant: scaling a row of W_{l-1} by 1/a
    while replacing g(u) by g(a*u) (coefficients c_i -> c_i * a**i, factor
    column G_l[:, j] -> a * G_l[:, j]) represents the same model and leaves
    the objective unchanged.  Choosing a as the RMS of the neuron's inputs
    keeps the polynomial structure matrices well conditioned, which the
    unnormalized iteration loses once layer inputs drift to extreme scales.
    Constant coefficients are untouched.
    """
    L = state.n_layers
    us = internal_inputs_batch(state.weights, state.coeffs, points)
    for l in range(L):
        U = us[l]
        for j in range(U.shape[1]):
            a = float(np.sqrt(np.mean(U[:, j] ** 2)))
            if not np.isfinite(a) or a == 0.0:
                continue
            state.weights[l][j, :] /= a
            d = state.coeffs[l].shape[1] - 1
            state.coeffs[l][j, :] *= a ** np.arange(d + 1)
            state.G[l][:, j] *= a
    return state


def objective(state, j_tensor, f_matrix, lam):
    """(j_term, f_term, total) with squared Frobenius residuals."""
    S = j_tensor.shape[2]
    resid = 0.0
    for s in range(S):
        diff = j_tensor[:, :, s] - pt_slices(state.weights, state.G, s)
        resid += float(np.sum(diff * diff))
    fdiff = f_matrix - state.weights[-1] @ state.R.T
    f_term = float(np.sum(fdiff * fdiff))
    return resid, f_term, resid + lam * f_term


def _check_fit_inputs(cfg, j_tensor, f_matrix, points):
    j = np.asarray(j_tensor, dtype=float)
    f = np.asarray(f_matrix, dtype=float)
    p = np.asarray(points, dtype=float)
    if j.ndim != 3:
        raise ValueError("j_tensor must be n x m x S")
    n, m, S = j.shape
    if f.shape != (n, S):
        raise ValueError(f"f_matrix must be {n} x {S}, got {f.shape}")
    if p.shape != (S, m):
        raise ValueError(f"points must be {S} x {m}, got {p.shape}")
    if not (np.all(np.isfinite(j)) and np.all(np.isfinite(f)) and np.all(np.isfinite(p))):
        raise ValueError("non-finite fit inputs")
    return j, f, p


def fit(cfg, j_tensor, f_matrix, points, initial_state=None):
    """Run the alternating minimization and return the best state seen.

    One iteration is a full sweep in the fixed update order; the run stops
    once the objective has not improved (relative decrease above 1e-12
    against the best value so far) for ``patience`` consecutive sweeps after
    ``min_iters``, or at ``max_iters``.  The report carries the state with
    the lowest recorded objective, which need not be the last one.
    """
    j_tensor, f_matrix, points = _check_fit_inputs(cfg, j_tensor, f_matrix, points)
    n, m, S = j_tensor.shape
    state = initial_state.copy() if initial_state is not None else init_state(
        cfg, (n, m, S)
    )
    update_c = update_c_proj if cfg.strategy == "proj" else update_c_constr
    L = cfg.n_layers
    lam = cfg.lam

    best = state.copy()
    best_total = np.inf
    stall = 0
    stop_reason = "max_iters"
    iterations = 0
    for it in range(1, cfg.max_iters + 1):
        iterations = it
        try:
            rebalance(state, points)
            update_W(state, 0, j_tensor, f_matrix, lam)
            for l in range(1, L):
                update_c(state, l, j_tensor, f_matrix, points, lam)
                update_W(state, l, j_tensor, f_matrix, lam)
            update_c(state, L, j_tensor, f_matrix, points, lam)
            update_W(state, L, j_tensor, f_matrix, lam)
        except ValueError as exc:
            # inputs were validated upfront, so a ValueError here means the
            # factors overflowed inside a subproblem
            raise SolverDivergenceError(
                f"factors became non-finite at iteration {it}: {exc}",
                list(state.trace),
            ) from exc

        j_term, f_term, total = objective(state, j_tensor, f_matrix, lam)
        state.trace.append((it, j_term, f_term, total))
        if not np.isfinite(total):
            raise SolverDivergenceError(
                f"objective became non-finite at iteration {it}", list(state.trace)
            )
        if total < best_total:
            improved = not np.isfinite(best_total) or (
                best_total - total > _IMPROVE_RTOL * abs(best_total)
            )
            best = state.copy()
            best_total = total
        else:
            improved = False
        stall = 0 if improved else stall + 1
        if it >= cfg.min_iters and stall >= cfg.patience:
            stop_reason = "patience"
            break

    err_j = _relative_sq_error(j_tensor, best)
    err_f = _relative_sq_error_f(f_matrix, best)
    best.trace = list(state.trace)
    return FitReport(
        state=best,
        error_j=err_j,
        error_f=err_f,
        iterations=iterations,
        stop_reason=stop_reason,
        config=cfg,
        n_truncated=state.n_truncated,
    )


def _relative_sq_error(j_tensor, state):
    S = j_tensor.shape[2]
    num = 0.0
    for s in range(S):
        diff = j_tensor[:, :, s] - pt_slices(state.weights, state.G, s)
        num += float(np.sum(diff * diff))
    den = fro_norm(j_tensor) ** 2
    return num / den


def _relative_sq_error_f(f_matrix, state):
    diff = f_matrix - state.weights[-1] @ state.R.T
    den = fro_norm(f_matrix) ** 2
    return float(np.sum(diff * diff)) / den


def state_to_model(state):
    """Decoupled model from the current factors; frozen constants included."""
    return DecoupledModel(
        weights=tuple(state.weights),
        coeffs=tuple(state.coeffs),
    )
