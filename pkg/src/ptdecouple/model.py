"""Layered decoupled models, their Jacobians and ParaTuck factor forms.

A decoupled model with L layers maps an input x through alternating linear
transforms and banks of univariate polynomials:

    f(x) = W_L g_L( W_{L-1} g_{L-1}( ... W_1 g_1( W_0 x ) ... ) )

with W_0 of shape (r_1, m), W_l of shape (r_{l+1}, r_l) for the middle
layers, W_L of shape (n, r_L), and g_l applying one polynomial per neuron.
The layer inputs are defined recursively as u_1 = W_0 x and
u_{l+1} = W_l g_l(u_l).

Stacking the Jacobians of such a model at S sampling points gives an
n x m x S tensor whose frontal slices factor as

    J[:, :, s] = W_L D_L(s) W_{L-1} ... D_1(s) W_0,

with D_l(s) the diagonal matrix of derivative evaluations g_l'(u_l(s)).
Collecting the diagonals row-wise yields the S x r_l factor matrices G_l of
a ParaTuck decomposition of the tensor, which is what the solver estimates.

Models and factor containers are immutable after construction and all
operations are pure, so evaluation over many points may run concurrently
without synchronization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec, poly_der_coeffs, poly_val
from .tensor_ops import stack_slices

__all__ = [
    "DecoupledModel",
    "PTFactors",
    "AmbiguityTransform",
    "eval_model",
    "eval_batch",
    "internal_inputs",
    "internal_inputs_batch",
    "jacobian",
    "build_jacobian_tensor",
    "build_f_matrix",
    "true_pt_factors",
    "pt_reconstruct",
    "pt_slices",
    "cpd_reconstruct",
    "apply_ambiguity",
    "random_ambiguity",
    "remove_bias",
    "model_to_json",
    "model_from_json",
    "save_model",
    "load_model",
]


def _freeze(a):
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


def _check_weight_chain(weights):
    if len(weights) < 2:
        raise ValueError("need at least W_0 and W_1")
    for w in weights:
        if w.ndim != 2:
            raise ValueError("weights must be matrices")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite weight entries")
    for i in range(1, len(weights)):
        if weights[i].shape[1] != weights[i - 1].shape[0]:
            raise ValueError(
                f"weight chain mismatch at layer {i}: "
                f"{weights[i].shape} after {weights[i - 1].shape}"
            )


@dataclass(frozen=True)
class DecoupledModel:
    """Immutable L-layer decoupled model.

    Attributes
    ----------
    weights : tuple of ndarray
        W_0 ... W_L.
    coeffs : tuple of ndarray
        One (r_l, d_l + 1) array per layer; row j holds the ascending
        polynomial coefficients of neuron j.
    basis : tuple of BasisSpec
        One per layer; degrees must match the coefficient widths.
    """

    weights: tuple
    coeffs: tuple
    basis: tuple = None

    def __post_init__(self):
        weights = tuple(_freeze(w) for w in self.weights)
        coeffs = tuple(_freeze(c) for c in self.coeffs)
        _check_weight_chain(weights)
        if len(coeffs) != len(weights) - 1:
            raise ValueError(
                f"expected {len(weights) - 1} coefficient arrays, got {len(coeffs)}"
            )
        basis = self.basis
        if basis is None:
            basis = tuple(BasisSpec(c.shape[1] - 1) for c in coeffs)
        else:
            basis = tuple(basis)
        for i, c in enumerate(coeffs):
            if c.ndim != 2:
                raise ValueError(f"layer {i + 1} coefficients must be r x (d+1)")
            if not np.all(np.isfinite(c)):
                raise ValueError(f"non-finite coefficients in layer {i + 1}")
            if c.shape[0] != weights[i].shape[0]:
                raise ValueError(
                    f"layer {i + 1} has {weights[i].shape[0]} neurons but "
                    f"{c.shape[0]} coefficient vectors"
                )
            if c.shape[1] != basis[i].degree + 1:
                raise ValueError(
                    f"layer {i + 1} coefficient width {c.shape[1]} does not "
                    f"match degree {basis[i].degree}"
                )
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "basis", basis)

    @property
    def n_layers(self):
        return len(self.coeffs)

    @property
    def n_inputs(self):
        return self.weights[0].shape[1]

    @property
    def n_outputs(self):
        return self.weights[-1].shape[0]

    @property
    def ranks(self):
        return tuple(w.shape[0] for w in self.weights[:-1])

    @property
    def degrees(self):
        return tuple(b.degree for b in self.basis)


@dataclass(frozen=True)
class PTFactors:
    """Factor matrices (W_0..W_L, G_1..G_L) of a ParaTuck decomposition."""

    weights: tuple
    G: tuple

    def __post_init__(self):
        weights = tuple(_freeze(w) for w in self.weights)
        G = tuple(_freeze(g) for g in self.G)
        _check_weight_chain(weights)
        if len(G) != len(weights) - 1:
            raise ValueError(f"expected {len(weights) - 1} G factors, got {len(G)}")
        S = G[0].shape[0]
        for i, g in enumerate(G):
            if g.ndim != 2 or g.shape[0] != S:
                raise ValueError("all G factors must share the slice count")
            if g.shape[1] != weights[i].shape[0]:
                raise ValueError(
                    f"G factor {i + 1} has {g.shape[1]} columns, expected "
                    f"{weights[i].shape[0]}"
                )
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "G", G)

    @property
    def n_layers(self):
        return len(self.G)

    @property
    def n_slices(self):
        return self.G[0].shape[0]

    @property
    def ranks(self):
        return tuple(g.shape[1] for g in self.G)


def _apply_polys(coeffs, U):
    """Apply one polynomial per row of U; coeffs (r, d+1), U (r, S)."""
    out = np.empty_like(U)
    for j in range(coeffs.shape[0]):
        out[j] = poly_val(coeffs[j], U[j])
    return out


def internal_inputs_batch(weights, coeffs, points):
    """Layer inputs u_1..u_L at several points.

    Parameters
    ----------
    weights, coeffs : sequences as in DecoupledModel (coeffs may omit the
        last layer's entry; only layers below each u are ever used).
    points : ndarray, shape (S, m)

    Returns
    -------
    list of ndarray
        Entry l-1 has shape (S, r_l) holding u_l per point.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim != 2 or X.shape[1] != weights[0].shape[1]:
        raise ValueError(
            f"points must be S x {weights[0].shape[1]}, got {X.shape}"
        )
    L = len(weights) - 1
    U = weights[0] @ X.T
    us = [U.T.copy()]
    for i in range(1, L):
        U = weights[i] @ _apply_polys(np.asarray(coeffs[i - 1]), U)
        us.append(U.T.copy())
    return us


def internal_inputs(model, x):
    """Layer inputs u_1..u_L for one point, each a 1-D vector."""
    us = internal_inputs_batch(model.weights, model.coeffs, np.atleast_2d(x))
    return [u[0] for u in us]


def eval_batch(model, points):
    """Evaluate the model at S points; returns an (n, S) matrix."""
    us = internal_inputs_batch(model.weights, model.coeffs, points)
    G_last = _apply_polys(model.coeffs[-1], us[-1].T)
    return model.weights[-1] @ G_last


def eval_model(model, x):
    """Evaluate the model at one point; returns an n-vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("x must be a vector")
    return eval_batch(model, x[None, :])[:, 0]


def jacobian(model, x):
    """Analytic Jacobian W_L D_L ... D_1 W_0 at one point.

    Derivative coefficients are obtained symbolically from the monomial
    basis, so the result is exact up to round-off.
    """
    us = internal_inputs(model, x)
    acc = model.weights[0]
    for i in range(model.n_layers):
        d = np.array(
            [
                poly_val(poly_der_coeffs(model.coeffs[i][j]), us[i][j])
                for j in range(model.coeffs[i].shape[0])
            ]
        )
        acc = (model.weights[i + 1] * d[None, :]) @ acc
    return acc


def _resolve_jacobian_fn(model_or_fn):
    if isinstance(model_or_fn, DecoupledModel):
        return lambda x: jacobian(model_or_fn, x)
    if callable(model_or_fn):
        return model_or_fn
    raise TypeError("expected a DecoupledModel or a callable Jacobian oracle")


def _resolve_eval_fn(model_or_fn):
    if isinstance(model_or_fn, DecoupledModel):
        return lambda x: eval_model(model_or_fn, x)
    if callable(model_or_fn):
        return model_or_fn
    raise TypeError("expected a DecoupledModel or a callable evaluation oracle")


def build_jacobian_tensor(model_or_fn, points):
    """Stack Jacobian evaluations at the given points into an n x m x S tensor.

    Accepts either a model (analytic Jacobians) or any callable mapping a
    point to an n x m matrix, which supports decoupling black-box targets.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError("points must be a non-empty S x m array")
    fn = _resolve_jacobian_fn(model_or_fn)
    slices = []
    for s in range(points.shape[0]):
        J = np.asarray(fn(points[s]), dtype=float)
        if J.ndim != 2:
            raise ValueError("Jacobian oracle must return matrices")
        if slices and J.shape != slices[0].shape:
            raise ValueError(
                f"inconsistent Jacobian dims: {J.shape} != {slices[0].shape}"
            )
        slices.append(J)
    return stack_slices(slices)


def build_f_matrix(model_or_fn, points):
    """Stack function evaluations column-wise into an n x S matrix."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError("points must be a non-empty S x m array")
    if isinstance(model_or_fn, DecoupledModel):
        return eval_batch(model_or_fn, points)
    fn = _resolve_eval_fn(model_or_fn)
    cols = []
    for s in range(points.shape[0]):
        y = np.asarray(fn(points[s]), dtype=float)
        if y.ndim != 1:
            raise ValueError("evaluation oracle must return vectors")
        if cols and y.shape != cols[0].shape:
            raise ValueError("inconsistent output dims across points")
        cols.append(y)
    return np.stack(cols, axis=1)


def true_pt_factors(model, points):
    """Exact ParaTuck factors of the model's Jacobian tensor at the points.

    G_l[s, j] is the derivative of neuron j's polynomial at its layer input
    for point s; weight matrices are shared with the model.
    """
    us = internal_inputs_batch(model.weights, model.coeffs, points)
    G = []
    for i in range(model.n_layers):
        der = np.array([poly_der_coeffs(c) for c in model.coeffs[i]])
        G.append(_apply_polys(der, us[i].T).T)
    return PTFactors(weights=model.weights, G=tuple(G))


def pt_slices(weights, G, s):
    """One frontal slice W_L D_L(s) ... D_1(s) W_0 from raw factor lists."""
    acc = weights[0]
    for i in range(len(G)):
        acc = (weights[i + 1] * G[i][s][None, :]) @ acc
    return acc


def pt_reconstruct(factors):
    """Dense tensor whose frontal slices are the ParaTuck chain products."""
    K = factors.n_slices
    return stack_slices([pt_slices(factors.weights, factors.G, s) for s in range(K)])


def cpd_reconstruct(A, B, C):
    """Slice-wise CPD reconstruction: slice k is A diag(C[k, :]) B^T."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    C = np.asarray(C, dtype=float)
    return stack_slices([(A * C[k][None, :]) @ B.T for k in range(C.shape[0])])


@dataclass(frozen=True)
class AmbiguityTransform:
    """A trivial reparameterization of a ParaTuck decomposition.

    Fields are indexed per layer l = 1..L: ``perms[l-1]`` is the r_l x r_l
    permutation, ``lam1/lam2/lam3`` the diagonal scaling triples (stored as
    vectors) whose elementwise product must be 1, and ``gammas[l-1]`` for
    l = 1..L-1 the per-slice diagonals whose elementwise product over layers
    must be 1.  The last layer carries no slice-wise factor.
    """

    perms: tuple
    lam1: tuple
    lam2: tuple
    lam3: tuple
    gammas: tuple = field(default_factory=tuple)

    def __post_init__(self):
        perms = tuple(_freeze(p) for p in self.perms)
        lam1 = tuple(_freeze(v) for v in self.lam1)
        lam2 = tuple(_freeze(v) for v in self.lam2)
        lam3 = tuple(_freeze(v) for v in self.lam3)
        gammas = tuple(_freeze(v) for v in self.gammas)
        L = len(perms)
        if not (len(lam1) == len(lam2) == len(lam3) == L):
            raise ValueError("one scaling triple required per layer")
        if len(gammas) not in (0, max(L - 1, 0)):
            raise ValueError(f"expected {max(L - 1, 0)} slice-scaling factors")
        for p in perms:
            if p.ndim != 2 or p.shape[0] != p.shape[1]:
                raise ValueError("permutations must be square")
            if not (
                np.all(np.isin(p, (0.0, 1.0)))
                and np.all(p.sum(axis=0) == 1)
                and np.all(p.sum(axis=1) == 1)
            ):
                raise ValueError("not a permutation matrix")
        for a, b, c in zip(lam1, lam2, lam3):
            if np.max(np.abs(a * b * c - 1.0)) > 1e-14:
                raise ValueError("scaling triple product must be the identity")
        if gammas:
            prod = np.ones_like(gammas[0])
            for g in gammas:
                prod = prod * g
            if np.max(np.abs(prod - 1.0)) > 1e-14:
                raise ValueError("slice-scaling product must be the identity")
        object.__setattr__(self, "perms", perms)
        object.__setattr__(self, "lam1", lam1)
        object.__setattr__(self, "lam2", lam2)
        object.__setattr__(self, "lam3", lam3)
        object.__setattr__(self, "gammas", gammas)


def apply_ambiguity(factors, transform):
    """Equivalent ParaTuck factors under a trivial ambiguity transform.

    With identity boundary factors at the input and output ends:

        W_l -> P_{l+1}^T diag(lam1_{l+1}) W_l diag(lam2_l) P_l
        G_l -> diag(gamma_l) G_l diag(lam3_l) P_l

    Reconstruction of the transformed factors equals the original tensor.
    """
    L = factors.n_layers
    if len(transform.perms) != L:
        raise ValueError(f"transform is for {len(transform.perms)} layers, factors have {L}")
    for l in range(L):
        if transform.perms[l].shape[0] != factors.ranks[l]:
            raise ValueError(f"transform rank mismatch at layer {l + 1}")
    if transform.gammas:
        for g in transform.gammas:
            if g.shape[0] != factors.n_slices:
                raise ValueError("slice-scaling length must equal the slice count")
        prod = np.ones(factors.n_slices)
        for g in transform.gammas:
            prod = prod * g
        if np.max(np.abs(prod - 1.0)) > 1e-12:
            raise ValueError("slice-scaling product must be the identity")

    perms, l1, l2, l3 = transform.perms, transform.lam1, transform.lam2, transform.lam3
    new_w = []
    for i, W in enumerate(factors.weights):
        out = W
        if i < L:  # left factor of layer i+1: P^T diag(lam1) from that layer
            out = perms[i].T @ (l1[i][:, None] * out)
        if i > 0:  # right factor of layer i: diag(lam2) P from that layer
            out = (out * l2[i - 1][None, :]) @ perms[i - 1]
        new_w.append(out)
    new_g = []
    for i, G in enumerate(factors.G):
        out = (G * l3[i][None, :]) @ perms[i]
        if transform.gammas and i < L - 1:
            out = transform.gammas[i][:, None] * out
        new_g.append(out)
    return PTFactors(weights=tuple(new_w), G=tuple(new_g))


def random_ambiguity(ranks, n_slices, rng, nontrivial_gamma=True):
    """Draw a random ambiguity transform for the given ParaTuck ranks.

    Scaling magnitudes stay in [0.5, 2] with random signs to keep the
    transformed factors well conditioned.  Slice-wise factors are drawn for
    all but one layer with the last chosen as the compensating inverse, so
    they are nontrivial whenever there are at least three layers.
    """
    L = len(ranks)

    def draw(r):
        mag = rng.uniform(0.5, 2.0, size=r)
        return mag * rng.choice((-1.0, 1.0), size=r)

    perms, l1, l2, l3 = [], [], [], []
    for r in ranks:
        p = np.eye(r)[rng.permutation(r)]
        a, b = draw(r), draw(r)
        perms.append(p)
        l1.append(a)
        l2.append(b)
        l3.append(1.0 / (a * b))
    gammas = []
    if L >= 2:
        prod = np.ones(n_slices)
        for _ in range(L - 2):
            g = draw(n_slices) if nontrivial_gamma else np.ones(n_slices)
            gammas.append(g)
            prod = prod * g
        gammas.append(1.0 / prod)
    return AmbiguityTransform(
        perms=tuple(perms), lam1=tuple(l1), lam2=tuple(l2), lam3=tuple(l3),
        gammas=tuple(gammas),
    )


def _shift_poly(coeffs, s):
    """Ascending coefficients of p(u + s) via exact binomial expansion."""
    c = np.asarray(coeffs, dtype=float)
    if s == 0.0:
        return c.copy()
    out = np.zeros_like(c)
    for i in range(c.shape[0]):
        if c[i] == 0.0:
            continue
        for k in range(i + 1):
            out[k] += c[i] * math.comb(i, k) * s ** (i - k)
    return out


def remove_bias(model):
    """Equivalent model whose layers below the last have zero constant terms.

    Constant terms are pushed forward layer by layer: the current layer's
    polynomials are re-expanded about the incoming shift (exact binomial
    recomposition, degree preserving), the new constants are split off and
    propagated through the next weight matrix, and the last layer keeps the
    accumulated constants.  Evaluation is unchanged.
    """
    for b in model.basis:
        if b.kind != "monomial":
            raise ValueError("bias removal requires a polynomial basis")
    L = model.n_layers
    new_coeffs = []
    shift = np.zeros(model.weights[0].shape[0])
    for i in range(L):
        C = model.coeffs[i]
        out = np.array([_shift_poly(C[j], shift[j]) for j in range(C.shape[0])])
        if i < L - 1:
            consts = out[:, 0].copy()
            out[:, 0] = 0.0
            shift = model.weights[i + 1] @ consts
        new_coeffs.append(out)
    return DecoupledModel(
        weights=model.weights, coeffs=tuple(new_coeffs), basis=model.basis
    )


def model_to_json(model):
    """JSON-serializable dict; float round-trip is exact for finite doubles."""
    return {
        "layers": model.n_layers,
        "dims": {
            "inputs": model.n_inputs,
            "outputs": model.n_outputs,
            "ranks": list(model.ranks),
        },
        "weights": [w.tolist() for w in model.weights],
        "coeffs": [c.tolist() for c in model.coeffs],
        "basis": "monomial",
        "degrees": list(model.degrees),
    }


def model_from_json(doc):
    if doc.get("basis") != "monomial":
        raise ValueError(f"unsupported basis tag {doc.get('basis')!r}")
    weights = tuple(np.array(w, dtype=float) for w in doc["weights"])
    coeffs = tuple(np.array(c, dtype=float) for c in doc["coeffs"])
    basis = tuple(BasisSpec(int(d)) for d in doc["degrees"])
    model = DecoupledModel(weights=weights, coeffs=coeffs, basis=basis)
    if model.n_layers != doc["layers"]:
        raise ValueError("layer count does not match weights")
    return model


def save_model(path, model):
    with open(path, "w") as fh:
        json.dump(model_to_json(model), fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return model_from_json(json.load(fh))
