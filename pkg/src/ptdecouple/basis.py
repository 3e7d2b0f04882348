"""Monomial basis and the structure matrices tying factor matrices to coefficients.

The internal function of each neuron is a polynomial

    g(u) = c_0 + c_1 * u + c_2 * u**2 + ... + c_d * u**d

stored as the ascending coefficient vector ``(c_0, ..., c_d)`` of length
``d + 1``.  The structure matrices built here express the derivative factor
columns and the function-value factor columns as linear maps of those
coefficient vectors:

* ``build_X``:  rows ``(0, 1, 2u, ..., d*u**(d-1))`` so that a factor column
  of derivative evaluations equals ``X_j @ c_j``.  The leading zero column
  carries the constant coefficient, which never influences derivatives.
* ``build_Y``:  rows ``(1, u, u**2, ..., u**d)`` so that a column of
  function evaluations equals ``Y_j @ c_j``.
* ``build_per_slice_X`` / ``coeff_block_matrix``:  the per-sample block-
  diagonal factorization ``D = X_s @ C`` of a diagonal derivative matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BasisSpec",
    "ConstraintBlocks",
    "build_X",
    "build_Y",
    "build_per_slice_X",
    "coeff_block_matrix",
    "poly_val",
    "poly_der_coeffs",
]


@dataclass(frozen=True)
class BasisSpec:
    """Monomial basis {u, u**2, ..., u**degree} with a separate constant term."""

    degree: int
    kind: str = "monomial"

    def __post_init__(self):
        if self.kind != "monomial":
            raise ValueError(f"unsupported basis kind {self.kind!r}")
        if self.degree < 1:
            raise ValueError(f"degree must be >= 1, got {self.degree}")


@dataclass(frozen=True)
class ConstraintBlocks:
    """Per-neuron structure matrices plus their block-diagonal stack."""

    blocks: tuple = field(default_factory=tuple)  # r matrices, each S x (d+1)
    stacked: np.ndarray = None  # (S*r) x (r*(d+1)) block diagonal

    @property
    def n_neurons(self):
        return len(self.blocks)


def _check_finite(u):
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite values in basis inputs")
    return u


def _block_diag(blocks):
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r : r + b.shape[0], c : c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def _derivative_rows(u, degree):
    # rows (0, 1, 2u, ..., d*u**(d-1)) built by cumulative powers
    out = np.zeros((u.shape[0], degree + 1))
    p = np.ones_like(u)
    for i in range(1, degree + 1):
        out[:, i] = i * p
        p = p * u
    return out


def _value_rows(u, degree):
    # rows (1, u, u**2, ..., u**d)
    out = np.ones((u.shape[0], degree + 1))
    p = u.copy()
    for i in range(1, degree + 1):
        out[:, i] = p
        p = p * u
    return out


def build_X(u_samples, basis):
    """Derivative structure blocks for one layer.

    Parameters
    ----------
    u_samples : ndarray, shape (S, r)
        Layer inputs per sampling point and neuron.
    basis : BasisSpec

    Returns
    -------
    ConstraintBlocks
        ``blocks[j]`` has row s equal to ``(0, phi_1'(u), ..., phi_d'(u))``
        at ``u = u_samples[s, j]``; ``stacked`` is their block diagonal.
    """
    u = _check_finite(u_samples)
    if u.ndim != 2:
        raise ValueError(f"u_samples must be S x r, got ndim={u.ndim}")
    blocks = tuple(_derivative_rows(u[:, j], basis.degree) for j in range(u.shape[1]))
    return ConstraintBlocks(blocks=blocks, stacked=_block_diag(blocks))


def build_Y(u_samples, basis):
    """Function-value structure blocks for the last layer; rows ``(1, u, ..., u**d)``."""
    u = _check_finite(u_samples)
    if u.ndim != 2:
        raise ValueError(f"u_samples must be S x r, got ndim={u.ndim}")
    blocks = tuple(_value_rows(u[:, j], basis.degree) for j in range(u.shape[1]))
    return ConstraintBlocks(blocks=blocks, stacked=_block_diag(blocks))


def build_per_slice_X(u_sample, basis):
    """Block-diagonal row layout of derivative rows for one sampling point.

    Returns the ``r x r*(d+1)`` matrix ``X_s`` with
    ``X_s @ coeff_block_matrix(C) == diag(g'(u))`` exactly.
    """
    u = _check_finite(u_sample)
    if u.ndim != 1:
        raise ValueError(f"u_sample must be a vector, got ndim={u.ndim}")
    r = u.shape[0]
    d = basis.degree
    out = np.zeros((r, r * (d + 1)))
    for j in range(r):
        p = 1.0
        for i in range(1, d + 1):
            out[j, j * (d + 1) + i] = i * p
            p *= u[j]
    return out


def coeff_block_matrix(coeffs):
    """Stack per-neuron coefficient vectors into the block-diagonal column matrix.

    ``coeffs`` is ``r x (d+1)`` with ascending coefficients per row; the
    result is ``r*(d+1) x r`` with column j holding ``coeffs[j]`` in block j.
    """
    c = np.asarray(coeffs, dtype=float)
    if c.ndim != 2:
        raise ValueError(f"coeffs must be r x (d+1), got ndim={c.ndim}")
    r, w = c.shape
    out = np.zeros((r * w, r))
    for j in range(r):
        out[j * w : (j + 1) * w, j] = c[j]
    return out


def poly_val(coeffs, u):
    """Evaluate a polynomial with ascending coefficients by Horner accumulation."""
    c = np.asarray(coeffs, dtype=float)
    u = np.asarray(u, dtype=float)
    acc = np.full_like(u, c[-1])
    for k in range(c.shape[0] - 2, -1, -1):
        acc = acc * u + c[k]
    return acc


def poly_der_coeffs(coeffs):
    """Ascending coefficients of the derivative (shift-and-scale, exact)."""
    c = np.asarray(coeffs, dtype=float)
    if c.shape[0] == 1:
        return np.zeros(1)
    return c[1:] * np.arange(1, c.shape[0])
