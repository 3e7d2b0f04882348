"""Dense third-order tensor and matrix primitives.

Conventions used throughout the package:

* A third-order tensor of shape ``(I, J, K)`` is a ``numpy.ndarray`` whose
  logical linear layout is column-major over mode 1: element ``(i, j, k)``
  sits at flat position ``i + I*j + I*J*k``.  Serialization and ``vec3``
  follow this layout exactly.
* Mode-n unfoldings follow the Kolda-Bader convention: the remaining
  indices are ordered with earlier modes varying fastest, so
  ``unfold(X, 1)`` is ``I x (J*K)`` with column index ``j + J*k``,
  ``unfold(X, 2)`` is ``J x (I*K)`` with column index ``i + I*k`` and
  ``unfold(X, 3)`` is ``K x (I*J)`` with column index ``i + I*j``.
* ``vec`` stacks matrix columns (column-major), which is the ordering
  that satisfies ``vec(A @ X @ B) == kron(B.T, A) @ vec(X)``.
* All public indices are 0-based.

Every function here is pure and never mutates its inputs, so concurrent use
needs no synchronization.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "frontal_slice",
    "stack_slices",
    "unfold",
    "fold",
    "vec",
    "unvec",
    "vec3",
    "unvec3",
    "kron",
    "khatri_rao",
    "fro_norm",
    "lstsq",
    "lstsq_info",
    "save_array",
    "load_array",
    "save_csv",
]

_MAGIC = b"PTDARR1\n"


def _as_float_array(x, name="array"):
    a = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def frontal_slice(t, k):
    """Frontal slice ``t[:, :, k]`` of a third-order tensor."""
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError(f"expected a third-order tensor, got ndim={t.ndim}")
    if not 0 <= k < t.shape[2]:
        raise IndexError(f"slice index {k} out of range for K={t.shape[2]}")
    return t[:, :, k]


def stack_slices(mats):
    """Stack a sequence of equally-shaped matrices into an (I, J, K) tensor."""
    mats = [np.asarray(m) for m in mats]
    if not mats:
        raise ValueError("need at least one slice")
    shape = mats[0].shape
    for m in mats:
        if m.shape != shape:
            raise ValueError(f"inconsistent slice shapes: {m.shape} != {shape}")
    return np.stack(mats, axis=2)


def unfold(t, mode):
    """Mode-n unfolding of a third-order tensor (Kolda-Bader ordering).

    Parameters
    ----------
    t : ndarray, shape (I, J, K)
    mode : int
        1, 2 or 3.

    Returns
    -------
    ndarray
        ``I x (J*K)``, ``J x (I*K)`` or ``K x (I*J)`` matrix.
    """
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError(f"expected a third-order tensor, got ndim={t.ndim}")
    if mode not in (1, 2, 3):
        raise ValueError(f"invalid mode {mode}, must be 1, 2 or 3")
    return np.reshape(
        np.moveaxis(t, mode - 1, 0), (t.shape[mode - 1], -1), order="F"
    )


def fold(m, mode, shape):
    """Inverse of :func:`unfold` for a tensor of the given shape."""
    m = np.asarray(m)
    if mode not in (1, 2, 3):
        raise ValueError(f"invalid mode {mode}, must be 1, 2 or 3")
    if len(shape) != 3:
        raise ValueError("shape must have three entries")
    moved = [shape[mode - 1]] + [s for i, s in enumerate(shape) if i != mode - 1]
    return np.moveaxis(np.reshape(m, moved, order="F"), 0, mode - 1)


def vec(m):
    """Column-major vectorization of a matrix."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got ndim={m.ndim}")
    return m.reshape(-1, order="F")


def unvec(v, shape):
    """Inverse of :func:`vec`."""
    v = np.asarray(v)
    if len(shape) != 2:
        raise ValueError("shape must have two entries")
    return v.reshape(shape, order="F")


def vec3(t):
    """Vectorize a third-order tensor in its linear layout.

    Equal to the concatenation of ``vec(frontal_slice(t, k))`` over k, and
    to ``vec(unfold(t, 1))``.
    """
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError(f"expected a third-order tensor, got ndim={t.ndim}")
    return t.reshape(-1, order="F")


def unvec3(v, shape):
    """Inverse of :func:`vec3`."""
    v = np.asarray(v)
    if len(shape) != 3:
        raise ValueError("shape must have three entries")
    return v.reshape(shape, order="F")


def kron(a, b):
    """Kronecker product of two matrices."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("kron expects two matrices")
    return np.kron(a, b)


def khatri_rao(a, b):
    """Column-wise Kronecker product; column j is kron(a[:, j], b[:, j])."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("khatri_rao expects two matrices")
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"column-count mismatch: {a.shape[1]} != {b.shape[1]}"
        )
    # (a_ij * b_kj) laid out with the b-index fastest, matching np.kron.
    return (a[:, None, :] * b[None, :, :]).reshape(-1, a.shape[1])


def fro_norm(x):
    """Frobenius norm: square root of the sum of squared entries."""
    x = np.asarray(x)
    return float(np.sqrt(np.sum(x * x)))


def lstsq(a, b, rtol=1e-12):
    """Minimum-norm least-squares solution of ``a @ x = b``.

    Uses an SVD-based solver; singular values below ``rtol`` times the
    largest singular value are truncated, which yields the minimum-norm
    solution for rank-deficient systems.  Normal equations are never formed.
    """
    x, _ = lstsq_info(a, b, rtol)
    return x


def lstsq_info(a, b, rtol=1e-12):
    """Like :func:`lstsq` but also returns the number of truncated singular values."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"lhs must be a matrix, got ndim={a.ndim}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"lhs must have at least one row and column, got {a.shape}")
    if b.ndim not in (1, 2):
        raise ValueError(f"rhs must be a vector or matrix, got ndim={b.ndim}")
    if b.shape[0] != a.shape[0]:
        raise ValueError(
            f"dimension mismatch: lhs has {a.shape[0]} rows, rhs has {b.shape[0]}"
        )
    if not np.all(np.isfinite(a)) or not np.all(np.isfinite(b)):
        raise ValueError("non-finite entries in least-squares system")
    x, _, rank, _ = np.linalg.lstsq(a, b, rcond=rtol)
    return x, min(a.shape) - int(rank)


def save_array(path, x):
    """Write a matrix or third-order tensor to the package binary format.

    Layout: 8 magic bytes, ``ndim`` as a little-endian int64, the dims as
    little-endian int64, then the float64 entries in the linear layout
    (column-major) order.
    """
    x = _as_float_array(x)
    if x.ndim not in (2, 3):
        raise ValueError(f"only matrices and third-order tensors supported, got ndim={x.ndim}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<q", x.ndim))
        fh.write(struct.pack(f"<{x.ndim}q", *x.shape))
        fh.write(np.ascontiguousarray(x.reshape(-1, order="F"), dtype="<f8").tobytes())


def load_array(path):
    """Read a matrix or tensor written by :func:`save_array`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"bad magic bytes {magic!r}")
        (ndim,) = struct.unpack("<q", fh.read(8))
        if ndim not in (2, 3):
            raise ValueError(f"unsupported ndim {ndim}")
        shape = struct.unpack(f"<{ndim}q", fh.read(8 * ndim))
        if any(s <= 0 for s in shape):
            raise ValueError(f"non-positive dims {shape}")
        count = int(np.prod(shape))
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError("truncated payload")
        data = np.frombuffer(payload, dtype="<f8", count=count)
        return data.reshape(shape, order="F").copy()


def save_csv(path, x):
    """Debug CSV dump: a matrix as rows, a tensor as one frontal slice per block."""
    x = np.asarray(x, dtype=float)
    with open(path, "w") as fh:
        if x.ndim == 2:
            _write_block(fh, x)
        elif x.ndim == 3:
            for k in range(x.shape[2]):
                fh.write(f"# slice {k}\n")
                _write_block(fh, x[:, :, k])
                if k != x.shape[2] - 1:
                    fh.write("\n")
        else:
            raise ValueError(f"only matrices and third-order tensors supported, got ndim={x.ndim}")


def _write_block(fh, m):
    for row in m:
        fh.write(",".join(repr(float(v)) for v in row))
        fh.write("\n")
