"""Dense tensor container and the multilinear primitives built on it.

Layout convention
-----------------
Entries are stored with the mode-0 (measurement) index varying fastest, and
``unfold(t, m)`` orders its columns by the remaining modes in increasing mode
number with the lowest-numbered mode varying fastest.  Under this convention

    unfold(T x_1 u_1^T ... x_M u_M^T, 0) == unfold(T, 0) @ kron(u_M, ..., u_1)

which is the identity every other module relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class DataTensor:
    """An (M+1)-way array of vectorized observations; mode 0 holds measurements.

    Parameters
    ----------
    data : array_like
        Dense real array with ``ndim >= 2``.
    mean : array_like, optional
        Centering vector (length ``I_0``) that was subtracted from every
        mode-0 fiber.  When given, the stored fibers must sum to zero.
    """

    data: np.ndarray
    mean: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asfortranarray(np.asarray(self.data, dtype=np.float64))
        if data.ndim < 2:
            raise ValueError("a data tensor needs a measurement mode and at least one factor mode")
        if min(data.shape) < 1:
            raise ValueError(f"every extent must be >= 1, got {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.mean is not None:
            mean = np.asarray(self.mean, dtype=np.float64).ravel().copy()
            if mean.shape != (data.shape[0],):
                raise ValueError(f"mean must have length {data.shape[0]}, got {mean.shape}")
            count = data.size // data.shape[0]
            fiber_sum = unfold(data, 0).sum(axis=1)
            scale = max(1.0, float(np.abs(data).max(initial=0.0)))
            if np.abs(fiber_sum).max(initial=0.0) > 1e-9 * count * scale:
                raise ValueError("tensor is not centered but a centering vector was supplied")
            mean.setflags(write=False)
            object.__setattr__(self, "mean", mean)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def order(self) -> int:
        """Number of causal-factor modes ``M``."""
        return self.data.ndim - 1

    @property
    def values(self) -> np.ndarray:
        """Entries in linear layout order (mode 0 fastest)."""
        return self.data.ravel(order="F")

    @classmethod
    def from_values(cls, values, dims: Sequence[int], mean=None) -> "DataTensor":
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != int(np.prod(dims)):
            raise ValueError(f"{values.size} values do not fill dims {tuple(dims)}")
        return cls(values.reshape(tuple(dims), order="F"), mean)


def _check_mode(ndim: int, m: int) -> None:
    if not 0 <= m < ndim:
        raise ValueError(f"mode {m} out of range for a {ndim}-way tensor")


def unfold(t, m: int) -> np.ndarray:
    """Mode-``m`` matricization, shape ``(I_m, prod of the other extents)``.

    For ``m == 0`` on a Fortran-ordered array this is a zero-copy view.
    """
    t = np.asarray(t)
    _check_mode(t.ndim, m)
    return np.reshape(np.moveaxis(t, m, 0), (t.shape[m], -1), order="F")


def fold(mat, m: int, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    mat = np.asarray(mat)
    dims = tuple(int(d) for d in dims)
    _check_mode(len(dims), m)
    rest = tuple(d for n, d in enumerate(dims) if n != m)
    expected = (dims[m], int(np.prod(rest, dtype=np.int64)))
    if mat.shape != expected:
        raise ValueError(f"matrix of shape {mat.shape} cannot fold to {dims} along mode {m}")
    moved = np.reshape(mat, (dims[m],) + rest, order="F")
    return np.asfortranarray(np.moveaxis(moved, 0, m))


def mode_multiply(t, a, m: int) -> np.ndarray:
    """Mode-``m`` product ``t x_m a``: every mode-``m`` fiber is multiplied by ``a``."""
    t = np.asarray(t)
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    _check_mode(t.ndim, m)
    if a.shape[1] != t.shape[m]:
        raise ValueError(
            f"matrix with {a.shape[1]} columns cannot multiply mode {m} of extent {t.shape[m]}"
        )
    dims = list(t.shape)
    dims[m] = a.shape[0]
    return fold(a @ unfold(t, m), m, dims)


def multi_mode_multiply(t, mats, modes=None, transpose: bool = False, skip=None) -> np.ndarray:
    """Apply a sequence of mode products, optionally transposing each matrix.

    ``mats[k]`` multiplies mode ``modes[k]`` (defaults to ``1..len(mats)``);
    ``None`` entries and the mode ``skip`` are left untouched.
    """
    if modes is None:
        modes = range(1, len(mats) + 1)
    out = np.asarray(t)
    for a, n in zip(mats, modes):
        if a is None or n == skip:
            continue
        out = mode_multiply(out, a.T if transpose else a, n)
    return out


def kronecker(a, b) -> np.ndarray:
    """Kronecker product; block ``(i, j)`` of the result is ``a[i, j] * b``."""
    return np.kron(np.atleast_2d(a), np.atleast_2d(b))


def kron_chain(mats: Sequence[np.ndarray]) -> np.ndarray:
    """``mats[-1] kron ... kron mats[0]`` -- the order matching the unfolding layout."""
    if not mats:
        raise ValueError("need at least one matrix")
    return reduce(lambda acc, u: np.kron(np.atleast_2d(u), acc), mats[1:], np.atleast_2d(mats[0]))


def outer_rank1(vectors: Sequence) -> np.ndarray:
    """Outer product ``v_1 o v_2 o ... o v_M``."""
    if len(vectors) == 0:
        raise ValueError("outer product of an empty list")
    vecs = [np.asarray(v, dtype=np.float64).ravel() for v in vectors]
    if any(v.size == 0 for v in vecs):
        raise ValueError("outer product of an empty vector")
    out = vecs[0]
    for v in vecs[1:]:
        out = np.multiply.outer(out, v)
    return np.asfortranarray(out)


def center_observations(t) -> tuple[DataTensor, np.ndarray]:
    """Subtract the mean observation from every mode-0 fiber.

    Returns the centered tensor and the mean removed by this call.  The
    tensor's own ``mean`` accumulates any centering it already carried, so
    synthesis can always add back the full offset.
    """
    prior = t.mean if isinstance(t, DataTensor) and t.mean is not None else None
    data = np.asarray(t, dtype=np.float64)
    mean = unfold(data, 0).mean(axis=1)
    centered = data - mean.reshape((-1,) + (1,) * (data.ndim - 1))
    total = mean if prior is None else prior + mean
    return DataTensor(centered, total), mean
