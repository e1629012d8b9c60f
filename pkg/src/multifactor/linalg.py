"""Truncated SVD via Gram eigendecomposition, pseudoinverse, and block SVD merging."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

SIDE_POLICIES = ("auto", "gram-left", "gram-right")


@dataclass(frozen=True)
class TruncatedSVD:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def rank(self) -> int:
        return self.s.size

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


@dataclass(frozen=True)
class BlockFactor:
    """One row block ``D_k = u @ sv`` of a vertically stacked matrix.

    ``sv`` is the block's ``S V^T``.  ``rows`` is the half-open row range the
    block occupies in the stacked matrix.
    """

    u: np.ndarray
    sv: np.ndarray
    rows: tuple[int, int]

    @classmethod
    def from_block(cls, block, start: int = 0, rank: Optional[int] = None) -> "BlockFactor":
        block = np.asarray(block, dtype=np.float64)
        r = min(block.shape) if rank is None else min(rank, *block.shape)
        svd = truncated_svd(block, r)
        return cls(svd.u, svd.s[:, None] * svd.v.T, (start, start + block.shape[0]))


def fix_signs(u: np.ndarray, *others: np.ndarray):
    """Flip columns so each column of ``u`` has its largest-magnitude entry positive.

    The same flips are applied to the matching columns of ``others``.
    """
    if u.size == 0:
        return (u, *others) if others else u
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    flipped = tuple(x * signs for x in (u,) + others)
    return flipped if others else flipped[0]


def leading_eigvecs(gram: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``r`` eigenpairs of a symmetric PSD matrix, eigenvalues descending.

    Negative eigenvalues (round-off or indefinite kernels) are clipped to zero.
    """
    gram = 0.5 * (gram + gram.T)
    n = gram.shape[0]
    w, vecs = scipy.linalg.eigh(gram, subset_by_index=[n - r, n - 1])
    # eigh returns ascending order
    w, vecs = w[::-1], vecs[:, ::-1]
    return np.clip(w, 0.0, None), vecs


def _complete_basis(q: np.ndarray, good: np.ndarray, a_cols: np.ndarray) -> np.ndarray:
    """Replace columns of ``q`` not flagged ``good`` by an orthonormal completion.

    Completion vectors come from the range of ``a_cols`` first, then from the
    identity, so the result is deterministic.
    """
    if good.all():
        return q
    n, r = q.shape
    keep = q[:, good]
    candidates = np.hstack([a_cols, np.eye(n)])
    basis = [keep[:, j] for j in range(keep.shape[1])]
    for c in candidates.T:
        if len(basis) == r:
            break
        v = c.copy()
        for _ in range(2):
            for b in basis:
                v -= (b @ v) * b
        nv = np.linalg.norm(v)
        if nv > 1e-8 * max(1.0, np.linalg.norm(c)):
            basis.append(v / nv)
    out = q.copy()
    out[:, good] = keep
    out[:, ~good] = np.column_stack(basis[keep.shape[1]:])
    return out


def truncated_svd(a, r: int, side_policy: str = "auto") -> TruncatedSVD:
    """Rank-``r`` SVD computed from the eigendecomposition of the smaller Gram matrix.

    ``gram-left`` decomposes ``A A^T`` and recovers ``V = A^T U S^+``;
    ``gram-right`` decomposes ``A^T A`` and recovers ``U = A V S^+``.  ``auto``
    picks whichever Gram matrix is smaller.  Each left singular vector is
    signed so that its largest-magnitude entry is positive.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("truncated_svd expects a matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    if not 1 <= r <= min(a.shape):
        raise ValueError(f"rank {r} outside [1, {min(a.shape)}] for shape {a.shape}")
    if side_policy not in SIDE_POLICIES:
        raise ValueError(f"unknown side policy {side_policy!r}")
    if side_policy == "auto":
        side_policy = "gram-left" if a.shape[0] <= a.shape[1] else "gram-right"

    if side_policy == "gram-left":
        lam, u = leading_eigvecs(a @ a.T, r)
        s = np.sqrt(lam)
        good = s > _null_cutoff(s, a.shape)
        v = np.zeros((a.shape[1], r))
        v[:, good] = (a.T @ u[:, good]) / s[good]
        v = _complete_basis(v, good, a.T)
    else:
        lam, v = leading_eigvecs(a.T @ a, r)
        s = np.sqrt(lam)
        good = s > _null_cutoff(s, a.shape)
        u = np.zeros((a.shape[0], r))
        u[:, good] = (a @ v[:, good]) / s[good]
        u = _complete_basis(u, good, a)
    s = np.where(good, s, 0.0)
    u, v = fix_signs(u, v)
    return TruncatedSVD(u, s, v)


def _null_cutoff(s: np.ndarray, shape) -> float:
    # Gram eigenvalues carry absolute error ~ eps * s_max^2, so singular
    # values below ~sqrt(eps) * s_max are indistinguishable from zero.
    smax = float(s.max(initial=0.0))
    return max(smax * np.sqrt(np.finfo(float).eps) * max(shape), np.finfo(float).tiny)


def pseudoinverse(a, tol: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudoinverse; singular values below ``tol * s_max`` are dropped."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    if a.size == 0:
        return np.zeros(a.shape[::-1])
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    keep = s > tol * s.max(initial=0.0)
    return (vt[keep].T / s[keep]) @ u[:, keep].T


def principal_angles(a, b) -> np.ndarray:
    """Principal angles (radians, descending) between ``span(a)`` and ``span(b)``."""
    return scipy.linalg.subspace_angles(np.atleast_2d(a), np.atleast_2d(b))


def max_principal_angle(a, b) -> float:
    return float(principal_angles(a, b).max(initial=0.0))


def _merge_pair(x: BlockFactor, y: BlockFactor, r: Optional[int]) -> BlockFactor:
    if x.sv.shape[1] != y.sv.shape[1]:
        raise ValueError(f"blocks disagree on column count: {x.sv.shape[1]} vs {y.sv.shape[1]}")
    stacked = np.vstack([x.sv, y.sv])
    rank = min(stacked.shape) if r is None else min(r, *stacked.shape)
    inner = truncated_svd(stacked, rank)
    ka = x.u.shape[1]
    # Full W (not only its diagonal blocks) keeps the merge exact.
    u = np.vstack([x.u @ inner.u[:ka], y.u @ inner.u[ka:]])
    return BlockFactor(u, inner.s[:, None] * inner.v.T, (x.rows[0], y.rows[1]))


def merge_tree(blocks: Sequence[BlockFactor], r: Optional[int] = None, threads: int = 1, log=None):
    """Balanced binary reduction of row blocks.

    Returns the root :class:`BlockFactor` and the tree depth.  ``log``, when
    given, receives one dict per internal node.
    """
    level = list(blocks)
    depth = 0
    while len(level) > 1:
        pairs = [(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if threads > 1 and len(pairs) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                merged = list(pool.map(lambda p: _merge_pair(p[0], p[1], r), pairs))
        else:
            merged = [_merge_pair(p, q, r) for p, q in pairs]
        if len(level) % 2:
            merged.append(level[-1])
        depth += 1
        if log is not None:
            for node in merged[: len(pairs)]:
                log.append({"level": depth, "rows": node.rows, "rank": node.sv.shape[0]})
        level = merged
    return level[0], depth


def block_svd_merge(blocks: Sequence[BlockFactor], r: int, threads: int = 1) -> TruncatedSVD:
    """SVD of the vertically stacked blocks from their per-block factorizations.

    Pairs of blocks are merged by ``[U_A 0; 0 U_B] W S V^T`` where ``W S V^T``
    is the SVD of the stacked ``S_k V_k^T`` products; more than two blocks are
    reduced as a balanced binary tree.  Intermediate nodes keep every
    available singular direction; truncation to ``r`` happens at the root.
    """
    if len(blocks) == 0:
        raise ValueError("no blocks to merge")
    cols = {b.sv.shape[1] for b in blocks}
    if len(cols) != 1:
        raise ValueError(f"blocks disagree on column count: {sorted(cols)}")
    root, _ = merge_tree(blocks, None, threads)
    final = truncated_svd(root.sv, min(r, *root.sv.shape))
    u = root.u @ final.u
    u, v = fix_signs(u, final.v)
    return TruncatedSVD(u, final.s, v)
