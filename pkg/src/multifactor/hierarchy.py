"""Cluster-, block- and part-based computation of the mode matrices.

A cluster for mode ``m`` is the ``I_0 x I_m`` slice obtained by fixing every
other causal factor.  Clusters are numbered with the lowest-numbered free
mode varying fastest, which makes ``unfold(D, m)`` the horizontal
concatenation of the transposed clusters in cluster order.  Stacking the
transposed clusters (or any row blocks of ``unfold(D, m).T``) and merging
their SVDs pairwise reproduces the mode matrix of the whole tensor exactly
when nothing is truncated.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .factorization import CausalModel, TrainingConfig, _model_from_fit, _split, run_als
from .linalg import BlockFactor, merge_tree, truncated_svd
from .neural import hebbian_left_factors

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterIndex:
    """Bijection between the free-mode subscripts and cluster numbers for mode ``m``."""

    mode: int
    dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not 1 <= self.mode < len(self.dims):
            raise ValueError(f"clusters are defined for causal modes 1..{len(self.dims) - 1}")

    @property
    def free_modes(self) -> tuple[int, ...]:
        return tuple(k for k in range(1, len(self.dims)) if k != self.mode)

    @property
    def count(self) -> int:
        return int(np.prod([self.dims[k] for k in self.free_modes], dtype=np.int64))

    def number(self, subscripts: Sequence[int]) -> int:
        """0-based cluster number for the 0-based subscripts of the free modes."""
        n, stride = 0, 1
        for k, i in zip(self.free_modes, subscripts):
            if not 0 <= i < self.dims[k]:
                raise IndexError(f"subscript {i} out of range for mode {k}")
            n += i * stride
            stride *= self.dims[k]
        return n

    def subscripts(self, n: int) -> tuple[int, ...]:
        if not 0 <= n < self.count:
            raise IndexError(f"cluster {n} out of range")
        out = []
        for k in self.free_modes:
            out.append(n % self.dims[k])
            n //= self.dims[k]
        return tuple(out)


def _cluster_stack(x: np.ndarray, m: int) -> np.ndarray:
    """``(I_0, I_m, N)`` array whose last axis walks the clusters in order."""
    return np.moveaxis(x, m, 1).reshape(x.shape[0], x.shape[m], -1, order="F")


def cluster_matrices(d, m: int) -> list:
    """All ``I_0 x I_m`` clusters of mode ``m`` in cluster-number order."""
    x = np.asarray(d, dtype=np.float64)
    if m == 0:
        raise ValueError("the measurement mode has no clusters")
    ClusterIndex(m, x.shape)
    stack = _cluster_stack(x, m)
    return [stack[:, :, n].copy() for n in range(stack.shape[2])]


@dataclass(frozen=True)
class ClusterPCA:
    """Shared basis ``u`` and per-cluster rotations with ``D_n ~ u diag(s) (v_n w_n)^T``."""

    u: np.ndarray
    s: np.ndarray
    w: list
    v: list


def constrained_cluster_pca(clusters: Sequence, r: int, cluster_rank: Optional[int] = None) -> ClusterPCA:
    """Concurrent per-cluster PCAs rotated to share one representation.

    ``clusters`` are ``I_m x c_n`` matrices (the transposed clusters of
    :func:`cluster_matrices`).  Each is factored as ``U_n S_n V_n^T``; the
    SVD of ``[U_1 S_1, ..., U_N S_N]`` gives ``U S W^T`` and its row blocks
    ``W_n`` rotate each cluster's ``V_n`` onto the shared basis ``U``.
    """
    clusters = [np.asarray(c, dtype=np.float64) for c in clusters]
    if not clusters:
        raise ValueError("no clusters")
    rows = {c.shape[0] for c in clusters}
    if len(rows) != 1:
        raise ValueError(f"clusters disagree on row count: {sorted(rows)}")
    parts = []
    for c in clusters:
        k = min(c.shape) if cluster_rank is None else min(cluster_rank, *c.shape)
        parts.append(truncated_svd(c, k))
    scaled = np.hstack([p.u * p.s for p in parts])
    top = truncated_svd(scaled, min(r, *scaled.shape))
    w_blocks, v_blocks = [], []
    offset = 0
    for p in parts:
        w_blocks.append(top.v[offset: offset + p.rank])
        v_blocks.append(p.v)
        offset += p.rank
    return ClusterPCA(top.u, top.s, w_blocks, v_blocks)


@dataclass(frozen=True)
class BlockTree:
    """Merge plan over row blocks: leaves tile the stacked matrix, pairs merge level by level."""

    leaf_rows: tuple
    node_rank: Optional[int] = None

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_rows)

    @property
    def depth(self) -> int:
        return math.ceil(math.log2(self.n_leaves)) if self.n_leaves > 1 else 0

    @property
    def n_nodes(self) -> int:
        return 2 * self.n_leaves - 1

    @classmethod
    def even(cls, n_rows: int, n_leaves: int, node_rank: Optional[int] = None) -> "BlockTree":
        edges = np.linspace(0, n_rows, n_leaves + 1).round().astype(int)
        return cls(tuple((int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])), node_rank)


# -- part-based segmentation ---------------------------------------------------


@dataclass(frozen=True)
class PartSegmentation:
    """Permutation ``P`` and segment filter ``H`` over measurements (or unfolded rows).

    ``permutation[to] = from`` so ``(P y) = y[permutation]``.  ``labels[k]``
    names the part that position ``k`` of the permuted vector belongs to.
    A soft ``filters`` matrix (parts x positions) may replace ``labels``;
    that path is experimental.
    """

    permutation: np.ndarray
    labels: Optional[np.ndarray] = None
    filters: Optional[np.ndarray] = None

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64).ravel()
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValueError("permutation is not a bijection")
        object.__setattr__(self, "permutation", perm)
        if (self.labels is None) == (self.filters is None):
            raise ValueError("give exactly one of labels or filters")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64).ravel()
            if labels.size != perm.size:
                raise ValueError("labels and permutation lengths differ")
            object.__setattr__(self, "labels", labels)
        else:
            filters = np.atleast_2d(np.asarray(self.filters, dtype=np.float64))
            if filters.shape[1] != perm.size:
                raise ValueError("filter width and permutation length differ")
            if np.any(~np.any(filters != 0, axis=1)):
                raise ValueError("a segment filter selects nothing")
            object.__setattr__(self, "filters", filters)

    @property
    def size(self) -> int:
        return self.permutation.size

    @property
    def part_ids(self) -> list:
        if self.labels is not None:
            return sorted(set(self.labels.tolist()))
        return list(range(self.filters.shape[0]))

    @property
    def n_parts(self) -> int:
        return len(self.part_ids)

    @classmethod
    def identity(cls, n: int, n_parts: int = 1) -> "PartSegmentation":
        """Contiguous, roughly equal parts with no reordering."""
        labels = np.repeat(np.arange(n_parts), np.diff(np.linspace(0, n, n_parts + 1).round().astype(int)))
        return cls(np.arange(n), labels)

    def selections(self) -> list:
        """Per part: (positions in the original order, weights)."""
        out = []
        if self.labels is not None:
            for pid in self.part_ids:
                pos = np.flatnonzero(self.labels == pid)
                out.append((self.permutation[pos], np.ones(pos.size)))
        else:
            for row in self.filters:
                pos = np.flatnonzero(row)
                out.append((self.permutation[pos], row[pos]))
        return out

    @classmethod
    def from_csv(cls, segmentation_path, permutation_path=None) -> "PartSegmentation":
        """Read ``measurement_index,part_id`` rows and optional ``from_index,to_index`` rows."""
        seg = _read_pairs(segmentation_path)
        n = len(seg)
        labels = np.empty(n, dtype=np.int64)
        if sorted(i for i, _ in seg) != list(range(n)):
            raise ValueError(f"{segmentation_path}: measurement indices must cover 0..{n - 1} once")
        for i, part in seg:
            labels[i] = part
        perm = np.arange(n)
        if permutation_path is not None:
            pairs = _read_pairs(permutation_path)
            if len(pairs) != n:
                raise ValueError(f"{permutation_path}: expected {n} rows")
            perm = np.full(n, -1, dtype=np.int64)
            for src, dst in pairs:
                if not 0 <= dst < n:
                    raise ValueError(f"{permutation_path}: to_index {dst} out of range")
                perm[dst] = src
        return cls(perm, labels)


def _read_pairs(path) -> list:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        a, b = line.split(",")[:2]
        try:
            rows.append((int(a), int(b)))
        except ValueError:
            if rows:
                raise ValueError(f"{path}: malformed row {line!r}") from None
    return rows


def part_based_reorder(d, seg: PartSegmentation, m: int) -> list:
    """Split the rows of ``unfold(d, m).T`` into part blocks, ``H_m P unfold(d, m).T``.

    ``seg`` may index measurements (length ``I_0``; every cluster is split the
    same way) or the unfolded rows directly.  Within a block rows keep the
    order of the permuted matrix.
    """
    x = np.asarray(d, dtype=np.float64)
    if m == 0:
        raise ValueError("the measurement mode cannot be segmented this way")
    stack = _cluster_stack(x, m)  # (I_0, I_m, N)
    n_meas, n_clusters = stack.shape[0], stack.shape[2]
    if seg.filters is not None:
        warnings.warn("soft segment filters are experimental", UserWarning, stacklevel=2)
    blocks = []
    if seg.size == n_meas:
        for pos, weight in seg.selections():
            part = stack[pos] * weight[:, None, None]  # (|part|, I_m, N)
            blocks.append(np.transpose(part, (0, 2, 1)).reshape(-1, stack.shape[1], order="F"))
    elif seg.size == n_meas * n_clusters:
        rows = np.transpose(stack, (0, 2, 1)).reshape(-1, stack.shape[1], order="F")
        for pos, weight in seg.selections():
            blocks.append(rows[pos] * weight[:, None])
    else:
        raise ValueError(
            f"segmentation covers {seg.size} positions; expected {n_meas} measurements "
            f"or {n_meas * n_clusters} unfolded rows"
        )
    return blocks


# -- incremental block M-mode SVD ---------------------------------------------


def _leaf_factor(block: np.ndarray, start: int, rank: Optional[int], engine: str, cfg: TrainingConfig) -> BlockFactor:
    k = min(block.shape) if rank is None else min(rank, *block.shape)
    if engine == "hebbian":
        v = hebbian_left_factors(block.T, k, cfg.hebbian)
        bv = block @ v
        s = np.linalg.norm(bv, axis=0)
        u = np.divide(bv, s, out=np.zeros_like(bv), where=s > 0)
        return BlockFactor(u, s[:, None] * v.T, (start, start + block.shape[0]))
    return BlockFactor.from_block(block, start, k)


@dataclass
class HierarchyLog:
    nodes: list = field(default_factory=list)

    def merge_depths(self, iteration: Optional[int] = None) -> dict:
        out = {}
        for node in self.nodes:
            if iteration is not None and node["iteration"] != iteration:
                continue
            out[node["mode"]] = max(out.get(node["mode"], 0), node["level"])
        return out


def incremental_block_m_mode_svd(
    d,
    cfg: TrainingConfig,
    leaf_size: int = 1,
    node_rank: Union[int, str, None] = "auto",
    segmentation: Optional[PartSegmentation] = None,
    leaf_engine: str = "svd",
) -> CausalModel:
    """M-mode SVD whose every mode step is a bottom-up block SVD.

    Each ALS step splits ``unfold(X_m, m).T`` into leaves -- groups of
    ``leaf_size`` consecutive clusters, or the parts of ``segmentation`` --
    factors every leaf, and merges the leaves pairwise up a balanced tree.
    ``node_rank`` caps the rank kept at every node: ``"auto"`` keeps the
    final rank plus 2, ``None`` keeps everything.  The per-node log lands in
    ``model.trace`` as dicts with level, shape, rank and wall time.
    """
    data, mean = _split(d)
    cfg.validate(data.shape)
    if cfg.factor_measurement:
        raise ValueError("block training never factors the measurement mode")
    if leaf_engine not in ("svd", "hebbian"):
        raise ValueError(f"unknown leaf engine {leaf_engine!r}")
    if segmentation is None:
        smallest = min(ClusterIndex(m, data.shape).count for m in range(1, data.ndim))
        if not 1 <= leaf_size <= smallest:
            raise ValueError(f"leaf_size {leaf_size} exceeds the cluster count {smallest}")
    elif segmentation.size != data.shape[0]:
        raise ValueError("segmentation for training must index the measurement mode")

    record = HierarchyLog()
    iteration = {"value": 0}

    def step(x, m, r, previous):
        if m == min(range(1, data.ndim)):
            iteration["value"] += 1
        rank = r + 2 if node_rank == "auto" else node_rank
        if segmentation is not None:
            blocks = part_based_reorder(x, segmentation, m)
        else:
            stack = _cluster_stack(x, m)
            n = stack.shape[2]
            size = min(leaf_size, n)
            blocks = []
            for lo in range(0, n, size):
                part = stack[:, :, lo: lo + size]
                blocks.append(np.transpose(part, (0, 2, 1)).reshape(-1, stack.shape[1], order="F"))
        leaves, start = [], 0
        for b in blocks:
            tic = time.perf_counter()
            leaves.append(_leaf_factor(b, start, rank, leaf_engine, cfg))
            record.nodes.append({
                "iteration": iteration["value"], "mode": m, "level": 0,
                "rows": b.shape[0], "cols": b.shape[1], "rank": leaves[-1].sv.shape[0],
                "seconds": time.perf_counter() - tic,
            })
            start += b.shape[0]
        merges: list = []
        tic = time.perf_counter()
        root, depth = merge_tree(leaves, rank, cfg.threads, merges)
        elapsed = time.perf_counter() - tic
        for node in merges:
            record.nodes.append({
                "iteration": iteration["value"], "mode": m, "level": node["level"],
                "rows": node["rows"][1] - node["rows"][0], "cols": root.sv.shape[1],
                "rank": node["rank"], "seconds": elapsed / max(len(merges), 1),
            })
        return truncated_svd(root.sv.T, min(r, *root.sv.shape)).u

    fit = run_als(data, cfg, step)
    model = _model_from_fit(data, mean, fit, cfg)
    model.trace = record.nodes
    return model


def expected_tree(n_clusters: int, leaf_size: int) -> BlockTree:
    """Tree shape used for ``n_clusters`` clusters grouped ``leaf_size`` at a time."""
    n_leaves = math.ceil(n_clusters / leaf_size)
    bounds = [(i * leaf_size, min((i + 1) * leaf_size, n_clusters)) for i in range(n_leaves)]
    return BlockTree(tuple(bounds))
