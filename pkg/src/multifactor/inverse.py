"""Multilinear projection of observations into the causal factor spaces."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .factorization import CausalModel, synthesize
from .linalg import fix_signs, pseudoinverse, truncated_svd
from .tensor import fold, outer_rank1, unfold

DEGENERATE_RATIO = 1e-12
CP_MAX_ITERS = 200
CP_TOL = 1e-10
TIE_TOL = 1e-12


@dataclass
class ProjectionResult:
    """Response tensor, unit factor estimates and per-mode labels for one observation.

    ``scale`` is the signed weight of the rank-1 fit, so the fit itself is
    ``scale * outer(reps)`` and ``residual`` is its Frobenius distance to
    ``response``.  ``labels[m]`` is ``(row index, |cosine|)``.
    """

    response: np.ndarray
    reps: Optional[list]
    scale: float = 0.0
    residual: float = 0.0
    labels: list = field(default_factory=list)
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "degenerate": self.degenerate,
            "residual": self.residual,
            "scale": self.scale,
            "labels": [{"mode": m, "index": i, "cosine": c} for m, (i, c) in enumerate(self.labels, start=1)],
            "reps": None if self.reps is None else [r.tolist() for r in self.reps],
        }


@dataclass
class PiecewiseEnsemble:
    """Regime-specific models whose inverse solutions compete through a gate."""

    models: list

    def __post_init__(self):
        if not self.models:
            raise ValueError("an ensemble needs at least one model")
        dims = {mod.measurement_dim for mod in self.models}
        if len(dims) != 1:
            raise ValueError(f"models disagree on measurement dimension: {sorted(dims)}")


def _cp_sweep(r: np.ndarray, vecs: list) -> list:
    out = list(vecs)
    for m in range(r.ndim):
        v = unfold(r, m) @ _kron_others(out, m)
        nv = np.linalg.norm(v)
        out[m] = v / nv if nv > 0 else out[m]
    return out


def _kron_others(vecs: list, m: int) -> np.ndarray:
    acc = np.ones(1)
    for n, v in enumerate(vecs):
        if n != m:
            acc = np.kron(v, acc)
    return acc


def _fit_value(r: np.ndarray, vecs: list) -> float:
    """Contraction of ``r`` with every vector, i.e. the optimal rank-1 scale."""
    return float(vecs[0] @ (unfold(r, 0) @ _kron_others(vecs, 0)))


def rank1_approximate(r, method: str = "als-cp", max_iters: int = CP_MAX_ITERS, tol: float = CP_TOL):
    """Best rank-1 fit ``scale * v_1 o ... o v_M`` of a tensor.

    ``als-cp`` starts from the largest-norm fiber of every unfolding and
    alternates normalized contractions until the fit changes by less than
    ``tol`` (relative).  ``m-mode-svd-leading`` starts from the leading left
    singular vector of every unfolding and runs one refinement sweep.
    Vectors are signed so their largest-magnitude entry is positive; the
    sign goes into ``scale``.

    Returns ``(vectors, scale)``.
    """
    r = np.asarray(r, dtype=np.float64)
    norm_r = np.linalg.norm(r)
    if norm_r == 0:
        raise ValueError("cannot extract a rank-1 term from a zero tensor")
    if r.ndim == 1:
        v = fix_signs((r / norm_r)[:, None])[:, 0]
        return [v], float(v @ r)

    if method == "m-mode-svd-leading":
        vecs = [truncated_svd(unfold(r, m), 1).u[:, 0] for m in range(r.ndim)]
        vecs = _cp_sweep(r, vecs)
    elif method == "als-cp":
        vecs = []
        for m in range(r.ndim):
            mat = unfold(r, m)
            col = mat[:, np.argmax(np.linalg.norm(mat, axis=0))]
            vecs.append(col / np.linalg.norm(col))
        fit = _fit_value(r, vecs)
        for _ in range(max_iters):
            vecs = _cp_sweep(r, vecs)
            new = _fit_value(r, vecs)
            if abs(abs(new) - abs(fit)) <= tol * norm_r:
                break
            fit = new
    else:
        raise ValueError(f"unknown rank-1 method {method!r}")

    vecs = [fix_signs(v[:, None])[:, 0] for v in vecs]
    return vecs, _fit_value(r, vecs)


def classify_factor(rep, factor) -> tuple[int, float]:
    """Row of ``factor`` with the largest absolute cosine to ``rep``; ties go to the lowest index."""
    rep = np.asarray(rep, dtype=np.float64).ravel()
    factor = np.atleast_2d(np.asarray(factor, dtype=np.float64))
    if rep.size != factor.shape[1]:
        raise ValueError(f"representation has length {rep.size}, factor rank is {factor.shape[1]}")
    nrep = np.linalg.norm(rep)
    if nrep == 0:
        raise ValueError("cannot classify a zero representation")
    norms = np.linalg.norm(factor, axis=1)
    cos = np.zeros(factor.shape[0])
    nz = norms > 0
    cos[nz] = np.abs(factor[nz] @ rep) / (norms[nz] * nrep)
    best = float(cos.max())
    idx = int(np.flatnonzero(cos >= best - TIE_TOL)[0])
    return idx, float(min(cos[idx], 1.0))


def multilinear_project(model: CausalModel, d_test, method: str = "als-cp", core_pinv=None) -> ProjectionResult:
    """Project one observation: ``R = fold(pinv(unfold(T, 0)) @ (d - mean))``, then rank-1 fit.

    ``core_pinv`` lets callers reuse a precomputed ``pinv(unfold(T, 0))``.
    When the response is negligible relative to ``|T^+| |d|`` the result is
    flagged degenerate and carries no representations.
    """
    if model is None or model.core is None:
        raise ValueError("model is not trained")
    d = np.asarray(d_test, dtype=np.float64).ravel()
    if d.size != model.measurement_dim:
        raise ValueError(f"observation has length {d.size}, model expects {model.measurement_dim}")
    tpinv = pseudoinverse(unfold(model.core, 0)) if core_pinv is None else core_pinv
    centered = d - model.mean
    resp = fold((tpinv @ centered)[None, :], 0, (1,) + model.ranks)[0]
    threshold = DEGENERATE_RATIO * np.linalg.norm(tpinv, 2) * max(np.linalg.norm(d), np.finfo(float).tiny)
    if np.linalg.norm(resp) <= threshold:
        return ProjectionResult(resp, None, 0.0, float(np.linalg.norm(resp)), [], True)
    vecs, scale = rank1_approximate(resp, method)
    residual = float(np.linalg.norm(resp - scale * outer_rank1(vecs)))
    labels = [classify_factor(v, u) for v, u in zip(vecs, model.factors)]
    return ProjectionResult(resp, vecs, scale, residual, labels, False)


def gate_score(model: CausalModel, d_test, result: ProjectionResult) -> float:
    """``-|d - synthesize(rows nearest to the estimates)|^2``; ``-inf`` for degenerate results."""
    if result.degenerate:
        return -np.inf
    reps = [u[i] for u, (i, _) in zip(model.factors, result.labels)]
    recon = synthesize(model.core, reps, model.mean)
    diff = np.asarray(d_test, dtype=np.float64).ravel() - recon
    return -float(diff @ diff)


def piecewise_project(ensemble: PiecewiseEnsemble, d_test, method: str = "als-cp", threads: int = 1):
    """Project through every model and keep the best-scoring candidate.

    Returns ``(chosen index, chosen result, candidates)`` where each
    candidate is ``(result, score)``.  Equal scores go to the lowest index.
    """
    if not isinstance(ensemble, PiecewiseEnsemble):
        ensemble = PiecewiseEnsemble(list(ensemble))

    def run(model):
        res = multilinear_project(model, d_test, method)
        return res, gate_score(model, d_test, res)

    if threads > 1 and len(ensemble.models) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            candidates = list(pool.map(run, ensemble.models))
    else:
        candidates = [run(mod) for mod in ensemble.models]
    best = 0
    for k, (_, score) in enumerate(candidates):
        if score > candidates[best][1]:
            best = k
    return best, candidates[best][0], candidates
