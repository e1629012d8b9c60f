"""M-mode SVD / MPCA training by alternating least squares.

Three update schedules are supported:

``parallel``
    Every mode's partially projected tensor is rebuilt from the data using
    the factors of the previous iteration, then all modes update together.
``asynchronous``
    Each mode worker keeps its projected tensor and corrects it
    incrementally, ``X_m <- X_m x_n (U_n(t)^T U_n(t-1))``, whenever another
    worker publishes a new ``U_n``.  Workers read whatever is published, so
    a snapshot is at most one iteration stale.  The incremental correction
    is exact only while the published subspaces stay put, so workers resync
    from the data periodically and before convergence is declared.
``sequential``
    Modes update in order and each one sees the factors its predecessors
    just produced (Gauss-Seidel), so the cost never increases.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import io
from .linalg import pseudoinverse, truncated_svd
from .neural import HebbianConfig, core_via_autoencoder, hebbian_left_factors
from .tensor import DataTensor, fold, kron_chain, mode_multiply, unfold

log = logging.getLogger(__name__)

SCHEDULES = ("parallel", "asynchronous", "sequential")
ENGINES = ("svd", "hebbian")


@dataclass(frozen=True)
class TrainingConfig:
    """Settings for :func:`m_mode_svd` and the trainers built on it.

    ``ranks`` lists the kept dimension of every causal mode ``1..M``.
    ``lambdas`` only feed the diagnostic cost; training keeps factors
    orthonormal by construction.  With ``factor_measurement`` the
    measurement mode is factored too (rank ``measurement_rank``), giving the
    full HOSVD-style output.
    """

    ranks: tuple[int, ...]
    schedule: str = "sequential"
    max_iters: int = 100
    tol: float = 1e-8
    lambdas: Optional[tuple[float, ...]] = None
    subspace_engine: str = "svd"
    side_policy: str = "auto"
    factor_measurement: bool = False
    measurement_rank: Optional[int] = None
    resync_every: int = 10
    threads: int = 1
    hebbian: HebbianConfig = field(default_factory=HebbianConfig)

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if self.lambdas is not None:
            object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule: expected one of {SCHEDULES}, got {self.schedule!r}")
        if self.subspace_engine not in ENGINES:
            raise ValueError(f"subspace_engine: expected one of {ENGINES}, got {self.subspace_engine!r}")
        if not self.tol > 0:
            raise ValueError("tol: must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters: must be >= 1")
        if self.resync_every < 1:
            raise ValueError("resync_every: must be >= 1")

    def validate(self, dims: Sequence[int]) -> None:
        """Raise ``ValueError`` naming the offending field if ``dims`` cannot take these ranks."""
        m = len(dims) - 1
        if m < 1:
            raise ValueError("ranks: data needs at least one causal mode")
        if len(self.ranks) != m:
            raise ValueError(f"ranks: expected {m} entries, got {len(self.ranks)}")
        for k, (r, ext) in enumerate(zip(self.ranks, dims[1:]), start=1):
            if not 1 <= r <= ext:
                raise ValueError(f"ranks: rank {r} for mode {k} outside [1, {ext}]")
        if self.lambdas is not None and len(self.lambdas) != m:
            raise ValueError(f"lambdas: expected {m} entries, got {len(self.lambdas)}")
        if self.measurement_rank is not None and not 1 <= self.measurement_rank <= dims[0]:
            raise ValueError(f"measurement_rank: {self.measurement_rank} outside [1, {dims[0]}]")


@dataclass
class CausalModel:
    """A trained multilinear model ``D ~ T x_1 U_1 ... x_M U_M`` plus the data mean.

    ``core`` is the extended core (measurement mode kept at full extent);
    ``factors[k]`` is the mode-``k+1`` matrix whose rows represent the values
    of that causal factor.
    """

    core: np.ndarray
    factors: list
    mean: np.ndarray
    schedule: str = "sequential"
    iterations: int = 0
    final_cost: float = 0.0
    converged: bool = True
    cost_trace: list = field(default_factory=list)
    kernels: Optional[list] = None
    rotations: Optional[list] = None
    measurement_basis: Optional[np.ndarray] = None
    trace: list = field(default_factory=list)

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(u.shape[1] for u in self.factors)

    @property
    def measurement_dim(self) -> int:
        return self.core.shape[0]

    @property
    def is_linear(self) -> bool:
        return self.kernels is None or all(k.kind == "linear" for k in self.kernels)

    def synthesize(self, reps: Sequence) -> np.ndarray:
        """Observation for one set of factor representations (mean added back)."""
        if not self.is_linear:
            raise NotImplementedError("synthesis from a nonlinear-kernel model needs a pre-image solver")
        return synthesize(self.core, reps, self.mean)

    def observation(self, index: Sequence[int]) -> np.ndarray:
        """Synthesize from training rows ``(i_1, ..., i_M)`` (0-based)."""
        return self.synthesize([u[i] for u, i in zip(self.factors, index)])

    def reconstruct(self) -> np.ndarray:
        """Centered reconstruction of the whole training tensor."""
        out = self.core
        for m, u in enumerate(self.factors, start=1):
            out = mode_multiply(out, u, m)
        return out


@dataclass
class ALSState:
    """Bookkeeping for the alternating updates.

    ``x[m]`` is the projected tensor for mode ``m`` -- every mode except
    ``m`` reduced.  ``seen[m][n]`` is the factor that reduced mode ``n`` of
    ``x[m]``; the asynchronous correction needs it, and the sequential chain
    reads it to re-expand the next mode.
    """

    data: np.ndarray
    factors: dict
    x: dict = field(default_factory=dict)
    seen: dict = field(default_factory=dict)
    iteration: int = 0

    @property
    def modes(self) -> list:
        return sorted(self.factors)


def _project_all_but(data, factors: dict, m: int, transforms: Optional[dict] = None) -> np.ndarray:
    out = data
    for n in sorted(factors):
        if n == m:
            continue
        a = transforms[n] if transforms is not None else factors[n].T
        out = mode_multiply(out, a, n)
    return out


def als_update_x(state: ALSState, m: int, schedule: str) -> np.ndarray:
    """Rebuild ``state.x[m]`` with one of the three update formulas and return it.

    ``parallel`` reprojects the data with the current factors.
    ``asynchronous`` applies ``x_n (U_n^T U_n^seen)`` for every mode whose
    published factor changed since ``x[m]`` was built.  ``sequential`` chains
    from the previous mode: ``(X_{m-1} x_{m-1} U_{m-1}^T) x_m U_m^seen``.

    The last two agree with ``parallel`` when the factors involved are
    square orthogonal; with truncated factors they return the same tensor
    with the corrected modes projected onto the previously used subspace.
    """
    if m not in state.factors:
        raise ValueError(f"mode {m} is not being factored")
    if schedule == "parallel":
        x = _project_all_but(state.data, state.factors, m)
        state.seen[m] = {n: u for n, u in state.factors.items() if n != m}
    elif schedule == "asynchronous":
        if m not in state.x:
            raise ValueError(f"no previous tensor for mode {m}; run a parallel update first")
        x = state.x[m]
        seen = dict(state.seen[m])
        for n, u in state.factors.items():
            if n == m or seen[n] is u:
                continue
            if x.shape[n] != seen[n].shape[1]:
                raise ValueError(f"stale state: mode {n} of X_{m} has extent {x.shape[n]}")
            x = mode_multiply(x, u.T @ seen[n], n)
            seen[n] = u
        state.seen[m] = seen
    elif schedule == "sequential":
        modes = state.modes
        prev = modes[modes.index(m) - 1]
        if prev == m or prev not in state.x:
            raise ValueError(f"no tensor for the preceding mode {prev} to chain from")
        xp = state.x[prev]
        back = state.seen[prev][m]
        if xp.shape[prev] != state.factors[prev].shape[0] or xp.shape[m] != back.shape[1]:
            raise ValueError(f"stale state: X_{prev} has shape {xp.shape}")
        x = mode_multiply(mode_multiply(xp, state.factors[prev].T, prev), back, m)
        seen = dict(state.seen[prev])
        seen[prev] = state.factors[prev]
        del seen[m]
        state.seen[m] = seen
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    state.x[m] = x
    return x


def _svd_step(cfg: TrainingConfig):
    def step(x: np.ndarray, m: int, r: int, previous: np.ndarray) -> np.ndarray:
        xm = unfold(x, m)
        if cfg.subspace_engine == "hebbian":
            return hebbian_left_factors(xm, r, cfg.hebbian, init=previous)
        return truncated_svd(xm, r, cfg.side_policy).u

    return step


def _reconstruction(data: np.ndarray, factors: dict, transforms: dict) -> np.ndarray:
    out = data
    for n in sorted(factors):
        out = mode_multiply(out, factors[n] @ transforms[n], n)
    return out


@dataclass
class _Fit:
    factors: dict
    transforms: dict
    iterations: int
    cost: float
    converged: bool
    cost_trace: list
    trace: list
    extras: dict


def run_als(
    data: np.ndarray,
    cfg: TrainingConfig,
    step: Callable,
    finalize: Optional[Callable] = None,
) -> _Fit:
    """Generic ALS driver shared by the MPCA and kernel trainers.

    ``step(x, m, rank, previous_factor)`` returns the new orthonormal basis
    for mode ``m`` given its projected tensor.  ``finalize(x, m, u)`` may
    turn it into a different factor (e.g. an ICA rotation) and returns
    ``(factor, transform, extra)`` where ``transform`` is the matrix used to
    reduce that mode.
    """
    data = np.asarray(data, dtype=np.float64)
    cfg.validate(data.shape)
    ranks = dict(enumerate(cfg.ranks, start=1))
    if cfg.factor_measurement:
        ranks[0] = cfg.measurement_rank or data.shape[0]
    modes = sorted(ranks)
    factors = {m: np.eye(data.shape[m])[:, : ranks[m]] for m in modes}
    transforms = {m: factors[m].T for m in modes}
    extras: dict = {}
    state = ALSState(data, factors)
    versions = {m: 0 for m in modes}
    norm_d = float(np.linalg.norm(data))
    floor = 1e-12 * max(norm_d, np.finfo(float).tiny)

    def update(m, x):
        u = step(x, m, ranks[m], factors[m])
        if finalize is None:
            return u, u.T, None
        return finalize(x, m, u)

    def publish(m, result):
        factors[m], transforms[m], extra = result
        versions[m] += 1
        if extra is not None:
            extras[m] = extra

    cost_trace: list = []
    trace: list = []
    best = None
    prev_cost = None
    converged = False
    resync = True
    it = 0
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for it in range(1, cfg.max_iters + 1):
            state.iteration = it
            if cfg.schedule == "parallel":
                snap = dict(transforms)

                def job(m):
                    return update(m, _project_all_but(data, factors, m, snap))

                results = list(pool.map(job, modes)) if pool else [job(m) for m in modes]
                for m, res in zip(modes, results):
                    publish(m, res)
                trace.append({"iteration": it, "modes": modes})
            elif cfg.schedule == "sequential":
                for m in modes:
                    publish(m, update(m, _project_all_but(data, factors, m, transforms)))
                trace.append({"iteration": it, "modes": modes})
            else:
                did_resync = resync or (it - 1) % cfg.resync_every == 0
                for m in modes:
                    if did_resync or m not in state.x:
                        state.x[m] = _project_all_but(data, factors, m, transforms)
                        state.seen[m] = {n: factors[n] for n in modes if n != m}
                        read = {n: versions[n] for n in modes if n != m}
                    else:
                        read = {n: versions[n] for n in modes if n != m}
                        x = state.x[m]
                        seen = state.seen[m]
                        for n in modes:
                            if n == m or seen[n] is factors[n]:
                                continue
                            x = mode_multiply(x, transforms[n] @ seen[n], n)
                            seen[n] = factors[n]
                        state.x[m] = x
                    publish(m, update(m, state.x[m]))
                    trace.append({"iteration": it, "mode": m, "read": read, "resync": did_resync})
                resync = False

            cost = float(np.linalg.norm(data - _reconstruction(data, factors, transforms)))
            cost_trace.append(cost)
            if best is None or cost < best[0]:
                best = (cost, dict(factors), dict(transforms), dict(extras))
            if prev_cost is not None:
                settled = cost <= floor or abs(prev_cost - cost) <= cfg.tol * max(prev_cost, floor)
                if settled:
                    if cfg.schedule == "asynchronous" and not did_resync:
                        resync = True
                    else:
                        converged = True
                        break
            prev_cost = cost
    finally:
        if pool is not None:
            pool.shutdown()

    if not converged:
        log.warning("ALS stopped after %d iterations without converging; returning best iterate", it)
        cost, fac, trans, ext = best
        return _Fit(fac, trans, it, cost, False, cost_trace, trace, ext)
    return _Fit(dict(factors), dict(transforms), it, cost_trace[-1], True, cost_trace, trace, dict(extras))


def _model_from_fit(data: np.ndarray, mean: np.ndarray, fit: _Fit, cfg: TrainingConfig) -> CausalModel:
    causal = [fit.factors[m] for m in range(1, data.ndim)]
    core = data
    for m in range(1, data.ndim):
        core = mode_multiply(core, fit.transforms[m], m)
    model = CausalModel(
        core=core,
        factors=causal,
        mean=mean,
        schedule=cfg.schedule,
        iterations=fit.iterations,
        final_cost=fit.cost,
        converged=fit.converged,
        cost_trace=list(fit.cost_trace),
        trace=fit.trace,
    )
    if 0 in fit.factors:
        model.measurement_basis = fit.factors[0]
    return model


def _split(d) -> tuple[np.ndarray, np.ndarray]:
    data = np.asarray(d, dtype=np.float64)
    mean = d.mean if isinstance(d, DataTensor) else None
    if mean is None:
        mean = np.zeros(data.shape[0])
    return data, np.asarray(mean, dtype=np.float64)


def m_mode_svd(d, cfg: TrainingConfig) -> CausalModel:
    """Train an MPCA model on a centered data tensor.

    Mode matrices start as the leading columns of the identity and are
    refined by ALS until the relative cost change drops below ``cfg.tol``
    (or the cost reaches round-off level).  If ``max_iters`` runs out the
    best iterate is returned with ``converged=False``.
    """
    data, mean = _split(d)
    fit = run_als(data, cfg, _svd_step(cfg))
    return _model_from_fit(data, mean, fit, cfg)


def core_tensor(model: CausalModel) -> np.ndarray:
    """Core ``Z`` with the measurement mode reduced too (needs ``factor_measurement``)."""
    if model.measurement_basis is None:
        raise ValueError("model was trained without a measurement-mode basis")
    return mode_multiply(model.core, model.measurement_basis.T, 0)


def _is_orthonormal(u: np.ndarray, tol: float = 1e-10) -> bool:
    return np.linalg.norm(u.T @ u - np.eye(u.shape[1])) <= tol


def compute_extended_core(d, factors: Sequence[np.ndarray], method: str = "direct",
                          cfg: Optional[HebbianConfig] = None) -> np.ndarray:
    """Extended core ``T = D x_1 U_1^+ ... x_M U_M^+``.

    ``direct`` applies the (pseudo)inverse factors; orthonormal factors use
    their transpose.  ``tensor-autoencoder`` fits the same matrix as the
    decoder of an autoencoder whose code is frozen to the Kronecker product
    of the factors.
    """
    data = np.asarray(d, dtype=np.float64)
    if len(factors) != data.ndim - 1:
        raise ValueError(f"need {data.ndim - 1} factor matrices, got {len(factors)}")
    for m, u in enumerate(factors, start=1):
        if u.shape[0] != data.shape[m]:
            raise ValueError(f"factor {m} has {u.shape[0]} rows, mode extent is {data.shape[m]}")
    if method == "tensor-autoencoder":
        return core_via_autoencoder(data, factors, cfg)
    if method != "direct":
        raise ValueError(f"unknown core method {method!r}")
    out = data
    for m, u in enumerate(factors, start=1):
        out = mode_multiply(out, u.T if _is_orthonormal(u) else pseudoinverse(u), m)
    return out


def cost_evaluate(d, model: CausalModel, lambdas: Optional[Sequence[float]] = None) -> float:
    """``|D - T x_1 U_1 ... x_M U_M|_F + sum_m lambda_m |U_m^T U_m - I|_F`` on centered data."""
    data = np.asarray(d, dtype=np.float64)
    if data.shape[0] != model.core.shape[0] or data.ndim != model.core.ndim:
        raise ValueError(f"data {data.shape} does not match model core {model.core.shape}")
    if tuple(u.shape[0] for u in model.factors) != data.shape[1:]:
        raise ValueError("factor row counts do not match the data extents")
    cost = float(np.linalg.norm(data - model.reconstruct()))
    if lambdas is not None:
        for lam, u in zip(lambdas, model.factors):
            cost += lam * float(np.linalg.norm(u.T @ u - np.eye(u.shape[1])))
    return cost


def synthesize(core, reps: Sequence, mean=None) -> np.ndarray:
    """``unfold(T, 0) @ kron(u_M, ..., u_1)`` plus the optional mean."""
    core = np.asarray(core)
    reps = [np.asarray(r, dtype=np.float64).ravel() for r in reps]
    if len(reps) != core.ndim - 1:
        raise ValueError(f"need {core.ndim - 1} representation vectors, got {len(reps)}")
    for m, r in enumerate(reps, start=1):
        if r.size != core.shape[m]:
            raise ValueError(f"representation {m} has length {r.size}, core rank is {core.shape[m]}")
    out = unfold(core, 0) @ kron_chain([r[:, None] for r in reps]).ravel()
    if mean is not None:
        out = out + mean
    return out


# -- persistence -------------------------------------------------------------


def save_model(model: CausalModel, path) -> None:
    """Write ``core.mten``, ``factor_<m>.csv``, ``mean.csv`` and ``meta.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    io.write_mten(path / "core.mten", model.core)
    for m, u in enumerate(model.factors, start=1):
        io.write_matrix_csv(path / f"factor_{m}.csv", u)
    io.write_matrix_csv(path / "mean.csv", model.mean[None, :])
    if model.measurement_basis is not None:
        io.write_matrix_csv(path / "factor_0.csv", model.measurement_basis)
    if model.rotations is not None:
        for m, w in enumerate(model.rotations, start=1):
            if w is not None:
                io.write_matrix_csv(path / f"rotation_{m}.csv", w)
    meta = {
        "ranks": list(model.ranks),
        "dims": list(model.core.shape[:1]) + [u.shape[0] for u in model.factors],
        "schedule": model.schedule,
        "iterations": model.iterations,
        "final_cost": model.final_cost,
        "converged": model.converged,
        "cost_trace": list(model.cost_trace),
        "kernels": None if model.kernels is None else [k.to_dict() for k in model.kernels],
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path) -> CausalModel:
    from .kernels import KernelSpec

    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    core = io.read_mten(path / "core.mten")
    factors = [io.read_matrix_csv(path / f"factor_{m}.csv") for m in range(1, core.ndim)]
    mean = io.read_matrix_csv(path / "mean.csv").ravel()
    model = CausalModel(
        core=core,
        factors=factors,
        mean=mean,
        schedule=meta.get("schedule", "sequential"),
        iterations=int(meta.get("iterations", 0)),
        final_cost=float(meta.get("final_cost", 0.0)),
        converged=bool(meta.get("converged", True)),
        cost_trace=list(meta.get("cost_trace", [])),
    )
    if meta.get("kernels"):
        model.kernels = [KernelSpec.from_dict(k) for k in meta["kernels"]]
    if (path / "factor_0.csv").exists():
        model.measurement_basis = io.read_matrix_csv(path / "factor_0.csv")
    rot = [path / f"rotation_{m}.csv" for m in range(1, core.ndim)]
    if any(p.exists() for p in rot):
        model.rotations = [io.read_matrix_csv(p) if p.exists() else None for p in rot]
    return model
