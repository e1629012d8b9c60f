"""Kernel functions, kernel mode covariance, K-MPCA / K-MICA training and the ICA rotation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .factorization import CausalModel, TrainingConfig, _model_from_fit, _split, run_als
from .linalg import fix_signs, leading_eigvecs
from .neural import hebbian_left_factors
from .tensor import unfold

log = logging.getLogger(__name__)

KINDS = ("linear", "polynomial-homogeneous", "polynomial-affine", "sigmoid", "rbf")
_ALIASES = {
    "poly": "polynomial-homogeneous",
    "poly-h": "polynomial-homogeneous",
    "poly-a": "polynomial-affine",
    "gaussian": "rbf",
    "tanh": "sigmoid",
}
_PARAMS = {
    "linear": (),
    "polynomial-homogeneous": ("d",),
    "polynomial-affine": ("d",),
    "sigmoid": ("alpha", "beta"),
    "rbf": ("sigma",),
}


class IndefiniteKernelWarning(UserWarning):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "linear"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        params = {k: float(v) for k, v in self.params.items()}
        expected = set(_PARAMS[kind])
        if set(params) != expected:
            raise ValueError(f"kernel {kind} takes parameters {sorted(expected)}, got {sorted(params)}")
        if "d" in params:
            if params["d"] < 1 or params["d"] != int(params["d"]):
                raise ValueError("polynomial degree d must be an integer >= 1")
            params["d"] = int(params["d"])
        if "sigma" in params and not params["sigma"] > 0:
            raise ValueError("rbf sigma must be positive")
        object.__setattr__(self, "params", params)

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        """Parse ``kind`` or ``kind:key=value,key=value``, e.g. ``rbf:sigma=1.0``."""
        kind, _, rest = text.strip().partition(":")
        params = {}
        for item in filter(None, (p.strip() for p in rest.split(","))):
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"kernel parameter {item!r} is not key=value")
            params[key.strip()] = float(value)
        return cls(kind.strip(), params)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: dict) -> "KernelSpec":
        unknown = set(data) - {"kind", "params"}
        if unknown:
            raise ValueError(f"unknown kernel keys {sorted(unknown)}")
        return cls(data["kind"], dict(data.get("params", {})))

    @property
    def is_psd(self) -> bool:
        return self.kind != "sigmoid"

    def from_gram(self, gram, sq_left=None, sq_right=None):
        """Kernel values from inner products (and squared norms, needed by RBF)."""
        p = self.params
        if self.kind == "linear":
            return gram
        if self.kind == "polynomial-homogeneous":
            return gram ** p["d"]
        if self.kind == "polynomial-affine":
            return (gram + 1.0) ** p["d"]
        if self.kind == "sigmoid":
            return np.tanh(p["alpha"] * gram + p["beta"])
        dist = np.maximum(sq_left + sq_right - 2.0 * gram, 0.0)
        return np.exp(-dist / (2.0 * p["sigma"] ** 2))


@dataclass(frozen=True)
class FactorComponents:
    """Independent components ``c = u @ inv(w)`` of one mode."""

    c: np.ndarray
    w: np.ndarray
    u: np.ndarray
    converged: bool = True


def kernel_eval(spec: KernelSpec, u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"vectors of length {u.size} and {v.size}")
    return float(spec.from_gram(np.dot(u, v), np.dot(u, u), np.dot(v, v)))


def kernel_mode_covariance(x, m: int, spec: KernelSpec) -> np.ndarray:
    """``K[j, k] = sum over the other factor indices of K(x_{..j..}, x_{..k..})``.

    The arguments of ``K`` are measurement-mode fibers.  For the linear kernel
    this is exactly ``unfold(x, m) @ unfold(x, m).T``.
    """
    x = np.asarray(x, dtype=np.float64)
    if m == 0:
        raise ValueError("the measurement mode has no kernel covariance")
    if not 1 <= m < x.ndim:
        raise ValueError(f"mode {m} out of range for a {x.ndim}-way tensor")
    if spec.kind == "linear":
        xm = unfold(x, m)
        return xm @ xm.T
    fibers = np.moveaxis(x, m, 1).reshape(x.shape[0], x.shape[m], -1, order="F")
    gram = np.einsum("ajc,akc->cjk", fibers, fibers)
    sq = np.einsum("cjj->cj", gram)
    vals = spec.from_gram(gram, sq[:, :, None], sq[:, None, :])
    out = vals.sum(axis=0)
    return 0.5 * (out + out.T)


def _sym_decorrelate(w: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(w)
    return u @ vt


def ica_rotation(u, x_unfolded, max_sweeps: int = 500, tol: float = 1e-10) -> FactorComponents:
    """Kurtosis-based rotation of the mode subspace.

    The coordinates ``u.T @ x`` are centered and whitened, then a symmetric
    fixed-point iteration with the cubic contrast
    ``W <- E[z (W z)^3] - 3 W`` followed by ``W <- (W W^T)^{-1/2} W`` finds
    the orthogonal ``W`` whose rotated coordinates are maximally
    non-Gaussian.  ``c = u @ W^T`` so that ``c @ W == u``.  If the iteration
    does not settle the identity is returned with ``converged=False``.
    """
    u = np.asarray(u, dtype=np.float64)
    x = np.asarray(x_unfolded, dtype=np.float64)
    r = u.shape[1]
    y = u.T @ x
    y = y - y.mean(axis=1, keepdims=True)
    n = y.shape[1]
    evals, evecs = np.linalg.eigh(y @ y.T / n)
    if evals.min(initial=np.inf) <= 1e-12 * max(evals.max(initial=0.0), np.finfo(float).tiny):
        log.warning("whitened coordinates are rank deficient; skipping rotation")
        return FactorComponents(u.copy(), np.eye(r), u, False)
    z = (evecs / np.sqrt(evals)) @ evecs.T @ y

    w = np.eye(r)
    converged = False
    for _ in range(max_sweeps):
        wz = w @ z
        w_new = _sym_decorrelate((wz ** 3) @ z.T / n - 3.0 * w)
        lim = np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0))
        w = w_new
        if lim < tol:
            converged = True
            break
    if not converged:
        log.warning("ICA rotation did not converge in %d sweeps; using identity", max_sweeps)
        w = np.eye(r)
    return FactorComponents(u @ w.T, w, u, converged)


def _kernel_step(cfg: TrainingConfig, specs: Sequence[KernelSpec]):
    def step(x: np.ndarray, m: int, r: int, previous: np.ndarray) -> np.ndarray:
        spec = specs[m - 1]
        if cfg.subspace_engine == "hebbian":
            if spec.kind != "linear":
                raise ValueError("the hebbian engine supports linear kernels only")
            return hebbian_left_factors(unfold(x, m), r, cfg.hebbian, init=previous)
        gram = kernel_mode_covariance(x, m, spec)
        w, vecs = leading_eigvecs(gram, r)
        if not spec.is_psd and np.linalg.eigvalsh(0.5 * (gram + gram.T))[0] < -1e-10 * abs(np.trace(gram)):
            warnings.warn(
                f"mode {m}: {spec.kind} kernel covariance is indefinite; negative eigenvalues clipped",
                IndefiniteKernelWarning,
                stacklevel=2,
            )
        return fix_signs(vecs)

    return step


def k_mpca(d, cfg: TrainingConfig, specs: Sequence[KernelSpec], ica: bool = False) -> CausalModel:
    """Kernel multilinear PCA (or ICA with ``ica=True``).

    Each ALS step replaces the mode covariance with its kernel version,
    keeps its leading eigenvectors as ``U_m`` and, for ICA, rotates them into
    independent components ``C_m = U_m W_m^{-1}``.  Other modes are reduced
    with ``C_n^+`` (``C_n^T`` for PCA).  The core is ``D x_1 C_1^+ ... x_M C_M^+``.
    """
    data, mean = _split(d)
    specs = list(specs)
    if len(specs) != data.ndim - 1:
        raise ValueError(f"need {data.ndim - 1} kernel specs, got {len(specs)}")
    if cfg.factor_measurement:
        raise ValueError("kernel training never factors the measurement mode")

    finalize = None
    if ica:
        def finalize(x, m, u):
            comp = ica_rotation(u, unfold(x, m))
            return comp.c, comp.w @ u.T, comp.w

    fit = run_als(data, cfg, _kernel_step(cfg, specs), finalize)
    model = _model_from_fit(data, mean, fit, cfg)
    model.kernels = specs
    if ica:
        model.rotations = [fit.extras.get(m, np.eye(r)) for m, r in enumerate(cfg.ranks, start=1)]
    return model
