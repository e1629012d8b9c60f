"""Hebbian (linear autoencoder) subspace learning and the tensor-autoencoder core fit.

The subspace learner trains one linear neuron at a time.  Neuron ``r`` follows

    dv = eta * (X - V_{r-1} V_{r-1}^T X) (X^T v),    v <- (v + dv) / |v + dv|

where ``V_{r-1}`` holds the already-trained neurons, so each new neuron sees
the data with the learned directions deflated out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .linalg import fix_signs
from .tensor import fold, kron_chain, unfold

log = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e6


class HebbianDivergence(FloatingPointError):
    """Raised when a neuron's pre-normalization norm explodes."""


@dataclass(frozen=True)
class HebbianConfig:
    """Settings for :func:`hebbian_subspace` and :func:`core_via_autoencoder`.

    ``eta=None`` picks ``1 / |X|_F^2`` for the subspace learner and
    ``1 / lambda_max(code code^T)`` for the core fit.  ``decay`` shrinks the
    step as ``eta / (1 + decay * epoch)``; it only matters for the stochastic
    variant, whose constant-step fixed point is biased.
    """

    eta: Optional[float] = None
    epochs: int = 5000
    tol: float = 1e-7
    patience: int = 3
    sgd: str = "batch"
    rng_seed: int = 0
    decay: float = 0.0

    def __post_init__(self):
        if self.eta is not None and not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.sgd not in ("batch", "stochastic"):
            raise ValueError(f"sgd must be 'batch' or 'stochastic', got {self.sgd!r}")


def _step(v: np.ndarray, dv: np.ndarray) -> np.ndarray:
    w = v + dv
    nw = np.linalg.norm(w)
    if not np.isfinite(nw) or nw > DIVERGENCE_NORM:
        raise HebbianDivergence(
            f"neuron weight norm reached {nw:.3g} before normalization; use a smaller eta"
        )
    if nw == 0.0:
        raise HebbianDivergence("neuron weights collapsed to zero; use a smaller eta")
    return w / nw


def hebbian_subspace(x, r: int, cfg: Optional[HebbianConfig] = None, init=None) -> np.ndarray:
    """Learn ``r`` orthonormal directions spanning the leading left singular subspace of ``x``.

    Parameters
    ----------
    x : (n, p) array
        Data with observations as columns.
    r : int
        Number of neurons.
    cfg : HebbianConfig, optional
    init : (n, r) array, optional
        Starting weights (e.g. the previous ALS iterate).  Columns are
        normalized; a zero column falls back to a seeded random start.

    Returns
    -------
    (n, r) array whose columns are the neuron weights, signed so that each
    column's largest-magnitude entry is positive.
    """
    cfg = cfg or HebbianConfig()
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("matrix contains non-finite entries")
    n, p = x.shape
    if not 1 <= r <= min(n, p):
        raise ValueError(f"rank {r} outside [1, {min(n, p)}]")
    scale = float(np.sum(x * x))
    V = np.zeros((n, r))
    if scale == 0.0:
        V[:r, :r] = np.eye(r)
        return V
    eta = cfg.eta if cfg.eta is not None else 1.0 / scale
    rng = np.random.default_rng(cfg.rng_seed)

    for k in range(r):
        start = rng.uniform(-1.0, 1.0, n)
        if init is not None and np.linalg.norm(init[:, k]) > 0:
            start = np.asarray(init[:, k], dtype=np.float64).copy()
        prev = V[:, :k]
        # the update never leaves the complement of earlier neurons, so start there;
        # on a null residual the neuron would otherwise keep a stale direction
        start = start - prev @ (prev.T @ start)
        if np.linalg.norm(start) <= 1e-12:
            start = _complement_vector(prev, n)
        v = start / np.linalg.norm(start)
        stable = 0
        for epoch in range(cfg.epochs):
            lr = eta / (1.0 + cfg.decay * epoch)
            before = v
            if cfg.sgd == "batch":
                xc = x @ (x.T @ v)
                v = _step(v, lr * (xc - prev @ (prev.T @ xc)))
            else:
                for j in rng.permutation(p):
                    xj = x[:, j]
                    code = xj @ v
                    v = _step(v, lr * code * (xj - prev @ (prev.T @ xj)))
            if np.linalg.norm(v - before) < cfg.tol:
                stable += 1
                if stable >= cfg.patience:
                    break
            else:
                stable = 0
        else:
            log.debug("neuron %d stopped at the epoch cap (%d)", k, cfg.epochs)
        v = v - prev @ (prev.T @ v)
        V[:, k] = v / np.linalg.norm(v)
    return fix_signs(V)


def _complement_vector(prev: np.ndarray, n: int) -> np.ndarray:
    for e in np.eye(n):
        w = e - prev @ (prev.T @ e)
        if np.linalg.norm(w) > 1e-8:
            return w
    raise ValueError("no direction left outside the learned subspace")


def hebbian_left_factors(x, r: int, cfg: Optional[HebbianConfig] = None, init=None) -> np.ndarray:
    """Left singular directions of ``x``, trained on whichever side is smaller.

    When ``x`` has more rows than columns the neurons learn right factors
    ``V`` and the left factors follow from ``U = X V S^+`` with each singular
    value estimated as ``|X v_r|``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] <= x.shape[1]:
        return hebbian_subspace(x, r, cfg, init)
    v = hebbian_subspace(x.T, r, cfg, None if init is None else x.T @ init)
    xv = x @ v
    sigma = np.linalg.norm(xv, axis=0)
    u = np.zeros_like(xv)
    nz = sigma > 0
    u[:, nz] = xv[:, nz] / sigma[nz]
    return fix_signs(u)


def core_via_autoencoder(d, factors: Sequence[np.ndarray], cfg: Optional[HebbianConfig] = None) -> np.ndarray:
    """Fit the extended core as the decoder of an autoencoder with a frozen Kronecker code.

    The code for observation ``(i_1, ..., i_M)`` is
    ``kron(u_{i_M}, ..., u_{i_1})``; the decoder weights are ``unfold(T, 0)``.
    Batch mode runs full-batch gradient descent on the squared
    reconstruction error; stochastic mode updates on one observation at a
    time, sweeping every factor combination each epoch.
    """
    cfg = cfg or HebbianConfig()
    data = np.asarray(d, dtype=np.float64)
    factors = [np.asarray(u, dtype=np.float64) for u in factors]
    if len(factors) != data.ndim - 1:
        raise ValueError(f"need {data.ndim - 1} factor matrices, got {len(factors)}")
    for m, u in enumerate(factors, start=1):
        if u.shape[0] != data.shape[m]:
            raise ValueError(f"factor {m} has {u.shape[0]} rows, mode extent is {data.shape[m]}")
    y = unfold(data, 0)
    code = kron_chain(factors).T
    core_dims = [data.shape[0]] + [u.shape[1] for u in factors]
    w = np.zeros((y.shape[0], code.shape[0]))
    if not np.any(y):
        return fold(w, 0, core_dims)

    if cfg.sgd == "batch":
        gram = code @ code.T
        eta = cfg.eta if cfg.eta is not None else 1.0 / np.linalg.eigvalsh(gram)[-1]
        target = y @ code.T
        for epoch in range(cfg.epochs):
            lr = eta / (1.0 + cfg.decay * epoch)
            dw = lr * (target - w @ gram)
            w = w + dw
            if not np.all(np.isfinite(w)):
                raise HebbianDivergence("decoder weights diverged; use a smaller eta")
            if np.linalg.norm(dw) <= cfg.tol * max(1.0, np.linalg.norm(w)):
                break
    else:
        rng = np.random.default_rng(cfg.rng_seed)
        norms = np.sum(code * code, axis=0)
        eta = cfg.eta if cfg.eta is not None else 1.0 / norms.max()
        for epoch in range(cfg.epochs):
            lr = eta / (1.0 + cfg.decay * epoch)
            before = w.copy()
            for j in rng.permutation(code.shape[1]):
                c = code[:, j]
                w += lr * np.outer(y[:, j] - w @ c, c)
            if not np.all(np.isfinite(w)):
                raise HebbianDivergence("decoder weights diverged; use a smaller eta")
            if np.linalg.norm(w - before) <= cfg.tol * max(1.0, np.linalg.norm(w)):
                break
    return fold(w, 0, core_dims)
