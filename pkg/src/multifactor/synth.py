"""Synthetic causal-factor grids with known ground truth.

Every combination of factor values is observed once (a full combinatorial
design).  The clean signal is ``T x_1 U_1 ... x_M U_M`` with orthonormal
``U_m``; noise is either i.i.d. Gaussian or the structured form
``Z x_0 E_0 x_1 E_1 ... x_M E_M`` whose rows ``E_m[i]`` are Gaussian with a
per-value variance.  Both forms give entry ``(i_0, ..., i_M)`` the variance
``noise_std^2 * prod_m noise_var[m][i_m]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .factorization import CausalModel
from .tensor import DataTensor, center_observations, mode_multiply, unfold

NOISE_MODELS = ("simple", "structured")
WARPS = ("none", "cubic")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic data tensor.

    ``noise_var`` holds one entry per mode ``0..M``: a scalar or a vector of
    per-value variances (the diagonal of that mode's covariance).
    ``relative_noise``, when set, rescales the drawn noise so its Frobenius
    norm is that fraction of the signal's.  ``regimes > 1`` is used by
    :func:`generate_regimes`.
    """

    measurement_dim: int
    extents: tuple
    ranks: tuple
    noise_std: float = 0.0
    noise_var: Optional[tuple] = None
    relative_noise: Optional[float] = None
    noise_model: str = "simple"
    noise_rank: int = 256
    nonlinearity: str = "none"
    core_scale: float = 1.0
    centered: bool = True
    seed: int = 0
    regimes: int = 1

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if self.measurement_dim < 1:
            raise ValueError("measurement_dim: must be >= 1")
        if not self.extents:
            raise ValueError("extents: need at least one causal mode")
        if len(self.ranks) != len(self.extents):
            raise ValueError("ranks: one rank per causal mode")
        for m, (e, r) in enumerate(zip(self.extents, self.ranks), start=1):
            if e < 1:
                raise ValueError(f"extents: mode {m} extent must be >= 1")
            if not 1 <= r <= e:
                raise ValueError(f"ranks: mode {m} rank {r} outside [1, {e}]")
        if self.noise_std < 0:
            raise ValueError("noise_std: must be >= 0")
        if self.noise_model not in NOISE_MODELS:
            raise ValueError(f"noise_model: expected one of {NOISE_MODELS}")
        if self.nonlinearity not in WARPS:
            raise ValueError(f"nonlinearity: expected one of {WARPS}")
        if self.noise_var is not None and len(self.noise_var) != len(self.extents) + 1:
            raise ValueError("noise_var: one entry per mode including the measurement mode")
        if self.regimes < 1:
            raise ValueError("regimes: must be >= 1")
        if self.noise_rank < 1:
            raise ValueError("noise_rank: must be >= 1")

    @property
    def dims(self) -> tuple:
        return (self.measurement_dim,) + self.extents

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth keys: {sorted(unknown)}")
        data = dict(data)
        if data.get("noise_var") is not None:
            data["noise_var"] = tuple(data["noise_var"])
        return cls(**data)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["extents"] = list(self.extents)
        out["ranks"] = list(self.ranks)
        if self.noise_var is not None:
            out["noise_var"] = [np.asarray(v).tolist() for v in self.noise_var]
        return out


@dataclass
class NoiseRecord:
    tensor: np.ndarray
    model: str
    variance: np.ndarray = field(repr=False, default=None)


def _variances(spec: SynthSpec) -> list:
    out = []
    for m, ext in enumerate(spec.dims):
        v = 1.0 if spec.noise_var is None else spec.noise_var[m]
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), (ext,)).copy()
        if np.any(v < 0):
            raise ValueError(f"noise_var: mode {m} has a negative variance")
        out.append(v)
    return out


def _entry_variance(spec: SynthSpec, variances: list) -> np.ndarray:
    out = variances[0]
    for v in variances[1:]:
        out = np.multiply.outer(out, v)
    return spec.noise_std ** 2 * out


def _orthonormal(rng, rows: int, cols: int, mean_free: bool) -> np.ndarray:
    g = rng.standard_normal((rows, cols))
    if mean_free:
        g -= g.mean(axis=0)
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def _noise(spec: SynthSpec, variances: list) -> np.ndarray:
    dims = spec.dims
    if spec.noise_std == 0:
        return np.zeros(dims)
    if spec.noise_model == "simple":
        std = np.sqrt(_entry_variance(spec, variances))
        n_combos = int(np.prod(spec.extents))
        cols = []
        for combo in range(n_combos):
            rng = np.random.default_rng([spec.seed, 7, combo])
            cols.append(rng.standard_normal(dims[0]))
        return np.asfortranarray(np.column_stack(cols).reshape(dims, order="F") * std)
    # Z x_0 E_0 ... x_M E_M with a superdiagonal Z of weight 1/sqrt(J)
    j = spec.noise_rank
    rng = np.random.default_rng([spec.seed, 8])
    mats = [rng.standard_normal((ext, j)) * np.sqrt(v)[:, None] for ext, v in zip(dims, variances)]
    e = mats[0] / np.sqrt(j)
    for mat in mats[1:]:
        e = np.einsum("...j,kj->...kj", e, mat)
    return spec.noise_std * np.asfortranarray(e.sum(axis=-1))


def generate(spec: SynthSpec, regime: int = 0):
    """Draw one data tensor.

    Returns ``(DataTensor, truth, NoiseRecord)``.  The truth model holds the
    generating core, the (unwarped) orthonormal factors and the centering
    vector.  With ``centered=True`` one factor with spare rank is drawn
    orthogonal to the all-ones vector so the clean signal already has zero
    mean; the final tensor is then centered exactly.
    """
    root = np.random.SeedSequence([spec.seed, regime])
    f_seq, c_seq = root.spawn(2)
    rng_f = np.random.default_rng(f_seq)
    dims = spec.dims
    mean_free_mode = None
    if spec.centered:
        spare = [m for m, (e, r) in enumerate(zip(spec.extents, spec.ranks), start=1) if r < e]
        mean_free_mode = spare[0] if spare else None
    factors = [
        _orthonormal(rng_f, e, r, m == mean_free_mode)
        for m, (e, r) in enumerate(zip(spec.extents, spec.ranks), start=1)
    ]
    core = spec.core_scale * np.random.default_rng(c_seq).standard_normal((dims[0],) + spec.ranks)
    used = factors if spec.nonlinearity == "none" else [u ** 3 for u in factors]
    signal = core
    for m, u in enumerate(used, start=1):
        signal = mode_multiply(signal, u, m)

    variances = _variances(spec)
    noise = _noise(_regime_spec(spec, regime), variances)
    if spec.relative_noise is not None:
        scale = np.linalg.norm(noise)
        noise = noise * (spec.relative_noise * np.linalg.norm(signal) / scale) if scale > 0 else noise
    data = signal + noise
    mean = np.zeros(dims[0])
    if spec.centered:
        tensor, mean = center_observations(data)
        if mean_free_mode is None and spec.nonlinearity == "none":
            clean = signal - mean.reshape((-1,) + (1,) * len(spec.extents))
            core = clean
            for m, u in enumerate(factors, start=1):
                core = mode_multiply(core, u.T, m)
    else:
        tensor = DataTensor(data)
    truth = CausalModel(core=np.asfortranarray(core), factors=factors, mean=mean, schedule="truth")
    return tensor, truth, NoiseRecord(noise, spec.noise_model, _entry_variance(spec, variances))


def _regime_spec(spec: SynthSpec, regime: int) -> SynthSpec:
    if regime == 0:
        return spec
    data = spec.to_dict()
    data["seed"] = int(np.random.SeedSequence([spec.seed, regime]).generate_state(1)[0])
    return SynthSpec.from_dict(data)


def generate_regimes(spec: SynthSpec) -> list:
    """``spec.regimes`` independent draws sharing the measurement dimension."""
    return [generate(spec, k) for k in range(spec.regimes)]


def signal_norm(truth: CausalModel) -> float:
    return float(np.linalg.norm(truth.reconstruct()))


def observation_index(dims, flat: int) -> tuple:
    """Factor subscripts of the ``flat``-th observation (mode 1 fastest)."""
    return tuple(int(i) for i in np.unravel_index(flat, tuple(dims[1:]), order="F"))


def observation(tensor, index) -> np.ndarray:
    data = np.asarray(tensor)
    return data[(slice(None),) + tuple(index)].copy()


__all__ = [
    "SynthSpec",
    "NoiseRecord",
    "generate",
    "generate_regimes",
    "signal_norm",
    "observation_index",
    "observation",
    "unfold",
]
