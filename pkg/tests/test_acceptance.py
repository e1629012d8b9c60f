"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are printed even
without ``-s``).
"""

import csv
import io as textio
import itertools
import json
import time
from contextlib import redirect_stdout

import numpy as np
import pytest

from conftest import low_rank_tensor
from multifactor import io
from multifactor.cli import main
from multifactor.factorization import TrainingConfig, compute_extended_core, m_mode_svd
from multifactor.hierarchy import (
    PartSegmentation,
    cluster_matrices,
    constrained_cluster_pca,
    incremental_block_m_mode_svd,
    part_based_reorder,
)
from multifactor.inverse import PiecewiseEnsemble, multilinear_project, piecewise_project
from multifactor.kernels import KernelSpec, ica_rotation, k_mpca, kernel_mode_covariance
from multifactor.linalg import BlockFactor, block_svd_merge, max_principal_angle, truncated_svd
from multifactor.neural import HebbianConfig, core_via_autoencoder, hebbian_subspace
from multifactor.synth import SynthSpec, generate
from multifactor.tensor import fold, kron_chain, multi_mode_multiply, unfold

SCHEDULES = ("sequential", "parallel", "asynchronous")


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number} {name}: {detail}")
        assert ok, detail

    return emit


def worst_angle(a, b):
    return max(max_principal_angle(u, v) for u, v in zip(a, b))


def unfold_by_loops(t, m):
    """Mode-m unfolding from the index definition: remaining modes in order, lowest fastest."""
    others = [k for k in range(t.ndim) if k != m]
    out = np.empty((t.shape[m], int(np.prod([t.shape[k] for k in others]))))
    for idx in itertools.product(*(range(n) for n in t.shape)):
        col, stride = 0, 1
        for k in others:
            col += idx[k] * stride
            stride *= t.shape[k]
        out[idx[m], col] = t[idx]
    return out


def test_layout_soundness(report):
    rng = np.random.default_rng(1)
    tic = time.perf_counter()
    worst, exact = 0.0, True
    for _ in range(200):
        dims = tuple(int(n) for n in rng.integers(1, 5, rng.integers(1, 6)))
        t = rng.standard_normal(dims)
        mats = [rng.standard_normal((int(rng.integers(1, 5)), n)) for n in dims]
        for m in range(t.ndim):
            exact &= np.array_equal(unfold(t, m), unfold_by_loops(t, m))
            exact &= np.array_equal(fold(unfold(t, m), m, dims), t)
        b = multi_mode_multiply(t, mats, modes=range(t.ndim))
        lhs = b.ravel(order="F")
        rhs = kron_chain(mats) @ t.ravel(order="F")
        scale = max(np.linalg.norm(rhs), 1.0)
        worst = max(worst, np.max(np.abs(lhs - rhs)) / scale)
        for m in range(t.ndim):
            rest = [a for k, a in enumerate(mats) if k != m]
            others = kron_chain(rest) if rest else np.ones((1, 1))
            diff = unfold(b, m) - mats[m] @ unfold(t, m) @ others.T
            worst = max(worst, np.max(np.abs(diff)) / max(np.linalg.norm(unfold(b, m)), 1.0))
    elapsed = time.perf_counter() - tic
    report(1, "layout", exact and worst <= 1e-12 and elapsed < 10,
           f"round-trips exact={exact}, kron-vec rel err {worst:.1e}, {elapsed:.2f}s")


def test_mpca_recovery(report):
    tic = time.perf_counter()
    angle, cost, spread = 0.0, 0.0, 0.0
    cases = [((32, 5, 5, 5), (3, 4, 2)), ((32, 5, 5, 5), (5, 2, 3)), ((20, 5, 4), (2, 3)),
             ((12, 5, 5, 5), (4, 4, 4)), ((32, 3, 5), (3, 5))]
    for seed, (dims, ranks) in enumerate(cases):
        data, truth, _ = generate(SynthSpec(dims[0], dims[1:], ranks, seed=seed))
        costs = []
        for schedule in SCHEDULES:
            model = m_mode_svd(data, TrainingConfig(ranks, schedule=schedule, tol=1e-12))
            angle = max(angle, worst_angle(model.factors, truth.factors))
            cost = max(cost, model.final_cost)
            costs.append(model.final_cost)
        spread = max(spread, max(costs) - min(costs))
    elapsed = time.perf_counter() - tic
    report(2, "mpca", angle <= 1e-6 and cost <= 1e-9 and spread <= 1e-6 and elapsed < 30,
           f"max angle {angle:.1e}, max cost {cost:.1e}, schedule spread {spread:.1e}, {elapsed:.2f}s")


def test_block_exactness(report):
    rng = np.random.default_rng(3)
    tic = time.perf_counter()
    worst = {"merge": 0.0, "cluster": 0.0, "incremental": 0.0, "parts": 0.0}
    for _ in range(50):
        rows, cols = int(rng.integers(4, 16)), int(rng.integers(2, 7))
        a = rng.standard_normal((rows, cols))
        cuts = np.sort(rng.choice(np.arange(1, rows), int(rng.integers(1, min(rows - 1, 5) + 1)), replace=False))
        blocks = [BlockFactor.from_block(b, int(s)) for b, s in zip(np.split(a, cuts), np.r_[0, cuts])]
        r = min(a.shape)
        worst["merge"] = max(worst["merge"], max_principal_angle(block_svd_merge(blocks, r).u, truncated_svd(a, r).u))

        extents = tuple(int(n) for n in rng.integers(2, 5, int(rng.integers(2, 4))))
        ranks = tuple(int(rng.integers(1, n + 1)) for n in extents)
        i0 = int(rng.integers(4, 10))
        d, _ = low_rank_tensor(rng, i0, extents, ranks)
        m = int(rng.integers(1, len(extents) + 1))
        pca = constrained_cluster_pca([c.T for c in cluster_matrices(d, m)], ranks[m - 1])
        direct = truncated_svd(unfold(d, m), ranks[m - 1])
        worst["cluster"] = max(worst["cluster"], max_principal_angle(pca.u, direct.u))

        cfg = TrainingConfig(ranks, tol=1e-12)
        flat = m_mode_svd(d, cfg)
        smallest = min(int(np.prod(extents)) // n for n in extents)
        leaf = int(rng.integers(1, min(3, smallest) + 1))
        tree = incremental_block_m_mode_svd(d, cfg, leaf_size=leaf, node_rank=None)
        worst["incremental"] = max(worst["incremental"], worst_angle(flat.factors, tree.factors))

        seg = PartSegmentation(rng.permutation(i0), rng.integers(0, 3, i0))
        parts = incremental_block_m_mode_svd(d, cfg, segmentation=seg, node_rank=None)
        worst["parts"] = max(worst["parts"], worst_angle(flat.factors, parts.factors))
        stacked = np.vstack(part_based_reorder(d, seg, m))
        got = truncated_svd(stacked, ranks[m - 1]).v
        worst["parts"] = max(worst["parts"], max_principal_angle(got, direct.u))
    elapsed = time.perf_counter() - tic
    ok = max(worst.values()) <= 1e-6 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(3, "block", ok, f"max angles {detail}, {elapsed:.2f}s")


def test_kernel_reduction(report):
    rng = np.random.default_rng(4)
    angle, cost_gap, psd = 0.0, 0.0, np.inf
    kernels = [KernelSpec("linear"), KernelSpec("polynomial-homogeneous", {"d": 2}),
               KernelSpec("polynomial-affine", {"d": 3}), KernelSpec("rbf", {"sigma": 1.5})]
    for _ in range(100):
        extents = tuple(int(n) for n in rng.integers(2, 6, int(rng.integers(1, 4))))
        ranks = tuple(int(rng.integers(1, n + 1)) for n in extents)
        d = rng.standard_normal((int(rng.integers(6, 10)),) + extents)
        cfg = TrainingConfig(ranks, tol=1e-12)
        plain = m_mode_svd(d, cfg)
        kern = k_mpca(d, cfg, [KernelSpec("linear")] * len(extents))
        angle = max(angle, worst_angle(plain.factors, kern.factors))
        cost_gap = max(cost_gap, abs(plain.final_cost - kern.final_cost))
        for spec in kernels:
            for m in range(1, d.ndim):
                k = kernel_mode_covariance(d, m, spec)
                psd = min(psd, np.linalg.eigvalsh(k)[0] / abs(np.trace(k)))
    ok = angle <= 1e-8 and cost_gap <= 1e-8 and psd >= -1e-10
    report(4, "kernel", ok, f"linear vs mpca angle {angle:.1e}, cost gap {cost_gap:.1e}, "
                            f"min eig/trace {psd:.1e}")


def test_hebbian_equivalence(report):
    angle, core_err, gaps = 0.0, 0.0, []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n, p, r = int(rng.integers(5, 12)), int(rng.integers(12, 40)), int(rng.integers(1, 4))
        s = np.sort(rng.uniform(1.0, 10.0, n))[::-1]
        s[r:] *= rng.uniform(0.3, 0.9)
        q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        w, _ = np.linalg.qr(rng.standard_normal((p, n)))
        x = (q * s) @ w.T
        gaps.append(1 - s[r] / s[r - 1])
        v = hebbian_subspace(x, r, HebbianConfig(epochs=5000))
        angle = max(angle, max_principal_angle(v, truncated_svd(x, r).u))

        d = rng.standard_normal((6, 4, 3))
        model = m_mode_svd(d, TrainingConfig((2, 3)))
        learned = core_via_autoencoder(d, model.factors)
        core_err = max(core_err, np.max(np.abs(learned - compute_extended_core(d, model.factors))))
    report(5, "hebbian", angle <= 1e-3 and core_err <= 1e-4,
           f"max angle {angle:.1e} (min gap {min(gaps):.0%}), autoencoder core err {core_err:.1e}")


def test_ica_unmixing(report):
    worst = 1.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        s = rng.uniform(-np.sqrt(3), np.sqrt(3), (2, 2000))
        theta = rng.uniform(0, np.pi)
        mix = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        comp = ica_rotation(np.eye(2), mix @ s)
        corr = np.abs(np.corrcoef(np.vstack([comp.w @ mix @ s, s]))[:2, 2:])
        if sorted(corr.argmax(axis=1)) != [0, 1]:
            worst = 0.0
        worst = min(worst, corr.max(axis=1).min())
    report(6, "ica", worst >= 0.95, f"min matched |corr| {worst:.4f} over 20 seeds")


def test_inverse_round_trip(report):
    tic = time.perf_counter()
    spec = SynthSpec(60, (5, 4, 5), (4, 4, 4), seed=21)
    data, _, _ = generate(spec)
    model = m_mode_svd(data, TrainingConfig(spec.ranks, tol=1e-12))
    exact = all(
        tuple(i for i, _ in multilinear_project(model, model.observation(idx)).labels) == idx
        for idx in itertools.product(*(range(n) for n in spec.extents))
    )

    rng = np.random.default_rng(7)
    hits = 0
    for _ in range(1000):
        idx = tuple(int(rng.integers(0, n)) for n in spec.extents)
        clean = model.observation(idx)
        noise = rng.standard_normal(clean.size)
        noisy = clean + 0.01 * np.linalg.norm(clean - model.mean) * noise / np.linalg.norm(noise)
        hits += tuple(i for i, _ in multilinear_project(model, noisy).labels) == idx
    accuracy = hits / 1000

    regimes = SynthSpec(40, (4, 3), (4, 3), seed=22, regimes=2)
    ensemble = PiecewiseEnsemble([m_mode_svd(generate(regimes, k)[0], TrainingConfig((4, 3))) for k in range(2)])
    gated = 0
    for trial in range(500):
        k = trial % 2
        mod = ensemble.models[k]
        clean = mod.observation((int(rng.integers(0, 4)), int(rng.integers(0, 3))))
        noise = rng.standard_normal(clean.size)
        noisy = clean + 0.01 * np.linalg.norm(clean - mod.mean) * noise / np.linalg.norm(noise)
        gated += piecewise_project(ensemble, noisy)[0] == k
    gate_rate = gated / 500
    elapsed = time.perf_counter() - tic
    report(7, "inverse", exact and accuracy >= 0.95 and gate_rate >= 0.95,
           f"zero-noise exact={exact}, 1% noise accuracy {accuracy:.3f}, gating {gate_rate:.3f}, {elapsed:.2f}s")


def _run_cli(*argv):
    buf = textio.StringIO()
    with redirect_stdout(buf):
        code = main([str(a) for a in argv])
    return code, buf.getvalue()


def _without_timing(path):
    if path.name == "report.json":
        report = json.loads(path.read_text())
        for run in report["runs"]:
            run.pop("wall_time")
        return json.dumps(report, sort_keys=True).encode()
    if path.name == "bench.csv":
        with open(path) as fh:
            rows = [r[:4] + r[5:] for r in csv.reader(fh)]
        return json.dumps(rows).encode()
    return path.read_bytes()


def _cli_session(root):
    root.mkdir()
    (root / "synth.json").write_text(json.dumps(
        {"measurement_dim": 16, "extents": [4, 3, 4], "ranks": [3, 3, 2], "noise_std": 0.05, "seed": 9, "regimes": 2}))
    outputs = []
    outputs.append(_run_cli("synth", "--config", root / "synth.json", "--out", root / "grid"))
    trains = {
        "mpca": {"schedules": ["sequential", "parallel", "async"]},
        "kernel": {"kernels": ["rbf:sigma=2.0", "linear", "poly-a:d=2"]},
        "ica": {"method": "ica"},
        "block": {"method": "block", "block": {"leaf_size": 2, "node_rank": None}},
        "hebbian": {"engine": "hebbian", "max_iters": 3, "hebbian": {"epochs": 300}},
    }
    for name, extra in trains.items():
        cfg = dict({"data": "grid/regime_0/data.mten", "ranks": [3, 3, 2], "tol": 1e-10}, **extra)
        (root / f"{name}.json").write_text(json.dumps(cfg))
        outputs.append(_run_cli("train", "--config", root / f"{name}.json", "--out", root / f"model_{name}", "--seed", 4))
    (root / "r1.json").write_text(json.dumps({"data": "grid/regime_1/data.mten", "ranks": [3, 3, 2]}))
    outputs.append(_run_cli("train", "--config", root / "r1.json", "--out", root / "model_r1"))
    data = io.read_mten(root / "grid" / "regime_0" / "data.mten")
    io.write_matrix_csv(root / "obs.csv", data[:, 1, 2, 3][None, :])
    (root / "ensemble.json").write_text(json.dumps({"models": ["model_mpca", "model_r1"]}))
    outputs.append(_run_cli("project", "--model", root / "model_mpca", "--observation", root / "obs.csv",
                            "--out", root / "proj"))
    outputs.append(_run_cli("project", "--ensemble", root / "ensemble.json", "--observation", root / "obs.csv",
                            "--out", root / "proj_ens", "--threads", 2))
    (root / "bench.json").write_text(json.dumps({"benchmarks": [
        {"name": "b", "synth": {"measurement_dim": 8, "extents": [4, 4, 3], "ranks": [2, 2, 3]}, "leaf_size": 2}]}))
    outputs.append(_run_cli("bench", "--config", root / "bench.json", "--out", root / "bench"))
    outputs.append(_run_cli("inspect", "--model", root / "model_kernel"))
    files = {str(p.relative_to(root)): _without_timing(p) for p in sorted(root.rglob("*")) if p.is_file()}
    return outputs, files


def test_cli_determinism(report, tmp_path):
    out_a, files_a = _cli_session(tmp_path / "a")
    out_b, files_b = _cli_session(tmp_path / "b")
    codes = [c for c, _ in out_a]
    differing = sorted(k for k in files_a if files_a[k] != files_b.get(k))
    ok = out_a == out_b and files_a.keys() == files_b.keys() and not differing and all(c in (0, 4) for c in codes)
    report(8, "determinism", ok,
           f"{len(files_a)} artifacts from {len(out_a)} commands (exit codes {codes}), differing: {differing or 'none'}")
