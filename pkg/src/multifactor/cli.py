"""Command-line driver: ``multifactor {synth,train,project,bench,inspect}``.

Exit codes: 0 success, 2 I/O failure, 3 invalid configuration, 4 training
did not converge (the model is still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .factorization import TrainingConfig, load_model, m_mode_svd, save_model
from .hierarchy import PartSegmentation, expected_tree, incremental_block_m_mode_svd
from .inverse import PiecewiseEnsemble, multilinear_project, piecewise_project
from .kernels import KernelSpec, k_mpca
from .linalg import max_principal_angle
from .neural import HebbianConfig
from .synth import SynthSpec, generate
from .tensor import DataTensor, center_observations

log = logging.getLogger("multifactor")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NONCONVERGED = 0, 2, 3, 4

TRAIN_KEYS = {
    "data", "ranks", "schedule", "max_iters", "tol", "lambdas", "engine", "side_policy",
    "factor_measurement", "measurement_rank", "resync_every", "method", "kernels",
    "block", "hebbian", "schedules",
}
METHODS = ("mpca", "kernel", "ica", "block")
BLOCK_KEYS = {"leaf_size", "node_rank", "segmentation", "permutation", "leaf_engine"}
PROJECT_KEYS = {"model", "ensemble", "observation", "method"}
BENCH_KEYS = {"benchmarks"}
BENCH_ITEM_KEYS = {"name", "data", "synth", "ranks", "leaf_size", "node_rank", "max_iters", "tol"}
BENCH_HEADER = ["name", "path", "mode", "nodes", "wall_time", "max_angle"]


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_IO, f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise CliError(EXIT_CONFIG, f"{path}: top level must be an object")
    return data


def _reject_unknown(data: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise CliError(EXIT_CONFIG, f"{where}: unknown keys {unknown}")


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _load_tensor(path) -> np.ndarray:
    try:
        return io.read_mten(path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot read tensor {path}: {exc}") from exc


def _load(fn, path):
    try:
        return fn(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parse_kernel_flags(items, n_modes: int) -> list:
    specs = [KernelSpec("linear")] * n_modes
    for item in items:
        mode, sep, text = item.partition("=")
        if not sep or not mode.strip().isdigit():
            raise CliError(EXIT_CONFIG, f"kernel: expected 'm=kind:key=value', got {item!r}")
        m = int(mode)
        if not 1 <= m <= n_modes:
            raise CliError(EXIT_CONFIG, f"kernel: mode {m} outside 1..{n_modes}")
        specs[m - 1] = KernelSpec.parse(text)
    return specs


def _config_kernels(value, n_modes: int) -> list:
    if value is None:
        return []
    if isinstance(value, dict):
        return [f"{m}={v}" for m, v in value.items()]
    if len(value) != n_modes:
        raise CliError(EXIT_CONFIG, f"kernels: expected {n_modes} entries, got {len(value)}")
    out = []
    for m, v in enumerate(value, start=1):
        if isinstance(v, dict):
            spec = KernelSpec.from_dict(v)
            v = spec.kind + ":" + ",".join(f"{k}={p}" for k, p in spec.params.items())
        out.append(f"{m}={v}")
    return out


# -- synth -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    if not args.config:
        raise CliError(EXIT_CONFIG, "config: synth needs --config")
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "spec.json", spec.to_dict())
    for k in range(spec.regimes):
        target = out if spec.regimes == 1 else out / f"regime_{k}"
        target.mkdir(parents=True, exist_ok=True)
        tensor, truth, _ = generate(spec, k)
        io.write_mten(target / "data.mten", np.asarray(tensor))
        save_model(truth, target / "truth")
    return EXIT_OK


# -- train -----------------------------------------------------------------------


def _training_config(raw: dict, args, n_modes: int, schedule: str) -> TrainingConfig:
    kwargs = {k: raw[k] for k in ("ranks", "max_iters", "tol", "lambdas", "side_policy",
                                  "factor_measurement", "measurement_rank", "resync_every") if k in raw}
    kwargs["schedule"] = schedule
    kwargs["subspace_engine"] = args.engine or raw.get("engine", "svd")
    kwargs["threads"] = args.threads
    heb = dict(raw.get("hebbian") or {})
    _reject_unknown(heb, {f.name for f in fields(HebbianConfig)}, "hebbian")
    if args.seed is not None:
        heb["rng_seed"] = args.seed
    if "ranks" not in kwargs:
        raise CliError(EXIT_CONFIG, "ranks: required")
    try:
        kwargs["hebbian"] = HebbianConfig(**heb)
        return TrainingConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def _train_once(data: DataTensor, cfg: TrainingConfig, method: str, kernels: list, block: dict, base: Path):
    if method == "block":
        seg = None
        if block.get("segmentation"):
            perm = block.get("permutation")
            seg = _load(lambda p: PartSegmentation.from_csv(p, perm and _resolve(base, perm)),
                        _resolve(base, block["segmentation"]))
        return incremental_block_m_mode_svd(
            data, cfg,
            leaf_size=int(block.get("leaf_size", 1)),
            node_rank=block.get("node_rank", "auto"),
            segmentation=seg,
            leaf_engine=block.get("leaf_engine", "svd"),
        )
    if method in ("kernel", "ica"):
        return k_mpca(data, cfg, kernels, ica=method == "ica")
    return m_mode_svd(data, cfg)


def cmd_train(args) -> int:
    if not args.config:
        raise CliError(EXIT_CONFIG, "config: train needs --config")
    raw = _read_json(args.config)
    _reject_unknown(raw, TRAIN_KEYS, "train config")
    base = Path(args.config).resolve().parent
    if "data" not in raw:
        raise CliError(EXIT_CONFIG, "data: required")
    tensor = _load_tensor(_resolve(base, raw["data"]))
    if tensor.ndim < 2:
        raise CliError(EXIT_CONFIG, "data: tensor needs a measurement mode and at least one causal mode")
    data, _ = center_observations(tensor)
    n_modes = tensor.ndim - 1

    method = raw.get("method", "mpca")
    kernel_items = _config_kernels(raw.get("kernels"), n_modes) + list(args.kernel or [])
    if kernel_items and method == "mpca":
        method = "kernel"
    if method not in METHODS:
        raise CliError(EXIT_CONFIG, f"method: expected one of {METHODS}, got {method!r}")
    try:
        kernels = _parse_kernel_flags(kernel_items, n_modes)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"kernel: {exc}") from exc
    block = dict(raw.get("block") or {})
    _reject_unknown(block, BLOCK_KEYS, "block")

    if args.schedule:
        schedules = [args.schedule]
    else:
        schedules = raw.get("schedules") or [raw.get("schedule", "sequential")]
    schedules = ["asynchronous" if s == "async" else s for s in schedules]

    runs, model = [], None
    for schedule in schedules:
        cfg = _training_config(raw, args, n_modes, schedule)
        try:
            cfg.validate(data.dims)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from exc
        tic = time.perf_counter()
        try:
            fitted = _train_once(data, cfg, method, kernels, block, base)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from exc
        wall = time.perf_counter() - tic
        runs.append({
            "schedule": schedule,
            "iterations": fitted.iterations,
            "final_cost": fitted.final_cost,
            "converged": fitted.converged,
            "cost_trace": list(fitted.cost_trace),
            "wall_time": wall,
        })
        model = model or fitted

    out = Path(args.out or "model")
    try:
        save_model(model, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write model to {out}: {exc}") from exc
    report = {
        "method": method,
        "iterations": runs[0]["iterations"],
        "final_cost": runs[0]["final_cost"],
        "converged": runs[0]["converged"],
        "cost_trace": runs[0]["cost_trace"],
        "runs": runs,
    }
    _write_json(out / "report.json", report)
    print(json.dumps({k: report[k] for k in ("iterations", "final_cost", "converged")}, sort_keys=True))
    if not all(r["converged"] for r in runs):
        log.error("training did not converge; best iterate written to %s", out)
        return EXIT_NONCONVERGED
    return EXIT_OK


# -- project ---------------------------------------------------------------------


def _projection_inputs(args):
    raw = _read_json(args.config) if args.config else {}
    _reject_unknown(raw, PROJECT_KEYS, "project config")
    base = Path(args.config).resolve().parent if args.config else Path.cwd()
    model = args.model or (raw.get("model") and str(_resolve(base, raw["model"])))
    ensemble = args.ensemble or (raw.get("ensemble") and str(_resolve(base, raw["ensemble"])))
    obs = args.observation or (raw.get("observation") and str(_resolve(base, raw["observation"])))
    method = args.method or raw.get("method", "als-cp")
    if bool(model) == bool(ensemble):
        raise CliError(EXIT_CONFIG, "model: give exactly one of a model directory or an ensemble manifest")
    if not obs:
        raise CliError(EXIT_CONFIG, "observation: required")
    return model, ensemble, obs, method


def _ensemble_dirs(manifest: str) -> list:
    raw = _read_json(manifest)
    _reject_unknown(raw, {"models"}, "ensemble manifest")
    dirs = raw.get("models")
    if not dirs:
        raise CliError(EXIT_CONFIG, "models: an ensemble needs at least one model")
    base = Path(manifest).resolve().parent
    return [_resolve(base, d) for d in dirs]


def cmd_project(args) -> int:
    model_dir, manifest, obs_path, method = _projection_inputs(args)
    d = _load(io.read_vector, obs_path)
    try:
        if model_dir:
            model = _load(load_model, model_dir)
            result = multilinear_project(model, d, method).to_dict()
        else:
            models = [_load(load_model, p) for p in _ensemble_dirs(manifest)]
            best, chosen, candidates = piecewise_project(PiecewiseEnsemble(models), d, method, args.threads)
            result = chosen.to_dict()
            result["chosen"] = best
            result["candidates"] = [
                dict(res.to_dict(), model=k, gate_score=None if np.isinf(score) else score)
                for k, (res, score) in enumerate(candidates)
            ]
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "projection.json").write_text(text + "\n")
    return EXIT_OK


# -- bench -----------------------------------------------------------------------


def _bench_rows(item: dict, base: Path, threads: int) -> list:
    _reject_unknown(item, BENCH_ITEM_KEYS, "benchmark")
    name = item.get("name", "bench")
    if ("data" in item) == ("synth" in item):
        raise CliError(EXIT_CONFIG, f"benchmark {name}: give exactly one of data or synth")
    if "data" in item:
        data, _ = center_observations(_load_tensor(_resolve(base, item["data"])))
    else:
        try:
            data, _, _ = generate(SynthSpec.from_dict(item["synth"]))
        except (TypeError, ValueError) as exc:
            raise CliError(EXIT_CONFIG, f"synth: {exc}") from exc
    ranks = item.get("ranks") or list(data.dims[1:])
    leaf_size = int(item.get("leaf_size", 1))
    try:
        cfg = TrainingConfig(ranks, max_iters=int(item.get("max_iters", 50)),
                             tol=float(item.get("tol", 1e-10)), threads=threads)
        cfg.validate(data.dims)
        tic = time.perf_counter()
        flat = m_mode_svd(data, cfg)
        flat_time = time.perf_counter() - tic
        tic = time.perf_counter()
        tree = incremental_block_m_mode_svd(data, cfg, leaf_size=leaf_size,
                                            node_rank=item.get("node_rank", "auto"))
        tree_time = time.perf_counter() - tic
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"benchmark {name}: {exc}") from exc

    rows = []
    iterations = max(tree.iterations, 1)
    for m in range(1, data.order + 1):
        # ALS steps cluster the projected tensor, whose other modes have the kept ranks
        n_clusters = int(np.prod([r for k, r in enumerate(cfg.ranks, start=1) if k != m]))
        nodes = expected_tree(n_clusters, min(leaf_size, n_clusters)).n_nodes
        logged = [n for n in tree.trace if n["mode"] == m]
        step_time = sum(n["seconds"] for n in logged) / iterations
        angle = max_principal_angle(flat.factors[m - 1], tree.factors[m - 1])
        rows.append([name, "flat", m, 1, flat_time / data.order, 0.0])
        rows.append([name, "hierarchical", m, nodes, step_time, angle])
    return rows


def cmd_bench(args) -> int:
    if not args.config:
        raise CliError(EXIT_CONFIG, "config: bench needs --config")
    raw = _read_json(args.config)
    _reject_unknown(raw, BENCH_KEYS, "bench config")
    base = Path(args.config).resolve().parent
    rows = []
    for item in raw.get("benchmarks", []):
        rows.extend(_bench_rows(item, base, args.threads))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BENCH_HEADER)
        writer.writerows(rows)
    return EXIT_OK


# -- inspect ---------------------------------------------------------------------


def cmd_inspect(args) -> int:
    if not args.model:
        raise CliError(EXIT_CONFIG, "model: inspect needs --model")
    model = _load(load_model, args.model)
    info = {
        "measurement_dim": model.measurement_dim,
        "ranks": list(model.ranks),
        "extents": [u.shape[0] for u in model.factors],
        "schedule": model.schedule,
        "iterations": model.iterations,
        "final_cost": model.final_cost,
        "converged": model.converged,
        "kernels": None if model.kernels is None else [k.to_dict() for k in model.kernels],
        "has_measurement_basis": model.measurement_basis is not None,
        "has_rotations": model.rotations is not None,
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="multifactor", description="Multilinear causal factor analysis")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic data tensor")
    train = sub.add_parser("train", parents=[common], help="train a model from a .mten tensor")
    train.add_argument("--schedule", choices=("sequential", "parallel", "async", "asynchronous"))
    train.add_argument("--engine", choices=("svd", "hebbian"))
    train.add_argument("--kernel", action="append", metavar="M=KIND[:K=V,...]",
                       help="kernel for causal mode M, e.g. 1=rbf:sigma=1.0")
    project = sub.add_parser("project", parents=[common], help="project an observation")
    project.add_argument("--model")
    project.add_argument("--ensemble", help="JSON manifest listing model directories")
    project.add_argument("--observation")
    project.add_argument("--method", choices=("als-cp", "m-mode-svd-leading"))
    sub.add_parser("bench", parents=[common], help="time flat vs hierarchical training")
    inspect = sub.add_parser("inspect", parents=[common], help="print model metadata")
    inspect.add_argument("--model")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "project": cmd_project,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
