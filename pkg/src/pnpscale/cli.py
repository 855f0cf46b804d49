"""Command line interface: ``pnpscale <command> ...``.

Commands: simulate, reconstruct, sweep, metrics, mask-gen, kernel-gen, tv-prox.
Run configurations are JSON files; see the README for the layout.

Exit codes: 0 success, 1 compute failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .denoisers import (
    DenoiserError, ExternalDenoiser, GmmDenoiser, GmmPrior, TVDenoiser, describe, scale_denoiser,
)
from .forward import (
    BlurDownsample, ConvergenceError, IdentityModel, MaskedFourier, gaussian_kernel,
    model_metadata, radial_mask,
)
from .image import (
    ImageFormatError, encode_imgf64, read_image, read_imgf64, read_imgf64_stream, snr_db,
    write_imgf64, write_pgm,
)
from .solvers import (
    SolverConfig, SolverError, SolverResult, run_solver, verify_ce, write_trace_csv,
)
from .tuning import DEFAULT_MU_GRID, SweepSpec, log_grid, simulate_problem, sweep

PROBLEMS = ("denoise", "fourier", "super-resolution")


class UsageError(Exception):
    """Bad command line or configuration (exit code 2)."""


_POSITIVE = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["problem", "paths"],
    "additionalProperties": False,
    "properties": {
        "problem": {"enum": list(PROBLEMS)},
        "seed": {"type": "integer", "minimum": 0},
        "paths": {
            "type": "object",
            "required": ["output"],
            "additionalProperties": False,
            "properties": {k: {"type": "string"} for k in
                           ("truth", "measurements", "metadata", "mask", "kernel", "output")},
        },
        "forward": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sampling_rate": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "factor": {"type": "integer", "minimum": 1},
                "kernel_size": {"type": "integer", "minimum": 1},
                "kernel_std": _POSITIVE,
            },
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"input_snr": {"type": ["number", "string"]}},
        },
        "denoiser": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["tv", "gmm", "external"]},
                "mu": _POSITIVE,
                "tau": {"type": "number", "minimum": 0},
                "max_inner": {"type": "integer", "minimum": 1},
                "inner_tol": {"type": "number", "minimum": 0},
                "weights": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "means": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "variances": {"type": "array", "items": _POSITIVE, "minItems": 1},
                "noise_var": _POSITIVE,
                "command": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "timeout": _POSITIVE,
                "sigma": {"type": "number"},
            },
            "additionalProperties": False,
            "allOf": [
                {"if": {"properties": {"kind": {"const": "gmm"}}},
                 "then": {"required": ["weights", "means", "variances"]}},
                {"if": {"properties": {"kind": {"const": "external"}}},
                 "then": {"required": ["command"]}},
            ],
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "algorithm": {"enum": ["admm", "ista", "fista"]},
                "gamma": _POSITIVE,
                "mu": _POSITIVE,
                "max_iters": {"type": "integer", "minimum": 1},
                "tol": {"type": "number", "minimum": 0},
                "x0": {"enum": ["default", "zeros", "adjoint"]},
                "allow_large_step": {"type": "boolean"},
            },
        },
        "sweep": {
            "type": "object",
            "required": ["parameter"],
            "additionalProperties": False,
            "properties": {
                "parameter": {"enum": ["mu", "lambda", "gamma"]},
                "grid": {"type": "array", "items": _POSITIVE, "minItems": 1},
                "log": {
                    "type": "object",
                    "required": ["min", "max", "count"],
                    "additionalProperties": False,
                    "properties": {"min": _POSITIVE, "max": _POSITIVE,
                                   "count": {"type": "integer", "minimum": 1}},
                },
            },
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "forward": {"sampling_rate": 1 / 3, "factor": 2, "kernel_size": 19, "kernel_std": 1.6},
    "noise": {"input_snr": 30.0},
    "denoiser": {"kind": "tv", "tau": 1.0, "max_inner": 200, "inner_tol": 1e-9},
    "solver": {"algorithm": "fista", "gamma": 1.0, "max_iters": 200, "tol": 1e-6, "x0": "default"},
}


# -- configuration ----------------------------------------------------------

def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _input_snr(value):
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "+inf", "infinity"):
            return float("inf")
        raise UsageError(f"noise.input_snr must be a number or 'inf', got {value!r}")
    return float(value)


def load_config(path, overrides: dict | None = None) -> dict:
    """Read, override, validate and resolve a run configuration."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return resolve_config(raw, base_dir=path.parent, overrides=overrides)


def resolve_config(raw: dict, base_dir=".", overrides: dict | None = None) -> dict:
    raw = copy.deepcopy(raw)
    applied = {}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.rpartition(".")
        target = raw
        if section:
            target = raw.setdefault(section, {"kind": "tv"} if section == "denoiser" else {})
        target[key] = value
        applied[dotted] = value
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"config error at {where}: {exc.message}") from exc
    if "mu" in raw.get("denoiser", {}) and "mu" in raw.get("solver", {}):
        raise UsageError("mu given in both the denoiser and solver blocks; set it in one place")
    if "grid" in raw.get("sweep", {}) and "log" in raw.get("sweep", {}):
        raise UsageError("sweep takes either 'grid' or 'log', not both")
    cfg = _merge(DEFAULTS, raw)
    if raw.get("denoiser", {}).get("kind", "tv") != "tv":
        # TV defaults do not apply to other kinds
        cfg["denoiser"] = {k: v for k, v in cfg["denoiser"].items()
                           if k not in ("tau", "max_inner", "inner_tol") or k in raw["denoiser"]}
    cfg["noise"]["input_snr"] = _input_snr(cfg["noise"]["input_snr"])
    base_dir = Path(base_dir)
    cfg["paths"] = {k: str((base_dir / v).resolve()) for k, v in cfg["paths"].items()}
    for key in ("mask", "kernel"):
        if key in cfg["paths"] and not Path(cfg["paths"][key]).is_file():
            raise UsageError(f"paths.{key}: file not found: {cfg['paths'][key]}")
    cfg["overrides"] = applied
    return cfg


def build_denoiser(block: dict):
    """Unscaled denoiser from a config block; returns ``(denoiser, mu or None)``."""
    kind = block["kind"]
    if kind == "tv":
        d = TVDenoiser(block.get("tau", 1.0), block.get("max_inner", 200),
                       block.get("inner_tol", 1e-9))
    elif kind == "gmm":
        try:
            prior = GmmPrior(block["weights"], block["means"], block["variances"])
        except ValueError as exc:
            raise UsageError(f"denoiser: {exc}") from exc
        d = GmmDenoiser(prior, block.get("noise_var", 1.0))
    else:
        d = ExternalDenoiser(tuple(block["command"]), block.get("timeout", 60.0),
                             block.get("sigma"))
    return d, block.get("mu")


def solver_setup(cfg: dict):
    """``(algorithm, SolverConfig, unscaled denoiser)`` for a resolved config."""
    denoiser, mu_d = build_denoiser(cfg["denoiser"])
    s = cfg["solver"]
    mu = mu_d if mu_d is not None else s.get("mu", 1.0)
    x0 = None if s["x0"] == "default" else s["x0"]
    config = SolverConfig(gamma=s["gamma"], mu=mu, max_iters=s["max_iters"], fp_tol=s["tol"],
                          schedule="ista" if s["algorithm"] == "ista" else "fista", x0=x0,
                          allow_large_step=s.get("allow_large_step", False))
    return s["algorithm"], config, denoiser


# -- measurement files ------------------------------------------------------

def pack_measurements(y) -> np.ndarray:
    """Real IMGF64 layout: complex ``(C, m)`` becomes ``(C, 2, m)`` (real, imag rows)."""
    if np.iscomplexobj(y):
        return np.stack([y.real, y.imag], axis=1)
    return np.asarray(y, dtype=np.float64)


def unpack_measurements(arr, domain: str):
    if domain == "frequency":
        if arr.shape[1] != 2:
            raise UsageError("frequency-domain measurements must have height 2 (real, imag)")
        return arr[:, 0, :] + 1j * arr[:, 1, :]
    return arr


def _shape_of(meta):
    return tuple(meta["forward"]["input_shape"])


def build_model(cfg: dict, shape, meta=None):
    """Forward model for ``cfg``; mask and kernel come from files when present."""
    problem = cfg["problem"]
    fwd = cfg["forward"]
    paths = cfg["paths"]
    c, h, w = shape
    extra = {}
    if problem == "denoise":
        return IdentityModel(shape), extra
    if problem == "fourier":
        mask_path = paths.get("mask") or (meta or {}).get("mask_file")
        if mask_path:
            grid = read_imgf64(mask_path)[0]
            if grid.shape != (h, w):
                raise UsageError(f"mask shape {grid.shape} does not match image {(h, w)}")
            kept = grid > 0.5
            extra["mask"] = {"source": mask_path, "kept_fraction": float(kept.mean())}
        else:
            mask = radial_mask(h, w, fwd["sampling_rate"])
            kept = mask.kept
            extra["mask"] = mask.metadata()
        return MaskedFourier(kept, c), extra
    kernel_path = paths.get("kernel") or (meta or {}).get("kernel_file")
    if kernel_path:
        taps = read_imgf64(kernel_path)
        extra["kernel"] = {"source": kernel_path}
    else:
        taps = gaussian_kernel(fwd["kernel_size"], fwd["kernel_std"])
        extra["kernel"] = {"size": fwd["kernel_size"], "std": fwd["kernel_std"]}
    factor = (meta or {}).get("forward", {}).get("factor", fwd["factor"])
    return BlurDownsample(taps, factor, shape), extra


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _finite(x):
    return None if x is None or not np.isfinite(x) else float(x)


def _provenance(command, cfg, artifacts, **extra):
    return {"command": command, "version": __version__, "config": cfg,
            "overrides": cfg.get("overrides", {}), "artifacts": sorted(artifacts), **extra}


def _output_dir(cfg):
    out = Path(cfg["paths"]["output"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_image(out, stem, image, artifacts):
    write_imgf64(image, out / f"{stem}.imgf64")
    artifacts.append(f"{stem}.imgf64")
    if image.shape[0] == 1:
        write_pgm(image, out / f"{stem}.pgm")
        artifacts.append(f"{stem}.pgm")


# -- commands ---------------------------------------------------------------

def cmd_simulate(cfg: dict) -> int:
    truth_path = cfg["paths"].get("truth")
    if not truth_path or not Path(truth_path).is_file():
        raise UsageError(f"paths.truth: file not found: {truth_path}")
    truth = read_image(truth_path)
    model, extra = build_model(cfg, truth.shape)
    out = _output_dir(cfg)
    artifacts = []
    y, sigma = simulate_problem(truth, model, cfg["noise"]["input_snr"], cfg["seed"])
    write_imgf64(pack_measurements(y), out / "measurements.imgf64")
    artifacts.append("measurements.imgf64")
    meta = {"problem": cfg["problem"], "sigma": sigma, "seed": cfg["seed"],
            "requested_input_snr": _finite(cfg["noise"]["input_snr"]),
            "achieved_input_snr": snr_db(model.apply(truth), y),
            "domain": model.domain, "forward": model_metadata(model), **extra}
    if isinstance(model, MaskedFourier):
        write_imgf64(model.mask.astype(np.float64)[None], out / "mask.imgf64")
        artifacts.append("mask.imgf64")
        meta["mask_file"] = str(out / "mask.imgf64")
    elif isinstance(model, BlurDownsample):
        write_imgf64(model.kernel[None], out / "kernel.imgf64")
        artifacts.append("kernel.imgf64")
        meta["kernel_file"] = str(out / "kernel.imgf64")
    artifacts.append("simulate.json")
    _write_json(out / "simulate.json", _provenance("simulate", cfg, artifacts, metadata=meta))
    print(f"sigma {sigma:.4f}  input SNR {meta['achieved_input_snr']:.2f} dB")
    return 0


def _load_problem(cfg):
    out = Path(cfg["paths"]["output"])
    meta_path = Path(cfg["paths"].get("metadata", out / "simulate.json"))
    y_path = Path(cfg["paths"].get("measurements", out / "measurements.imgf64"))
    for p in (meta_path, y_path):
        if not p.is_file():
            raise UsageError(f"missing input {p}; run 'simulate' first")
    meta = json.loads(meta_path.read_text())
    meta = meta.get("metadata", meta)
    if meta["problem"] != cfg["problem"]:
        raise UsageError(f"measurements are for problem {meta['problem']!r}, "
                         f"config says {cfg['problem']!r}")
    shape = _shape_of(meta)
    model, _ = build_model(cfg, shape, meta)
    y = unpack_measurements(read_imgf64(y_path), meta["domain"])
    truth = None
    if cfg["paths"].get("truth"):
        if not Path(cfg["paths"]["truth"]).is_file():
            raise UsageError(f"paths.truth: file not found: {cfg['paths']['truth']}")
        truth = read_image(cfg["paths"]["truth"])
    return model, y, truth


def cmd_reconstruct(cfg: dict) -> int:
    model, y, truth = _load_problem(cfg)
    algorithm, config, denoiser = solver_setup(cfg)
    out = _output_dir(cfg)
    artifacts = []
    try:
        result = run_solver(algorithm, model, y, denoiser, config, reference=truth)
    except SolverError as exc:
        write_trace_csv(SolverResult(None, len(exc.trace), False, exc.trace), out / "trace.csv")
        raise
    _save_image(out, "reconstruction", result.x, artifacts)
    write_trace_csv(result, out / "trace.csv")
    artifacts.append("trace.csv")
    ce = verify_ce(model, y, denoiser, config.gamma, config.mu, result.x)
    _write_json(out / "ce.json", ce.to_dict())
    artifacts.append("ce.json")
    summary = {"algorithm": algorithm, "iterations": result.iterations,
               "converged": result.converged, "denoiser": describe(denoiser), "mu": config.mu}
    if truth is not None:
        summary["snr_db"] = snr_db(truth, result.x)
        summary["adjoint_snr_db"] = snr_db(truth, model.adjoint(y))
    artifacts.append("reconstruct.json")
    _write_json(out / "reconstruct.json", _provenance("reconstruct", cfg, artifacts, result=summary))
    status = "converged" if result.converged else "not converged"
    line = f"{algorithm}: {result.iterations} iterations ({status})"
    if truth is not None:
        line += f"  final SNR {summary['snr_db']:.2f} dB"
    print(line)
    return 0


def sweep_spec(cfg: dict) -> tuple[SweepSpec, object]:
    if "sweep" not in cfg:
        raise UsageError("config has no sweep block")
    block = cfg["sweep"]
    algorithm, config, denoiser = solver_setup(cfg)
    if block["parameter"] == "mu" and config.mu != 1.0:
        raise UsageError("a mu sweep needs the fixed mu left at 1")
    if "grid" in block:
        grid = sorted(block["grid"])
    elif "log" in block:
        grid = log_grid(block["log"]["min"], block["log"]["max"], block["log"]["count"])
    elif block["parameter"] == "mu":
        grid = list(DEFAULT_MU_GRID)
    else:
        raise UsageError(f"sweep over {block['parameter']} needs 'grid' or 'log'")
    try:
        spec = SweepSpec(block["parameter"], tuple(grid), config, algorithm)
    except ValueError as exc:
        raise UsageError(f"sweep: {exc}") from exc
    return spec, denoiser


def cmd_sweep(cfg: dict, jobs: int | None = None) -> int:
    spec, denoiser = sweep_spec(cfg)
    model, y, truth = _load_problem(cfg)
    if truth is None:
        raise UsageError("a sweep needs paths.truth for scoring")
    out = _output_dir(cfg)
    jobs = jobs or os.cpu_count() or 1
    curve = sweep(model, y, truth, denoiser, spec, jobs=jobs)
    artifacts = ["sweep.csv"]
    curve.write_csv(out / "sweep.csv")
    best = curve.best_point
    if curve.best_image is not None:
        _save_image(out, "best", curve.best_image, artifacts)
    artifacts.append("sweep.json")
    _write_json(out / "sweep.json", _provenance(
        "sweep", cfg, artifacts,
        grid=list(spec.grid),
        best=None if best is None else {"param": best.value, "snr_db": best.snr_db,
                                        "iters": best.iterations, "converged": best.converged},
        errors={str(p.value): p.error for p in curve.points if p.error},
    ))
    if best is None:
        print("no grid point produced an image", file=sys.stderr)
        return 1
    print(f"best {spec.parameter} = {best.value:.6g}  SNR {best.snr_db:.2f} dB")
    return 0


def cmd_metrics(reference, test, csv_path=None) -> int:
    try:
        ref = read_image(reference)
        tst = read_image(test)
    except (OSError, ImageFormatError) as exc:
        raise UsageError(str(exc)) from exc
    if ref.shape != tst.shape:
        raise UsageError(f"dimension mismatch: {ref.shape} vs {tst.shape}")
    try:
        value = snr_db(ref, tst)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"{value:.2f}")
    if csv_path:
        new = not Path(csv_path).exists()
        with open(csv_path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["reference", "test", "snr_db"])
            w.writerow([reference, test, f"{value:.2f}"])
    return 0


def cmd_mask_gen(height, width, rate, out) -> int:
    try:
        mask = radial_mask(height, width, rate)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_imgf64(mask.kept.astype(np.float64)[None], out)
    _write_json(str(out) + ".json", mask.metadata())
    print(f"{mask.line_count} lines, kept fraction {mask.rate:.4f}")
    return 0


def cmd_kernel_gen(size, std, out) -> int:
    try:
        taps = gaussian_kernel(size, std)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_imgf64(taps[None], out)
    _write_json(str(out) + ".json", {"size": size, "std": std, "kind": "gaussian"})
    return 0


def cmd_tv_prox(tau, max_inner, inner_tol, mu=None) -> int:
    """Filter: IMGF64 on stdin, TV-denoised IMGF64 on stdout."""
    z = read_imgf64_stream(sys.stdin.buffer)
    d = TVDenoiser(tau, max_inner, inner_tol)
    x = d(z) if mu is None else scale_denoiser(d, mu)(z)
    sys.stdout.buffer.write(encode_imgf64(x))
    sys.stdout.buffer.flush()
    return 0


# -- argument parsing -------------------------------------------------------

def _add_overrides(p, sweep=False):
    p.add_argument("config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", help="output directory (paths.output)")
    p.add_argument("--input-snr", type=float, help="noise.input_snr in dB")
    p.add_argument("--algorithm", choices=["admm", "ista", "fista"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--tau", type=float, help="TV weight (denoiser.tau)")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float)
    if sweep:
        p.add_argument("--jobs", type=int, default=None,
                       help="parallel grid points (default: all cores)")


def _overrides(args, raw_denoiser_has_mu):
    mu_key = "denoiser.mu" if raw_denoiser_has_mu else "solver.mu"
    return {
        "seed": args.seed, "paths.output": args.output, "noise.input_snr": args.input_snr,
        "solver.algorithm": args.algorithm, "solver.gamma": args.gamma, mu_key: args.mu,
        "denoiser.tau": args.tau, "solver.max_iters": args.max_iters, "solver.tol": args.tol,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pnpscale", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    _add_overrides(sub.add_parser("simulate", help="simulate noisy measurements"))
    _add_overrides(sub.add_parser("reconstruct", help="run PnP reconstruction"))
    _add_overrides(sub.add_parser("sweep", help="grid sweep over mu, lambda or gamma"), sweep=True)

    p = sub.add_parser("metrics", help="SNR of a test image against a reference")
    p.add_argument("reference")
    p.add_argument("test")
    p.add_argument("--csv", help="append the result to this CSV file")

    p = sub.add_parser("mask-gen", help="radial Fourier sampling mask")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--rate", type=float, default=1 / 3)
    p.add_argument("--out", required=True)

    p = sub.add_parser("kernel-gen", help="Gaussian blur kernel")
    p.add_argument("--size", type=int, default=19)
    p.add_argument("--std", type=float, default=1.6)
    p.add_argument("--out", required=True)

    p = sub.add_parser("tv-prox", help="TV prox filter, IMGF64 stdin -> stdout")
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--max-inner", type=int, default=200)
    p.add_argument("--inner-tol", type=float, default=1e-9)
    p.add_argument("--mu", type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command in ("simulate", "reconstruct", "sweep"):
            try:
                raw = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config {args.config}: {exc}") from exc
            has_mu = isinstance(raw.get("denoiser"), dict) and "mu" in raw["denoiser"]
            cfg = resolve_config(raw, Path(args.config).parent, _overrides(args, has_mu))
            if args.command == "simulate":
                return cmd_simulate(cfg)
            if args.command == "reconstruct":
                return cmd_reconstruct(cfg)
            return cmd_sweep(cfg, args.jobs)
        if args.command == "metrics":
            return cmd_metrics(args.reference, args.test, args.csv)
        if args.command == "mask-gen":
            return cmd_mask_gen(args.height, args.width, args.rate, args.out)
        if args.command == "kernel-gen":
            return cmd_kernel_gen(args.size, args.std, args.out)
        return cmd_tv_prox(args.tau, args.max_inner, args.inner_tol, args.mu)
    except UsageError as exc:
        print(f"pnpscale: error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, DenoiserError, ConvergenceError, ImageFormatError,
            ValueError, OSError, FloatingPointError) as exc:
        print(f"pnpscale: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
