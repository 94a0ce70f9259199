"""Command-line driver.

    meanreflect simulate      --config run.json
    meanreflect couple        --config run.json --workers 8
    meanreflect constants     --T 0.25 --c-t 0 --m-sigma 1
    meanreflect kernel-check  [--strict-nash-aronson]
    meanreflect concentration --config run.json

A run is described by one JSON document; flags override its top-level keys.
Every run that writes files also writes ``manifest.json`` listing each output
with its sha256.  Wall-clock timings live only in the manifest, so the other
outputs are byte-comparable across runs and worker counts.

Exit status: 0 success, 2 configuration error, 3 numerical blow-up,
4 failed check.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from scipy import integrate

from . import __version__
from .constants import ConstantEnv, constants_record
from .errors import (
    BlowUpError,
    CheckFailure,
    ConfigurationError,
    ContractError,
    DataError,
    DomainError,
    NumericalContractError,
)
from .grid import SpaceTimeGrid
from .kernel import (
    HeatKernelConfig,
    eigen_series,
    eval_kernel,
    free_gaussian_bound,
    image_series,
    kernel_matrix,
    nash_aronson_bound,
)
from .noise import DriftField, read_matrix_csv, write_matrix_csv
from .reflect import make_obstacle
from .solver import CoefficientSpec, solve_mean_reflected
from .transport import concentration_profile, constant_env, run_coupling, t2_marginal_check

OUTPUT_ENV = "MEANREFLECT_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_CHECK = 0, 2, 3, 4
CONSTRAINT_TOL = 1e-8
FLATNESS_TOL = 1e-8

BASE_DEFAULTS = {
    "grid": {"T": 0.25, "nx": 32, "cfl_ratio": 0.5},
    "coefficients": {"f": {"kind": "zero"}, "sigma": {"kind": "constant", "c": 1.0}, "u0": {"kind": "zero"}},
    "obstacle": {"kind": "linear", "y": {"kind": "zero"}},
    "seed": 0,
    "workers": 1,
}
DEFAULTS = {
    "simulate": {**BASE_DEFAULTS, "n_particles": 2000, "snapshots": [], "keep_fields": False},
    "couple": {**BASE_DEFAULTS, "n_pairs": 2000, "drift": {"kind": "constant", "c": 0.5},
               "marginal": None, "n_bootstrap": 200},
    "concentration": {**BASE_DEFAULTS, "n_particles": 2000, "samples_csv": None,
                      "eps": [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5]},
    "kernel-check": {"kernel": {}, "n_samples": 20, "t_min": 1e-4, "t_max": 0.5, "quad_n": 2048},
    "constants": {},
}


# --------------------------------------------------------------------------- config

def load_config(command: str, path: str | None, overrides: dict) -> tuple[dict, Path]:
    """Defaults, then the JSON file, then non-None flag overrides (top-level keys)."""
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    base_dir = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a JSON object")
        cfg.update(doc)
        base_dir = p.resolve().parent
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg, base_dir


def _require_int(cfg: dict, key: str, minimum: int) -> int:
    v = cfg.get(key)
    if not isinstance(v, int) or isinstance(v, bool) or v < minimum:
        raise ConfigurationError(f"{key} must be an integer >= {minimum}, got {v!r}")
    return v


def build_grid(spec: dict, allow_unstable: bool) -> SpaceTimeGrid:
    if not isinstance(spec, dict) or "T" not in spec or "nx" not in spec:
        raise ConfigurationError("grid must be an object with T, nx and either nt or cfl_ratio")
    if "nt" in spec:
        grid = SpaceTimeGrid(spec["T"], spec["nt"], spec["nx"], allow_unstable=allow_unstable)
    else:
        grid = SpaceTimeGrid.from_cfl(spec["T"], spec["nx"], float(spec.get("cfl_ratio", 0.5)))
    if not grid.cfl_ok and not allow_unstable:
        grid.require_cfl()
    return grid


def build_drift(spec: dict | None, base_dir: Path) -> DriftField | None:
    if spec is None:
        return None
    kind = spec.get("kind")
    if kind == "constant":
        return DriftField.constant(float(spec["c"]))
    if kind == "zero":
        return DriftField.constant(0.0)
    if kind == "grid":
        path = Path(spec["path"])
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigurationError(f"drift.path not found: {path}")
        return DriftField.from_csv(path)
    raise ConfigurationError(f"drift.kind must be 'constant', 'zero' or 'grid', got {kind!r}")


def build_problem(cfg: dict, allow_unstable: bool):
    grid = build_grid(cfg.get("grid"), allow_unstable)
    coeffs = CoefficientSpec.from_descriptor(cfg.get("coefficients") or {})
    issues = coeffs.check(grid)
    obstacle = None if cfg.get("obstacle") is None else make_obstacle(cfg["obstacle"])
    if obstacle is not None:
        issues += obstacle.check(grid)
    if issues:
        raise ConfigurationError("; ".join(issues))
    return grid, coeffs, obstacle


def output_dir(flag: str | None, cfg: dict) -> Path:
    raw = flag or os.environ.get(OUTPUT_ENV) or cfg.get("output_dir") or "meanreflect-out"
    out = Path(raw)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------- output

def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RunManifest:
    """Config echo, version, per-stage timings and the output inventory."""

    def __init__(self, command: str, cfg: dict, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.files: list[Path] = []
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def stage(self, name: str, started: float) -> None:
        self.timings[name] = time.perf_counter() - started

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
        self.files.append(path)
        return path

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, dump_json(obj))

    def write_csv(self, name: str, matrix, header: list[str]) -> Path:
        path = self.out / name
        write_matrix_csv(path, matrix, header)
        self.files.append(path)
        return path

    def finish(self, status: str) -> Path:
        self.timings["total"] = time.perf_counter() - self._t0
        doc = {
            "command": self.command,
            "version": __version__,
            "status": status,
            "config": self.cfg,
            "outputs": [{"path": p.name, "sha256": sha256(p), "bytes": p.stat().st_size} for p in self.files],
            "timings": self.timings,
        }
        path = self.out / "manifest.json"
        path.write_text(dump_json(doc))
        return path


# --------------------------------------------------------------------------- subcommands

def cmd_simulate(args, cfg, base_dir) -> int:
    grid, coeffs, obstacle = build_problem(cfg, args.allow_unstable)
    n = _require_int(cfg, "n_particles", 1)
    workers = _require_int(cfg, "workers", 1)
    drift = build_drift(cfg.get("drift"), base_dir)
    man = RunManifest("simulate", cfg, output_dir(args.output_dir, cfg))

    t0 = time.perf_counter()
    traj = solve_mean_reflected(grid, coeffs, obstacle, n, int(cfg["seed"]), drift=drift,
                                snapshots=cfg.get("snapshots") or (), workers=workers,
                                keep_fields=bool(cfg.get("keep_fields")))
    man.stage("solve", t0)

    diag = traj.diagnostics
    checks = {
        "k_nonnegative": diag["k_min_increment"] >= 0,
        "constraint": diag["constraint_violation_max"] <= CONSTRAINT_TOL,
        "flatness": diag["flatness_residual"] <= FLATNESS_TOL * (1 + abs(diag["total_k_mass"])),
        "boundary": bool(np.all(traj.final_u[:, [0, -1]] == 0)),
    }
    times = traj.snapshot_times
    man.write_json("trajectory.json", {
        "grid": grid.to_dict(),
        "seed": int(cfg["seed"]),
        "n_particles": n,
        "coefficients": coeffs.descriptor,
        "obstacle": getattr(obstacle, "descriptor", None),
        "drift": None if drift is None else drift.descriptor,
        "snapshot_times": times,
        "diagnostics": diag,
        "checks": checks,
    })
    man.write_csv("k_increments.csv", traj.k.dk, [f"x{j}" for j in range(1, grid.nx)])
    man.write_csv("mean_fields.csv", np.column_stack([times, traj.mean_fields]),
                  ["t"] + [f"x{j}" for j in range(grid.nx + 1)])
    man.write_csv("sup_norms.csv", np.column_stack([times, traj.sup_norms]),
                  ["t"] + [f"p{i}" for i in range(n)])
    if traj.fields is not None:
        for s, t in enumerate(times):
            man.write_csv(f"fields_{s:04d}.csv", traj.fields[s], [f"x{j}" for j in range(grid.nx + 1)])
    failed = [k for k, ok in checks.items() if not ok]
    man.finish("failed" if failed else "ok")
    print(dump_json({"total_k_mass": diag["total_k_mass"], "checks": checks, "output_dir": str(man.out)}), end="")
    if failed:
        raise CheckFailure(f"simulate checks failed: {', '.join(failed)}")
    return EXIT_OK


def cmd_couple(args, cfg, base_dir) -> int:
    grid, coeffs, obstacle = build_problem(cfg, args.allow_unstable)
    n_pairs = _require_int(cfg, "n_pairs", 2)
    workers = _require_int(cfg, "workers", 1)
    drift = build_drift(cfg.get("drift"), base_dir)
    if drift is None:
        raise ConfigurationError("couple needs a drift")
    marginal = cfg.get("marginal")
    if marginal is not None:
        marginal = (float(marginal["t"]), float(marginal["x"]))
    man = RunManifest("couple", cfg, output_dir(args.output_dir, cfg))

    t0 = time.perf_counter()
    report = run_coupling(grid, coeffs, obstacle, drift, n_pairs, int(cfg["seed"]),
                          constants_env=constant_env(grid, coeffs, obstacle), workers=workers,
                          marginal=marginal, n_boot=_require_int(cfg, "n_bootstrap", 2))
    man.stage("coupling", t0)
    passed, margin = t2_marginal_check(report)
    doc = report.to_dict()
    doc["t2_marginal_check"] = {"passed": passed, "log_margin": margin}
    man.write_json("coupling_report.json", doc)
    man.write_csv("pair_sup_sq.csv", report.pair_sup_sq[:, None], ["sup_sq"])
    man.write_csv("marginal_samples.csv", np.column_stack([report.marginal_u, report.marginal_ref]),
                  ["u", "u_ref"])
    man.write_csv("k_increments.csv", report.k, [f"x{j}" for j in range(1, grid.nx)])
    checks = dict(report.checks, t2_marginal=passed)
    failed = [k for k, ok in checks.items() if not ok]
    man.finish("failed" if failed else "ok")
    print(dump_json({"dist_sq": report.dist_sq, "entropy_h": report.entropy_h, "margins": report.margins,
                     "checks": checks, "output_dir": str(man.out)}), end="")
    if failed:
        raise CheckFailure(f"couple checks failed: {', '.join(failed)}")
    return EXIT_OK


def cmd_constants(args, cfg, base_dir) -> int:
    env = ConstantEnv(args.T, args.c_t, args.m_sigma, args.c_h, args.C_h)
    if (env.c_h is None) != (env.C_h is None):
        raise ConfigurationError("--c-h and --C-h must be given together")
    record = constants_record(env, q_sample=args.q, p=args.p, eps=args.eps)
    print(dump_json(record), end="")
    if args.output_dir or os.environ.get(OUTPUT_ENV):
        man = RunManifest("constants", {"env": env.to_dict(), "q": args.q, "p": args.p, "eps": args.eps},
                          output_dir(args.output_dir, cfg))
        man.write_json("constants.json", record)
        man.finish("ok")
    return EXIT_OK


def kernel_sweep(cfg: dict) -> dict:
    """Evaluate the kernel bounds on an ``n x n x n`` sample of ``(t, x, y)``.

    Returns per-sample columns plus per-``t`` row-integral and semigroup data.
    """
    kcfg = HeatKernelConfig(**cfg.get("kernel", {}))
    n = int(cfg["n_samples"])
    ts = np.geomspace(float(cfg["t_min"]), float(cfg["t_max"]), n)
    xs = np.linspace(0.0, 1.0, n)
    T, X, Y = np.meshgrid(ts, xs, xs, indexing="ij")
    g = np.stack([kernel_matrix(t, xs, xs, kcfg) for t in ts])
    g_direct = eval_kernel(T, X, Y, kcfg)
    g_swap = eval_kernel(T, Y, X, kcfg)
    img = image_series(T, X, Y, kcfg.n_images)
    eig = eigen_series(T, X, Y, kcfg.n_modes)
    quad_n = int(cfg["quad_n"])
    # one kernel matrix per t gives every row integral at that t
    ys = np.linspace(0.0, 1.0, quad_n)
    rows = []
    for t in ts:
        mat = kernel_matrix(t, xs, ys, kcfg)
        mass = integrate.trapezoid(mat, ys, axis=1)
        l2 = integrate.trapezoid(mat * mat, ys, axis=1)
        rows.extend((t, m, q) for m, q in zip(mass, l2))
    semigroup = []
    zs = np.linspace(0.0, 1.0, quad_n)
    w = np.full(quad_n, 1.0 / (quad_n - 1))
    w[[0, -1]] *= 0.5
    pts = np.linspace(0.05, 0.95, 7)
    for t in (0.05, 0.1):
        for s in (0.05, 0.1):
            lhs = (kernel_matrix(t, pts, zs, kcfg) * w) @ kernel_matrix(s, zs, pts, kcfg)
            semigroup.append((t, s, float(np.max(np.abs(lhs - kernel_matrix(t + s, pts, pts, kcfg))))))
    return {
        "cfg": kcfg, "t": T.ravel(), "x": X.ravel(), "y": Y.ravel(), "G": g_direct.ravel(),
        "G_matrix": g.ravel(), "sym_err": np.abs(g_direct - g_swap).ravel(),
        "series_diff": np.abs(img - eig).ravel(),
        "nash_aronson": nash_aronson_bound(T, X, Y).ravel(), "free_gaussian": free_gaussian_bound(T, X, Y).ravel(),
        "row_integrals": np.array(rows), "semigroup": np.array(semigroup),
    }


def kernel_summary(sweep: dict) -> dict:
    tol = sweep["cfg"].tol
    ri = sweep["row_integrals"]
    l2_bound = 1.0 / np.sqrt(2.0 * np.pi * ri[:, 0])
    na_excess = sweep["G"] - sweep["nash_aronson"]
    checks = {
        "nonnegative": bool(np.all(sweep["G"] >= 0)),
        "symmetry": bool(np.max(sweep["sym_err"]) <= 1e-12),
        "boundary": bool(np.all(sweep["G"][(sweep["x"] == 0) | (sweep["x"] == 1)] == 0)),
        "series_agreement": bool(np.max(sweep["series_diff"]) <= tol),
        "free_gaussian_bound": bool(np.all(sweep["G"] <= sweep["free_gaussian"] + tol)),
        "mass_le_one": bool(np.all(ri[:, 1] <= 1 + tol)),
        "l2_bound": bool(np.all(ri[:, 2] <= l2_bound + 1e-6)),
        "semigroup": bool(np.max(sweep["semigroup"][:, 2]) <= 1e-6),
        "matrix_matches_pointwise": bool(np.max(np.abs(sweep["G_matrix"] - sweep["G"])) <= tol),
    }
    return {
        "checks": checks,
        "nash_aronson_stated": {
            "holds": bool(np.all(na_excess <= 1e-10)),
            "violations": int(np.count_nonzero(na_excess > 1e-10)),
            "max_excess": float(np.max(na_excess)),
            "samples": int(na_excess.size),
        },
        "max_sym_err": float(np.max(sweep["sym_err"])),
        "max_series_diff": float(np.max(sweep["series_diff"])),
        "max_semigroup_err": float(np.max(sweep["semigroup"][:, 2])),
        "max_l2_over_bound": float(np.max(ri[:, 2] / l2_bound)),
    }


def cmd_kernel_check(args, cfg, base_dir) -> int:
    man = RunManifest("kernel-check", cfg, output_dir(args.output_dir, cfg))
    t0 = time.perf_counter()
    sweep = kernel_sweep(cfg)
    summary = kernel_summary(sweep)
    man.stage("sweep", t0)
    cols = ["t", "x", "y", "G", "nash_aronson", "free_gaussian", "sym_err", "series_diff"]
    man.write_csv("kernel_samples.csv", np.column_stack([sweep[c] for c in cols]), cols)
    man.write_csv("kernel_row_integrals.csv", sweep["row_integrals"], ["t", "mass", "l2"])
    man.write_json("kernel_summary.json", summary)
    checks = dict(summary["checks"])
    if args.strict_nash_aronson:
        checks["nash_aronson_stated"] = summary["nash_aronson_stated"]["holds"]
    failed = [k for k, ok in checks.items() if not ok]
    man.finish("failed" if failed else "ok")
    print(dump_json(summary), end="")
    if failed:
        raise CheckFailure(f"kernel checks failed: {', '.join(failed)}")
    return EXIT_OK


def cmd_concentration(args, cfg, base_dir) -> int:
    man = RunManifest("concentration", cfg, output_dir(args.output_dir, cfg))
    t0 = time.perf_counter()
    if cfg.get("samples_csv"):
        path = Path(cfg["samples_csv"])
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigurationError(f"samples_csv not found: {path}")
        samples = read_matrix_csv(path)[:, 0]
        source = {"samples_csv": str(path)}
    else:
        grid, coeffs, obstacle = build_problem(cfg, args.allow_unstable)
        traj = solve_mean_reflected(grid, coeffs, obstacle, _require_int(cfg, "n_particles", 1),
                                    int(cfg["seed"]), workers=_require_int(cfg, "workers", 1))
        samples = traj.running_sup
        source = {"functional": "sup_norm", "grid": grid.to_dict(), "seed": int(cfg["seed"])}
    man.stage("samples", t0)
    prof = concentration_profile(samples, cfg["eps"])
    man.write_csv("tail.csv", prof.rows(), ["eps", "tail", "se"])
    man.write_json("concentration.json", {
        "source": source, "n_samples": int(np.size(samples)), "median": prof.median,
        "slope": prof.slope, "intercept": prof.intercept,
    })
    man.finish("ok")
    print(dump_json({"median": prof.median, "slope": prof.slope, "output_dir": str(man.out)}), end="")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "couple": cmd_couple,
    "constants": cmd_constants,
    "kernel-check": cmd_kernel_check,
    "concentration": cmd_concentration,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meanreflect", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, runs=True):
        p.add_argument("--config", help="JSON run description")
        p.add_argument("--output-dir", help=f"output directory (else ${OUTPUT_ENV}, config output_dir, "
                                            "or ./meanreflect-out)")
        if runs:
            p.add_argument("--seed", type=int)
            p.add_argument("--workers", type=int)
            p.add_argument("--allow-unstable", action="store_true",
                           help="run even if dt > dx^2/2")

    p = sub.add_parser("simulate", help="run the particle solver")
    common(p)
    p.add_argument("--n-particles", type=int)

    p = sub.add_parser("couple", help="run the drift coupling and check the transport chain")
    common(p)
    p.add_argument("--n-pairs", type=int)

    p = sub.add_parser("constants", help="evaluate the log-domain constants")
    p.add_argument("--output-dir")
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--c-t", type=float, default=0.0)
    p.add_argument("--m-sigma", type=float, default=1.0)
    p.add_argument("--c-h", type=float)
    p.add_argument("--C-h", dest="C_h", type=float)
    p.add_argument("--q", type=float, default=12.0, help="sample q for log C_{T,q}")
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--eps", type=float, default=0.01)

    p = sub.add_parser("kernel-check", help="sweep the heat kernel bounds")
    common(p, runs=False)
    p.add_argument("--strict-nash-aronson", action="store_true",
                   help="also fail on the (2 pi t)^(-1/2) exp(-(x-y)^2/2t) majorant")

    p = sub.add_parser("concentration", help="tail profile of the sup-norm functional")
    common(p)
    p.add_argument("--n-particles", type=int)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = {k: getattr(args, k, None) for k in ("seed", "workers", "n_particles", "n_pairs")}
        cfg, base_dir = load_config(args.command, getattr(args, "config", None), overrides)
        return COMMANDS[args.command](args, cfg, base_dir)
    except (ConfigurationError, DomainError, DataError, ContractError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BlowUpError, NumericalContractError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (KeyError, TypeError, ValueError) as exc:
        print(f"configuration error: bad or missing key ({exc!r})", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
