"""Command-line front end: ``run``, ``validate`` and ``report``.

Exit codes: 0 on success, 2 when the experiment ran but an acceptance check
failed, 1 on any error (bad configuration, solver failure, I/O).
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

from . import experiments as ex
from .config import ExperimentConfig, load_config
from .errors import BHLabError

EXIT_OK, EXIT_ERROR, EXIT_FAILED = 0, 1, 2
MANIFEST = "run_manifest.json"


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba", "pyyaml", "jsonschema"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def run_experiment(cfg: ExperimentConfig) -> ex.ExperimentResult:
    """Dispatch a validated configuration to its experiment."""
    raw = cfg.raw
    kind, law, psi, seed, workers = cfg.kind, cfg.law, cfg.psi, cfg.seed, cfg.workers
    d = law.dimension
    solver = raw.get("solver", {})
    reference = raw.get("reference")
    replicas = int(raw.get("replicas", 8))
    ladder = raw.get("ladder")
    coeffs = cfg.coefficients
    if kind == "homog_elliptic":
        kw = {k: solver[k] for k in ("tol", "max_iters") if k in solver}
        return ex.homog_error_elliptic(law, ladder, cfg.function("f", "constant"),
                                       cfg.function("g", {"kind": "affine", "slope": [1.0] + [0.0] * (d - 1)}),
                                       psi, replicas, seed, coeffs=coeffs, h=solver.get("continuum_h", 1.0 / 64),
                                       reference=reference, workers=workers,
                                       boundary=raw.get("boundary", "extension"), **kw)
    if kind == "homog_parabolic":
        return ex.homog_error_parabolic(law, ladder, cfg.function("f", "constant"),
                                        cfg.function("g", {"kind": "quadratic", "time": 1.0}), psi, replicas,
                                        seed, coeffs=coeffs, h=solver.get("continuum_h"), reference=reference,
                                        workers=workers, boundary=raw.get("boundary", "extension"))
    if kind == "corrector":
        kw = {k: solver[k] for k in ("tol", "max_iters") if k in solver}
        return ex.corrector_sublinearity(law, ladder, psi, replicas, seed, reference=reference, workers=workers,
                                         **kw)
    if kind == "ergodicity":
        return ex.ergodicity_rate(law, [int(n) for n in ladder], psi, replicas, int(raw["walks"]), seed,
                                  reference=reference, workers=workers)
    if kind == "berry_esseen":
        if coeffs is None:
            ref = {"horizon": 10 * int(max(ladder)), "replicas": 16, "walks": 4, **(reference or {})}
            coeffs = ex.reference_coefficients(law, psi, ref["horizon"], ref["replicas"], ref["walks"], seed)
        direction = raw.get("direction", [1.0] + [0.0] * (d - 1))
        return ex.berry_esseen(law, [int(n) for n in ladder], direction, coeffs, int(raw["walks"]), seed,
                               environments=int(raw.get("environments", 5)), workers=workers)
    if kind == "census":
        c = raw["census"]
        return ex.census_experiment(law, c["R"], c["gamma"], c["threshold_c"], psi, replicas, seed, c["alpha"],
                                    coeffs=coeffs, reference=reference, workers=workers,
                                    max_fraction=c.get("max_fraction", 0.1))
    if kind == "mu_decay":
        mu = raw.get("mu", {})
        return ex.mu_decay(law, [int(n) for n in ladder], mu.get("s", 0.0), psi, replicas, seed,
                           s_check=mu.get("s_check"), reference=reference, workers=workers)
    raise BHLabError(f"unknown experiment {kind!r}")


def render(summary: dict) -> str:
    """Plain-text rendering of one experiment summary."""
    lines = [f"experiment {summary['experiment']}  seed {summary.get('seed')}  "
             f"digest {summary.get('config_digest', '')[:12]}"]
    for scale, stat in summary.get("ladder", []):
        lines.append(f"  {scale:>10g}  {stat:.6e}")
    fit = summary.get("fit")
    if fit:
        lines.append(f"  fit: slope {fit['slope']:.4f}  intercept {fit['intercept']:.4f}  r2 {fit['r2']:.4f}"
                     f"  (vs {fit.get('abscissa', 'log(scale)')})")
    for name, ok in summary.get("checks", {}).items():
        lines.append(f"  [{'PASS' if ok else 'FAIL'}] {name}")
    for note in summary.get("notes", []):
        lines.append(f"  note: {note}")
    return "\n".join(lines)


def cmd_run(path, out=None, stream=None) -> int:
    stream = stream or sys.stdout
    cfg = load_config(path)
    outdir = Path(out) if out is not None else cfg.output_dir()
    outdir.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    result = run_experiment(cfg)
    wall = time.perf_counter() - t0
    summary = result.write(outdir, cfg.digest(), cfg.seed)
    (outdir / "config.json").write_text(json.dumps(cfg.raw, indent=1, sort_keys=True) + "\n")
    manifest = {
        "experiment": cfg.kind,
        "config_source": str(Path(path).resolve()),
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "workers": cfg.workers,
        "versions": _versions(),
        "started_utc": started,
        "wall_time_seconds": round(wall, 3),
        "artifacts": [f"{result.name}.csv", f"{result.name}.json", "config.json"],
        "passed": result.passed,
    }
    (outdir / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(render(summary), file=stream)
    print(f"artifacts written to {outdir}", file=stream)
    return EXIT_OK if result.passed else EXIT_FAILED


def cmd_validate(path, stream=None) -> int:
    stream = stream or sys.stdout
    load_config(path)
    print("ok", file=stream)
    return EXIT_OK


def cmd_report(rundir, stream=None) -> int:
    stream = stream or sys.stdout
    rundir = Path(rundir)
    manifest_path = rundir / MANIFEST
    if not manifest_path.exists():
        raise BHLabError(f"{rundir} has no {MANIFEST}")
    manifest = json.loads(manifest_path.read_text())
    blocks = []
    for name in manifest.get("artifacts", []):
        if name.endswith(".json") and name != "config.json":
            blocks.append(render(json.loads((rundir / name).read_text())))
    text = "\n\n".join(blocks) + f"\n\nwall time {manifest.get('wall_time_seconds')} s, versions " \
        + ", ".join(f"{k} {v}" for k, v in manifest.get("versions", {}).items()) + "\n"
    (rundir / "report.txt").write_text(text)
    print(text, file=stream, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bhlab", description="Balanced random walk homogenization experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the experiment named in a config file")
    p.add_argument("config")
    p.add_argument("--out", help="run directory (default: the config's 'output' entry)")
    p = sub.add_parser("validate", help="check a config file without computing anything")
    p.add_argument("config")
    p = sub.add_parser("report", help="re-render the summaries of a finished run")
    p.add_argument("rundir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out)
        if args.command == "validate":
            return cmd_validate(args.config)
        return cmd_report(args.rundir)
    except (BHLabError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
