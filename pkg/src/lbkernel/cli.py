"""Command-line driver.

Every subcommand writes its outputs under ``--out`` with fixed file names
and a ``manifest.json`` recording the flags, input hashes, seed and library
version. ``lbkernel replay manifest.json`` reruns the command and checks
that every numeric output is byte-identical.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
The thread count of the linear algebra backend is taken from the
``LBKERNEL_THREADS`` environment variable when set.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import ArpackError
from threadpoolctl import threadpool_limits

from . import __version__
from .inference import (
    alpha_quantile,
    power,
    statistical_map,
    type1_sweep,
)
from .mesh import MeshError, load_mesh, minkowski_functionals, topology_summary
from .regress import (
    KernelSpec,
    read_field_csv,
    regress,
    write_field_csv,
    write_field_vtk,
)
from .spectral import (
    DEFAULT_K,
    SolverError,
    SpectralBasis,
    assemble_cotan,
    load_basis,
    save_basis,
    solve_eigen,
)
from .synthetic import gibbs_comparison

logger = logging.getLogger("lbkernel")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "LBKERNEL_THREADS"
MANIFEST = "manifest.json"

# flags that name input files; their contents are hashed into the manifest
_INPUT_FLAGS = ("mesh", "basis", "field", "group_a", "group_b")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    flags: dict
    inputs: dict
    seed: int | None
    version: str = __version__
    timestamp: str = ""
    threads: int | None = None
    outputs: dict = field(default_factory=dict)

    def write(self, out: Path) -> None:
        (out / MANIFEST).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        try:
            d = json.loads(Path(path).read_text())
            return cls(**d)
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(flags: dict) -> dict:
    out = {}
    for name in _INPUT_FLAGS:
        value = flags.get(name)
        for p in ([value] if isinstance(value, str) else value or []):
            try:
                out[p] = sha256(p)
            except OSError as exc:
                raise DataError(f"cannot read input {p}: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# shared helpers

def _load_mesh(path):
    try:
        return load_mesh(path)
    except OSError as exc:
        raise DataError(f"cannot read mesh {path}: {exc}") from exc


def _basis_for(mesh, args) -> SpectralBasis:
    if args.basis:
        try:
            basis = load_basis(args.basis)
        except OSError as exc:
            raise DataError(f"cannot read basis {args.basis}: {exc}") from exc
        except ValueError as exc:
            raise DataError(f"{args.basis}: {exc}") from exc
        if basis.n != mesh.n_vertices:
            raise DataError(f"basis has {basis.n} vertices, mesh has {mesh.n_vertices}")
        return basis
    return solve_eigen(assemble_cotan(mesh), min(args.k, mesh.n_vertices), args.tol)


def _read_fields(paths, n):
    try:
        return [read_field_csv(p, n) for p in paths]
    except OSError as exc:
        raise DataError(str(exc)) from exc
    except (ValueError, IndexError) as exc:
        raise DataError(f"bad field file: {exc}") from exc


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"expected numbers, got {text!r}") from exc


def _int_range(text: str) -> list[int]:
    """``"8:40"`` (inclusive), ``"8:40:4"`` or a comma list."""
    try:
        if ":" in text:
            parts = [int(x) for x in text.split(":")]
            lo, hi = parts[0], parts[1]
            step = parts[2] if len(parts) > 2 else 1
            return list(range(lo, hi + 1, step))
        return [int(x) for x in text.split(",")]
    except (ValueError, IndexError) as exc:
        raise UsageError(f"bad integer range {text!r}") from exc


def _triple(values, name) -> tuple[float, float, float]:
    if len(values) != 3:
        raise UsageError(f"--{name} needs three numbers mu0 mu1 mu2")
    return tuple(float(v) for v in values)


# --------------------------------------------------------------------------
# subcommands; each returns the list of numeric output files it wrote

def cmd_eigen(args, out: Path) -> list[str]:
    if args.k < 1:
        raise UsageError("--k must be at least 1")
    mesh = _load_mesh(args.mesh)
    k = min(args.k, mesh.n_vertices)
    if k < args.k:
        logger.warning("k = %d exceeds vertex count; using %d", args.k, k)
    basis = solve_eigen(assemble_cotan(mesh), k, args.tol)
    save_basis(basis, out / "basis.bin")
    _write_csv(out / "eigenvalues.csv", ["index", "eigenvalue"], enumerate(basis.eigenvalues))
    return ["basis.bin", "eigenvalues.csv"]


def cmd_smooth(args, out: Path) -> list[str]:
    if args.t < 0:
        raise UsageError("--t must be nonnegative")
    mesh = _load_mesh(args.mesh)
    basis = _basis_for(mesh, args)
    (f,) = _read_fields([args.field], mesh.n_vertices)
    spec = KernelSpec.heat(args.t) if args.kernel == "heat" else KernelSpec.identity()
    h = regress(f, basis, spec)
    write_field_csv(h, out / "smoothed.csv")
    write_field_vtk(mesh, [f, h], out / "smoothed.vtk")
    return ["smoothed.csv", "smoothed.vtk"]


def cmd_spm(args, out: Path) -> list[str]:
    if args.t <= 0:
        raise UsageError("--t must be positive")
    mesh = _load_mesh(args.mesh)
    basis = _basis_for(mesh, args)
    a = _read_fields(args.group_a, mesh.n_vertices)
    b = _read_fields(args.group_b, mesh.n_vertices) if args.group_b else None
    mu = minkowski_functionals(topology_summary(mesh))
    report = statistical_map(a, b, basis, mu, args.t, seed=args.seed)
    d = report.to_dict()
    d["alpha"] = args.alpha
    d["rejected"] = report.corrected_p < args.alpha
    (out / "report.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    write_field_csv(report.stat_map, out / "statmap.csv")
    write_field_vtk(mesh, report.stat_map, out / "statmap.vtk")
    return ["report.json", "statmap.csv", "statmap.vtk"]


def cmd_power(args, out: Path) -> list[str]:
    if args.t <= 0:
        raise UsageError("--t must be positive")
    template = _triple(args.minkowski_template, "minkowski-template")
    signal = _triple(args.minkowski_signal, "minkowski-signal")
    ns = _int_range(args.n_range)
    if not ns or min(ns) < 2:
        raise UsageError("--n-range must contain sample sizes of at least 2")
    rows = []
    for n in ns:
        t_star = alpha_quantile(args.alpha, template, n - 1, args.t)
        rows.append((n, args.c, t_star, power(n, args.c, signal, template, args.t, args.alpha)))
    _write_csv(out / "power.csv", ["n", "c", "threshold", "power"], rows)
    return ["power.csv"]


def cmd_gibbs_demo(args, out: Path) -> list[str]:
    if args.t < 0:
        raise UsageError("--t must be nonnegative")
    if args.k is not None and args.k < 1:
        raise UsageError("--k must be at least 1")
    if args.resolution < 8:
        raise UsageError("--resolution must be at least 8")
    res = gibbs_comparison(args.resolution, t=args.t, k=args.k)
    report = {
        "n_vertices": res.n_vertices,
        "k": res.k,
        "t": res.t,
        "lse_overshoot": res.lse_overshoot,
        "kernel_overshoot": res.kernel_overshoot,
        "ratio": res.ratio if res.lse_overshoot > 0 else None,
        "kernel_below_lse": res.kernel_overshoot < res.lse_overshoot,
    }
    (out / "gibbs.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_field_csv(res.lse, out / "lse.csv")
    write_field_csv(res.kernel, out / "kernel.csv")
    write_field_vtk(res.mesh, [res.lse, res.kernel], out / "gibbs.vtk")
    return ["gibbs.json", "lse.csv", "kernel.csv", "gibbs.vtk"]


def cmd_sweep(args, out: Path) -> list[str]:
    bandwidths = _floats(args.bandwidths)
    if not bandwidths or any(t <= 0 for t in bandwidths) or bandwidths != sorted(bandwidths):
        raise UsageError("--bandwidths must be positive and ascending")
    mesh = _load_mesh(args.mesh)
    basis = _basis_for(mesh, args)
    mu = minkowski_functionals(topology_summary(mesh))

    if args.group_a:
        a = _read_fields(args.group_a, mesh.n_vertices)
        b = _read_fields(args.group_b, mesh.n_vertices) if args.group_b else None
        pts = type1_sweep(a, b, basis, mu, bandwidths, args.alpha)
        rows = [(p.t, p.max_stat, p.corrected_p, int(p.rejected)) for p in pts]
        _write_csv(out / "sweep.csv", ["t", "max_stat", "corrected_p", "rejected"], rows)
        return ["sweep.csv"]

    # no data: simulate null cohorts of two equal groups
    if args.cohorts < 1 or args.group_size < 2:
        raise UsageError("--cohorts must be >= 1 and --group-size >= 2")
    seed = 0 if args.seed is None else args.seed
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(args.cohorts)]
    p = np.empty((args.cohorts, len(bandwidths)))
    for i, rng in enumerate(rngs):
        x = rng.standard_normal((2 * args.group_size, mesh.n_vertices))
        pts = type1_sweep(x[:args.group_size], x[args.group_size:], basis, mu, bandwidths, args.alpha)
        p[i] = [q.corrected_p for q in pts]
    se = p.std(axis=0, ddof=1) / np.sqrt(args.cohorts) if args.cohorts > 1 else np.zeros(len(bandwidths))
    rows = [(t, float(p[:, j].mean()), float(se[j]), float(np.mean(p[:, j] < args.alpha)))
            for j, t in enumerate(bandwidths)]
    _write_csv(out / "sweep.csv", ["t", "mean_corrected_p", "se", "rejection_rate"], rows)
    return ["sweep.csv"]


COMMANDS = {
    "eigen": cmd_eigen,
    "smooth": cmd_smooth,
    "spm": cmd_spm,
    "power": cmd_power,
    "gibbs-demo": cmd_gibbs_demo,
    "sweep": cmd_sweep,
}


# --------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _basis_flags(p):
    p.add_argument("--mesh", required=True, help="OFF or ascii PLY mesh")
    p.add_argument("--basis", help="basis.bin from `eigen`; computed on the fly if omitted")
    p.add_argument("--k", type=int, default=DEFAULT_K, help="eigenpairs when computing (default %(default)s)")
    p.add_argument("--tol", type=float, default=1e-8, help="eigen residual tolerance (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lbkernel", description="Heat kernel regression and random field inference on surfaces.")
    parser.add_argument("--version", action="version", version=f"lbkernel {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed recorded in the manifest")

    p = sub.add_parser("eigen", help="Laplace-Beltrami eigenbasis of a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_K, help="number of eigenpairs (default %(default)s)")
    p.add_argument("--tol", type=float, default=1e-8, help="residual tolerance (default %(default)s)")
    common(p)

    p = sub.add_parser("smooth", help="kernel regression of one field")
    _basis_flags(p)
    p.add_argument("--field", required=True, help="CSV with vertex_index,value")
    p.add_argument("--kernel", choices=("heat", "lse"), default="heat")
    p.add_argument("--t", type=float, default=5.0, help="bandwidth (default %(default)s)")
    common(p)

    p = sub.add_parser("spm", help="T (one group) or F (two groups) map with corrected p-value")
    _basis_flags(p)
    p.add_argument("--group-a", nargs="+", required=True)
    p.add_argument("--group-b", nargs="+")
    p.add_argument("--t", type=float, default=5.0, help="bandwidth (default %(default)s)")
    p.add_argument("--alpha", type=float, default=0.1, help="significance level (default %(default)s)")
    common(p)

    p = sub.add_parser("power", help="approximate power against sample size")
    p.add_argument("--minkowski-template", nargs=3, type=float, required=True, metavar="MU")
    p.add_argument("--minkowski-signal", nargs=3, type=float, required=True, metavar="MU")
    p.add_argument("--c", type=float, required=True, help="effect size in noise SDs")
    p.add_argument("--n-range", default="8:40", help="lo:hi[:step] or comma list (default %(default)s)")
    p.add_argument("--alpha", type=float, default=0.1, help="significance level (default %(default)s)")
    p.add_argument("--t", type=float, default=5.0, help="bandwidth (default %(default)s)")
    common(p)

    p = sub.add_parser("gibbs-demo", help="LSE against heat kernel reconstruction of a step")
    p.add_argument("--resolution", type=int, default=60, help="radial rings of the hat domain (default %(default)s)")
    p.add_argument("--t", type=float, default=1e-4, help="bandwidth (default %(default)s)")
    p.add_argument("--k", type=int, default=None, help="basis size (default 60%% of vertices)")
    common(p)

    p = sub.add_parser("sweep", help="corrected p-value against bandwidth")
    _basis_flags(p)
    p.add_argument("--bandwidths", default="0.1,1,5,10,100", help="ascending list (default %(default)s)")
    p.add_argument("--group-a", nargs="+", help="subject fields; null cohorts are simulated if omitted")
    p.add_argument("--group-b", nargs="+")
    p.add_argument("--cohorts", type=int, default=100, help="simulated null cohorts (default %(default)s)")
    p.add_argument("--group-size", type=int, default=10, help="subjects per simulated group (default %(default)s)")
    p.add_argument("--alpha", type=float, default=0.1, help="significance level (default %(default)s)")
    common(p)

    p = sub.add_parser("replay", help="rerun a manifest and verify byte-identical outputs")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: the manifest's own)")
    return parser


# --------------------------------------------------------------------------
# execution

def _threads() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be positive")
    return n


def _run(command: str, flags: dict, threads: int | None) -> RunManifest:
    args = argparse.Namespace(**flags)
    out = Path(flags["out"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        subcommand=command,
        flags=flags,
        inputs=_input_hashes(flags),
        seed=flags.get("seed"),
        timestamp=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        threads=threads,
    )
    with threadpool_limits(limits=threads):
        written = COMMANDS[command](args, out)
    manifest.outputs = {name: sha256(out / name) for name in written}
    manifest.write(out)
    return manifest


def _absolute(flags: dict) -> dict:
    """Resolve path flags so a manifest replays from any working directory."""
    out = dict(flags)
    for name in _INPUT_FLAGS + ("out",):
        v = out.get(name)
        if isinstance(v, str):
            out[name] = str(Path(v).resolve())
        elif isinstance(v, list):
            out[name] = [str(Path(x).resolve()) for x in v]
    return out


def _replay(path, out_override, threads) -> RunManifest:
    old = RunManifest.read(path)
    if old.subcommand not in COMMANDS:
        raise DataError(f"manifest names unknown subcommand {old.subcommand!r}")
    for p, digest in old.inputs.items():
        try:
            current = sha256(p)
        except OSError as exc:
            raise DataError(f"input {p} is missing: {exc}") from exc
        if current != digest:
            raise DataError(f"input {p} changed since the recorded run")
    flags = dict(old.flags)
    if out_override:
        flags["out"] = str(Path(out_override).resolve())
    new = _run(old.subcommand, flags, old.threads if threads is None else threads)
    differ = [k for k, v in old.outputs.items() if new.outputs.get(k) != v]
    if differ:
        raise SolverError(f"replay outputs differ: {', '.join(sorted(differ))}")
    return new


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"lbkernel: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        return _dispatch(args)
    finally:
        logging.captureWarnings(False)


def _dispatch(args) -> int:
    try:
        threads = _threads()
        if args.command == "replay":
            m = _replay(args.manifest, args.out, threads)
        else:
            flags = _absolute({k: v for k, v in vars(args).items() if k not in ("command", "verbose")})
            m = _run(args.command, flags, threads)
    except UsageError as exc:
        print(f"lbkernel: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, ArpackError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"lbkernel: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MeshError, OSError, ValueError) as exc:
        print(f"lbkernel: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    for name, digest in m.outputs.items():
        logger.info("%s %s", digest[:12], name)
    return EXIT_OK

if __name__ == "__main__":
    sys.exit(main())
