"""Command-line entry point: ``flxqa {gamma,dvh,compare,phantom,convert}``.

Exit codes: 0 ok, 2 parse/usage, 3 geometry, 4 degenerate data.
Effective settings resolve as flags > ``--config`` JSON > built-in defaults,
and every report echoes them.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .dvh import DEFAULT_BIN_WIDTH, dvh_indices
from .errors import FlxqaError, PairingError, ParseError, SpecError
from .gamma import GammaParams, default_threads, gamma_index_fast
from .ingest import load, write_container, write_optimal_fluence, write_rtdose
from .phantom import BASES, KINDS, PhantomSpec, make_phantom
from .stats import cohort_summary, paired_t_test, voxel_metrics
from .volgrid import FluenceMap, Grid3, Mask3, require_same_geometry

log = logging.getLogger("flxqa")

REPORT_SCHEMA = "flxqa.report/1"
GAMMA_SCHEMA = "flxqa.gamma/1"
DVH_SCHEMA = "flxqa.dvh/1"

DEFAULTS = {
    "dose_pct": 3.0,
    "dta_mm": 3.0,
    "threshold_pct": 10.0,
    "norm": "global",
    "subdivisions": 3,
    "search_factor": 3.0,
    "bin_width": DEFAULT_BIN_WIDTH,
    "levels": [],
    "threads": None,
}


class Timer:
    def __init__(self):
        self.stages = {}

    def __call__(self, name):
        timer = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[name] = timer.stages.get(name, 0.0) + time.perf_counter() - self.t0

        return _Stage()


def _settings(args):
    cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{args.config}: invalid JSON config ({exc})") from None
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise ParseError(f"{args.config}: unknown config keys {sorted(unknown)}")
    out = {}
    for key, default in DEFAULTS.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in cfg:
            out[key] = cfg[key]
        else:
            out[key] = default
    if out["threads"] is None:
        out["threads"] = default_threads()
    out["levels"] = [float(v) for v in out["levels"]]
    return out


def _gamma_params(s):
    return GammaParams(
        dose_criterion_pct=float(s["dose_pct"]),
        dta_mm=float(s["dta_mm"]),
        normalization=s["norm"],
        threshold_pct=float(s["threshold_pct"]),
        search_radius_factor=float(s["search_factor"]),
        subdivisions=int(s["subdivisions"]),
    )


def _load_grid(path):
    obj = load(path)
    if not isinstance(obj, Grid3):
        raise ParseError(f"{path}: expected a dose grid, found {type(obj).__name__}")
    return obj


def _load_mask(path, name=None):
    obj = load(path)
    if not isinstance(obj, Mask3):
        raise ParseError(f"{path}: expected a structure mask container")
    if name and name != obj.name:
        obj = Mask3(obj.values, name, obj.spacing, obj.origin)
    return obj


def _emit(payload, out):
    text = json.dumps(payload, indent=2, sort_keys=False) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _scaled(grid, factor):
    return Grid3(grid.values / factor, grid.spacing, grid.origin, "unitless")


# -- gamma ------------------------------------------------------------------------


def cmd_gamma(args):
    s = _settings(args)
    timer = Timer()
    with timer("parse"):
        ref = _load_grid(args.reference)
        ev = _load_grid(args.evaluated)
    params = _gamma_params(s)
    with timer("gamma"):
        res = gamma_index_fast(ref, ev, params, threads=s["threads"])
    if args.gamma_map:
        Path(args.gamma_map).write_bytes(write_container(res.gamma_map))
    report = {
        "schema": GAMMA_SCHEMA,
        "version": __version__,
        "reference": str(args.reference),
        "evaluated": str(args.evaluated),
        "gamma": res.summary(),
    }
    if not args.no_timing:
        report["timing_s"] = timer.stages
        report["threads"] = s["threads"]
    _emit(report, args.out)
    return 0


# -- dvh ---------------------------------------------------------------------------


def _parse_mask_arg(arg):
    name, sep, path = arg.partition("=")
    return (name, path) if sep else (None, arg)


def cmd_dvh(args):
    s = _settings(args)
    dose = _load_grid(args.dose)
    masks = [_load_mask(p, n) for n, p in map(_parse_mask_arg, args.mask)]
    if not masks:
        raise ParseError("dvh needs at least one --mask")
    structures = {}
    csv_dir = Path(args.csv_dir) if args.csv_dir else None
    if csv_dir:
        csv_dir.mkdir(parents=True, exist_ok=True)
    for m in masks:
        curve, idx = dvh_indices(dose, m, s["levels"], s["bin_width"])
        structures[m.name] = idx.as_dict()
        if csv_dir:
            (csv_dir / f"dvh_{m.name}.csv").write_text(curve.to_csv())
    report = {
        "schema": DVH_SCHEMA,
        "version": __version__,
        "dose": str(args.dose),
        "bin_width_gy": s["bin_width"],
        "levels_gy": s["levels"],
        "structures": structures,
    }
    _emit(report, args.out)
    return 0


# -- compare -------------------------------------------------------------------------


def _read_manifest(path):
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid manifest JSON ({exc})") from None
    cases = manifest.get("cases")
    if not isinstance(cases, list) or len(cases) < 2:
        raise ParseError(f"{path}: manifest must list at least two cases")
    base = path.parent
    out = []
    for c in cases:
        try:
            out.append({
                "id": str(c["id"]),
                "reference": base / c["reference"],
                "evaluated": base / c["evaluated"],
                "structures": {k: base / v for k, v in c.get("structures", {}).items()},
            })
        except (KeyError, TypeError) as exc:
            raise ParseError(f"{path}: malformed case entry {c!r} ({exc})") from None
    names = {tuple(sorted(c["structures"])) for c in out}
    if len(names) != 1:
        raise PairingError(f"{path}: cases do not share one structure set: {sorted(names)}")
    if len({c["id"] for c in out}) != len(out):
        raise ParseError(f"{path}: duplicate case ids")
    return sorted(out, key=lambda c: c["id"])


def _run_case(case, s, params):
    timer = Timer()
    with timer("parse"):
        ref = _load_grid(case["reference"])
        ev = _load_grid(case["evaluated"])
        require_same_geometry(ref, ev, f"case {case['id']} dose grids")
        masks = {name: _load_mask(p, name) for name, p in case["structures"].items()}
    with timer("gamma"):
        g = gamma_index_fast(ref, ev, params, threads=s["threads"])
    with timer("dvh"):
        dvh = {}
        for name, m in masks.items():
            _, ri = dvh_indices(ref, m, s["levels"], s["bin_width"])
            _, ei = dvh_indices(ev, m, s["levels"], s["bin_width"])
            dvh[name] = {"reference": ri.as_dict(), "evaluated": ei.as_dict()}
    with timer("metrics"):
        scale = float(ref.values.max())
        vm = voxel_metrics(_scaled(ref, scale), _scaled(ev, scale))
    return {
        "id": case["id"],
        "voxel_metrics": vm.as_dict(),
        "gamma": {k: v for k, v in g.summary().items() if k != "params"},
        "dvh": dvh,
    }, timer.stages


def build_report(manifest_path, s, timing=True):
    params = _gamma_params(s)
    cases = _read_manifest(manifest_path)
    results, timings = [], []
    for case in cases:
        res, t = _run_case(case, s, params)
        results.append(res)
        timings.append(t)

    metric_keys = ["r2", "mae", "rmse", "mean_delta_dose_pct"]
    cohort = {
        "voxel_metrics": {
            k: cohort_summary([r["voxel_metrics"][k] for r in results]).as_dict() for k in metric_keys
        },
        "gamma_pass_rate_pct": cohort_summary([r["gamma"]["pass_rate_pct"] for r in results]).as_dict(),
        "dvh": {},
    }
    for name in results[0]["dvh"]:
        per_index = {}
        for key in results[0]["dvh"][name]["reference"]:
            a = [r["dvh"][name]["reference"][key] for r in results]
            b = [r["dvh"][name]["evaluated"][key] for r in results]
            per_index[key] = {
                "reference": cohort_summary(a).as_dict(),
                "evaluated": cohort_summary(b).as_dict(),
                "t_test": paired_t_test(a, b).as_dict(),
            }
        cohort["dvh"][name] = per_index

    report = {
        "schema": REPORT_SCHEMA,
        "version": __version__,
        "params": {
            "gamma": params.as_dict(),
            "bin_width_gy": s["bin_width"],
            "levels_gy": s["levels"],
            "metric_voxels": "all",
            "metric_dose_scale": "reference max",
            "mean_delta_dose_denominator": "reference max",
            "t_test": "paired, two-sided, alpha 0.05",
        },
        "cases": results,
        "cohort": cohort,
    }
    if timing:
        for r, t in zip(results, timings):
            r["timing_s"] = t
        per_case = [sum(t.values()) for t in timings]
        report["timing_s"] = {"per_case": cohort_summary(per_case).as_dict(), "threads": s["threads"]}
    return report


def cmd_compare(args):
    s = _settings(args)
    _emit(build_report(args.manifest, s, timing=not args.no_timing), args.out)
    return 0


# -- phantom -------------------------------------------------------------------------


def write_phantom_files(phantom, out_dir):
    """Write every artifact of a phantom into ``out_dir``; returns the file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "ref.dcm": write_rtdose(phantom.ref),
        "eval.dcm": write_rtdose(phantom.eval),
        "ref.flxqa": write_container(phantom.ref),
        "eval.flxqa": write_container(phantom.eval),
    }
    for m in phantom.masks:
        files[f"mask_{m.name}.flxqa"] = write_container(m)
    for f in phantom.fluences:
        files[f"beam_{f.beam_index}.optimal_fluence"] = write_optimal_fluence(f).encode("ascii")
    spec = asdict(phantom.spec)
    files["phantom.json"] = (json.dumps(spec, indent=2) + "\n").encode()
    for name, data in files.items():
        (out / name).write_bytes(data)
    return sorted(files)


def cmd_phantom(args):
    try:
        spec = PhantomSpec(
            kind=args.kind,
            dims=tuple(args.dims),
            spacing=tuple(args.spacing),
            amplitude=args.amplitude,
            sigma_mm=args.sigma,
            shift_mm=args.shift,
            scale=args.scale,
            base=args.base,
            noise_pct=args.noise_pct,
            seed=args.seed,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FlxqaError):
            raise
        raise SpecError(str(exc)) from None
    names = write_phantom_files(make_phantom(spec), args.out)
    _emit({"schema": "flxqa.phantom/1", "out": str(args.out), "files": names}, None)
    return 0


# -- convert -------------------------------------------------------------------------

FORMATS = ("rtdose", "container", "container-f64", "fluence")


def cmd_convert(args):
    obj = load(args.input)
    fmt = args.to
    if fmt == "rtdose":
        if not isinstance(obj, Grid3):
            raise ParseError("only dose grids can be written as RTDOSE")
        data = write_rtdose(obj)
    elif fmt in ("container", "container-f64"):
        data = write_container(obj, dtype="f64" if fmt == "container-f64" else None)
    elif fmt == "fluence":
        if not isinstance(obj, FluenceMap):
            raise ParseError("only fluence maps can be written as optimal-fluence text")
        data = write_optimal_fluence(obj).encode("ascii")
    else:  # argparse restricts choices; kept for direct callers
        raise ParseError(f"unknown output format {fmt!r}")
    Path(args.out).write_bytes(data)
    return 0


# -- argument parsing ----------------------------------------------------------------


def _add_gamma_flags(p):
    p.add_argument("--dose-pct", dest="dose_pct", type=float, help="dose criterion, percent (default 3)")
    p.add_argument("--dta-mm", dest="dta_mm", type=float, help="distance to agreement, mm (default 3)")
    p.add_argument("--threshold-pct", dest="threshold_pct", type=float,
                   help="low-dose cutoff, percent of reference max (default 10)")
    p.add_argument("--norm", choices=("global", "local"), help="dose criterion normalization")
    p.add_argument("--subdivisions", type=int, help="evaluated-grid refinements per voxel edge (default 3)")
    p.add_argument("--search-factor", dest="search_factor", type=float,
                   help="search radius as a multiple of the DTA (default 3)")


def _add_common(p):
    p.add_argument("--config", help="JSON file of default settings")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--threads", type=int, help="worker threads (env FLXQA_THREADS)")
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock timings")


def _levels(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid dose levels {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="flxqa", description="Dosimetric QA toolkit")
    parser.add_argument("--version", action="version", version=f"flxqa {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gamma", help="3D gamma analysis of two dose grids")
    p.add_argument("reference")
    p.add_argument("evaluated")
    _add_gamma_flags(p)
    _add_common(p)
    p.add_argument("--gamma-map", help="also write the gamma map as an FLXQA container")
    p.set_defaults(func=cmd_gamma)

    p = sub.add_parser("dvh", help="DVH indices for one dose grid")
    p.add_argument("dose")
    p.add_argument("--mask", action="append", default=[], metavar="[NAME=]PATH",
                   help="structure mask container (repeatable)")
    p.add_argument("--levels", type=_levels, help="comma-separated V_x dose levels, Gy")
    p.add_argument("--bin-width", dest="bin_width", type=float, help="histogram bin width, Gy")
    p.add_argument("--csv-dir", help="write one cumulative DVH CSV per structure here")
    _add_common(p)
    p.set_defaults(func=cmd_dvh)

    p = sub.add_parser("compare", help="cohort comparison report from a manifest")
    p.add_argument("manifest")
    _add_gamma_flags(p)
    p.add_argument("--levels", type=_levels, help="comma-separated V_x dose levels, Gy")
    p.add_argument("--bin-width", dest="bin_width", type=float, help="histogram bin width, Gy")
    _add_common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("phantom", help="generate a synthetic phantom and its files")
    p.add_argument("--kind", default="gaussian-blob", choices=KINDS)
    p.add_argument("--base", default="gaussian-blob", choices=BASES)
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 32])
    p.add_argument("--spacing", type=float, nargs=3, default=[2.0, 2.0, 2.0])
    p.add_argument("--amplitude", type=float, default=70.0)
    p.add_argument("--sigma", type=float, default=20.0)
    p.add_argument("--shift", type=float, default=3.0)
    p.add_argument("--scale", type=float, default=1.03)
    p.add_argument("--noise-pct", dest="noise_pct", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("convert", help="convert between RTDOSE, FLXQA and optimal-fluence files")
    p.add_argument("input")
    p.add_argument("--to", required=True, choices=FORMATS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FlxqaError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return 2
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
