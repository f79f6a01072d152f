"""Command-line entry point.

Subcommands: phantom (synthetic 4D volume + truth), propagate (seeded 4D
segmentation), eval (region metrics CSV + table), bench (complexity CSV),
verify (self-check suites). Every command echoes its effective
configuration as JSON; feeding the echoed config back reproduces the
outputs bit for bit.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import matcher
from .errors import (
    ContainerError,
    DataError,
    DimensionError,
    LabelError,
    LayoutError,
    ParameterError,
    PartitionError,
    PhantomSpecError,
    PyramidError,
    SchedulingError,
    StateError,
)
from .evalkit import (
    BenchConfig,
    PhantomSpec,
    check_complexity,
    default_bench_grid,
    gen_phantom,
    report_by_region,
)
from .featurizer import EncoderConfig
from .grids import CineVolume, LabelVolume, load_container, save_container
from .propagator import PropagationConfig, partition_regions, run_4d
from .verification import SUITES, run_suites

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3

_USAGE_ERRORS = (ParameterError, PhantomSpecError, PartitionError)
_DATA_ERRORS = (ContainerError, DataError, DimensionError, LabelError,
                LayoutError, PyramidError, SchedulingError, StateError)


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _resolve_threads(value):
    if value is not None:
        n = value
    else:
        env = os.environ.get("CSTM_THREADS", "").strip()
        if env:
            try:
                n = int(env)
            except ValueError:
                raise ParameterError(
                    f"CSTM_THREADS must be an integer, got {env!r}")
        else:
            n = os.cpu_count() or 1
    if n < 1:
        raise ParameterError(f"thread count must be >= 1, got {n}")
    return n


def _load_json_config(path):
    with open(path, "r") as fh:
        try:
            loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(loaded, dict):
        raise ParameterError(f"config file {path} must hold a JSON object")
    return loaded


def _merged(file_cfg, overrides, allowed, what):
    unknown = sorted(set(file_cfg) - allowed)
    if unknown:
        raise ParameterError(f"unknown {what} config keys: {', '.join(unknown)}")
    merged = dict(file_cfg)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


_PHANTOM_KEYS = frozenset(f.name for f in PhantomSpec.__dataclass_fields__.values())


def _echo(payload):
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_phantom(args):
    file_cfg = _load_json_config(args.spec_json) if args.spec_json else {}
    overrides = {
        "z_count": args.z, "t_count": args.t,
        "height": args.height, "width": args.width,
        "lv_radius_px": args.lv_radius, "myo_thickness_px": args.myo_thickness,
        "rv_offset_px": args.rv_offset,
        "contraction_frac": args.contraction,
        "longaxis_shorten_frac": args.shortening,
        "noise_sigma": args.noise, "seed": args.seed,
    }
    if args.spacing is not None:
        overrides["spacing_mm"] = tuple(args.spacing)
    if args.distractor is not None:
        overrides["distractor"] = args.distractor == "on"
    merged = _merged(file_cfg, overrides, _PHANTOM_KEYS, "phantom")
    if "spacing_mm" in merged:
        merged["spacing_mm"] = tuple(merged["spacing_mm"])
    spec = PhantomSpec(**merged)
    _echo({"command": "phantom",
           "spec": {k: (list(v) if isinstance(v, tuple) else v)
                    for k, v in spec.__dict__.items()},
           "out_volume": args.out_volume, "out_truth": args.out_truth})
    volume, truth = gen_phantom(spec)
    save_container(volume, args.out_volume)
    save_container(truth, args.out_truth)
    print(f"phantom written: Z={spec.z_count} T={spec.t_count} "
          f"H={spec.height} W={spec.width} seed={spec.seed}")
    return EXIT_OK


_PROPAGATE_KEYS = frozenset({
    "z0", "t0", "patch", "k", "scales", "region_fractions", "apex_t_max",
    "continuity_mode", "matcher", "working_side", "encoder",
})
_ENCODER_KEYS = frozenset(
    f.name for f in EncoderConfig.__dataclass_fields__.values())


def _build_propagation_config(merged):
    enc_cfg = merged.pop("encoder", {})
    if not isinstance(enc_cfg, dict):
        raise ParameterError("encoder config must be a JSON object")
    unknown = sorted(set(enc_cfg) - _ENCODER_KEYS)
    if unknown:
        raise ParameterError(f"unknown encoder config keys: {', '.join(unknown)}")
    if "blur_sigmas" in enc_cfg:
        enc_cfg["blur_sigmas"] = tuple(enc_cfg["blur_sigmas"])
    if "scales" in merged:
        merged["scales"] = tuple(merged["scales"])
    if "region_fractions" in merged:
        merged["region_fractions"] = tuple(merged["region_fractions"])
    return PropagationConfig(encoder=EncoderConfig(**enc_cfg), **merged)


def _config_payload(cfg):
    enc = cfg.encoder
    return {
        "z0": cfg.z0, "t0": cfg.t0, "patch": cfg.patch, "k": cfg.k,
        "scales": list(cfg.scales),
        "region_fractions": list(cfg.region_fractions),
        "apex_t_max": cfg.apex_t_max, "continuity_mode": cfg.continuity_mode,
        "matcher": cfg.matcher, "working_side": cfg.working_side,
        "encoder": {
            "mode": enc.mode, "key_channels": enc.key_channels,
            "blur_sigmas": list(enc.blur_sigmas),
            "include_coords": enc.include_coords,
            "projection_seed": enc.projection_seed,
        },
    }


def cmd_propagate(args):
    volume = load_container(args.volume)
    if not isinstance(volume, CineVolume):
        raise DataError(f"{args.volume} does not hold a cine volume")
    seed_obj = load_container(args.seed_mask)
    if isinstance(seed_obj, LabelVolume):
        raise DataError(f"{args.seed_mask} holds a full label volume; "
                        "the seed must be a single 2-d mask")
    seed = np.asarray(seed_obj)
    if seed.ndim != 2:
        raise DataError(f"{args.seed_mask} does not hold a 2-d mask")

    file_cfg = _load_json_config(args.config) if args.config else {}
    overrides = {
        "z0": args.z0, "t0": args.t0, "patch": args.patch, "k": args.k,
        "apex_t_max": args.apex_t_max, "continuity_mode": args.continuity,
        "matcher": args.matcher, "working_side": args.working_side,
    }
    if args.scales is not None:
        overrides["scales"] = tuple(int(s) for s in args.scales.split(","))
    if args.basal_frac is not None or args.apex_frac is not None:
        fractions = list(file_cfg.get("region_fractions", (1.0 / 3.0, 1.0 / 3.0)))
        if args.basal_frac is not None:
            fractions[0] = args.basal_frac
        if args.apex_frac is not None:
            fractions[1] = args.apex_frac
        overrides["region_fractions"] = tuple(fractions)
    merged = _merged(file_cfg, overrides, _PROPAGATE_KEYS, "propagate")
    if merged.get("z0") is None:
        merged["z0"] = volume.z_count // 2
    cfg = _build_propagation_config(merged)

    threads = _resolve_threads(args.threads)
    _echo({"command": "propagate", "config": _config_payload(cfg),
           "threads": threads,
           "volume": args.volume, "seed_mask": args.seed_mask,
           "out_masks": args.out_masks,
           "out_provenance": args.out_provenance})

    result = run_4d(volume, seed, cfg)
    save_container(result.masks, args.out_masks)
    if args.out_provenance:
        payload = {
            "frames": {f"{z},{t}": [list(fid) for fid in bank]
                       for (z, t), bank in result.provenance.items()},
            "order": [list(fid) for fid in result.order],
            "work_dims": list(result.work_dims),
        }
        with open(args.out_provenance, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    total = volume.z_count * volume.t_count
    print(f"segmented {total} frames ({volume.z_count} slices x "
          f"{volume.t_count} phases) with matcher={cfg.matcher}")
    return EXIT_OK


def cmd_eval(args):
    pred = load_container(args.pred)
    truth = load_container(args.truth)
    if not isinstance(pred, LabelVolume) or not isinstance(truth, LabelVolume):
        raise DataError("eval expects two label volumes")
    threads = _resolve_threads(args.threads)
    fractions = (args.basal_frac, args.apex_frac)
    _echo({"command": "eval", "pred": args.pred, "truth": args.truth,
           "region_fractions": list(fractions), "method": args.method,
           "threads": threads, "out_csv": args.out_csv})
    partition = partition_regions(truth.z_count, fractions)
    report = report_by_region(pred, truth, partition, method=args.method,
                              threads=threads)
    if args.out_csv:
        report.to_csv(args.out_csv)
    print(report.format_table())
    return EXIT_OK


def _parse_bench_grid(path):
    with open(path, "r") as fh:
        try:
            rows = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParameterError(f"grid file {path} is not valid JSON: {exc}")
    if not isinstance(rows, list) or not rows:
        raise ParameterError("bench grid must be a non-empty JSON array")
    allowed = {"t", "h", "w", "patch", "k", "scales"}
    configs = []
    for i, row in enumerate(rows):
        if not isinstance(row, dict):
            raise ParameterError(f"bench grid entry {i} must be an object")
        unknown = sorted(set(row) - allowed)
        if unknown:
            raise ParameterError(
                f"bench grid entry {i} has unknown keys: {', '.join(unknown)}")
        missing = sorted({"t", "h", "w", "patch", "k"} - set(row))
        if missing:
            raise ParameterError(
                f"bench grid entry {i} is missing keys: {', '.join(missing)}")
        if "scales" in row:
            row = dict(row, scales=tuple(row["scales"]))
        configs.append(BenchConfig(**row))
    return configs


def cmd_bench(args):
    configs = _parse_bench_grid(args.grid_json) if args.grid_json \
        else default_bench_grid()
    threads = _resolve_threads(args.threads)
    _echo({"command": "bench", "reps": args.reps, "threads": threads,
           "grid": [{"t": c.t, "h": c.h, "w": c.w, "patch": c.patch,
                     "k": c.k, "scales": list(c.scales)} for c in configs],
           "out_csv": args.out_csv})
    report = check_complexity(configs, reps=args.reps)
    if args.out_csv:
        report.to_csv(args.out_csv)
    for r in report.rows:
        status = "ok" if r.counts_match else "MISMATCH"
        print(f"T={r.t} H={r.h} W={r.w} P={r.patch} K={r.k} scale={r.scale} "
              f"patch {r.measured_patch_pairs}/{r.predicted_patch_pairs} "
              f"pixel {r.measured_pixel_pairs}/{r.predicted_pixel_pairs} "
              f"plmm {r.plmm_ms:.2f} ms dense {r.dense_ms:.2f} ms [{status}]")
    if not report.all_match:
        print("operation counts disagree with the closed forms", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_verify(args):
    names = args.suite or list(SUITES)
    _echo({"command": "verify", "suites": names,
           "inject_fault": args.inject_fault})
    if args.inject_fault == "flip-similarity":
        matcher._set_pixel_similarity_fault(True)
    try:
        results = run_suites(names)
    finally:
        matcher._set_pixel_similarity_fault(False)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    if all(r.passed for r in results):
        print("all suites passed")
        return EXIT_OK
    return EXIT_VERIFY


def _add_threads_flag(parser):
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: CSTM_THREADS env "
                             "or the machine's core count)")


def build_parser():
    parser = _Parser(prog="patchmem",
                     description="Patch-level memory matching for 4D "
                                 "cine segmentation: phantom data, mask "
                                 "propagation, metrics, benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic cine volume "
                                       "and its exact labels")
    p.add_argument("--out-volume", required=True)
    p.add_argument("--out-truth", required=True)
    p.add_argument("--spec-json", help="JSON file with phantom parameters; "
                                       "flags override its entries")
    p.add_argument("--z", type=int)
    p.add_argument("--t", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--spacing", type=float, nargs=2, metavar=("DY", "DX"))
    p.add_argument("--lv-radius", type=float)
    p.add_argument("--myo-thickness", type=float)
    p.add_argument("--rv-offset", type=float)
    p.add_argument("--contraction", type=float)
    p.add_argument("--shortening", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--distractor", choices=["on", "off"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("propagate", help="propagate a seed mask through a "
                                         "4D volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--seed-mask", required=True)
    p.add_argument("--out-masks", required=True)
    p.add_argument("--out-provenance")
    p.add_argument("--config", help="JSON config; flags override its entries")
    p.add_argument("--matcher", choices=["plmm", "dense"])
    p.add_argument("--scales", help="comma-separated subset of 3,4")
    p.add_argument("--patch", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--z0", type=int)
    p.add_argument("--t0", type=int)
    p.add_argument("--apex-t-max", type=int)
    p.add_argument("--continuity",
                   choices=["both", "spatial-only", "temporal-only"])
    p.add_argument("--basal-frac", type=float)
    p.add_argument("--apex-frac", type=float)
    p.add_argument("--working-side", type=int)
    _add_threads_flag(p)
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("eval", help="score predicted labels against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out-csv")
    p.add_argument("--basal-frac", type=float, default=1.0 / 3.0)
    p.add_argument("--apex-frac", type=float, default=1.0 / 3.0)
    p.add_argument("--method", default="plmm",
                   help="method name written into the CSV rows")
    _add_threads_flag(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure matching cost against the "
                                     "closed-form operation counts")
    p.add_argument("--out-csv")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--grid-json", help="JSON array of "
                                       "{t,h,w,patch,k[,scales]} entries")
    _add_threads_flag(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run the self-check suites")
    p.add_argument("--suite", action="append", choices=sorted(SUITES),
                   help="run only this suite (repeatable)")
    p.add_argument("--inject-fault", choices=["flip-similarity"],
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        name = exc.filename if exc.filename else exc
        print(f"error: missing file: {name}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
