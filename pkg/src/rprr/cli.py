"""Command-line entry point: ``rprr <command> ...`` (or ``python -m rprr``).

Frame pairs come either from disk (``--pair DIR``, raw or TUM layout) or from
a synthetic preset (``--preset NAME``). Exit codes: 0 success, 1 a checked
threshold failed, 2 bad input or a failed run.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import datasets
from .errors import RPRRError
from .experiment import ExperimentConfig, run_experiment
from .geometry import Intrinsics, RigidTransform
from .icp import IcpConfig, icp_run_local
from .metrics import EnergyModel, energy_estimate, psnr
from .postproc import FilterConfig
from .scenes import gen_synthetic_scene, occlusion_scene, standard_scenes, with_noise
from .session import SessionConfig, encode_pair, reconstruct, run_independent, run_session


class CliError(Exception):
    """Bad user input; the message says what to change."""


def _presets(K):
    out = {s.name: s for s in standard_scenes(K)}
    out["occlusion"] = occlusion_scene(K)
    return out


def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("RPRR_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"RPRR_SEED must be an integer, got {env!r}") from None
    return 0


def _load_pair(args):
    if (args.pair is None) == (args.preset is None):
        raise CliError("give exactly one of --pair DIR or --preset NAME")
    if args.pair is not None:
        return datasets.load_scene_pair(args.pair, args.format, index=args.index, gap=args.gap)
    K = Intrinsics.default(args.width, args.height)
    presets = _presets(K)
    if args.preset not in presets:
        raise CliError(f"unknown preset {args.preset!r}; choose from {', '.join(presets)}")
    spec = presets[args.preset]
    if getattr(args, "noise_mm", 0):
        spec = with_noise(spec, args.noise_mm)
    return gen_synthetic_scene(spec, _seed(args))


def _filters(args):
    return FilterConfig(ghost_range_delta=args.ghost_delta_mm, ghost_majority=args.ghost_majority,
                        crack_max_window=args.crack_max_window)


def _quality(args):
    if not 0 <= args.color_quality <= 100:
        raise CliError(f"--color-quality must be in 0..100, got {args.color_quality}")
    return args.color_quality


def _pose_dict(M: RigidTransform):
    return {"rotation": M.rotation.round(9).tolist(), "translation_m": M.translation.round(9).tolist(),
            "angle_deg": math.degrees(M.angle())}


def _print(obj):
    print(json.dumps(obj, indent=2, default=float))


def _pose_errors(M, gt):
    if gt is None:
        return {}
    E = gt.inverse() @ M
    return {"rotation_error_deg": math.degrees(E.angle()),
            "translation_error_mm": 1000.0 * float(np.linalg.norm(M.translation - gt.translation))}


def _record_dict(rec):
    d = asdict(rec)
    d["total_bytes"] = rec.total
    d["energy_mj"] = 1000.0 * energy_estimate(rec, EnergyModel())
    return d


def _write_frame(out, Z, C, stem="b_hat"):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    datasets.write_depth(out / f"{stem}_depth.pgm", Z)
    datasets.write_color(out / f"{stem}_color.ppm", C)


# -- commands -----------------------------------------------------------------------------

def cmd_pose(args):
    pair = _load_pair(args)
    res = icp_run_local(pair.Z_a, pair.Z_b, pair.intrinsics, IcpConfig(), _seed(args))
    out = {"converged": res.converged, "iterations": res.iterations, "M_ab": _pose_dict(res.transform)}
    out.update(_pose_errors(res.transform, pair.ground_truth))
    _print(out)
    if args.out:
        Path(args.out).write_text(" ".join(f"{v:.17g}" for v in res.transform.to_array()) + "\n")
    return 0


def cmd_encode(args):
    pair = _load_pair(args)
    K = pair.intrinsics
    M = None
    if not args.full:
        res = icp_run_local(pair.Z_a, pair.Z_b, K, IcpConfig(), _seed(args))
        M = res.transform if res.converged else None
    data_a, data_b = encode_pair((pair.Z_a, pair.C_a), (pair.Z_b, pair.C_b), K, M,
                                 _quality(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "a.rprr").write_bytes(data_a)
    (out / "b.rprr").write_bytes(data_b)
    datasets.write_intrinsics(out / "intrinsics.txt", K)
    _print({"a_bytes": len(data_a), "b_bytes": len(data_b), "full": M is None,
            "out": str(out)})
    return 0


def cmd_decode(args):
    src = Path(args.input)
    K = datasets.read_intrinsics(src / "intrinsics.txt")
    try:
        data_a, data_b = (src / "a.rprr").read_bytes(), (src / "b.rprr").read_bytes()
    except FileNotFoundError as exc:
        raise CliError(f"{exc.filename}: missing; run 'rprr encode' to create it") from None
    cfg = SessionConfig(filters=_filters(args), postprocess=not args.no_postprocess)
    Z, C, M, stats = reconstruct(data_a, data_b, K, cfg)
    _write_frame(args.out, Z, C)
    _print({"M_ab": _pose_dict(M), "filter_stats": asdict(stats), "out": str(args.out)})
    return 0


def _frames(pair):
    return (pair.Z_a, pair.C_a), (pair.Z_b, pair.C_b)


def cmd_session(args):
    pair = _load_pair(args)
    cfg = SessionConfig(quality=_quality(args), seed=_seed(args), filters=_filters(args),
                        postprocess=not args.no_postprocess)
    Z, C, M, rec = run_session(args.transport, *_frames(pair), pair.intrinsics, cfg)
    out = {"record": _record_dict(rec), "M_ab": _pose_dict(M), "psnr_db": psnr(pair.C_b, C)}
    out.update(_pose_errors(M, pair.ground_truth) if rec.converged else {})
    _print(out)
    if args.out:
        _write_frame(args.out, Z, C)
    return 0


def cmd_independent(args):
    pair = _load_pair(args)
    Z, C, rec = run_independent(*_frames(pair), pair.intrinsics, _quality(args), args.transport,
                                return_frames=True)
    _print({"record": _record_dict(rec), "psnr_db": psnr(pair.C_b, C)})
    if args.out:
        _write_frame(args.out, Z, C)
    return 0


def cmd_synth(args):
    if args.pair is not None:
        raise CliError("synth generates scenes; use --preset NAME instead of --pair")
    if args.noise_mm < 0:
        raise CliError("--noise-mm must be non-negative")
    pair = _load_pair(args)
    datasets.save_scene_pair(pair, args.out)
    _print({"scene": pair.name, "out": str(args.out),
            "ground_truth": _pose_dict(pair.ground_truth)})
    return 0


def cmd_experiment(args):
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    cfg.validate()
    rows, failures = run_experiment(cfg, args.out)
    print((Path(args.out) / "summary.txt").read_text(), end="")
    print(f"wrote {len(rows)} rows to {Path(args.out) / 'results.csv'}")
    return 1 if failures else 0


# -- parser -------------------------------------------------------------------------------

def _add_scene(p, synth=False):
    p.add_argument("--pair", help="directory holding a frame pair")
    p.add_argument("--format", choices=("raw", "tum"), default="raw", help="layout of --pair")
    p.add_argument("--index", type=int, default=0, help="first TUM frame")
    p.add_argument("--gap", type=int, default=10, help="TUM frame gap")
    p.add_argument("--preset", help="synthetic scene: scene1-small ... scene6-near-identical, occlusion")
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default: $RPRR_SEED or 0)")
    if synth:
        p.add_argument("--noise-mm", type=float, default=0.0, help="depth noise std in mm")


def _add_filters(p):
    d = FilterConfig()
    p.add_argument("--ghost-delta-mm", type=float, default=d.ghost_range_delta)
    p.add_argument("--ghost-majority", type=float, default=d.ghost_majority)
    p.add_argument("--crack-max-window", type=int, default=d.crack_max_window)
    p.add_argument("--no-postprocess", action="store_true", help="skip crack and ghost filters")


def build_parser():
    ap = argparse.ArgumentParser(prog="rprr", description="Redundancy removal for RGB-D sensor pairs.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pose", help="estimate M_ab with ICP only")
    _add_scene(p)
    p.add_argument("--out", help="write the 12 pose numbers to this file")
    p.set_defaults(fn=cmd_pose)

    p = sub.add_parser("encode", help="write the two containers of a pair")
    _add_scene(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--color-quality", type=int, default=50)
    p.add_argument("--full", action="store_true", help="send b whole (no pose, no redundancy removal)")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct b from an encoded directory")
    p.add_argument("input", help="directory written by 'rprr encode'")
    p.add_argument("--out", required=True)
    _add_filters(p)
    p.set_defaults(fn=cmd_decode)

    for name, fn, text in (("session", cmd_session, "full rprr session over a transport"),
                           ("independent", cmd_independent, "baseline: both frames sent whole")):
        p = sub.add_parser(name, help=text)
        _add_scene(p)
        p.add_argument("--transport", choices=("inprocess", "socket"), default="inprocess")
        p.add_argument("--color-quality", type=int, default=50)
        p.add_argument("--out", help="write the reconstructed b frame here")
        if name == "session":
            _add_filters(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("synth", help="generate a synthetic pair in the raw layout")
    _add_scene(p, synth=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("experiment", help="scene x quality sweep with a CSV report")
    p.add_argument("config", help="key = value config file")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--seed", type=int, default=None, help="overrides config and $RPRR_SEED")
    p.add_argument("--workers", type=int, default=None, help="parallel cells")
    p.set_defaults(fn=cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"rprr {args.command}: {exc}", file=sys.stderr)
    except RPRRError as exc:
        print(f"rprr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
    except (ValueError, OSError) as exc:
        print(f"rprr {args.command}: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
