"""Command-line front end: synth, run, eval, gradcheck, config.

Exit codes: 0 success, 1 check failure, 2 invalid input or config.
DEPTHSYNC_THREADS caps BLAS threads (0 or unset = library default).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as vio
from .align import align_global, align_per_window
from .config import PRESETS, config_hash, from_ini, preset, to_ini
from .errors import InvalidInputError, VDGuideError
from .geom import DepthSequence
from .gradcheck import CHECKS, run_suite
from .guide import IdentityCodec, StridedCodec, VideoOracleDenoiser
from .metrics import absrel_delta1, absrel_per_window, mfc, trajectory_metrics
from .pipeline import PipelineConfig, VideoInput, plan_windows, run_video
from .pose import derive_trajectory
from .synth import CorruptionSpec, SceneSpec, corrupt, generate_scene

log = logging.getLogger("vdguide")

EXIT_OK, EXIT_FAIL, EXIT_INVALID = 0, 1, 2

CSV_COLUMNS = ("video_length", "windows", "absrel_global", "absrel_perwindow", "delta1_global",
               "mfc", "ate", "rpe_trans", "rpe_rot")

CORRUPTIONS = {
    "zero": CorruptionSpec(),
    "standard": CorruptionSpec(per_window_scale_drift=1.1, per_window_shift_drift=0.05,
                               depth_noise_sigma=0.01, seed=1),
    "noisy": CorruptionSpec(per_window_scale_drift=1.1, per_window_shift_drift=0.05, depth_noise_sigma=0.05,
                            normal_bias=float(np.radians(2.0)), track_noise_sigma=0.1, seed=1),
}


def _dump_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------------- synth

def _corruption_from_args(args) -> CorruptionSpec | None:
    overrides = {
        "per_window_scale_drift": args.scale_drift,
        "per_window_shift_drift": args.shift_drift,
        "depth_noise_sigma": args.depth_noise,
        "normal_bias": None if args.normal_bias_deg is None else float(np.radians(args.normal_bias_deg)),
        "track_noise_sigma": args.track_noise,
        "outlier_fraction": args.outliers,
        "seed": args.corruption_seed,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.corruption == "none" and not overrides:
        return None
    base = CORRUPTIONS.get(args.corruption, CorruptionSpec())
    return replace(base, **overrides)


def cmd_synth(args) -> int:
    spec = SceneSpec(layout=args.scene, trajectory=args.trajectory, speed=args.speed, frame_count=args.frames,
                     image_size=(args.width, args.height), seed=args.seed, tracks_per_pair=args.tracks_per_pair)
    cspec = _corruption_from_args(args)
    plan = plan_windows(args.frames, args.window, args.overlap)
    out = vio.ensure_writable(args.out)
    scene = generate_scene(spec)
    vio.write_scene(out, scene, plan)
    if cspec is not None:
        vio.write_corrupted(out, corrupt(scene, plan, cspec))
    print(json.dumps({"out": str(out), "frames": scene.frame_count, "windows": len(plan),
                      "window_plan": [list(w) for w in plan.windows], "corrupted": cspec is not None},
                     sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------------- run

def _load_config(args) -> tuple[PipelineConfig, str, str]:
    """Returns (config, config text, hash); the hash covers the file bytes when a file is given."""
    if args.config:
        data = Path(args.config).read_bytes()
        base = preset(args.preset) if args.preset else None
        cfg = from_ini(data.decode("utf-8"), base)
        return cfg, data.decode("utf-8"), config_hash(data)
    cfg = preset(args.preset or "full")
    text = to_ini(cfg)
    return cfg, text, config_hash(text.encode("utf-8"))


def _needed_files(cfg: PipelineConfig, corrupted: bool) -> list[str]:
    g = cfg.guidance
    geometry = g.geometry_enabled or cfg.post in ("geometry", "both")
    if not geometry:
        return []
    pre = "corrupted/" if corrupted else ""
    w = g.geometry_weights
    need = []
    if g.pose_source == "gt":
        need.append("poses.txt")
    if w.alpha_t > 0 or g.pose_source == "pnp":
        need.append(pre + "tracks.jsonl")
    if w.alpha_n > 0:
        need.append(pre + "normals.dsyn")
    if w.alpha_s > 0:
        need.append("images")
    return need


class Bundle:
    """A scene directory on disk, loaded lazily."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"missing bundle directory: {self.root}")
        self.K, self.width, self.height = vio.read_intrinsics(vio.required_file(self.root, "intrinsics.json"))
        self.meta = vio.read_scene_meta(self.root)
        self.frame_count = int(self.meta["frame_count"])
        self.corrupted = (self.root / "corrupted").is_dir()

    def path(self, name: str) -> Path:
        return vio.required_file(self.root, name)

    def gt_depth(self) -> DepthSequence:
        return vio.read_depth(self.path("depth.dsyn"))

    def poses(self):
        return vio.read_trajectory(self.path("poses.txt"))

    def tracks(self, prefer_corrupted: bool = True):
        name = "corrupted/tracks.jsonl" if prefer_corrupted and self.corrupted else "tracks.jsonl"
        return vio.read_tracks(self.path(name))

    def normals(self, prefer_corrupted: bool = True):
        name = "corrupted/normals.dsyn" if prefer_corrupted and self.corrupted else "normals.dsyn"
        return vio.read_normals(self.path(name))

    def images(self):
        self.path("images")
        return vio.read_images(self.root, self.frame_count)

    def window_targets(self, plan, use_corrupted: bool) -> list[DepthSequence]:
        if use_corrupted:
            vals, mask, _ = vio.read_container(self.path("corrupted/windows.dsyn"))
            return vio.split_windows(vals, mask, plan.windows)
        gt = self.gt_depth()
        return [gt.slice(a, b) for a, b in plan.windows]


def _video_input(bundle: Bundle, cfg: PipelineConfig, use_corrupted: bool) -> VideoInput:
    need = _needed_files(cfg, use_corrupted)
    for name in need:
        bundle.path(name)
    tracks = normals = nmask = images = poses = None
    if any(n.endswith("tracks.jsonl") for n in need):
        tracks = bundle.tracks(use_corrupted)
    if any(n.endswith("normals.dsyn") for n in need):
        normals, nmask = bundle.normals(use_corrupted)
    if "images" in need:
        images = bundle.images()
    if "poses.txt" in need:
        poses = list(bundle.poses().poses)
    return VideoInput(K=bundle.K, frame_count=bundle.frame_count, images=images, tracks=tracks,
                      normals=normals, normal_mask=nmask, poses=poses, shape=(bundle.height, bundle.width))


def cmd_run(args) -> int:
    cfg, text, digest = _load_config(args)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    bundle = Bundle(args.bundle)
    use_corrupted = {"auto": bundle.corrupted, "gt": False, "corrupted": True}[args.target]
    plan = plan_windows(bundle.frame_count, cfg.window_size, cfg.overlap)
    targets = bundle.window_targets(plan, use_corrupted)
    video = _video_input(bundle, cfg, use_corrupted)
    stack = np.concatenate([t.values for t in targets])
    codec = IdentityCodec.fit(stack) if args.codec == "identity" else StridedCodec.fit(stack)
    denoiser = VideoOracleDenoiser([codec.encode(t.values) for t in targets], cfg.schedule)
    out = vio.ensure_writable(args.out)
    res = run_video(video, denoiser, codec, cfg)
    vio.write_depth(out / "prediction.dsyn", res.depth, with_mask=False)
    vio.write_container(out / "windows.dsyn", np.concatenate([w.values for w in res.window_depths]))
    report = {"config_hash": digest, "config": text, "preset": args.preset, "target":
              "corrupted" if use_corrupted else "gt", **res.report()}
    if not args.no_metrics and (bundle.root / "depth.dsyn").exists():
        report["metrics"] = evaluate_prediction(bundle, res.depth, res.window_depths, plan,
                                                poses=(bundle.root / "poses.txt").exists() and not args.no_poses)
    _dump_json(out / "report.json", report)
    print(json.dumps({"out": str(out), "windows": len(plan), "errors": len(res.errors),
                      **{k: report["metrics"][k] for k in ("absrel_global", "delta1_global", "mfc")
                         if "metrics" in report}}, sort_keys=True))
    return EXIT_OK


# ------------------------------------------------------------------------ eval

def evaluate_prediction(bundle: Bundle, pred: DepthSequence, window_preds, plan, poses: bool = True) -> dict:
    """Depth metrics under both alignments, MFC and derived-pose errors."""
    gt = bundle.gt_depth()
    if pred.shape != gt.shape:
        raise InvalidInputError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    traj_gt = bundle.poses()
    aligned, params = align_global(pred, gt)
    dg = absrel_delta1(aligned, gt)
    if window_preds is not None:
        dw = absrel_per_window(window_preds, gt, plan.windows)
    else:
        dw = absrel_delta1(align_per_window(pred, gt, plan), gt)
    out = {
        "video_length": gt.frame_count,
        "windows": len(plan),
        "absrel_global": dg.absrel,
        "delta1_global": dg.delta1,
        "absrel_perwindow": dw.absrel,
        "delta1_perwindow": dw.delta1,
        "global_alignment": {"scale": params.scale, "shift": params.shift},
        "depth_global": dg.to_dict(),
        "depth_perwindow": dw.to_dict(),
        "mfc": mfc(aligned, traj_gt, bundle.K),
    }
    if poses:
        traj = derive_trajectory(aligned, bundle.tracks(), bundle.K)
        pm = trajectory_metrics(traj, traj_gt)
        out.update(pm.to_dict())
        out["pose_gaps"] = list(traj.gaps)
    return out


def _prefix_rows(bundle: Bundle, pred: DepthSequence, window_preds, plan_args, poses: bool) -> list[dict]:
    window, overlap = plan_args
    full_plan = plan_windows(bundle.frame_count, window, overlap)
    rows = []
    for n in range(1, len(full_plan) + 1):
        length = window + (n - 1) * (window - overlap)
        if n == len(full_plan):
            length = bundle.frame_count
        elif length > bundle.frame_count:
            break
        sub = _PrefixBundle(bundle, length)
        plan = plan_windows(length, window, overlap)
        wp = None
        if window_preds is not None and plan.windows == full_plan.windows[:n]:
            wp = window_preds[:n]
        rows.append(evaluate_prediction(sub, pred.slice(0, length), wp, plan, poses))
    return rows


class _PrefixBundle:
    """The first ``length`` frames of a bundle."""

    def __init__(self, bundle: Bundle, length: int):
        self.b = bundle
        self.length = length
        self.K = bundle.K

    def gt_depth(self):
        return self.b.gt_depth().slice(0, self.length)

    def poses(self):
        return self.b.poses().slice(0, self.length)

    def tracks(self):
        return self.b.tracks().window(0, self.length)


def cmd_eval(args) -> int:
    bundle = Bundle(args.bundle)
    pred = vio.read_depth(args.pred)
    gt_shape = (bundle.frame_count, bundle.height, bundle.width)
    if pred.shape != gt_shape:
        raise InvalidInputError(f"prediction shape {pred.shape} does not match ground truth {gt_shape}")
    window, overlap = args.window, args.overlap
    if window is None:
        ws = bundle.meta.get("windows")
        window = ws[0][1] - ws[0][0] if ws else 90
        overlap = bundle.meta.get("overlap", 30) if overlap is None else overlap
    overlap = 30 if overlap is None else overlap
    plan = plan_windows(bundle.frame_count, window, overlap)
    window_preds = None
    if args.windows:
        vals, mask, _ = vio.read_container(args.windows)
        window_preds = vio.split_windows(vals, mask, plan.windows)
    poses = not args.no_poses
    metrics = evaluate_prediction(bundle, pred, window_preds, plan, poses)
    rows = _prefix_rows(bundle, pred, window_preds, (window, overlap), poses) if args.sweep else [metrics]
    out = vio.ensure_writable(args.out)
    _dump_json(out / "metrics.json", {"metrics": metrics, "sweep": rows})
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in CSV_COLUMNS])
    print(json.dumps({k: metrics.get(k) for k in CSV_COLUMNS}, sort_keys=True))
    return EXIT_OK


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ------------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    seeds = tuple(range(args.seed, args.seed + args.instances))
    results = run_suite(seeds, break_term=args.break_term, max_tol=args.max_tol, median_tol=args.median_tol)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{r.term:15s} max_rel={r.max_rel:.3e} median_rel={r.median_rel:.3e} "
              f"n={r.compared} {'PASS' if r.passed else 'FAIL'}")
    if args.out:
        _dump_json(vio.ensure_writable(args.out) / "gradcheck.json",
                   {"seeds": list(seeds), "results": [r.to_dict() for r in results], "failures": len(failed)})
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(r.term for r in failed)}")
        return EXIT_FAIL
    print("all gradient checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------- config

def cmd_config(args) -> int:
    if args.list:
        for name in sorted(PRESETS):
            print(f"{name:16s} {PRESETS[name][0]}")
        return EXIT_OK
    cfg = from_ini(Path(args.file).read_text(), preset(args.preset)) if args.file else preset(args.preset)
    sys.stdout.write(to_ini(cfg))
    return EXIT_OK


# ------------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vdguide", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic scene bundle")
    s.add_argument("--scene", default="box_room", choices=["box_room", "plane_field", "random_heightfield"])
    s.add_argument("--trajectory", default="orbit", choices=["orbit", "dolly", "lateral", "static"])
    s.add_argument("--frames", type=int, default=150)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--speed", type=float, default=0.02)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--height", type=int, default=24)
    s.add_argument("--tracks-per-pair", type=int, default=96)
    s.add_argument("--window", type=int, default=90)
    s.add_argument("--overlap", type=int, default=30)
    s.add_argument("--out", default="scene")
    s.add_argument("--corruption", default="none", choices=["none", *CORRUPTIONS],
                   help="corruption preset; the flags below override its fields")
    s.add_argument("--scale-drift", type=float)
    s.add_argument("--shift-drift", type=float)
    s.add_argument("--depth-noise", type=float)
    s.add_argument("--normal-bias-deg", type=float)
    s.add_argument("--track-noise", type=float)
    s.add_argument("--outliers", type=float)
    s.add_argument("--corruption-seed", type=int)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", help="run the windowed pipeline with an oracle denoiser")
    r.add_argument("--bundle", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--preset", help="preset name (default full); with --config it is the base")
    r.add_argument("--config", help="INI config file")
    r.add_argument("--target", default="auto", choices=["auto", "gt", "corrupted"],
                   help="oracle target: corrupted windows when present (auto) or ground truth")
    r.add_argument("--codec", default="identity", choices=["identity", "strided"])
    r.add_argument("--seed", type=int)
    r.add_argument("--no-metrics", action="store_true")
    r.add_argument("--no-poses", action="store_true", help="skip derived-pose metrics")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a prediction against a bundle")
    e.add_argument("--pred", required=True)
    e.add_argument("--bundle", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--windows", help="per-window predictions (windows.dsyn from run)")
    e.add_argument("--window", type=int)
    e.add_argument("--overlap", type=int)
    e.add_argument("--sweep", action="store_true", help="one CSV row per window-count prefix")
    e.add_argument("--no-poses", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--instances", type=int, default=3)
    g.add_argument("--max-tol", type=float, default=1e-3)
    g.add_argument("--median-tol", type=float, default=1e-4)
    g.add_argument("--break-term", choices=CHECKS, help="flip the sign of one analytic gradient")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("config", help="print configuration")
    c.add_argument("--dump", action="store_true", help="print the effective config as INI (default)")
    c.add_argument("--preset", default="full")
    c.add_argument("--file", help="apply an INI file on top of the preset")
    c.add_argument("--list", action="store_true", help="list presets")
    c.set_defaults(func=cmd_config)
    return p


def _thread_limit():
    raw = os.environ.get("DEPTHSYNC_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"DEPTHSYNC_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise InvalidInputError("DEPTHSYNC_THREADS must be >= 0")
    if n == 0:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (VDGuideError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
