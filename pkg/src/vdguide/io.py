"""On-disk formats: DSYN depth/normal containers, TUM trajectories, JSONL tracks, PGM images.

A scene bundle is a directory::

    scene.json  intrinsics.json  depth.dsyn  normals.dsyn  poses.txt
    tracks.jsonl  images/00000.pgm ...
    corrupted/  depth.dsyn  windows.dsyn  normals.dsyn  tracks.jsonl  corruption.json
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .geom import DepthSequence, Intrinsics, Pose
from .losses import TrackSet
from .pose import Trajectory

MAGIC = b"DSYN"
VERSION = 1
FLAG_MASK = 1
FLAG_NORMALS = 2
_HEADER = struct.Struct("<4sIIIII")


# ------------------------------------------------------------------------- DSYN

def write_container(path, values: np.ndarray, mask: np.ndarray | None = None):
    """Write (T, H, W) depth or (T, H, W, 3) normals as little-endian float32."""
    v = np.asarray(values)
    normals = v.ndim == 4
    if normals and v.shape[-1] != 3:
        raise InvalidInputError("normal containers need 3 channels")
    if v.ndim not in (3, 4):
        raise InvalidInputError(f"expected (T, H, W[, 3]) values, got shape {v.shape}")
    T, H, W = v.shape[:3]
    flags = (FLAG_MASK if mask is not None else 0) | (FLAG_NORMALS if normals else 0)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, T, H, W, flags))
        f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
        if mask is not None:
            m = np.asarray(mask, dtype=bool)
            if m.shape != (T, H, W):
                raise InvalidInputError("mask must be (T, H, W)")
            f.write(m.astype(np.uint8).tobytes())


def read_container(path):
    """Returns (values float32, mask or None, flags); checks the length exactly."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated header")
    magic, ver, T, H, W, flags = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}")
    if ver != VERSION:
        raise InvalidInputError(f"{path}: unsupported version {ver}")
    C = 3 if flags & FLAG_NORMALS else 1
    n = T * H * W
    expected = _HEADER.size + 4 * n * C + (n if flags & FLAG_MASK else 0)
    if len(data) != expected:
        raise InvalidInputError(f"{path}: length {len(data)} does not match header ({expected})")
    off = _HEADER.size
    vals = np.frombuffer(data, dtype="<f4", count=n * C, offset=off).astype(np.float32)
    vals = vals.reshape((T, H, W, 3) if C == 3 else (T, H, W))
    mask = None
    if flags & FLAG_MASK:
        raw = np.frombuffer(data, dtype=np.uint8, count=n, offset=off + 4 * n * C)
        if np.any(raw > 1):
            raise InvalidInputError(f"{path}: mask bytes must be 0 or 1")
        mask = raw.reshape(T, H, W).astype(bool)
    return vals, mask, flags


def write_depth(path, seq: DepthSequence, with_mask: bool = True):
    write_container(path, seq.values, seq.mask if with_mask else None)


def read_depth(path) -> DepthSequence:
    vals, mask, flags = read_container(path)
    if flags & FLAG_NORMALS:
        raise InvalidInputError(f"{path}: is a normal container")
    return DepthSequence(vals.astype(np.float64), mask)


def read_normals(path):
    vals, mask, flags = read_container(path)
    if not flags & FLAG_NORMALS:
        raise InvalidInputError(f"{path}: is not a normal container")
    return vals.astype(np.float64), mask


# -------------------------------------------------------------------------- TUM

def write_tum(path, timestamps, translations, quaternions):
    """One line per pose: "timestamp tx ty tz qx qy qz qw" with round-trip floats."""
    lines = []
    for ts, t, q in zip(timestamps, np.asarray(translations), np.asarray(quaternions)):
        vals = [float(ts), *map(float, t), *map(float, q)]
        lines.append(" ".join(repr(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path):
    """Returns (timestamps, translations (N, 3), quaternions xyzw (N, 4))."""
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise InvalidInputError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
        rows.append([float(p) for p in parts])
    a = np.array(rows, dtype=np.float64).reshape(-1, 8)
    return a[:, 0], a[:, 1:4], a[:, 4:8]


def write_trajectory(path, traj: Trajectory):
    write_tum(path, [float(f) for f in traj.frames], traj.positions,
              np.array([p.quaternion() for p in traj.poses]).reshape(-1, 4))


def read_trajectory(path) -> Trajectory:
    ts, t, q = read_tum(path)
    return Trajectory([Pose.from_quaternion(qq, tt) for tt, qq in zip(t, q)], [int(round(x)) for x in ts])


# ----------------------------------------------------------------------- tracks

def write_tracks(path, tracks: TrackSet):
    with open(path, "w") as f:
        for i in range(len(tracks)):
            f.write(json.dumps({
                "frame_a": int(tracks.frame_a[i]),
                "frame_b": int(tracks.frame_b[i]),
                "pixel_a": [float(x) for x in tracks.pixel_a[i]],
                "pixel_b": [float(x) for x in tracks.pixel_b[i]],
                "confidence": float(tracks.confidence[i]),
                "outlier": bool(tracks.outlier[i]),
            }) + "\n")


def read_tracks(path) -> TrackSet:
    fa, fb, pa, pb, c, o = [], [], [], [], [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                fa.append(int(r["frame_a"]))
                fb.append(int(r["frame_b"]))
                pa.append([float(x) for x in r["pixel_a"]])
                pb.append([float(x) for x in r["pixel_b"]])
                c.append(float(r.get("confidence", 1.0)))
                o.append(bool(r.get("outlier", False)))
            except (KeyError, ValueError, TypeError) as exc:
                raise InvalidInputError(f"{path}:{ln}: bad track record ({exc})") from exc
    if not fa:
        return TrackSet.empty()
    return TrackSet(fa, fb, np.array(pa).reshape(-1, 2), np.array(pb).reshape(-1, 2), c, o)


# ------------------------------------------------------------------- intrinsics

def write_intrinsics(path, K: Intrinsics, width: int, height: int):
    d = K.to_dict()
    d.update(width=int(width), height=int(height))
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def read_intrinsics(path):
    d = json.loads(Path(path).read_text())
    try:
        return Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"])), \
            int(d["width"]), int(d["height"])
    except KeyError as exc:
        raise InvalidInputError(f"{path}: missing intrinsics field {exc}") from exc


# ---------------------------------------------------------------------------- PGM

def write_pgm(path, image: np.ndarray):
    """8-bit binary PGM from an image in [0, 1]."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    H, W = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise InvalidInputError(f"{path}: not a binary PGM")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise InvalidInputError(f"{path}: only 8-bit PGM is supported")
    img = np.frombuffer(data, dtype=np.uint8, count=W * H, offset=pos).reshape(H, W)
    return img.astype(np.float64) / 255.0


# ------------------------------------------------------------------------ bundle

def _images_dir(root: Path) -> Path:
    return root / "images"


def write_scene(root, scene, plan=None):
    """Write a ground-truth SceneBundle."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    W, H = scene.spec.image_size
    meta = {"scene": scene.spec.to_dict(), "frame_count": scene.frame_count}
    if plan is not None:
        meta["windows"] = [list(w) for w in plan.windows]
        meta["overlap"] = plan.overlap
    (root / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_intrinsics(root / "intrinsics.json", scene.K, W, H)
    write_depth(root / "depth.dsyn", scene.gt_depth)
    write_container(root / "normals.dsyn", scene.gt_normals, scene.normal_mask)
    write_trajectory(root / "poses.txt", scene.gt_poses)
    write_tracks(root / "tracks.jsonl", scene.gt_tracks)
    img = _images_dir(root)
    img.mkdir(exist_ok=True)
    for i, im in enumerate(scene.images):
        write_pgm(img / f"{i:05d}.pgm", im)


def write_corrupted(root, cb):
    d = Path(root) / "corrupted"
    d.mkdir(parents=True, exist_ok=True)
    write_depth(d / "depth.dsyn", cb.depth)
    write_container(d / "windows.dsyn", np.concatenate([t.values for t in cb.window_targets]),
                    np.concatenate([t.mask for t in cb.window_targets]))
    write_container(d / "normals.dsyn", cb.normals, cb.normal_mask)
    write_tracks(d / "tracks.jsonl", cb.tracks)
    (d / "corruption.json").write_text(cb.params_json() + "\n")


def required_file(root, name: str) -> Path:
    p = Path(root) / name
    if not p.exists():
        raise FileNotFoundError(f"missing input file: {p}")
    return p


def read_images(root, frame_count: int) -> np.ndarray:
    img = _images_dir(Path(root))
    return np.stack([read_pgm(required_file(img, f"{i:05d}.pgm")) for i in range(frame_count)])


def read_scene_meta(root) -> dict:
    return json.loads(required_file(root, "scene.json").read_text())


def split_windows(stack: np.ndarray, mask, windows) -> list[DepthSequence]:
    out, off = [], 0
    for a, b in windows:
        n = b - a
        out.append(DepthSequence(stack[off:off + n].astype(np.float64),
                                 None if mask is None else mask[off:off + n]))
        off += n
    if off != len(stack):
        raise InvalidInputError("window stack does not match the window plan")
    return out


def ensure_writable(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    if not os.access(p, os.W_OK):
        raise PermissionError(f"cannot write to {p}")
    return p
