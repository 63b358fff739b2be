"""COLMAP text model I/O (cameras.txt, images.txt, points3D.txt).

Only the text export layout is supported, and only PINHOLE/SIMPLE_PINHOLE
camera models; everything else is rejected with a clear error. The parser
never lets raw exceptions escape: any malformed input surfaces as a
FormatError carrying file and line context.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Camera, FormatError, quat_to_rot
from .geometry import FeatureMatches

SUPPORTED_MODELS = ("PINHOLE", "SIMPLE_PINHOLE")


class UnsupportedModelError(FormatError):
    pass


@dataclass
class ColmapCamera:
    camera_id: int
    model: str
    width: int
    height: int
    params: np.ndarray  # PINHOLE: fx fy cx cy; SIMPLE_PINHOLE: f cx cy

    def intrinsics(self) -> tuple[float, float, float, float]:
        if self.model == "PINHOLE":
            fx, fy, cx, cy = self.params
        else:
            fx, cx, cy = self.params
            fy = fx
        return float(fx), float(fy), float(cx), float(cy)


@dataclass
class ColmapImage:
    image_id: int
    qvec: np.ndarray  # (w, x, y, z) world-to-camera
    tvec: np.ndarray
    camera_id: int
    name: str
    xys: np.ndarray          # (N, 2)
    point3d_ids: np.ndarray  # (N,), -1 for unmatched observations


@dataclass
class ColmapPoint3D:
    point3d_id: int
    xyz: np.ndarray
    rgb: np.ndarray  # uint8 triple
    error: float
    track: list  # (image_id, point2d_idx) pairs


@dataclass
class SparseModel:
    cameras: dict = field(default_factory=dict)
    images: dict = field(default_factory=dict)
    points3d: dict = field(default_factory=dict)

    def validate(self):
        for img in self.images.values():
            if img.camera_id not in self.cameras:
                raise FormatError(f"image {img.image_id} references unknown camera {img.camera_id}")
            for pid in img.point3d_ids:
                if pid != -1 and pid not in self.points3d:
                    raise FormatError(f"image {img.image_id} references unknown 3D point {pid}")
            norm = np.linalg.norm(img.qvec)
            if abs(norm - 1.0) > 1e-6:
                img.qvec = img.qvec / norm
        return self


def _data_lines(path: Path):
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not valid UTF-8 text ({e})") from e
    except OSError as e:
        raise FormatError(f"{path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield lineno, stripped


def _fail(path, lineno, message):
    raise FormatError(f"{path}:{lineno}: {message}")


def parse_colmap_text(directory) -> SparseModel:
    """Parse a COLMAP text export directory into a SparseModel."""
    directory = Path(directory)
    model = SparseModel()

    cam_path = directory / "cameras.txt"
    for lineno, line in _data_lines(cam_path):
        parts = line.split()
        if len(parts) < 4:
            _fail(cam_path, lineno, f"camera line needs at least 4 fields, got {len(parts)}")
        try:
            cam_id = int(parts[0])
            model_name = parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = np.array([float(x) for x in parts[4:]])
        except ValueError as e:
            _fail(cam_path, lineno, f"malformed camera record ({e})")
        if model_name not in SUPPORTED_MODELS:
            raise UnsupportedModelError(
                f"{cam_path}:{lineno}: camera model '{model_name}' is not supported "
                f"(only {', '.join(SUPPORTED_MODELS)}); convert the model first"
            )
        expected = 4 if model_name == "PINHOLE" else 3
        if params.size != expected:
            _fail(cam_path, lineno, f"{model_name} expects {expected} params, got {params.size}")
        if width < 1 or height < 1:
            _fail(cam_path, lineno, "image dimensions must be positive")
        model.cameras[cam_id] = ColmapCamera(cam_id, model_name, width, height, params)

    img_path = directory / "images.txt"
    pending = None
    for lineno, line in _data_lines(img_path):
        parts = line.split()
        if pending is None:
            if len(parts) < 10:
                _fail(img_path, lineno, f"image header needs 10 fields, got {len(parts)}")
            try:
                image_id = int(parts[0])
                q = np.array([float(x) for x in parts[1:5]])
                t = np.array([float(x) for x in parts[5:8]])
                camera_id = int(parts[8])
                name = parts[9]
            except ValueError as e:
                _fail(img_path, lineno, f"malformed image header ({e})")
            pending = ColmapImage(image_id, q, t, camera_id, name,
                                  np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
        else:
            if len(parts) % 3 != 0:
                _fail(img_path, lineno, "observations must come in (x, y, point3d_id) triples")
            try:
                vals = np.array([float(x) for x in parts], dtype=float).reshape(-1, 3)
            except ValueError as e:
                _fail(img_path, lineno, f"malformed observation line ({e})")
            pending.xys = vals[:, :2]
            pending.point3d_ids = vals[:, 2].astype(np.int64)
            model.images[pending.image_id] = pending
            pending = None
    if pending is not None:
        _fail(img_path, "eof", f"image {pending.image_id} is missing its observation line")

    pts_path = directory / "points3D.txt"
    for lineno, line in _data_lines(pts_path):
        parts = line.split()
        if len(parts) < 8 or (len(parts) - 8) % 2 != 0:
            _fail(pts_path, lineno, f"point3D line has {len(parts)} fields, expected 8 + 2k")
        try:
            pid = int(parts[0])
            xyz = np.array([float(x) for x in parts[1:4]])
            rgb = np.array([int(x) for x in parts[4:7]], dtype=np.int64)
            error = float(parts[7])
            track = [(int(parts[k]), int(parts[k + 1])) for k in range(8, len(parts), 2)]
        except ValueError as e:
            _fail(pts_path, lineno, f"malformed point3D record ({e})")
        if np.any(rgb < 0) or np.any(rgb > 255):
            _fail(pts_path, lineno, "rgb values must be bytes")
        model.points3d[pid] = ColmapPoint3D(pid, xyz, rgb.astype(np.uint8), error, track)

    return model.validate()


def write_colmap_text(model: SparseModel, directory):
    """Inverse of parse_colmap_text (used for round-trip checks)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "cameras.txt", "w") as f:
        f.write("# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for cam in sorted(model.cameras.values(), key=lambda c: c.camera_id):
            params = " ".join(repr(float(p)) for p in cam.params)
            f.write(f"{cam.camera_id} {cam.model} {cam.width} {cam.height} {params}\n")
    with open(directory / "images.txt", "w") as f:
        f.write("# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME then observations\n")
        for img in sorted(model.images.values(), key=lambda i: i.image_id):
            q = " ".join(repr(float(x)) for x in img.qvec)
            t = " ".join(repr(float(x)) for x in img.tvec)
            f.write(f"{img.image_id} {q} {t} {img.camera_id} {img.name}\n")
            obs = " ".join(
                f"{repr(float(x))} {repr(float(y))} {int(pid)}"
                for (x, y), pid in zip(img.xys, img.point3d_ids)
            )
            f.write(obs + "\n")
    with open(directory / "points3D.txt", "w") as f:
        f.write("# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID POINT2D_IDX)\n")
        for pt in sorted(model.points3d.values(), key=lambda p: p.point3d_id):
            xyz = " ".join(repr(float(x)) for x in pt.xyz)
            rgb = " ".join(str(int(x)) for x in pt.rgb)
            track = " ".join(f"{i} {k}" for i, k in pt.track)
            f.write(f"{pt.point3d_id} {xyz} {rgb} {repr(float(pt.error))} {track}\n")


def model_cameras(model: SparseModel) -> tuple[list[Camera], list[int]]:
    """Cameras in image-id order, converted to the package convention."""
    cams = []
    ids = sorted(model.images.keys())
    for iid in ids:
        img = model.images[iid]
        cc = model.cameras[img.camera_id]
        fx, fy, cx, cy = cc.intrinsics()
        cams.append(Camera(fx, fy, cx, cy, quat_to_rot(img.qvec), img.tvec, cc.width, cc.height))
    return cams, ids


def model_matches(model: SparseModel) -> FeatureMatches:
    """Covisibility tracks and per-pair pixel correspondences from the model."""
    ids = sorted(model.images.keys())
    pos = {iid: n for n, iid in enumerate(ids)}
    view_tracks = {}
    obs = {}
    for iid in ids:
        img = model.images[iid]
        valid = img.point3d_ids >= 0
        view_tracks[pos[iid]] = np.unique(img.point3d_ids[valid])
        obs[pos[iid]] = {int(p): img.xys[k] for k, p in enumerate(img.point3d_ids) if p >= 0}
    pair_pixels = {}
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            shared = np.intersect1d(view_tracks[a], view_tracks[b])
            if shared.size == 0:
                continue
            pa = np.stack([obs[a][int(p)] for p in shared])
            pb = np.stack([obs[b][int(p)] for p in shared])
            pair_pixels[(a, b)] = (pa, pb)
    return FeatureMatches(pair_pixels=pair_pixels, view_tracks=view_tracks)
