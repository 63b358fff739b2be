"""File formats: PNG/PFM image writers, PMAP point-map containers, and the
small text tables used to audit pair selection and solved scales."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .core import FormatError, InvalidParameterError
from .geometry import ViewPair
from .scale_align import PairPrior

PMAP_MAGIC = b"PMAP1"
PNG16_DEPTH_SCALE = 1000.0  # fixed-point millimeter-style scale for 16-bit PNG depth


def write_png(path, image: np.ndarray):
    """8-bit RGB PNG from an HxWx3 float buffer in [0, 1]."""
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png16_depth(path, depth: np.ndarray, scale: float = PNG16_DEPTH_SCALE):
    """16-bit grayscale PNG of depth * scale, for viewers; lossy by design."""
    arr = np.clip(np.asarray(depth, dtype=float) * scale, 0, 65535).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)


def write_pfm(path, data: np.ndarray):
    """Grayscale PFM, little-endian (negative scale), rows bottom-to-top."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise InvalidParameterError("PFM writer expects an HxW array")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise FormatError(f"{path}: not a grayscale PFM file")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError(f"{path}: malformed PFM dimensions")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        payload = f.read(w * h * 4)
        if len(payload) != w * h * 4:
            raise FormatError(f"{path}: truncated PFM payload")
        dt = "<f4" if scale < 0 else ">f4"
        arr = np.frombuffer(payload, dtype=dt).reshape(h, w)
    return np.flipud(arr).astype(np.float64)


def write_pmap(path, prior: PairPrior):
    """Binary point-map container for one directed pair.

    Layout: magic "PMAP1", int32 LE (i, j, H, W), then float32 LE arrays
    X11 (H*W*3), C11 (H*W), X21 (H*W*3), C21 (H*W). The solved scale is not
    part of the container; it travels in the scale table.
    """
    h, w = prior.C11.shape
    hj, wj = prior.C21.shape
    if (hj, wj) != (h, w):
        raise InvalidParameterError("PMAP writer expects matching grids for both images")
    with open(path, "wb") as f:
        f.write(PMAP_MAGIC)
        f.write(struct.pack("<iiii", prior.i, prior.j, h, w))
        for arr in (prior.X11, prior.C11, prior.X21, prior.C21):
            f.write(np.asarray(arr, dtype="<f4").tobytes())


def read_pmap(path) -> PairPrior:
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != PMAP_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        header = f.read(16)
        if len(header) != 16:
            raise FormatError(f"{path}: truncated header")
        i, j, h, w = struct.unpack("<iiii", header)
        if h < 1 or w < 1:
            raise FormatError(f"{path}: invalid dimensions {h}x{w}")
        counts = (h * w * 3, h * w, h * w * 3, h * w)
        arrays = []
        for n in counts:
            payload = f.read(n * 4)
            if len(payload) != n * 4:
                raise FormatError(f"{path}: truncated payload")
            arrays.append(np.frombuffer(payload, dtype="<f4").astype(np.float64))
    x11 = arrays[0].reshape(h, w, 3)
    c11 = arrays[1].reshape(h, w)
    x21 = arrays[2].reshape(h, w, 3)
    c21 = arrays[3].reshape(h, w)
    return PairPrior(i, j, x11, x21, c11, c21)


def write_pair_table(path, pairs: list):
    with open(path, "w") as f:
        f.write("# i j n_covisible rel_rotation_deg homography_inlier_frac\n")
        for p in pairs:
            f.write(f"{p.i} {p.j} {p.n_covisible} {p.rel_rotation_deg:.6f} {p.homography_inlier_frac:.6f}\n")


def read_pair_table(path) -> list:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            pairs.append(ViewPair(int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3]), float(parts[4])))
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from e
    return pairs


def write_scale_table(path, scales: dict):
    """Text table of solved directed scales: one line per undirected pair."""
    undirected = sorted({(min(i, j), max(i, j)) for i, j in scales})
    with open(path, "w") as f:
        f.write("# i j s_ij s_ji\n")
        for i, j in undirected:
            f.write(f"{i} {j} {scales[(i, j)]:.12g} {scales[(j, i)]:.12g}\n")


def read_scale_table(path) -> dict:
    scales = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            i, j = int(parts[0]), int(parts[1])
            scales[(i, j)] = float(parts[2])
            scales[(j, i)] = float(parts[3])
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from e
    return scales


def write_metrics_csv(path, rows: list):
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0].keys())
    for row in rows[1:]:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w") as f:
        f.write(",".join(keys) + "\n")
        for row in rows:
            f.write(",".join(str(row.get(k, "")) for k in keys) + "\n")
