"""Synthetic desk-scale fixtures with exact analytic ground truth.

All scenes are deterministic in the seed. The box room is the workhorse:
cameras sit on a small ring inside a [-1, 1]^3 box whose walls carry a
smooth 3D color field (continuous across edges), so ground-truth images and
depths come from closed-form ray-box intersections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Camera, GaussianCloud, SplatError, load_scene, save_scene
from .floater_lab import make_deadlock_scene
from .geometry import FeatureMatches
from .scale_align import PairPrior
from .trainer import SceneDataset

SCENE_NAMES = ("textured_box", "plane_floater", "translucent_slab", "ring5")


@dataclass
class SynthBundle:
    """A generated scene: initial cloud, training data, and ground truth."""

    name: str
    cloud: GaussianCloud
    dataset: SceneDataset
    gt_depths: list = field(default_factory=list)
    poses: dict = field(default_factory=dict)       # view -> cam-to-world
    gt_scales: dict = field(default_factory=dict)   # (i, j) -> injected scale
    matches: FeatureMatches | None = None
    floater_indices: np.ndarray | None = None


def surface_color(p: np.ndarray) -> np.ndarray:
    """Smooth color field evaluated on the box surface; seam-free because it
    restricts a smooth volumetric field."""
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    col = np.stack(
        [
            0.55 + 0.30 * np.sin(1.7 * x + 0.3) * np.cos(1.3 * y),
            0.55 + 0.30 * np.cos(1.1 * x) * np.sin(1.4 * z + 0.6),
            0.55 + 0.30 * np.sin(0.9 * y + 1.2) * np.cos(1.2 * z),
        ],
        axis=-1,
    )
    return np.clip(col, 0.0, 1.0)


def ray_box_exit(origins: np.ndarray, dirs: np.ndarray, half: float = 1.0):
    """First exit of rays from inside the [-half, half]^3 box.

    Returns (t, points); t is the ray parameter, which equals camera depth
    when dirs are camera rays with unit z in camera frame.
    """
    with np.errstate(divide="ignore"):
        t_hi = (half - origins) / dirs
        t_lo = (-half - origins) / dirs
    t_axis = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
    t = t_axis.min(axis=-1)
    return t, origins + t[..., None] * dirs


def _ring_camera(angle: float, image_size: int, radius: float = 0.15) -> Camera:
    # a small ring near the room center keeps every wall about a unit away
    # (no grazing splats) while the wide field of view overlaps neighbors
    position = np.array([radius * np.cos(angle), 0.0, radius * np.sin(angle)])
    fwd = np.array([np.cos(angle), 0.0, np.sin(angle)])
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, fwd)
    right /= np.linalg.norm(right)
    upv = np.cross(fwd, right)
    r = np.stack([right, upv, fwd], axis=1).T
    f = 0.50 * image_size
    c = (image_size - 1) / 2
    return Camera(f, f, c, c, r, -r @ position, image_size, image_size)


def _render_analytic(cam: Camera):
    us, vs = np.meshgrid(np.arange(cam.width, dtype=float), np.arange(cam.height, dtype=float))
    dirs_cam = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us)], axis=-1)
    dirs_world = dirs_cam @ cam.R  # row-vector form of R^T dirs
    origin = cam.camera_center()
    t, pts = ray_box_exit(np.broadcast_to(origin, dirs_world.shape), dirs_world)
    return surface_color(pts), t, pts


def _wall_samples(cams, depths, pts_maps, stride: int):
    mus, cols = [], []
    for cam, depth, pts in zip(cams, depths, pts_maps):
        sub = pts[stride // 2 :: stride, stride // 2 :: stride].reshape(-1, 3)
        mus.append(sub)
        cols.append(surface_color(sub))
    return np.concatenate(mus), np.concatenate(cols)


def make_box_scene(
    n_views: int = 8,
    image_size: int = 48,
    n_gaussians: int = 420,
    stride: int = 6,
    n_floaters: int = 0,
    n_tracks: int = 400,
    with_priors: bool = False,
    prior_noise: float = 0.0,
    seed: int = 0,
) -> SynthBundle:
    """Box room with a training ring of cameras plus one held-out view."""
    rng = np.random.default_rng(seed)
    angles = [2 * np.pi * k / n_views for k in range(n_views)]
    cams = [_ring_camera(a, image_size) for a in angles]
    eval_cam = _ring_camera(angles[0] + np.pi / n_views, image_size)

    rendered = [_render_analytic(c) for c in cams]
    images = [r[0] for r in rendered]
    depths = [r[1] for r in rendered]
    pts_maps = [r[2] for r in rendered]
    eval_img, eval_depth, _ = _render_analytic(eval_cam)

    mus, cols = _wall_samples(cams, depths, pts_maps, stride)
    pick = rng.choice(len(mus), size=min(n_gaussians, len(mus)), replace=False)
    mus, cols = mus[pick], cols[pick]
    spacing = stride * np.linalg.norm(mus - np.array([0.0, 0.0, 0.0]), axis=1) / (0.72 * image_size)
    scales = np.clip(0.55 * spacing, 1e-3, None)[:, None] * np.ones(3)

    k = len(mus)
    cloud = GaussianCloud(
        mu=mus + rng.normal(scale=1e-3, size=(k, 3)),
        alpha=np.full(k, 0.65),
        alpha_aux=np.ones(k),
        color=cols,
        scale=scales,
        rot=np.tile([1.0, 0.0, 0.0, 0.0], (k, 1)),
    )

    floater_idx = np.zeros(0, dtype=int)
    if n_floaters:
        fl_mu, fl_col = [], []
        for n in range(n_floaters):
            view = int(rng.integers(0, n_views))
            cam = cams[view]
            u = rng.uniform(0.25, 0.75) * (image_size - 1)
            v = rng.uniform(0.25, 0.75) * (image_size - 1)
            surface_depth = depths[view][int(round(v)), int(round(u))]
            p = cam.unproject(np.array([u, v]), surface_depth * rng.uniform(0.35, 0.55))
            ray = p - cam.camera_center()
            _, hit = ray_box_exit(cam.camera_center()[None], (ray / np.linalg.norm(ray))[None])
            fl_mu.append(p)
            fl_col.append(surface_color(hit[0]))
        floater_idx = np.arange(k, k + n_floaters)
        cloud = GaussianCloud(
            mu=np.concatenate([cloud.mu, np.stack(fl_mu)]),
            alpha=np.concatenate([cloud.alpha, np.full(n_floaters, 0.88)]),
            alpha_aux=np.concatenate([cloud.alpha_aux, np.ones(n_floaters)]),
            color=np.concatenate([cloud.color, np.stack(fl_col)]),
            scale=np.concatenate([cloud.scale, np.full((n_floaters, 3), 0.05)]),
            rot=np.concatenate([cloud.rot, np.tile([1.0, 0.0, 0.0, 0.0], (n_floaters, 1))]),
        )

    # synthetic covisibility tracks on the walls
    track_dirs = rng.normal(size=(n_tracks, 3))
    track_dirs /= np.linalg.norm(track_dirs, axis=1, keepdims=True)
    _, track_pts = ray_box_exit(np.zeros((n_tracks, 3)), track_dirs)
    view_tracks = {}
    observations = {}
    for vi, cam in enumerate(cams):
        pix, z, ok = cam.project_many(track_pts)
        inside = ok & (z > 0) & (pix[:, 0] >= 0) & (pix[:, 0] <= cam.width - 1) \
            & (pix[:, 1] >= 0) & (pix[:, 1] <= cam.height - 1)
        ids = np.nonzero(inside)[0]
        view_tracks[vi] = ids
        observations[vi] = {int(t): pix[t] for t in ids}
    pair_pixels = {}
    for a in range(n_views):
        for b in range(a + 1, n_views):
            shared = np.intersect1d(view_tracks[a], view_tracks[b])
            if shared.size:
                pair_pixels[(a, b)] = (
                    np.stack([observations[a][int(t)] for t in shared]),
                    np.stack([observations[b][int(t)] for t in shared]),
                )
    matches = FeatureMatches(pair_pixels=pair_pixels, view_tracks=view_tracks)

    pairs = [(v, (v + 1) % n_views) for v in range(n_views)]
    poses = {v: cams[v].cam_to_world() for v in range(n_views)}

    priors = {}
    gt_scales = {}
    if with_priors:
        priors, gt_scales = _priors_from_depths(cams, depths, pts_maps, pairs, rng, prior_noise)

    dataset = SceneDataset(
        cameras=cams,
        images=images,
        pairs=pairs,
        priors=priors,
        eval_cameras=[eval_cam],
        eval_images=[eval_img],
        eval_depths=[eval_depth],
    )
    return SynthBundle(
        name="textured_box",
        cloud=cloud,
        dataset=dataset,
        gt_depths=depths,
        poses=poses,
        gt_scales=gt_scales,
        matches=matches,
        floater_indices=floater_idx,
    )


def _priors_from_depths(cams, depths, pts_maps, pairs, rng, noise: float):
    """Stereo-style directed point maps: camera-frame points over each view's
    pixel grid, divided by an injected per-pair scale."""
    priors = {}
    gt_scales = {}

    def cam_frame(view, frame_cam):
        pts = pts_maps[view].reshape(-1, 3)
        return (pts @ frame_cam.R.T + frame_cam.t).reshape(pts_maps[view].shape)

    for i, j in pairs:
        for a, b in ((i, j), (j, i)):
            s = float(rng.uniform(0.5, 2.0))
            gt_scales[(a, b)] = s
            x11 = cam_frame(a, cams[a]) / s
            x21 = cam_frame(b, cams[a]) / s
            if noise > 0:
                x11 = x11 + noise * np.sqrt((x11**2).mean()) * rng.normal(size=x11.shape)
                x21 = x21 + noise * np.sqrt((x21**2).mean()) * rng.normal(size=x21.shape)
            h, w = x11.shape[:2]
            priors[(a, b)] = PairPrior(
                a, b, x11, x21,
                rng.uniform(0.5, 2.0, (h, w)), rng.uniform(0.5, 2.0, (h, w)),
                scale=s,
            )
    return priors, gt_scales


def make_ring_scene(image_size: int = 24, seed: int = 0, noise: float = 0.0) -> SynthBundle:
    """Five-view ring with exact point maps and known per-pair scales; the
    canonical scale-recovery fixture."""
    bundle = make_box_scene(
        n_views=5, image_size=image_size, n_gaussians=50, stride=8,
        with_priors=True, prior_noise=noise, seed=seed,
    )
    bundle.name = "ring5"
    return bundle


def make_translucent_slab_scene(image_size: int = 48, seed: int = 0) -> SynthBundle:
    """One wall seen through a half-transparent slab.

    The ground-truth images blend the slab color over the wall at a known
    coverage, which only the auxiliary opacity can reproduce once depth
    losses force the base geometry to treat the slab as solid.
    """
    rng = np.random.default_rng(seed)
    cam = _ring_camera(0.0, image_size)
    wall_color, wall_depth, wall_pts = _render_analytic(cam)

    slab_x = 0.62
    slab_alpha = 0.45
    slab_color = np.array([0.25, 0.45, 0.8])
    origin = cam.camera_center()

    us, vs = np.meshgrid(np.arange(cam.width, dtype=float), np.arange(cam.height, dtype=float))
    dirs_cam = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us)], axis=-1)
    dirs_world = dirs_cam @ cam.R
    t_slab = (slab_x - origin[0]) / dirs_world[:, :, 0]
    hit = origin + t_slab[:, :, None] * dirs_world
    through = (np.abs(hit[:, :, 1]) < 0.35) & (np.abs(hit[:, :, 2]) < 0.35) & (t_slab > 0)

    image = wall_color.copy()
    image[through] = slab_alpha * slab_color + (1 - slab_alpha) * wall_color[through]

    stride = 5
    mus = wall_pts[stride // 2 :: stride, stride // 2 :: stride].reshape(-1, 3)
    cols = surface_color(mus)
    spacing = stride * np.linalg.norm(mus - origin, axis=1) / cam.fx
    k = len(mus)

    ys = np.linspace(-0.3, 0.3, 6)
    zs = np.linspace(-0.3, 0.3, 6)
    gy, gz = np.meshgrid(ys, zs)
    slab_mu = np.stack([np.full(gy.size, slab_x), gy.ravel(), gz.ravel()], axis=1)
    ks = len(slab_mu)

    cloud = GaussianCloud(
        mu=np.concatenate([mus, slab_mu]),
        alpha=np.concatenate([np.full(k, 0.65), np.full(ks, 0.45)]),
        alpha_aux=np.ones(k + ks),
        color=np.concatenate([cols, np.tile(slab_color, (ks, 1))]),
        scale=np.concatenate([0.55 * spacing[:, None] * np.ones(3), np.full((ks, 3), 0.07)]),
        rot=np.tile([1.0, 0.0, 0.0, 0.0], (k + ks, 1)),
    )
    dataset = SceneDataset(cameras=[cam], images=[image])
    return SynthBundle(
        name="translucent_slab", cloud=cloud, dataset=dataset, gt_depths=[wall_depth],
        poses={0: cam.cam_to_world()},
    )


def make_plane_floater_scene(image_size: int = 32) -> SynthBundle:
    cloud, dataset = make_deadlock_scene(image_size)
    gt_depths = [bd.depth_map(image_size, image_size) for bd in dataset.backdrops]
    poses = {v: dataset.cameras[v].cam_to_world() for v in range(len(dataset.cameras))}
    return SynthBundle(
        name="plane_floater", cloud=cloud, dataset=dataset, gt_depths=gt_depths,
        poses=poses, floater_indices=np.array([0]),
    )


def synth_scene(name: str, seed: int = 0, **overrides) -> SynthBundle:
    """Build one of the named fixtures; unknown names raise SplatError."""
    if name == "textured_box":
        return make_box_scene(seed=seed, **overrides)
    if name == "plane_floater":
        return make_plane_floater_scene(**overrides)
    if name == "translucent_slab":
        return make_translucent_slab_scene(seed=seed, **overrides)
    if name == "ring5":
        return make_ring_scene(seed=seed, **overrides)
    raise SplatError(f"unknown scene spec '{name}'; choose from {', '.join(SCENE_NAMES)}")


def save_bundle(bundle: SynthBundle, directory):
    """Write a bundle as a dataset directory (scene JSON, PNG, PFM, PMAP)."""
    from . import fileio

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_scene(directory / "scene.json", bundle.cloud, bundle.dataset.cameras)
    for v, img in enumerate(bundle.dataset.images):
        fileio.write_png(directory / f"image_{v:03d}.png", img)
    for v, d in enumerate(bundle.gt_depths):
        fileio.write_pfm(directory / f"depth_{v:03d}.pfm", d)
    if bundle.dataset.eval_cameras:
        save_scene(directory / "eval_cameras.json", GaussianCloud.empty(), bundle.dataset.eval_cameras)
        for v, img in enumerate(bundle.dataset.eval_images):
            fileio.write_png(directory / f"eval_image_{v:03d}.png", img)
        for v, d in enumerate(bundle.dataset.eval_depths):
            fileio.write_pfm(directory / f"eval_depth_{v:03d}.pfm", d)
    if bundle.dataset.pairs:
        with open(directory / "pairs.txt", "w") as f:
            f.write("# i j\n")
            for p in bundle.dataset.pairs:
                i, j = (p.i, p.j) if hasattr(p, "i") else p
                f.write(f"{i} {j}\n")
    for (i, j), prior in bundle.dataset.priors.items():
        fileio.write_pmap(directory / f"pmap_{i:03d}_{j:03d}.pmap", prior)
    if bundle.gt_scales:
        fileio.write_scale_table(directory / "gt_scales.txt", bundle.gt_scales)


def load_dataset(directory) -> tuple[GaussianCloud, SceneDataset]:
    """Read back a dataset directory written by save_bundle."""
    from . import fileio
    from .core import FormatError

    directory = Path(directory)
    cloud, cams = load_scene(directory / "scene.json")
    images = []
    for v in range(len(cams)):
        p = directory / f"image_{v:03d}.png"
        if not p.exists():
            raise FormatError(f"{p}: missing image for view {v}")
        images.append(fileio.read_png(p))
    pairs = []
    pair_file = directory / "pairs.txt"
    if pair_file.exists():
        for line in pair_file.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            i, j = (int(x) for x in line.split())
            pairs.append((i, j))
    priors = {}
    for p in sorted(directory.glob("pmap_*.pmap")):
        prior = fileio.read_pmap(p)
        priors[(prior.i, prior.j)] = prior
    eval_cams, eval_imgs, eval_depths = [], [], []
    eval_file = directory / "eval_cameras.json"
    if eval_file.exists():
        _, eval_cams = load_scene(eval_file)
        for v in range(len(eval_cams)):
            eval_imgs.append(fileio.read_png(directory / f"eval_image_{v:03d}.png"))
            dp = directory / f"eval_depth_{v:03d}.pfm"
            if dp.exists():
                eval_depths.append(fileio.read_pfm(dp))
    scale_file = directory / "gt_scales.txt"
    if scale_file.exists() and priors:
        for key, s in fileio.read_scale_table(scale_file).items():
            if key in priors:
                priors[key].scale = s
    dataset = SceneDataset(
        cameras=cams, images=images, pairs=pairs, priors=priors,
        eval_cameras=eval_cams, eval_images=eval_imgs, eval_depths=eval_depths,
    )
    return cloud, dataset
