"""Executable floater analysis: pseudo-equilibrium, gradient collapse, and
the deadlock-break experiment.

A floater cluster is probed by M rays against ground-truth colors. When the
signs of the color errors cancel across rays, the loss gradient of the
cluster's accumulated color vanishes, and with it (through the chain rule on
the shared blend geometry) the opacity gradients, trapping a geometrically
wrong cluster at near-zero color loss. A depth-consistency term breaks the
trap because the cluster's depth error is large and sign-consistent.

The 'perfectly reconstructed rest of the scene' is an analytic backdrop, so
the cluster carries the only optimizable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, GaussianCloud
from .render import Backdrop, RenderOptions, RenderPath, render, render_backward
from .trainer import SceneDataset, TrainConfig, train


@dataclass
class FloaterScenario:
    """M probe rays through a floater cluster with per-ray target colors."""

    cloud: GaussianCloud
    camera: Camera
    gt_colors: np.ndarray     # (M, 3)
    ray_rows: np.ndarray      # (M,) pixel row per ray
    ray_cols: np.ndarray      # (M,) pixel column per ray

    @property
    def n_rays(self) -> int:
        return self.gt_colors.shape[0]


def make_probe_scenario(
    m: int = 16,
    delta: float = 0.0,
    base_color=(0.5, 0.5, 0.5),
    alpha: float = 0.7,
    balanced: bool = True,
    seed: int = 0,
) -> FloaterScenario:
    """Single-Gaussian cluster spanning a 1 x M pixel strip.

    With balanced=True the ground-truth colors sit symmetrically delta above
    and below the cluster's accumulated color, which realizes the sign
    cancellation exactly; otherwise all targets sit delta below it.
    """
    if m < 1 or m % 2:
        raise ValueError("m must be a positive even ray count")
    cam = Camera(fx=float(m), fy=float(m), cx=(m - 1) / 2, cy=0.0, R=np.eye(3),
                 t=np.zeros(3), width=m, height=1)
    # huge lateral scale keeps the response nearly constant along the strip
    cloud = GaussianCloud(
        mu=np.array([[0.0, 0.0, 2.0]]),
        alpha=np.array([alpha]),
        alpha_aux=np.array([1.0]),
        color=np.asarray(base_color, dtype=float)[None],
        scale=np.array([[50.0, 50.0, 0.05]]),
        rot=np.array([[1.0, 0.0, 0.0, 0.0]]),
    )
    rows = np.zeros(m, dtype=int)
    cols = np.arange(m, dtype=int)
    scenario = FloaterScenario(cloud, cam, np.zeros((m, 3)), rows, cols)
    c_f = accumulated_floater_color(scenario)
    signs = np.where(np.arange(m) % 2 == 0, 1.0, -1.0) if balanced else -np.ones(m)
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(0.5, 1.0, m) if not balanced else np.ones(m)
    scenario.gt_colors = np.clip(c_f - (signs * jitter * delta)[:, None], 0.0, 1.0)
    return scenario


def accumulated_floater_color(scenario: FloaterScenario) -> np.ndarray:
    """Per-ray alpha-blended contribution color of the cluster alone (M, 3)."""
    out = render(scenario.cloud, scenario.camera, RenderPath.GEOMETRIC, RenderOptions.grad_check())
    return out.color[scenario.ray_rows, scenario.ray_cols]


def equilibrium_statistic(scenario: FloaterScenario) -> np.ndarray:
    """Per-channel sum over rays of sign(c_f - c_gt); near zero means the
    cluster sits at the pseudo-equilibrium."""
    c_f = accumulated_floater_color(scenario)
    return np.sign(c_f - scenario.gt_colors).sum(axis=0)


def color_gradient_of_cluster(scenario: FloaterScenario, loss: str = "l1") -> np.ndarray:
    """Analytic d(loss)/d(c_f) per channel, averaged formulation."""
    c_f = accumulated_floater_color(scenario)
    diff = c_f - scenario.gt_colors
    n = diff.size
    if loss == "l1":
        return np.sign(diff).sum(axis=0) / n
    if loss == "mse":
        return 2.0 * diff.sum(axis=0) / n
    raise ValueError(f"unknown loss '{loss}'")


def _probe_grad_image(scenario: FloaterScenario, loss: str) -> np.ndarray:
    c_f = accumulated_floater_color(scenario)
    diff = c_f - scenario.gt_colors
    n = diff.size
    grad = np.zeros((scenario.camera.height, scenario.camera.width, 3))
    if loss == "l1":
        grad[scenario.ray_rows, scenario.ray_cols] = np.sign(diff) / n
    elif loss == "mse":
        grad[scenario.ray_rows, scenario.ray_cols] = 2.0 * diff / n
    else:
        raise ValueError(f"unknown loss '{loss}'")
    return grad


def probe_loss_value(scenario: FloaterScenario, loss: str = "l1") -> float:
    c_f = accumulated_floater_color(scenario)
    diff = c_f - scenario.gt_colors
    if loss == "l1":
        return float(np.mean(np.abs(diff)))
    if loss == "mse":
        return float(np.mean(diff**2))
    raise ValueError(f"unknown loss '{loss}'")


def opacity_gradient_probe(scenario: FloaterScenario, loss: str = "l1") -> np.ndarray:
    """|d loss / d alpha_k| for every cluster Gaussian under the ray loss."""
    grad_img = _probe_grad_image(scenario, loss)
    grads = render_backward(
        scenario.cloud, scenario.camera, RenderPath.GEOMETRIC,
        grad_img, None, RenderOptions.grad_check(),
    )
    return np.abs(grads.alpha)


# ---------------------------------------------------------------------------
# Deadlock-break experiment: two views of a textured plane with one floater
# ---------------------------------------------------------------------------

PLANE_DEPTH = 5.0
FLOATER_DEPTH = 2.5


def _look_at_pose(position: np.ndarray, target: np.ndarray):
    """World-to-camera rotation/translation, +z toward the target."""
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, fwd)
    right /= np.linalg.norm(right)
    upv = np.cross(fwd, right)
    r_c2w = np.stack([right, upv, fwd], axis=1)
    r = r_c2w.T
    return r, -r @ position


def _plane_color(x: np.ndarray, y: np.ndarray, patch_x=(-2.4, -0.5), patch_color=(0.45, 0.55, 0.5)):
    """Smooth plane texture with one uniform patch (the floater's backdrop)."""
    base = np.stack(
        [
            0.5 + 0.3 * np.sin(1.3 * x) * np.cos(0.9 * y),
            0.5 + 0.3 * np.cos(1.1 * x + 0.4) * np.sin(0.8 * y),
            0.5 + 0.3 * np.sin(0.7 * x + 1.0) * np.sin(1.2 * y + 0.5),
        ],
        axis=-1,
    )
    inside = (x >= patch_x[0]) & (x <= patch_x[1])
    base[inside] = patch_color
    return np.clip(base, 0.0, 1.0)


def _plane_view(cam: Camera):
    """Analytic color/depth of the z = PLANE_DEPTH plane seen by a camera."""
    us, vs = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    dirs_cam = np.stack(
        [(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us, dtype=float)], axis=-1
    )
    r_c2w = cam.R.T
    origin = cam.camera_center()
    dirs_world = dirs_cam @ r_c2w.T
    t = (PLANE_DEPTH - origin[2]) / dirs_world[:, :, 2]
    pts = origin + t[:, :, None] * dirs_world
    color = _plane_color(pts[:, :, 0], pts[:, :, 1])
    return color, t  # camera-frame depth equals t because dirs_cam has z = 1


def make_deadlock_scene(image_size: int = 32, floater_alpha: float = 0.8, patch_color=(0.45, 0.55, 0.5)):
    """Two-camera plane scene with one color-camouflaged floater.

    View 0 sees the floater dead ahead against a uniform plane patch of the
    floater's own color, so every color gradient vanishes identically. View 1
    is shifted and toed in far enough that the floater leaves its frustum
    while the plane stays visible; only depth consistency can expose it.
    """
    f = image_size * 1.0
    c = (image_size - 1) / 2
    p0 = np.array([0.0, 0.0, 0.0])
    target0 = np.array([-1.2, 0.0, PLANE_DEPTH])
    r0, t0 = _look_at_pose(p0, target0)
    cam0 = Camera(f, f, c, c, r0, t0, image_size, image_size)
    p1 = np.array([2.4, 0.0, 0.0])
    target1 = np.array([0.9, 0.0, PLANE_DEPTH])
    r1, t1 = _look_at_pose(p1, target1)
    cam1 = Camera(f, f, c, c, r1, t1, image_size, image_size)

    floater_mu = np.array([-0.7, 0.0, FLOATER_DEPTH])
    scale_w = 0.10
    pix0, z0 = cam0.project(floater_mu)
    pix1, z1 = cam1.project(floater_mu)
    assert 0 <= pix0[0] < image_size and 0 <= pix0[1] < image_size and z0 > 0
    margin = 3.0 * f * scale_w / z1 + 1.0 if z1 > 0 else 0.0
    assert not (z1 > 0 and -margin <= pix1[0] < image_size + margin), (
        "floater must fall outside the second frustum with margin"
    )

    cloud = GaussianCloud(
        mu=floater_mu[None],
        alpha=np.array([floater_alpha]),
        alpha_aux=np.array([1.0]),
        color=np.asarray(patch_color, dtype=float)[None],
        scale=np.array([[scale_w, scale_w, 0.05]]),
        rot=np.array([[1.0, 0.0, 0.0, 0.0]]),
    )

    cams = [cam0, cam1]
    colors, depths = zip(*(_plane_view(cam) for cam in cams))
    dataset = SceneDataset(
        cameras=cams,
        images=list(colors),
        backdrops=[Backdrop(color=c_, depth=d_) for c_, d_ in zip(colors, depths)],
        pairs=[(0, 1)],
    )
    return cloud, dataset


@dataclass
class DeadlockReport:
    alpha_color_only: float
    alpha_with_consis: float
    grad_ratio_l1: float
    grad_ratio_mse: float
    steps: int
    traces: dict


def deadlock_break_experiment(
    steps: int = 2000,
    lambda_consis: float = 0.05,
    image_size: int = 32,
    seed: int = 0,
    scene=None,
) -> DeadlockReport:
    """Run color-only vs color+consistency training on the deadlock scene.

    Color-only optimization leaves the floater's opacity in place (its color
    error is identically zero); adding the depth-consistency term drives the
    opacity to transparency. Also reports the equilibrium vs non-equilibrium
    opacity-gradient magnitude ratio at the initial state.
    """
    ratios = {}
    for loss in ("l1", "mse"):
        eq = make_probe_scenario(m=16, delta=1e-4, balanced=True, seed=seed)
        ref = make_probe_scenario(m=16, delta=0.4, balanced=False, seed=seed)
        g_eq = opacity_gradient_probe(eq, loss).max()
        g_ref = opacity_gradient_probe(ref, loss).max()
        ratios[loss] = float(g_eq / g_ref)

    traces = {}
    finals = {}
    for name, lam in (("color_only", 0.0), ("with_consis", lambda_consis)):
        cloud, dataset = scene if scene is not None else make_deadlock_scene(image_size)
        config = TrainConfig(
            iterations=steps,
            lambda_geo=1.0 if lam > 0 else 0.0,
            lambda_consis=lam,
            lambda_prior=0.0,
            lambda_s=0.1,
            geo_start_iter=0,
            seed=seed,
            metrics_every=max(steps // 20, 1),
        )
        result = train(cloud.copy(), dataset, config)
        finals[name] = float(result.cloud.alpha.mean())
        traces[name] = result.metrics

    return DeadlockReport(
        alpha_color_only=finals["color_only"],
        alpha_with_consis=finals["with_consis"],
        grad_ratio_l1=ratios["l1"],
        grad_ratio_mse=ratios["mse"],
        steps=steps,
        traces=traces,
    )
