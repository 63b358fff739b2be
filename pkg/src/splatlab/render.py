"""Differentiable forward rendering of color and depth on two paths.

The geometric path blends with the base opacity alpha alone; the appearance
path blends with alpha_aux * alpha. Both share projection, sorting and the
front-to-back compositing rule; the backward pass replays the forward blend
and produces analytic gradients for every Gaussian parameter.

Splats are rasterized exactly (no tiles): each projected Gaussian touches the
pixels inside its 3-sigma bounding box, and pixels composite front to back in
global depth order. Slow by GPU standards, bit-reproducible by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import (
    Camera,
    GaussianCloud,
    InvalidParameterError,
    NEAR_PLANE,
    quat_rot_jacobian_many,
    quat_to_rot_many,
)

# Documented constants of the splatting convention.
DILATION = 0.3          # pixels^2 added to every projected covariance
SIGMA_CLAMP = 0.99      # per-sample opacity ceiling
SIGMA_SKIP = 1.0 / 255  # contributions below this are skipped while blending
TAU_STOP = 1e-4         # early termination threshold on transmittance
CULL_NSIGMA = 3.0       # bounding-ellipse cut-off in screen space


class RenderPath(Enum):
    GEOMETRIC = "geometric"
    APPEARANCE = "appearance"


@dataclass
class RenderOptions:
    """Switches for the blending shortcuts.

    grad_check() turns all of them off so the forward map is smooth and
    finite differences agree with the analytic backward pass.
    """

    early_stop: bool = True
    sigma_skip: bool = True
    cull: bool = True

    @classmethod
    def grad_check(cls) -> "RenderOptions":
        return cls(early_stop=False, sigma_skip=False, cull=False)


@dataclass
class Backdrop:
    """Analytic background composited behind all splats with weight tau_final."""

    color: np.ndarray   # (3,) or (H, W, 3)
    depth: np.ndarray   # scalar or (H, W)

    def color_map(self, h: int, w: int) -> np.ndarray:
        c = np.asarray(self.color, dtype=float)
        return np.broadcast_to(c, (h, w, 3)) if c.ndim == 1 else c

    def depth_map(self, h: int, w: int) -> np.ndarray:
        d = np.asarray(self.depth, dtype=float)
        return np.broadcast_to(d, (h, w)) if d.ndim == 0 else d


@dataclass
class Splat2D:
    center2d: np.ndarray
    cov2d: np.ndarray
    z: float
    gauss_index: int


@dataclass
class RenderOutput:
    color: np.ndarray        # (H, W, 3)
    depth: np.ndarray        # (H, W), unnormalized expected depth
    accum_alpha: np.ndarray  # (H, W), sum of blend weights
    transmittance: np.ndarray
    path: RenderPath

    def normalized_depth(self, min_alpha: float = 0.5) -> np.ndarray:
        """Expected depth divided by accumulated alpha where coverage exists."""
        covered = self.accum_alpha > min_alpha
        out = np.zeros_like(self.depth)
        out[covered] = self.depth[covered] / self.accum_alpha[covered]
        return out


@dataclass
class ParamGrads:
    mu: np.ndarray
    alpha: np.ndarray
    alpha_aux: np.ndarray
    color: np.ndarray
    scale: np.ndarray
    rot: np.ndarray

    @classmethod
    def zeros(cls, k: int) -> "ParamGrads":
        return cls(np.zeros((k, 3)), np.zeros(k), np.zeros(k), np.zeros((k, 3)),
                   np.zeros((k, 3)), np.zeros((k, 4)))

    def __iadd__(self, other: "ParamGrads") -> "ParamGrads":
        self.mu += other.mu
        self.alpha += other.alpha
        self.alpha_aux += other.alpha_aux
        self.color += other.color
        self.scale += other.scale
        self.rot += other.rot
        return self

    def scaled(self, f: float) -> "ParamGrads":
        return ParamGrads(self.mu * f, self.alpha * f, self.alpha_aux * f,
                          self.color * f, self.scale * f, self.rot * f)


class _Projected:
    """Screen-space state for the visible splats, sorted front to back."""

    def __init__(self, cloud: GaussianCloud, cam: Camera):
        mu = cloud.mu
        x_cam = mu @ cam.R.T + cam.t
        keep = x_cam[:, 2] > NEAR_PLANE
        idx = np.nonzero(keep)[0]
        x_cam = x_cam[idx]
        z = x_cam[:, 2]
        # stable sort: depth ascending, Gaussian index breaks ties
        order = np.lexsort((idx, z))
        self.idx = idx[order]
        self.x_cam = x_cam[order]
        self.z = z[order]

        x, y, zz = self.x_cam[:, 0], self.x_cam[:, 1], self.x_cam[:, 2]
        self.center = np.stack(
            [cam.fx * x / zz + cam.cx, cam.fy * y / zz + cam.cy], axis=1
        )
        m = len(self.idx)
        J = np.zeros((m, 2, 3))
        J[:, 0, 0] = cam.fx / zz
        J[:, 0, 2] = -cam.fx * x / zz**2
        J[:, 1, 1] = cam.fy / zz
        J[:, 1, 2] = -cam.fy * y / zz**2
        self.J = J

        rot_mats = quat_to_rot_many(cloud.rot[self.idx])
        s2 = cloud.scale[self.idx] ** 2
        sigma_world = np.einsum("mab,mb,mcb->mac", rot_mats, s2, rot_mats)
        self.sigma_cam = np.einsum("ab,mbc,dc->mad", cam.R, sigma_world, cam.R)
        cov = np.einsum("mab,mbc,mdc->mad", J, self.sigma_cam, J)
        cov[:, 0, 0] += DILATION
        cov[:, 1, 1] += DILATION
        self.cov = cov
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
        self.det = det
        inv = np.empty_like(cov)
        inv[:, 0, 0] = cov[:, 1, 1] / det
        inv[:, 1, 1] = cov[:, 0, 0] / det
        inv[:, 0, 1] = -cov[:, 0, 1] / det
        inv[:, 1, 0] = -cov[:, 1, 0] / det
        self.inv_cov = inv
        self.rot_mats = rot_mats

    def __len__(self) -> int:
        return len(self.idx)

    def box(self, m: int, h: int, w: int, cull: bool):
        """Pixel bounding box of splat m: (row slice, col slice), empty -> None."""
        if not cull:
            return slice(0, h), slice(0, w)
        c = self.cov[m]
        half_tr = 0.5 * (c[0, 0] + c[1, 1])
        lam_max = half_tr + np.sqrt(max((0.5 * (c[0, 0] - c[1, 1])) ** 2 + c[0, 1] ** 2, 0.0))
        r = int(np.ceil(CULL_NSIGMA * np.sqrt(lam_max)))
        cx, cy = self.center[m]
        x0 = max(int(np.floor(cx)) - r, 0)
        x1 = min(int(np.ceil(cx)) + r + 1, w)
        y0 = max(int(np.floor(cy)) - r, 0)
        y1 = min(int(np.ceil(cy)) + r + 1, h)
        if x0 >= x1 or y0 >= y1:
            return None
        return slice(y0, y1), slice(x0, x1)


def project_splats(cloud: GaussianCloud, cam: Camera) -> list[Splat2D]:
    """Project all Gaussians in front of the near plane, sorted by depth."""
    p = _Projected(cloud, cam)
    return [
        Splat2D(p.center[m].copy(), p.cov[m].copy(), float(p.z[m]), int(p.idx[m]))
        for m in range(len(p))
    ]


def opacity_at(splat: Splat2D, alpha_eff: float, pixel: np.ndarray) -> float:
    """Sample opacity of one splat at a pixel, clamped to SIGMA_CLAMP."""
    if not (0.0 <= alpha_eff <= 1.0):
        raise InvalidParameterError(f"alpha_eff {alpha_eff} outside [0, 1]")
    c = splat.cov2d
    det = c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0]
    assert det > 0, "projected covariance must stay positive definite"
    d = np.asarray(pixel, dtype=float) - splat.center2d
    quad = (c[1, 1] * d[0] ** 2 - (c[0, 1] + c[1, 0]) * d[0] * d[1] + c[0, 0] * d[1] ** 2) / det
    return min(alpha_eff * float(np.exp(-0.5 * quad)), SIGMA_CLAMP)


def _effective_alpha(cloud: GaussianCloud, path: RenderPath) -> np.ndarray:
    if path is RenderPath.GEOMETRIC:
        return cloud.alpha
    return cloud.alpha_aux * cloud.alpha


def _pixel_grid(rows: slice, cols: slice):
    ys = np.arange(rows.start, rows.stop, dtype=float)
    xs = np.arange(cols.start, cols.stop, dtype=float)
    return xs[None, :], ys[:, None]


def _splat_response(p: _Projected, m: int, rows: slice, cols: slice):
    """exp term and pixel offsets of splat m over a pixel box."""
    xs, ys = _pixel_grid(rows, cols)
    dx = xs - p.center[m, 0]
    dy = ys - p.center[m, 1]
    ic = p.inv_cov[m]
    quad = ic[0, 0] * dx**2 + (ic[0, 1] + ic[1, 0]) * dx * dy + ic[1, 1] * dy**2
    g = np.exp(-0.5 * quad)
    return g, dx, dy


def render(
    cloud: GaussianCloud,
    cam: Camera,
    path: RenderPath,
    opts: RenderOptions | None = None,
    background: Backdrop | None = None,
) -> RenderOutput:
    """Alpha-blend the cloud front to back over every pixel.

    Per pixel: weight_k = sigma_k * tau_k with tau the running transmittance;
    color/depth are weight-blended, accum_alpha is the weight sum. With a
    backdrop, its color and depth enter with weight tau_final.
    """
    opts = opts or RenderOptions()
    h, w = cam.height, cam.width
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    accum = np.zeros((h, w))
    tau = np.ones((h, w))

    p = _Projected(cloud, cam)
    a_eff = _effective_alpha(cloud, path)
    for m in range(len(p)):
        box = p.box(m, h, w, opts.cull)
        if box is None:
            continue
        rows, cols = box
        g, _, _ = _splat_response(p, m, rows, cols)
        sigma = np.minimum(a_eff[p.idx[m]] * g, SIGMA_CLAMP)
        tau_box = tau[rows, cols]
        contrib = np.ones_like(sigma, dtype=bool)
        if opts.sigma_skip:
            contrib &= sigma >= SIGMA_SKIP
        if opts.early_stop:
            contrib &= tau_box >= TAU_STOP
        weight = np.where(contrib, sigma * tau_box, 0.0)
        color[rows, cols] += weight[:, :, None] * cloud.color[p.idx[m]]
        depth[rows, cols] += weight * p.z[m]
        accum[rows, cols] += weight
        tau[rows, cols] = np.where(contrib, tau_box * (1.0 - sigma), tau_box)

    if background is not None:
        color += tau[:, :, None] * background.color_map(h, w)
        depth += tau * background.depth_map(h, w)

    return RenderOutput(color=color, depth=depth, accum_alpha=accum, transmittance=tau, path=path)


def render_backward(
    cloud: GaussianCloud,
    cam: Camera,
    path: RenderPath,
    grad_color: np.ndarray | None,
    grad_depth: np.ndarray | None,
    opts: RenderOptions | None = None,
    background: Backdrop | None = None,
) -> ParamGrads:
    """Analytic gradients of sum(grad_color * color) + sum(grad_depth * depth).

    Replays the forward blend with identical skip/termination decisions, then
    walks splats back to front using the classic suffix-sum recurrence. The
    geometric path never touches alpha_aux, so its gradient there is exactly
    zero by construction.
    """
    opts = opts or RenderOptions()
    h, w = cam.height, cam.width
    gc = np.zeros((h, w, 3)) if grad_color is None else np.asarray(grad_color, dtype=float)
    gd = np.zeros((h, w)) if grad_depth is None else np.asarray(grad_depth, dtype=float)

    p = _Projected(cloud, cam)
    a_eff = _effective_alpha(cloud, path)
    n = len(p)

    # forward replay, recording per-splat responses and decisions
    tau = np.ones((h, w))
    records: list[tuple | None] = []
    for m in range(n):
        box = p.box(m, h, w, opts.cull)
        if box is None:
            records.append(None)
            continue
        rows, cols = box
        g, dx, dy = _splat_response(p, m, rows, cols)
        sigma = np.minimum(a_eff[p.idx[m]] * g, SIGMA_CLAMP)
        tau_box = tau[rows, cols]
        contrib = np.ones_like(sigma, dtype=bool)
        if opts.sigma_skip:
            contrib &= sigma >= SIGMA_SKIP
        if opts.early_stop:
            contrib &= tau_box >= TAU_STOP
        tau[rows, cols] = np.where(contrib, tau_box * (1.0 - sigma), tau_box)
        records.append((rows, cols, sigma, g, contrib, dx, dy))

    # suffix accumulator; a backdrop acts like a final layer of weight tau
    suffix = np.zeros((h, w))
    if background is not None:
        g_bg = np.einsum("hwc,hwc->hw", gc, background.color_map(h, w)) + gd * background.depth_map(h, w)
        suffix = g_bg * tau

    d_center = np.zeros((n, 2))
    d_cov = np.zeros((n, 2, 2))
    d_z = np.zeros(n)
    d_aeff = np.zeros(n)
    d_col = np.zeros((n, 3))

    tau_run = tau  # transmittance after the last splat, recovered backwards
    for m in range(n - 1, -1, -1):
        if records[m] is None:
            continue
        rows, cols, sigma, g, contrib, dx, dy = records[m]
        if not contrib.any():
            continue
        gc_box = gc[rows, cols]
        gd_box = gd[rows, cols]
        ck = cloud.color[p.idx[m]]
        gk = gc_box @ ck + gd_box * p.z[m]

        tau_after = tau_run[rows, cols]
        one_minus = 1.0 - sigma
        tau_k = np.where(contrib, tau_after / one_minus, tau_after)
        weight = np.where(contrib, sigma * tau_k, 0.0)
        d_sigma = np.where(contrib, tau_k * gk - suffix[rows, cols] / one_minus, 0.0)

        suffix[rows, cols] += gk * weight
        tau_run[rows, cols] = tau_k

        d_col[m] = np.einsum("hwc,hw->c", gc_box, weight)
        d_z[m] = float(np.sum(gd_box * weight))
        live = contrib & (a_eff[p.idx[m]] * g < SIGMA_CLAMP)  # clamp kills the local grad
        d_sig_live = np.where(live, d_sigma, 0.0)
        d_aeff[m] = float(np.sum(g * d_sig_live))
        d_expo = a_eff[p.idx[m]] * d_sig_live * g

        ic = p.inv_cov[m]
        mdx = ic[0, 0] * dx + ic[0, 1] * dy
        mdy = ic[1, 0] * dx + ic[1, 1] * dy
        d_center[m, 0] = float(np.sum(d_expo * mdx))
        d_center[m, 1] = float(np.sum(d_expo * mdy))
        d_cov[m, 0, 0] = 0.5 * float(np.sum(d_expo * mdx * mdx))
        d_cov[m, 0, 1] = 0.5 * float(np.sum(d_expo * mdx * mdy))
        d_cov[m, 1, 0] = d_cov[m, 0, 1]
        d_cov[m, 1, 1] = 0.5 * float(np.sum(d_expo * mdy * mdy))

    return _chain_to_params(cloud, cam, path, p, d_center, d_cov, d_z, d_aeff, d_col)


def _chain_to_params(cloud, cam, path, p: _Projected, d_center, d_cov, d_z, d_aeff, d_col) -> ParamGrads:
    """Propagate screen-space gradients through projection and covariance."""
    out = ParamGrads.zeros(len(cloud))
    n = len(p)
    if n == 0:
        return out

    x, y, z = p.x_cam[:, 0], p.x_cam[:, 1], p.x_cam[:, 2]

    d_xcam = np.einsum("mab,ma->mb", p.J, d_center)
    d_xcam[:, 2] += d_z

    d_sigma_cam = np.einsum("mai,mab,mbj->mij", p.J, d_cov, p.J)
    d_J = 2.0 * np.einsum("mab,mbi,mij->maj", d_cov, p.J, p.sigma_cam)

    fz2x = -cam.fx / z**2
    fz2y = -cam.fy / z**2
    d_xcam[:, 0] += d_J[:, 0, 2] * fz2x
    d_xcam[:, 1] += d_J[:, 1, 2] * fz2y
    d_xcam[:, 2] += (
        d_J[:, 0, 0] * fz2x
        + d_J[:, 1, 1] * fz2y
        + d_J[:, 0, 2] * (2 * cam.fx * x / z**3)
        + d_J[:, 1, 2] * (2 * cam.fy * y / z**3)
    )

    d_mu = d_xcam @ cam.R
    d_sigma_world = np.einsum("ai,mab,bj->mij", cam.R, d_sigma_cam, cam.R)

    s = cloud.scale[p.idx]
    rot_mats = p.rot_mats
    d_rotmat = 2.0 * np.einsum("mab,mbi->mai", d_sigma_world, rot_mats) * (s**2)[:, None, :]
    inner = np.einsum("mai,mab,mbj->mij", rot_mats, d_sigma_world, rot_mats)
    d_scale = 2.0 * s * inner[:, np.arange(3), np.arange(3)]

    jq = quat_rot_jacobian_many(cloud.rot[p.idx])
    d_quat = np.einsum("mjab,mab->mj", jq, d_rotmat)

    np.add.at(out.mu, p.idx, d_mu)
    np.add.at(out.color, p.idx, d_col)
    np.add.at(out.scale, p.idx, d_scale)
    np.add.at(out.rot, p.idx, d_quat)
    if path is RenderPath.GEOMETRIC:
        np.add.at(out.alpha, p.idx, d_aeff)
    else:
        np.add.at(out.alpha, p.idx, d_aeff * cloud.alpha_aux[p.idx])
        np.add.at(out.alpha_aux, p.idx, d_aeff * cloud.alpha[p.idx])
    return out
