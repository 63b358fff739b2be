"""Multi-view depth consistency: pair selection, warping, and depth losses.

Depth losses here are meant for the geometric-path renders only. The warp is
a forward scatter: source pixels are unprojected with their rendered depth,
reprojected into the target view and written to the nearest pixel, nearer
depth winning collisions. Projection coordinates are treated as constants for
gradient purposes; only depth values carry gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Camera, InvalidParameterError

MIN_COVISIBLE = 30          # strictly more shared tracks than this
MIN_ANGLE_DEG = 16.0
MAX_ANGLE_DEG = 60.0
MAX_HOMOGRAPHY_INLIERS = 0.8  # strictly below
RANSAC_ITERS = 1000
RANSAC_THRESH_PX = 3.0


@dataclass(frozen=True)
class ViewPair:
    i: int
    j: int
    n_covisible: int
    rel_rotation_deg: float
    homography_inlier_frac: float

    def __post_init__(self):
        if self.i == self.j:
            raise InvalidParameterError("a view pair needs two distinct views")


@dataclass
class FeatureMatches:
    """Sparse correspondences: per-pair pixel matches and per-view track ids."""

    pair_pixels: dict = field(default_factory=dict)   # (i, j) -> (pix_i (N,2), pix_j (N,2))
    view_tracks: dict = field(default_factory=dict)   # i -> 1-D array of 3D track ids

    def correspondences(self, i: int, j: int):
        if (i, j) in self.pair_pixels:
            return self.pair_pixels[(i, j)]
        if (j, i) in self.pair_pixels:
            b, a = self.pair_pixels[(j, i)]
            return a, b
        return np.zeros((0, 2)), np.zeros((0, 2))

    def covisible_count(self, i: int, j: int) -> int:
        ti = np.asarray(self.view_tracks.get(i, ()))
        tj = np.asarray(self.view_tracks.get(j, ()))
        return int(np.intersect1d(ti, tj).size)


def relative_rotation_deg(cam_i: Camera, cam_j: Camera) -> float:
    r_rel = cam_j.R @ cam_i.R.T
    c = np.clip((np.trace(r_rel) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def _dlt_homography(p: np.ndarray, q: np.ndarray) -> np.ndarray | None:
    """Direct linear transform from 4+ correspondences, Hartley-normalized."""

    def normalize(x):
        c = x.mean(axis=0)
        d = np.sqrt(((x - c) ** 2).sum(axis=1)).mean()
        if d < 1e-12:
            return None, None
        s = np.sqrt(2.0) / d
        T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
        return (x - c) * s, T

    pn, tp = normalize(p)
    qn, tq = normalize(q)
    if pn is None or qn is None:
        return None
    n = p.shape[0]
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = pn
    a[0::2, 2] = 1.0
    a[0::2, 6:8] = -pn * qn[:, 0:1]
    a[0::2, 8] = -qn[:, 0]
    a[1::2, 3:5] = pn
    a[1::2, 5] = 1.0
    a[1::2, 6:8] = -pn * qn[:, 1:2]
    a[1::2, 8] = -qn[:, 1]
    try:
        _, s, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    h = vt[-1].reshape(3, 3)
    if abs(h[2, 2]) < 1e-15 and abs(np.linalg.det(h)) < 1e-15:
        return None
    return np.linalg.inv(tq) @ h @ tp


def homography_inlier_fraction(
    pix_a: np.ndarray,
    pix_b: np.ndarray,
    iters: int = RANSAC_ITERS,
    thresh: float = RANSAC_THRESH_PX,
    seed: int = 0,
) -> float:
    """Best RANSAC inlier fraction of a 4-point DLT homography.

    Returns 1.0 for degenerate inputs with fewer than 4 correspondences, so
    callers treat them as homography-consistent (pair rejected).
    """
    pix_a = np.asarray(pix_a, dtype=float)
    pix_b = np.asarray(pix_b, dtype=float)
    n = pix_a.shape[0]
    if n < 4:
        return 1.0
    rng = np.random.default_rng(seed)
    ones = np.ones((n, 1))
    pa_h = np.hstack([pix_a, ones])
    best = 0
    for _ in range(iters):
        sample = rng.choice(n, size=4, replace=False)
        h = _dlt_homography(pix_a[sample], pix_b[sample])
        if h is None:
            continue
        proj = pa_h @ h.T
        w = proj[:, 2]
        ok = np.abs(w) > 1e-12
        err = np.full(n, np.inf)
        err[ok] = np.hypot(
            proj[ok, 0] / w[ok] - pix_b[ok, 0], proj[ok, 1] / w[ok] - pix_b[ok, 1]
        )
        best = max(best, int(np.sum(err < thresh)))
    return best / n


def select_pairs(matches: FeatureMatches, cams: list[Camera], seed: int = 0) -> list[ViewPair]:
    """Keep pairs with enough covisibility, a moderate baseline rotation, and
    non-degenerate (non-homographic) relative motion."""
    kept = []
    n_views = len(cams)
    for i in range(n_views):
        for j in range(i + 1, n_views):
            n_cov = matches.covisible_count(i, j)
            if n_cov <= MIN_COVISIBLE:
                continue
            angle = relative_rotation_deg(cams[i], cams[j])
            if not (MIN_ANGLE_DEG <= angle <= MAX_ANGLE_DEG):
                continue
            pa, pb = matches.correspondences(i, j)
            frac = homography_inlier_fraction(pa, pb, seed=seed)
            if frac >= MAX_HOMOGRAPHY_INLIERS:
                continue
            kept.append(ViewPair(i, j, n_cov, angle, frac))
    return kept


def _warp_full(depth_src: np.ndarray, cam_src: Camera, cam_dst: Camera):
    """Forward-scatter warp with bookkeeping for the gradient chain.

    Returns (warped, mask, winner_src_flat, winner_dzdD): per written target
    pixel, the flat source index that won and d(warped depth)/d(source depth).
    """
    h_s, w_s = depth_src.shape
    h_d, w_d = cam_dst.height, cam_dst.width
    warped = np.zeros((h_d, w_d))
    mask = np.zeros((h_d, w_d), dtype=bool)
    winner_src = np.full((h_d, w_d), -1, dtype=np.int64)
    winner_a = np.zeros((h_d, w_d))

    vs, us = np.nonzero(depth_src > 0)
    if vs.size == 0:
        return warped, mask, winner_src, winner_a
    d = depth_src[vs, us]
    dirs = np.stack(
        [(us - cam_src.cx) / cam_src.fx, (vs - cam_src.cy) / cam_src.fy, np.ones_like(d)],
        axis=1,
    )
    x_world = (dirs * d[:, None] - cam_src.t) @ cam_src.R
    x_dst = x_world @ cam_dst.R.T + cam_dst.t
    z = x_dst[:, 2]
    front = z > 0
    if not front.any():
        return warped, mask, winner_src, winner_a

    u_d = np.round(cam_dst.fx * x_dst[front, 0] / z[front] + cam_dst.cx).astype(np.int64)
    v_d = np.round(cam_dst.fy * x_dst[front, 1] / z[front] + cam_dst.cy).astype(np.int64)
    inb = (u_d >= 0) & (u_d < w_d) & (v_d >= 0) & (v_d < h_d)
    if not inb.any():
        return warped, mask, winner_src, winner_a

    src_flat = (vs * w_s + us)[front][inb]
    z_in = z[front][inb]
    u_in, v_in = u_d[inb], v_d[inb]
    # d(z_dst)/d(depth_src): z component of R_dst R_src^T applied to the ray
    rel = cam_dst.R @ cam_src.R.T
    a = (dirs[front][inb] @ rel[2])

    # write farthest first so the nearest depth survives; ties keep the
    # smallest source index
    order = np.lexsort((-src_flat, -z_in))
    tgt = v_in[order] * w_d + u_in[order]
    warped.ravel()[tgt] = z_in[order]
    mask.ravel()[tgt] = True
    winner_src.ravel()[tgt] = src_flat[order]
    winner_a.ravel()[tgt] = a[order]
    return warped, mask, winner_src, winner_a


def warp_depth(depth_src: np.ndarray, cam_src: Camera, cam_dst: Camera):
    """Warp a depth map into another view's grid; returns (warped, mask)."""
    depth_src = np.asarray(depth_src, dtype=float)
    if depth_src.shape != (cam_src.height, cam_src.width):
        raise InvalidParameterError("depth map does not match its camera")
    warped, mask, _, _ = _warp_full(depth_src, cam_src, cam_dst)
    return warped, mask


def consis_loss(
    depth_i: np.ndarray,
    depth_j: np.ndarray,
    cam_i: Camera,
    cam_j: Camera,
) -> tuple[float, np.ndarray, np.ndarray, dict]:
    """Symmetric masked mean-L1 between warped and directly rendered depths.

    Returns (loss, grad_i, grad_j, info). info['empty'] flags the case where
    neither direction has any validly projected overlap.
    """
    depth_i = np.asarray(depth_i, dtype=float)
    depth_j = np.asarray(depth_j, dtype=float)
    grad_i = np.zeros_like(depth_i)
    grad_j = np.zeros_like(depth_j)
    loss = 0.0
    any_valid = False

    for d_src, d_dst, c_src, c_dst, g_src, g_dst in (
        (depth_i, depth_j, cam_i, cam_j, grad_i, grad_j),
        (depth_j, depth_i, cam_j, cam_i, grad_j, grad_i),
    ):
        warped, mask, w_src, w_a = _warp_full(d_src, c_src, c_dst)
        valid = mask & (d_dst > 0)
        n = int(valid.sum())
        if n == 0:
            continue
        any_valid = True
        resid = warped[valid] - d_dst[valid]
        loss += float(np.mean(np.abs(resid)))
        s = np.sign(resid) / n
        g_dst[valid] -= s  # direct term on the compared map
        # chain through the warp back into the source map
        np.add.at(g_src.ravel(), w_src[valid], s * w_a[valid])

    return loss, grad_i, grad_j, {"empty": not any_valid}


def prior_loss(depth_s: np.ndarray, prior) -> tuple[float, np.ndarray, dict]:
    """Confidence-weighted mean absolute deviation against a scaled prior depth.

    prior must expose X11 (H, W, 3), C11 (H, W) and a solved positive scale;
    prior depth is scale * X11[..., 2], compared where it is positive and
    normalized by the count of such pixels.
    """
    depth_s = np.asarray(depth_s, dtype=float)
    d_prior = prior.scale * np.asarray(prior.X11, dtype=float)[:, :, 2]
    if d_prior.shape != depth_s.shape:
        raise InvalidParameterError("prior grid does not match the depth map")
    conf = np.asarray(prior.C11, dtype=float)
    valid = d_prior > 0
    n = int(valid.sum())
    grad = np.zeros_like(depth_s)
    if n == 0:
        return 0.0, grad, {"empty": True}
    resid = depth_s - d_prior
    loss = float(np.sum(conf[valid] * np.abs(resid[valid])) / n)
    grad[valid] = conf[valid] * np.sign(resid[valid]) / n
    return loss, grad, {"empty": False}


def geometry_loss(
    depths: dict,
    cams: dict,
    pairs,
    priors: dict | None,
    lambda_consis: float = 0.05,
    lambda_prior: float = 0.005,
):
    """Weighted sum of consistency and prior terms over the selected pairs.

    depths maps view index -> geometric-path depth map; priors maps a
    directed (i, j) -> PairPrior or is None. Returns (value, grads per view).
    """
    total = 0.0
    grads = {v: np.zeros_like(d) for v, d in depths.items()}
    for pair in pairs:
        i, j = (pair.i, pair.j) if hasattr(pair, "i") else pair
        if lambda_consis > 0:
            c, gi, gj, _ = consis_loss(depths[i], depths[j], cams[i], cams[j])
            total += lambda_consis * c
            grads[i] += lambda_consis * gi
            grads[j] += lambda_consis * gj
        if lambda_prior > 0 and priors:
            for a, b in ((i, j), (j, i)):
                if (a, b) in priors:
                    p, gp, _ = prior_loss(depths[a], priors[(a, b)])
                    total += lambda_prior * p
                    grads[a] += lambda_prior * gp
    return total, grads
