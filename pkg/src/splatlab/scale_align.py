"""Global scale alignment of pairwise point-map priors.

A stereo prior predicts, per directed image pair (i, j), the points of both
images in camera i's frame at an arbitrary per-pair scale. The weighted
alignment residual over all pixels collapses exactly to 7 "equivalent
points" per pair via the eigendecomposition of a 7x7 Gram matrix, so the
global solve touches only 49 scalars per pair no matter the image size.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import InvalidParameterError, RigidTransform, SplatError

DEGENERATE_TOL = 1e-12
HUBER_WIDTH = 1e-3


@dataclass
class PairPrior:
    """One directed prior record: points of images i and j in frame i.

    X11 holds image i's own points, X21 image j's points, both H x W x 3 in
    camera i's frame and sharing one unknown scale. scale is filled by
    solve_scales (or a generator) and must be positive before use.
    """

    i: int
    j: int
    X11: np.ndarray
    X21: np.ndarray
    C11: np.ndarray
    C21: np.ndarray
    scale: float | None = None

    def __post_init__(self):
        self.X11 = np.asarray(self.X11, dtype=float)
        self.X21 = np.asarray(self.X21, dtype=float)
        self.C11 = np.asarray(self.C11, dtype=float)
        self.C21 = np.asarray(self.C21, dtype=float)
        if self.X11.ndim != 3 or self.X11.shape[2] != 3 or self.X21.ndim != 3 or self.X21.shape[2] != 3:
            raise InvalidParameterError("point maps must be H x W x 3")
        if self.C11.shape != self.X11.shape[:2] or self.C21.shape != self.X21.shape[:2]:
            raise InvalidParameterError("confidence maps must match their point maps")
        if np.any(self.C11 < 0) or np.any(self.C21 < 0):
            raise InvalidParameterError("confidences must be non-negative")
        if self.scale is not None and self.scale <= 0:
            raise InvalidParameterError("solved scale must be positive")


def pair_weight_map(c_a: np.ndarray, c_b: np.ndarray) -> np.ndarray:
    """Elementwise c_a*c_b/(c_a+c_b), zero where both vanish."""
    c_a = np.asarray(c_a, dtype=float)
    c_b = np.asarray(c_b, dtype=float)
    if c_a.shape != c_b.shape:
        raise InvalidParameterError("confidence maps must share a shape")
    total = c_a + c_b
    out = np.zeros_like(total)
    np.divide(c_a * c_b, total, out=out, where=total > 0)
    return out


@dataclass
class EquivalentPointSet:
    """7-point compression of one weighted point alignment problem.

    factor holds the 7 scaled eigenvector rows f_c with G = factor^T factor;
    the (w, x, y) views divide by the homogeneous component and are undefined
    on degenerate_columns, where the raw factor row is authoritative.
    """

    factor: np.ndarray  # (7, 7), rows are sqrt(eigval) * eigvector
    degenerate_columns: frozenset = field(default_factory=frozenset)

    @property
    def w(self) -> np.ndarray:
        return self.factor[:, 6].copy()

    @property
    def x(self) -> np.ndarray:
        return self._normalized(0)

    @property
    def y(self) -> np.ndarray:
        return self._normalized(3)

    def _normalized(self, offset: int) -> np.ndarray:
        out = np.empty((3, 7))
        for c in range(7):
            if c in self.degenerate_columns:
                out[:, c] = self.factor[c, offset : offset + 3]
            else:
                out[:, c] = self.factor[c, offset : offset + 3] / self.factor[c, 6]
        return out

    def gram(self) -> np.ndarray:
        return self.factor.T @ self.factor

    def quad_form(self, m: np.ndarray) -> float:
        """Evaluate || weights o (M [x, y, 1]^T) ||^2 for a 3x7 map M."""
        e = self.factor @ np.asarray(m, dtype=float).T
        return float(np.sum(e * e))

    def quad_form_grad(self, m: np.ndarray) -> np.ndarray:
        """d(quad_form)/dM = 2 M G."""
        return 2.0 * np.asarray(m, dtype=float) @ self.gram()


def compress(y1: np.ndarray, y2: np.ndarray, weights: np.ndarray) -> EquivalentPointSet:
    """Collapse N weighted point correspondences to 7 equivalent points.

    Builds the 7x7 Gram of [Y1, Y2, 1] under diag(weights^2) and
    eigendecomposes it; any affine pair evaluates identically on the
    compressed set and on the raw clouds.
    """
    y1 = np.asarray(y1, dtype=float).reshape(-1, 3)
    y2 = np.asarray(y2, dtype=float).reshape(-1, 3)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if y1.shape[0] != y2.shape[0] or weights.shape[0] != y1.shape[0]:
        raise InvalidParameterError("point sets and weights must have equal length")
    if y1.shape[0] < 1:
        raise InvalidParameterError("need at least one point")
    if np.any(weights < 0):
        raise InvalidParameterError("weights must be non-negative")

    p = np.concatenate([y1, y2, np.ones((y1.shape[0], 1))], axis=1)
    pw = p * weights[:, None]
    gram = pw.T @ pw
    eigval, eigvec = np.linalg.eigh(gram)
    eigval = np.clip(eigval, 0.0, None)  # SPSD by construction; absorb round-off
    factor = np.sqrt(eigval)[:, None] * eigvec.T
    # a column cannot be normalized when its scaled homogeneous component
    # vanishes (7th eigenvector entry ~ 0, or a zero eigenvalue)
    degenerate = frozenset(int(c) for c in range(7) if abs(factor[c, 6]) < DEGENERATE_TOL)
    return EquivalentPointSet(factor=factor, degenerate_columns=degenerate)


def _weight_blocks(rec_ij: PairPrior, rec_ji: PairPrior) -> tuple[np.ndarray, np.ndarray]:
    c_fwd = pair_weight_map(rec_ij.C11, rec_ji.C21)  # weights on image i's points
    c_bwd = pair_weight_map(rec_ji.C11, rec_ij.C21)  # weights on image j's points
    return c_fwd, c_bwd


def compress_pair(rec_ij: PairPrior, rec_ji: PairPrior) -> EquivalentPointSet:
    """Compress the full stacked two-image alignment system of one pair."""
    if (rec_ij.i, rec_ij.j) != (rec_ji.j, rec_ji.i):
        raise InvalidParameterError("records must be the two directions of one pair")
    if rec_ij.X11.shape != rec_ji.X21.shape or rec_ij.X21.shape != rec_ji.X11.shape:
        raise InvalidParameterError("mirrored records disagree on image grids")
    c_fwd, c_bwd = _weight_blocks(rec_ij, rec_ji)
    y1 = np.concatenate([rec_ij.X11.reshape(-1, 3), rec_ij.X21.reshape(-1, 3)])
    y2 = np.concatenate([rec_ji.X21.reshape(-1, 3), rec_ji.X11.reshape(-1, 3)])
    w = np.concatenate([c_fwd.ravel(), c_bwd.ravel()])
    return compress(y1, y2, w)


def _pair_map(s_ij, s_ji, t_i: RigidTransform, t_j: RigidTransform, scale_translations: bool):
    """Assemble the 3x7 map [A1, -A2, b] of the pairwise residual."""
    b = (s_ij * t_i.t - s_ji * t_j.t) if scale_translations else (t_i.t - t_j.t)
    m = np.concatenate([s_ij * t_i.R, -s_ji * t_j.R, b[:, None]], axis=1)
    d_ij = np.concatenate(
        [t_i.R, np.zeros((3, 3)), (t_i.t if scale_translations else np.zeros(3))[:, None]], axis=1
    )
    d_ji = np.concatenate(
        [np.zeros((3, 3)), -t_j.R, (-t_j.t if scale_translations else np.zeros(3))[:, None]], axis=1
    )
    return m, d_ij, d_ji


def pair_loss_eff(
    eq: EquivalentPointSet,
    s_ij: float,
    s_ji: float,
    t_i: RigidTransform,
    t_j: RigidTransform,
    scale_translations: bool = False,
) -> tuple[float, float, float]:
    """Pairwise alignment loss on the compressed system, with scale gradients.

    By default the scale acts on the points before the rigid transform
    (translations unscaled), which keeps s * X11[z] the metric depth. Set
    scale_translations=True to scale the full transform instead.
    """
    if s_ij <= 0 or s_ji <= 0:
        raise InvalidParameterError("scales must be positive")
    m, d_ij, d_ji = _pair_map(s_ij, s_ji, t_i, t_j, scale_translations)
    loss = eq.quad_form(m)
    dm = eq.quad_form_grad(m)
    return loss, float(np.sum(dm * d_ij)), float(np.sum(dm * d_ji))


def pair_loss_bruteforce(
    rec_ij: PairPrior,
    rec_ji: PairPrior,
    s_ij: float,
    s_ji: float,
    t_i: RigidTransform,
    t_j: RigidTransform,
    scale_translations: bool = False,
) -> float:
    """Direct per-pixel evaluation over both directed records (test oracle)."""
    c_fwd, c_bwd = _weight_blocks(rec_ij, rec_ji)

    def transformed(rec_pts, s, t):
        pts = rec_pts.reshape(-1, 3)
        if scale_translations:
            return s * t.apply(pts)
        return t.apply(s * pts)

    r1 = transformed(rec_ij.X11, s_ij, t_i) - transformed(rec_ji.X21, s_ji, t_j)
    r2 = transformed(rec_ij.X21, s_ij, t_i) - transformed(rec_ji.X11, s_ji, t_j)
    return float(
        np.sum(c_fwd.ravel() ** 2 * np.sum(r1 * r1, axis=1))
        + np.sum(c_bwd.ravel() ** 2 * np.sum(r2 * r2, axis=1))
    )


def select_anchor(i: int, priors: dict) -> tuple[int, int]:
    """Directed pair (i, a) with the largest summed confidence for image i.

    Ties go to the smallest partner index.
    """
    best = None
    best_score = -np.inf
    for key in sorted(k for k in priors if k[0] == i):
        score = float(np.sum(priors[key].C11))
        if score > best_score:
            best, best_score = key, score
    if best is None:
        raise InvalidParameterError(f"no prior pairs contain view {i}")
    return best


def _huber(r: np.ndarray, width: float):
    absr = np.abs(r)
    quad = absr < width
    rho = np.where(quad, r * r / (2 * width), absr - width / 2)
    drho = np.where(quad, r / width, np.sign(r))
    return rho, drho


def intra_loss(
    i: int,
    j: int,
    a: int,
    priors: dict,
    s_ij: float,
    s_ia: float,
    huber_width: float = HUBER_WIDTH,
    smooth: bool = True,
) -> tuple[float, float, float]:
    """Scale-consistency penalty of pair (i, j) against image i's anchor pair.

    Weighted L1 (Huber-smoothed by default) between the two scaled copies of
    image i's own point map. Returns (loss, d/ds_ij, d/ds_ia).
    """
    rec_ij = priors[(i, j)]
    rec_ia = priors[(i, a)]
    if rec_ij.X11.shape != rec_ia.X11.shape:
        raise InvalidParameterError("anchor and pair grids for one image must match")
    weight = pair_weight_map(rec_ia.C11, priors[(a, i)].C21)[:, :, None]
    diff = s_ij * rec_ij.X11 - s_ia * rec_ia.X11
    if smooth:
        rho, drho = _huber(diff, huber_width)
    else:
        rho, drho = np.abs(diff), np.sign(diff)
    loss = float(np.sum(weight * rho))
    d_ij = float(np.sum(weight * drho * rec_ij.X11))
    d_ia = -float(np.sum(weight * drho * rec_ia.X11))
    return loss, d_ij, d_ia


@dataclass
class ScaleSolution:
    scales: dict
    objective_trace: list
    pinned: list
    components: list
    converged: bool


def _components(views, pair_keys):
    parent = {v: v for v in views}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for i, j in pair_keys:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    groups = {}
    for v in views:
        groups.setdefault(find(v), []).append(v)
    return [sorted(g) for g in groups.values()]


def _closed_form_pair(eq: EquivalentPointSet, t_i, t_j, scale_translations: bool):
    """Minimizer of one pair's quadratic: 2x2 solve for (s_ij, s_ji).

    Only meaningful when translations are unscaled (the constant column then
    makes the quadratic strictly convex). Returns None when singular.
    """
    gram = eq.gram()
    m11, a1, a2 = _pair_map(1.0, 1.0, t_i, t_j, scale_translations)
    c = m11 - a1 - a2
    h11 = float(np.sum((a1 @ gram) * a1))
    h12 = float(np.sum((a1 @ gram) * a2))
    h22 = float(np.sum((a2 @ gram) * a2))
    det = h11 * h22 - h12 * h12
    if det <= 1e-18 * max(h11 * h22, 1e-30):
        return None
    r1 = -float(np.sum((a1 @ gram) * c))
    r2 = -float(np.sum((a2 @ gram) * c))
    s_ij = (h22 * r1 - h12 * r2) / det
    s_ji = (h11 * r2 - h12 * r1) / det
    return s_ij, s_ji


def _warm_start_homogeneous(keys, undirected, eq_sets, priors, poses, anchors, pinned):
    """Propagate closed-form ratios from the pinned records (scaled-transform
    convention, where only ratios are observable)."""
    edges = {}
    for i, j in undirected:
        gram = eq_sets[(i, j)].gram()
        _, a1, a2 = _pair_map(1.0, 1.0, poses[i], poses[j], True)
        denom = float(np.sum((a2 @ gram) * a2))
        if denom > 1e-18:
            zeta = -float(np.sum((a2 @ gram) * a1)) / denom
            if zeta > 0:
                edges[((i, j), (j, i))] = zeta
                edges[((j, i), (i, j))] = 1.0 / zeta
    for i, j in keys:
        a = anchors[i]
        if a == j:
            continue
        w = pair_weight_map(priors[(i, a)].C11, priors[(a, i)].C21)[:, :, None]
        x1, x2 = priors[(i, j)].X11, priors[(i, a)].X11
        denom = float(np.sum(w * x2 * x2))
        if denom > 1e-18:
            r = float(np.sum(w * x1 * x2)) / denom
            if r > 0:
                edges[((i, j), (i, a))] = r
                edges[((i, a), (i, j))] = 1.0 / r
    values = {k: 1.0 for k in pinned}
    frontier = list(pinned)
    while frontier:
        nxt = []
        for rec in frontier:
            for (src, dst), ratio in edges.items():
                if src == rec and dst not in values:
                    values[dst] = values[src] * ratio
                    nxt.append(dst)
        frontier = nxt
    return np.array([values.get(k, 1.0) for k in keys])


def solve_scales(
    priors: dict,
    poses: dict,
    steps: int = 500,
    lr: float = 1e-2,
    use_intra: bool = True,
    smooth_intra: bool = True,
    scale_translations: bool = False,
) -> ScaleSolution:
    """Recover all directed pair scales by adaptive-moment descent on u = log s.

    With the default point-scaling convention the camera baselines anchor the
    metric scale, every pair quadratic is strictly convex, and the solve
    starts from its closed-form per-pair minimizer; the reported pinned
    record then only names the normalization reference. Under
    scale_translations=True the objective is scale-homogeneous (all-zero
    scales would be a trivial minimum), so the highest-confidence directed
    record of each component is pinned to 1 and a ratio-propagation warm
    start seeds the rest. Steps that would increase the objective are
    rejected and retried smaller, keeping the accepted trace non-increasing.
    """
    keys = sorted(priors.keys())
    if not keys:
        raise InvalidParameterError("no prior records given")
    undirected = sorted({(min(i, j), max(i, j)) for i, j in keys})
    for i, j in undirected:
        if (i, j) not in priors or (j, i) not in priors:
            raise InvalidParameterError(f"pair ({i}, {j}) is missing one direction")

    views = sorted({v for k in keys for v in k})
    comps = _components(views, undirected)
    if len(comps) > 1:
        warnings.warn(f"pair graph has {len(comps)} components; solving each with its own gauge")

    conf_sum = {k: float(np.sum(priors[k].C11)) for k in keys}
    pinned = []
    for comp in comps:
        comp_keys = [k for k in keys if k[0] in comp]
        pinned.append(max(comp_keys, key=lambda k: (conf_sum[k], (-k[0], -k[1]))))

    eq_sets = {(i, j): compress_pair(priors[(i, j)], priors[(j, i)]) for i, j in undirected}
    anchors = {v: select_anchor(v, priors)[1] for v in views}

    index = {k: n for n, k in enumerate(keys)}
    if scale_translations:
        free = np.array([k not in pinned for k in keys])
        s0 = _warm_start_homogeneous(keys, undirected, eq_sets, priors, poses, anchors, pinned)
    else:
        free = np.ones(len(keys), dtype=bool)
        s0 = np.ones(len(keys))
        for i, j in undirected:
            sol = _closed_form_pair(eq_sets[(i, j)], poses[i], poses[j], scale_translations)
            if sol is not None:
                s0[index[(i, j)]], s0[index[(j, i)]] = sol
    u = np.log(np.clip(s0, 1e-6, None))

    def objective(u_vec):
        s = np.exp(u_vec)
        total = 0.0
        grad_s = np.zeros_like(s)
        for i, j in undirected:
            ij, ji = index[(i, j)], index[(j, i)]
            value, d_ij, d_ji = pair_loss_eff(
                eq_sets[(i, j)], s[ij], s[ji], poses[i], poses[j], scale_translations
            )
            total += value
            grad_s[ij] += d_ij
            grad_s[ji] += d_ji
            if use_intra:
                for a_view, b_view in ((i, j), (j, i)):
                    anchor = anchors[a_view]
                    k_pair = index[(a_view, b_view)]
                    k_anchor = index[(a_view, anchor)]
                    value, d_pair, d_anchor = intra_loss(
                        a_view, b_view, anchor, priors, s[k_pair], s[k_anchor], smooth=smooth_intra
                    )
                    total += value
                    grad_s[k_pair] += d_pair
                    grad_s[k_anchor] += d_anchor
        if not np.isfinite(total):
            raise SplatError(f"scale objective became non-finite (components {comps})")
        return total, grad_s * s  # chain through s = exp(u)

    m1 = np.zeros_like(u)
    m2 = np.zeros_like(u)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    current, grad_u = objective(u)
    trace = [current]
    shrink = 1.0
    t = 0
    for _ in range(steps):
        t += 1
        # cosine annealing lets the iterate settle well below the tolerance
        step_lr = shrink * lr * 0.5 * (1.0 + np.cos(np.pi * (t - 1) / steps))
        m1 = beta1 * m1 + (1 - beta1) * grad_u
        m2 = beta2 * m2 + (1 - beta2) * grad_u**2
        m1_hat = m1 / (1 - beta1**t)
        m2_hat = m2 / (1 - beta2**t)
        delta = step_lr * m1_hat / (np.sqrt(m2_hat) + eps)
        u_new = u - np.where(free, delta, 0.0)
        new_value, new_grad = objective(u_new)
        if new_value <= current:
            u, current, grad_u = u_new, new_value, new_grad
            trace.append(current)
        else:
            shrink = max(shrink * 0.5, 1e-5)

    scales = {k: float(np.exp(u[index[k]])) for k in keys}
    for k, rec in priors.items():
        rec.scale = scales[k]
    return ScaleSolution(
        scales=scales,
        objective_trace=trace,
        pinned=pinned,
        components=comps,
        converged=len(trace) > 1,
    )
