"""End-to-end optimization loop combining color and geometric losses.

The total objective is the dual-path color loss plus lambda_geo times the
geometry loss (depth consistency and depth priors), where every geometric
term reads only the geometric-path depth maps. Parameters are optimized
under stabilizing reparameterizations: opacities through a logistic, scales
through a log, quaternions renormalized after each step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import GaussianCloud, InvalidParameterError
from .geometry import consis_loss, prior_loss
from .optim import Adam
from .photometric import ColorLossWeights, color_loss, psnr
from .render import Backdrop, ParamGrads, RenderOptions, RenderPath, render, render_backward

_LOGIT_EPS = 1e-6


@dataclass
class TrainConfig:
    iterations: int = 30_000
    lambda_geo: float = 1.0
    lambda_consis: float = 0.05
    lambda_prior: float = 0.005
    lambda_dssim: float = 0.2
    lambda_s: float = 0.1
    lr_mu: float = 1.6e-4
    lr_color: float = 2.5e-3
    lr_alpha: float = 0.05
    lr_alpha_aux: float = 0.05
    lr_scale: float = 5e-3
    lr_rot: float = 1e-3
    mu_lr_final_ratio: float = 0.01  # exponential decay target for positions
    spatial_scale: float = 1.0
    seed: int = 0
    pairs_per_step: int = 1
    geo_start_iter: int = 500
    metrics_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidParameterError("iterations must be >= 1")
        for name in ("lambda_geo", "lambda_consis", "lambda_prior", "lambda_dssim", "lambda_s"):
            if getattr(self, name) < 0:
                raise InvalidParameterError(f"{name} must be >= 0")

    def color_weights(self) -> ColorLossWeights:
        return ColorLossWeights(self.lambda_dssim, self.lambda_s)


@dataclass
class SceneDataset:
    cameras: list
    images: list
    backdrops: list | None = None
    pairs: list = field(default_factory=list)
    priors: dict = field(default_factory=dict)
    eval_cameras: list = field(default_factory=list)
    eval_images: list = field(default_factory=list)
    eval_depths: list = field(default_factory=list)
    eval_backdrops: list = field(default_factory=list)

    def backdrop(self, view: int) -> Backdrop | None:
        return self.backdrops[view] if self.backdrops else None


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, _LOGIT_EPS, 1.0 - _LOGIT_EPS)
    return np.log(p / (1.0 - p))


def cloud_to_params(cloud: GaussianCloud) -> dict:
    """Raw optimization parameters for a cloud (copies, reparameterized)."""
    return {
        "mu": cloud.mu.copy(),
        "alpha": _logit(cloud.alpha),
        "alpha_aux": _logit(cloud.alpha_aux),
        "color": cloud.color.copy(),
        "scale": np.log(cloud.scale),
        "rot": cloud.rot.copy(),
    }


def params_to_cloud(params: dict) -> GaussianCloud:
    return GaussianCloud(
        params["mu"].copy(),
        1.0 / (1.0 + np.exp(-params["alpha"])),
        1.0 / (1.0 + np.exp(-params["alpha_aux"])),
        params["color"].copy(),
        np.exp(params["scale"]),
        params["rot"] / np.linalg.norm(params["rot"], axis=1, keepdims=True),
    )


def grads_to_params(grads: ParamGrads, cloud: GaussianCloud) -> dict:
    """Chain parameter-space gradients through the reparameterizations."""
    return {
        "mu": grads.mu,
        "alpha": grads.alpha * cloud.alpha * (1.0 - cloud.alpha),
        "alpha_aux": grads.alpha_aux * cloud.alpha_aux * (1.0 - cloud.alpha_aux),
        "color": grads.color,
        "scale": grads.scale * cloud.scale,
        "rot": grads.rot,
    }


def total_loss(
    cloud: GaussianCloud,
    dataset: SceneDataset,
    view: int,
    config: TrainConfig,
    pair=None,
    opts: RenderOptions | None = None,
) -> tuple[float, ParamGrads, dict]:
    """One batch of the full objective: color on the training view plus
    (optionally) geometric terms on one selected pair.

    Geometric losses touch only the geometric-path depths; their gradients
    therefore never reach alpha_aux.
    """
    opts = opts or RenderOptions()
    weights = config.color_weights()

    renders: dict = {}

    def rendered(v: int, path: RenderPath):
        key = (v, path)
        if key not in renders:
            renders[key] = render(cloud, dataset.cameras[v], path, opts, dataset.backdrop(v))
        return renders[key]

    # (view, path) -> [grad_color or None, grad_depth or None]
    pending: dict = {}

    def add_grad(v: int, path: RenderPath, g_color=None, g_depth=None):
        slot = pending.setdefault((v, path), [None, None])
        if g_color is not None:
            slot[0] = g_color if slot[0] is None else slot[0] + g_color
        if g_depth is not None:
            slot[1] = g_depth if slot[1] is None else slot[1] + g_depth

    out_o = rendered(view, RenderPath.APPEARANCE)
    out_s = rendered(view, RenderPath.GEOMETRIC)
    c_value, grad_o, grad_s = color_loss(out_o, out_s, dataset.images[view], weights)
    add_grad(view, RenderPath.APPEARANCE, g_color=grad_o)
    add_grad(view, RenderPath.GEOMETRIC, g_color=grad_s)

    parts = {"color": c_value, "consis": 0.0, "prior": 0.0}
    if pair is not None and config.lambda_geo > 0:
        i, j = (pair.i, pair.j) if hasattr(pair, "i") else pair
        if config.lambda_consis > 0:
            d_i = rendered(i, RenderPath.GEOMETRIC).depth
            d_j = rendered(j, RenderPath.GEOMETRIC).depth
            value, g_i, g_j, _ = consis_loss(d_i, d_j, dataset.cameras[i], dataset.cameras[j])
            parts["consis"] = value
            w = config.lambda_geo * config.lambda_consis
            add_grad(i, RenderPath.GEOMETRIC, g_depth=w * g_i)
            add_grad(j, RenderPath.GEOMETRIC, g_depth=w * g_j)
        if config.lambda_prior > 0 and dataset.priors:
            w = config.lambda_geo * config.lambda_prior
            for a, b in ((i, j), (j, i)):
                rec = dataset.priors.get((a, b))
                if rec is None:
                    continue
                value, g_a, _ = prior_loss(rendered(a, RenderPath.GEOMETRIC).depth, rec)
                parts["prior"] += value
                add_grad(a, RenderPath.GEOMETRIC, g_depth=w * g_a)

    grads = ParamGrads.zeros(len(cloud))
    for (v, path), (g_color, g_depth) in pending.items():
        grads += render_backward(
            cloud, dataset.cameras[v], path, g_color, g_depth, opts, dataset.backdrop(v)
        )

    total = parts["color"] + config.lambda_geo * (
        config.lambda_consis * parts["consis"] + config.lambda_prior * parts["prior"]
    )
    parts["total"] = total
    return total, grads, parts


def make_optimizer(config: TrainConfig) -> Adam:
    return Adam(
        lr={
            "mu": config.lr_mu * config.spatial_scale,
            "alpha": config.lr_alpha,
            "alpha_aux": config.lr_alpha_aux,
            "color": config.lr_color,
            "scale": config.lr_scale,
            "rot": config.lr_rot,
        }
    )


# gradients at or below rounding noise do not feed the moments; otherwise the
# scale-free Adam update would amplify them to full learning-rate steps
GRAD_DEADBAND = 1e-12


def step(params: dict, grads: dict, optimizer: Adam, config: TrainConfig, iteration: int = 0) -> dict:
    """Apply one optimizer step with the parameter-group conventions.

    Non-finite gradients skip the update (with a diagnostic). Quaternions are
    renormalized and colors clamped to [0, 1] after the update.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            warnings.warn(f"non-finite gradient in group '{name}' at iteration {iteration}; step skipped")
            return params
    grads = {n: np.where(np.abs(g) > GRAD_DEADBAND, g, 0.0) for n, g in grads.items()}
    decay = config.mu_lr_final_ratio ** (iteration / max(config.iterations, 1))
    optimizer.step(params, grads, lr_scale={"mu": decay})
    params["rot"] /= np.linalg.norm(params["rot"], axis=1, keepdims=True)
    np.clip(params["color"], 0.0, 1.0, out=params["color"])
    return params


@dataclass
class TrainResult:
    cloud: GaussianCloud
    metrics: list
    config: TrainConfig


def evaluate_psnr(cloud: GaussianCloud, cameras, images, backdrops=None) -> float:
    values = []
    for idx, (cam, img) in enumerate(zip(cameras, images)):
        bd = backdrops[idx] if backdrops else None
        out = render(cloud, cam, RenderPath.APPEARANCE, background=bd)
        values.append(psnr(np.clip(out.color, 0.0, 1.0), img))
    return float(np.mean(values)) if values else float("nan")


def train(
    cloud: GaussianCloud,
    dataset: SceneDataset,
    config: TrainConfig,
    checkpoint_dir=None,
    log=None,
) -> TrainResult:
    """Run the full loop; returns the trained cloud plus a metrics table.

    Training views are visited in seeded random permutations; one pair from
    the selected set is taken round-robin per iteration once geometric losses
    activate (iteration >= geo_start_iter).
    """
    if config.lambda_geo > 0 and config.lambda_prior > 0 and dataset.pairs and not dataset.priors:
        raise InvalidParameterError(
            "lambda_prior > 0 but the dataset has no point-map priors; "
            "set lambda_prior=0 or supply priors"
        )
    rng = np.random.default_rng(config.seed)
    params = cloud_to_params(cloud)
    optimizer = make_optimizer(config)
    n_views = len(dataset.cameras)
    metrics: list[dict] = []
    view_order = rng.permutation(n_views)
    view_ptr = 0
    pair_ptr = 0

    for it in range(config.iterations):
        if view_ptr >= n_views:
            view_order = rng.permutation(n_views)
            view_ptr = 0
        view = int(view_order[view_ptr])
        view_ptr += 1

        pair = None
        if dataset.pairs and it >= config.geo_start_iter and config.lambda_geo > 0:
            pair = dataset.pairs[pair_ptr % len(dataset.pairs)]
            pair_ptr += config.pairs_per_step

        current = params_to_cloud(params)
        value, grads, parts = total_loss(current, dataset, view, config, pair)
        step(params, grads_to_params(grads, current), optimizer, config, it)

        if config.metrics_every and (it % config.metrics_every == 0 or it == config.iterations - 1):
            row = {"iteration": it, **parts}
            if dataset.eval_cameras:
                row["psnr"] = evaluate_psnr(
                    params_to_cloud(params), dataset.eval_cameras, dataset.eval_images,
                    dataset.eval_backdrops or None,
                )
            metrics.append(row)
            if log:
                log(row)
        if checkpoint_dir and config.checkpoint_every and it and it % config.checkpoint_every == 0:
            from .core import save_scene

            save_scene(f"{checkpoint_dir}/checkpoint_{it:06d}.json", params_to_cloud(params), dataset.cameras)

    return TrainResult(cloud=params_to_cloud(params), metrics=metrics, config=config)
