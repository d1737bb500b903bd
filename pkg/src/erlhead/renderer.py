"""Emission-absorption quadrature and per-branch feature/density maps."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fields import FieldConfig, MotionFrame, deform_forward, head_field_forward, static_field_forward
from .geometry import RayBundle, sample_depths
from .tensor import ParamStore, Tensor

HEAD = "head"
STATIC = "static"


@dataclass
class RenderedMaps:
    feature: Tensor  # (H, W, C)
    density: Tensor  # (H, W, 1), accumulated opacity in [0, 1]


def integrate_rays(sigma, features, depths, t_far: float) -> tuple[Tensor, Tensor]:
    """Composite S samples per ray.

    sigma (R, S), features (R, S, C), depths (R, S) strictly ascending.
    Returns features (R, C) and opacity (R, 1). The last interval runs to
    ``t_far``.
    """
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    features = features if isinstance(features, Tensor) else Tensor(features)
    depths = np.asarray(depths, dtype=np.float64)
    if depths.ndim == 1:
        depths = depths[None]
    if np.any(np.diff(depths, axis=-1) <= 0):
        raise ValueError("integrate_rays: sample depths must be strictly ascending")
    if np.any(depths[:, -1] > t_far):
        raise ValueError("integrate_rays: samples lie beyond t_far")
    deltas = np.concatenate([np.diff(depths, axis=-1), t_far - depths[:, -1:]], axis=-1)
    optical = sigma * deltas.astype(sigma.dtype)
    alpha = 1.0 - T.exp(-optical)
    trans = T.exp(-T.cumsum(optical, axis=-1, exclusive=True))
    weights = trans * alpha
    feat = T.sum_(T.reshape(weights, weights.shape + (1,)) * features, axis=-2)
    opacity = T.sum_(weights, axis=-1, keepdims=True)
    return feat, opacity


def integrate_ray(depths, sigma, features, t_far: float) -> tuple[Tensor, Tensor]:
    """Single-ray form: depths (S,), sigma (S,), features (S, C)."""
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(np.asarray(sigma, dtype=np.float64))
    features = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
    feat, opacity = integrate_rays(T.reshape(sigma, (1, -1)), T.reshape(features, (1,) + features.shape),
                                   np.asarray(depths)[None], t_far)
    return T.reshape(feat, (feat.shape[-1],)), T.reshape(opacity, (1,))


def transmittance(sigma: np.ndarray, depths: np.ndarray, t_far: float) -> np.ndarray:
    deltas = np.concatenate([np.diff(depths, axis=-1), t_far - depths[..., -1:]], axis=-1)
    return np.exp(-(np.cumsum(sigma * deltas, axis=-1) - sigma * deltas))


def _field_eval(store: ParamStore, cfg: FieldConfig, rays: RayBundle, depths: np.ndarray,
                frame: MotionFrame, branch: str, deform_enabled: bool):
    dt = store[f"{branch}.sigma.w"].dtype
    pts = (rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]).astype(dt)
    dirs = rays.directions.astype(dt)
    if branch == HEAD:
        return head_field_forward(Tensor(pts), frame.expression.astype(dt), dirs, store, cfg)
    x = Tensor(pts)
    if deform_enabled:
        x = x + deform_forward(x, frame.pose, frame.jaw, store, cfg)
    return static_field_forward(x, dirs, store, cfg)


def render_rays(store: ParamStore, cfg: FieldConfig, rays: RayBundle, frame: MotionFrame, branch: str,
                n_samples: int, deform_enabled: bool = True, stratified: bool = False, seed=None):
    depths = sample_depths(len(rays), rays.t_near, rays.t_far, n_samples, stratified, seed)
    sigma, feat = _field_eval(store, cfg, rays, depths, frame, branch, deform_enabled)
    return integrate_rays(sigma, feat, depths, rays.t_far)


def render_feature_maps(store: ParamStore, cfg: FieldConfig, rays: RayBundle, frame: MotionFrame,
                        branch: str, n_samples: int = 64, deform_enabled: bool = True,
                        stratified: bool = False, seed=None, chunk: int | None = None,
                        workers: int = 1) -> RenderedMaps:
    """Render one branch over a full ray grid.

    Rays must come from the camera matching ``branch`` (frame pose for the
    head, first-frame pose for the static branch). With ``chunk`` set the
    rays are evaluated in independent batches without recording a graph,
    optionally on ``workers`` threads; the result does not depend on either.
    """
    if branch not in (HEAD, STATIC):
        raise ValueError(f"unknown branch {branch!r}")
    h, w = rays.height, rays.width
    if len(rays) != h * w:
        raise ValueError(f"ray count {len(rays)} does not match grid {h}x{w}")
    if chunk is None:
        feat, opac = render_rays(store, cfg, rays, frame, branch, n_samples, deform_enabled, stratified, seed)
        return RenderedMaps(T.reshape(feat, (h, w, feat.shape[-1])), T.reshape(opac, (h, w, 1)))

    depths = sample_depths(len(rays), rays.t_near, rays.t_far, n_samples, stratified, seed)
    starts = list(range(0, len(rays), chunk))

    def run(s):
        with T.no_grad():
            sub = rays.subset(slice(s, s + chunk))
            sig, f = _field_eval(store, cfg, sub, depths[s:s + chunk], frame, branch, deform_enabled)
            fo, op = integrate_rays(sig, f, depths[s:s + chunk], rays.t_far)
            return fo.data, op.data

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    feat = np.concatenate([p[0] for p in parts]).reshape(h, w, -1)
    opac = np.concatenate([p[1] for p in parts]).reshape(h, w, 1)
    return RenderedMaps(Tensor(feat), Tensor(opac))
