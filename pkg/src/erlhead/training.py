"""Dual-branch NeRF pipeline: losses, per-frame rendering and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .fields import FieldConfig, MotionFrame, init_nerf_fields
from .fusion import (DEFAULT_ALPHA, binomial_kernel, compose_rgba, fuse_maps, identity_kernel, init_rgba,
                     init_upsampler, upsample)
from .geometry import Intrinsics, generate_rays, pose_to_camera
from .optim import TrainConfig, fill_missing_grads, step_with_config
from .renderer import HEAD, STATIC, render_feature_maps
from .tensor import ParamStore, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    intrinsics: Intrinsics = dc_field(default_factory=Intrinsics)
    n_samples: int = 64
    stratified: bool = False
    upsample_blocks: int = 1
    fusion_alpha: float = DEFAULT_ALPHA
    blur: str = "binomial"  # binomial | identity
    perceptual_channels: tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        if not 0 <= self.upsample_blocks <= 3:
            raise ValueError("upsample_blocks must be between 0 and 3")
        if self.blur not in ("binomial", "identity"):
            raise ValueError("blur must be 'binomial' or 'identity'")

    @property
    def kernel(self) -> np.ndarray:
        return binomial_kernel(3) if self.blur == "binomial" else identity_kernel()

    @property
    def output_size(self) -> int:
        return self.intrinsics.height * 2 ** self.upsample_blocks


def init_pipeline(cfg: PipelineConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_nerf_fields(store, cfg.field, rng)
    channels = cfg.field.feature_dim + 1
    init_upsampler(store, channels, cfg.upsample_blocks, rng)
    init_rgba(store, channels, rng)
    return store


# ------------------------------------------------------------------ losses
def photometric_loss(render, gt, m_h, m_s, beta_h: float = 1.0, beta_s: float = 1.0) -> Tensor:
    """Mean over all pixels and channels of (beta_h*M_h + beta_s*M_s) * (R - I)^2."""
    render = render if isinstance(render, Tensor) else Tensor(render)
    gt = np.asarray(gt)
    m_h, m_s = np.asarray(m_h), np.asarray(m_s)
    if render.shape != gt.shape or m_h.shape[:2] != gt.shape[:2] or m_s.shape[:2] != gt.shape[:2]:
        raise T.ShapeError("photometric_loss", render.shape, gt.shape, m_h.shape, m_s.shape)
    weight = (beta_h * m_h + beta_s * m_s).astype(render.dtype)
    if weight.ndim == 2:
        weight = weight[..., None]
    return T.mean(weight * (render - gt.astype(render.dtype)) ** 2)


def init_perceptual_proxy(seed: int, channels=(8, 16, 32)) -> list[np.ndarray]:
    """Frozen random 3x3 filters, He-scaled, one bank per stride-2 stage."""
    rng = np.random.default_rng(seed)
    banks, c_in = [], 3
    for c_out in channels:
        banks.append(rng.normal(0, math.sqrt(2.0 / (9 * c_in)), (3, 3, c_in, c_out)).astype(np.float32))
        c_in = c_out
    return banks


def conv2d(x: Tensor, weight: np.ndarray, stride: int = 1) -> Tensor:
    """3x3 (or kxk) convolution, zero padding k//2, channel-last."""
    k = weight.shape[0]
    p = k // 2
    h, w, c = x.shape
    xp = T.pad2d(x, p, mode="constant")
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    taps = [xp[a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride]
            for a in range(k) for b in range(k)]
    cols = T.concat(taps, axis=-1)
    return cols @ weight.reshape(k * k * c, -1).astype(x.dtype)


def proxy_features(img: Tensor, banks) -> list[Tensor]:
    feats, h = [], img
    for bank in banks:
        h = T.relu(conv2d(h, bank, stride=2))
        feats.append(h)
    return feats


def perceptual_proxy_loss(render, gt, banks) -> Tensor:
    """Sum over stages of the mean squared feature difference."""
    render = render if isinstance(render, Tensor) else Tensor(render)
    gt = Tensor(np.asarray(gt, dtype=render.dtype))
    if render.shape != gt.shape:
        raise T.ShapeError("perceptual_proxy_loss", render.shape, gt.shape)
    with T.no_grad():
        target = [f.data for f in proxy_features(gt, banks)]
    total = None
    for fr, ft in zip(proxy_features(render, banks), target):
        term = T.mean((fr - ft) ** 2)
        total = term if total is None else total + term
    return total


# ------------------------------------------------------------------ forward
@dataclass
class FrameRender:
    image: Tensor
    head: object
    static: object | None
    fused_feature: Tensor
    fused_density: Tensor


def static_pose(frame: MotionFrame, first_pose, tcfg: TrainConfig) -> np.ndarray:
    if not tcfg.deform and tcfg.static_camera == "pose":
        return frame.pose
    return np.asarray(first_pose)


def render_frame(store: ParamStore, cfg: PipelineConfig, frame: MotionFrame, first_pose, background,
                 head_mask=None, tcfg: TrainConfig = TrainConfig(), seed=None, chunk: int | None = None,
                 workers: int = 1) -> FrameRender:
    """Both branches -> fusion -> upsampling -> RGBA over ``background``.

    Without ``head_mask`` the mask is taken from the head opacity (>= 0.5).
    """
    intr = cfg.intrinsics
    kw = dict(n_samples=cfg.n_samples, stratified=cfg.stratified, seed=seed, chunk=chunk, workers=workers)
    head_rays = generate_rays(pose_to_camera(frame.pose, intr), intr.near, intr.far)
    head = render_feature_maps(store, cfg.field, head_rays, frame, HEAD, **kw)
    static = None
    if tcfg.dual_branch:
        static_rays = generate_rays(pose_to_camera(static_pose(frame, first_pose, tcfg), intr), intr.near, intr.far)
        static = render_feature_maps(store, cfg.field, static_rays, frame, STATIC, deform_enabled=tcfg.deform, **kw)
        if head_mask is None:
            head_mask = (head.density.data >= 0.5).astype(np.float32)
        f_g, d_g = fuse_maps(head.feature, head.density, static.feature, static.density, head_mask,
                             cfg.fusion_alpha)
    else:
        f_g, d_g = head.feature, head.density
    x = T.concat([f_g, d_g], axis=-1)
    x = upsample(x, store, cfg.upsample_blocks, cfg.kernel)
    image = compose_rgba(x, store, background)
    return FrameRender(image, head, static, f_g, d_g)


def render_image(store: ParamStore, cfg: PipelineConfig, frame: MotionFrame, first_pose, background,
                 head_mask=None, tcfg: TrainConfig = TrainConfig(), chunk: int = 1024,
                 workers: int = 1) -> np.ndarray:
    with T.no_grad():
        out = render_frame(store, cfg, frame, first_pose, background, head_mask, tcfg,
                           chunk=chunk, workers=workers)
    return out.image.data


# ------------------------------------------------------------------ training
@dataclass
class LossRow:
    iteration: int
    photometric: float
    perceptual: float
    total: float


def frame_loss(store: ParamStore, cfg: PipelineConfig, tcfg: TrainConfig, scene, index: int, banks,
               seed=None):
    frame = scene.frames[index]
    mask_lo = scene.head_mask_at(index, cfg.intrinsics.height)
    out = render_frame(store, cfg, frame, scene.frames[0].pose, scene.background, mask_lo, tcfg, seed=seed)
    l_pho = photometric_loss(out.image, scene.images[index], scene.head_masks[index], scene.static_masks[index],
                             tcfg.beta_h, tcfg.beta_s)
    if tcfg.perceptual and tcfg.perceptual_weight > 0:
        l_per = perceptual_proxy_loss(out.image, scene.images[index], banks) * tcfg.perceptual_weight
        total = l_pho + l_per
    else:
        l_per = None
        total = l_pho
    return l_pho, l_per, total


def train_dbf_nerf(scene, cfg: PipelineConfig, tcfg: TrainConfig, store: ParamStore | None = None,
                   iters: int | None = None, on_log: Callable[[LossRow], None] | None = None):
    """Train on ``scene`` (frames visited round-robin). Returns the store and
    the logged loss rows (loss measured before each update)."""
    if len(scene.images) and scene.images.shape[1] != cfg.output_size:
        raise ValueError(f"scene images are {scene.images.shape[1]}px but the pipeline renders {cfg.output_size}px")
    store = init_pipeline(cfg, tcfg.seed) if store is None else store
    banks = init_perceptual_proxy(tcfg.seed + 1, cfg.perceptual_channels)
    iters = tcfg.iters if iters is None else iters
    rows: list[LossRow] = []
    for it in range(iters):
        idx = it % len(scene.frames)
        store.zero_grad()
        seed = (tcfg.seed, it) if cfg.stratified else None
        l_pho, l_per, total = frame_loss(store, cfg, tcfg, scene, idx, banks, seed=seed)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at iteration {it} (frame {idx}); "
                                   f"photometric={l_pho.item()}, perceptual={None if l_per is None else l_per.item()}")
        if it % tcfg.log_every == 0 or it == iters - 1:
            row = LossRow(it, l_pho.item(), 0.0 if l_per is None else l_per.item(), value)
            rows.append(row)
            if on_log:
                on_log(row)
        T.backward(total)
        fill_missing_grads(store)
        step_with_config(store, tcfg, tcfg.lr_nerf)
    return store, rows


def write_loss_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "L_pho", "L_per", "total"])
        for r in rows:
            w.writerow([r.iteration, repr(r.photometric), repr(r.perceptual), repr(r.total)])


def read_loss_csv(path) -> list[LossRow]:
    with open(path, newline="") as fh:
        return [LossRow(int(r["iteration"]), float(r["L_pho"]), float(r["L_per"]), float(r["total"]))
                for r in csv.DictReader(fh)]


def evaluate_scene(store: ParamStore, cfg: PipelineConfig, tcfg: TrainConfig, scene, chunk: int = 1024):
    """Rendered images and per-frame PSNR against the scene."""
    from .metrics import psnr

    images, scores = [], []
    for i, frame in enumerate(scene.frames):
        img = render_image(store, cfg, frame, scene.frames[0].pose, scene.background,
                           scene.head_mask_at(i, cfg.intrinsics.height), tcfg, chunk=chunk)
        images.append(img)
        scores.append(psnr(img, scene.images[i]))
    return np.stack(images), scores


def miniature_config(feature_dim: int = 3) -> PipelineConfig:
    """4x4-ray pipeline used for end-to-end gradient checks."""
    fcfg = FieldConfig(depth=2, width=8, skip=1, feature_dim=feature_dim, pos_freqs=2, dir_freqs=1,
                       cond_freqs=1, deform_depth=1, deform_width=6)
    intr = Intrinsics(focal=4.0, cx=2.0, cy=2.0, height=4, width=4, near=0.5, far=2.5)
    return PipelineConfig(field=fcfg, intrinsics=intr, n_samples=6, upsample_blocks=1, perceptual_channels=(2,))


def with_overrides(cfg: PipelineConfig, **kw) -> PipelineConfig:
    return replace(cfg, **kw)
