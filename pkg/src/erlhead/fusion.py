"""Density-weighted branch fusion, PixelShuffle upsampling and RGBA compositing.

Maps are channel-last ``(H, W, C)`` throughout.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor

DEFAULT_ALPHA = 1e-6


def binomial_kernel(size: int = 3) -> np.ndarray:
    row = np.array([1.0])
    for _ in range(size - 1):
        row = np.convolve(row, [1.0, 1.0])
    k = np.outer(row, row)
    return k / k.sum()


def identity_kernel() -> np.ndarray:
    return np.ones((1, 1))


def _check_kernel(k: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
        raise ValueError(f"blur kernel must be square with odd size, got {k.shape}")
    if abs(k.sum() - 1.0) > 1e-9:
        raise ValueError("blur kernel must sum to 1")
    if not (np.allclose(k, k.T) and np.allclose(k, k[::-1, ::-1])):
        raise ValueError("blur kernel must be symmetric")
    return k


def fuse_maps(f_h, d_h, f_s, d_s, m_h, alpha: float = DEFAULT_ALPHA) -> tuple[Tensor, Tensor]:
    """Fused features and density:

        F_g = (M_h*F_h*D_h + F_s*D_s) / (D_h + D_s + alpha)
        D_g = (M_h*D_h*D_h + D_s*D_s) / (D_h + D_s + alpha)

    The mask only enters the head numerator.
    """
    if not alpha > 0:
        raise ValueError(f"fusion alpha must be positive, got {alpha}")
    f_h, d_h, f_s, d_s = (x if isinstance(x, Tensor) else Tensor(x) for x in (f_h, d_h, f_s, d_s))
    m_h = m_h.data if isinstance(m_h, Tensor) else np.asarray(m_h)
    shapes = [f_h.shape[:2], d_h.shape[:2], f_s.shape[:2], d_s.shape[:2], m_h.shape[:2]]
    if len(set(shapes)) != 1 or f_h.shape != f_s.shape:
        raise T.ShapeError("fuse_maps", f_h.shape, d_h.shape, f_s.shape, d_s.shape, m_h.shape)
    m_h = m_h.astype(f_h.dtype)
    denom = d_h + d_s + np.asarray(alpha, dtype=f_h.dtype)
    f_g = (m_h * f_h * d_h + f_s * d_s) / denom
    d_g = (m_h * d_h * d_h + d_s * d_s) / denom
    return f_g, d_g


def repeat_channels(x: Tensor, times: int = 4) -> Tensor:
    """Channel c -> channels c*times .. c*times + times-1."""
    h, w, c = x.shape
    return T.reshape(T.broadcast_to(T.reshape(x, (h, w, c, 1)), (h, w, c, times)), (h, w, c * times))


def pixel_shuffle(x: Tensor, r: int = 2) -> Tensor:
    """(n, m, C*r*r) -> (n*r, m*r, C); channel c*r*r + dy*r + dx lands at (dy, dx)."""
    h, w, c = x.shape
    if c % (r * r):
        raise T.ShapeError("pixel_shuffle", x.shape, (r, r))
    d = c // (r * r)
    y = T.reshape(x, (h, w, d, r, r))
    y = T.transpose(y, (0, 3, 1, 4, 2))
    return T.reshape(y, (h * r, w * r, d))


def blur(x: Tensor, kernel) -> Tensor:
    """Depthwise 2-D convolution with a fixed kernel, reflect padding."""
    k = _check_kernel(kernel)
    if k.shape == (1, 1):
        return x * k[0, 0].astype(x.dtype) if k[0, 0] != 1.0 else x
    p = k.shape[0] // 2
    h, w = x.shape[:2]
    xp = T.pad2d(x, p, mode="reflect")
    out = None
    for a in range(k.shape[0]):
        for b in range(k.shape[1]):
            tap = xp[a:a + h, b:b + w] * k[a, b].astype(x.dtype)
            out = tap if out is None else out + tap
    return out


def init_upsampler(store: ParamStore, channels: int, n_blocks: int, rng, zero_phi: bool = True) -> None:
    for i in range(n_blocks):
        bound = np.sqrt(6.0 / channels)
        store.add(f"up{i}.phi1.w", rng.uniform(-bound, bound, (channels, channels)))
        store.add(f"up{i}.phi1.b", np.zeros(channels))
        phi2 = np.zeros((channels, 4 * channels)) if zero_phi else \
            rng.normal(0, 0.1 / np.sqrt(channels), (channels, 4 * channels))
        store.add(f"up{i}.phi2.w", phi2)
        store.add(f"up{i}.phi2.b", np.zeros(4 * channels))


def init_rgba(store: ParamStore, channels: int, rng) -> None:
    store.add("rgba.w", rng.normal(0, 1.0 / np.sqrt(channels), (channels, 4)))
    store.add("rgba.b", np.zeros(4))


def phi(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    h = T.relu(x @ store[f"{prefix}.phi1.w"] + store[f"{prefix}.phi1.b"])
    return h @ store[f"{prefix}.phi2.w"] + store[f"{prefix}.phi2.b"]


def upsample_block(x: Tensor, store: ParamStore, prefix: str, kernel) -> Tensor:
    """Blur(PixelShuffle(repeat(X, 4) + phi(X), 2)): (n, n, d) -> (2n, 2n, d)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 3 or x.shape[0] != x.shape[1]:
        raise ValueError(f"upsample_block expects a square n x n x d map, got {x.shape}")
    y = repeat_channels(x, 4) + phi(x, store, prefix)
    return blur(pixel_shuffle(y, 2), kernel)


def upsample(x: Tensor, store: ParamStore, n_blocks: int, kernel) -> Tensor:
    for i in range(n_blocks):
        x = upsample_block(x, store, f"up{i}", kernel)
    return x


def compose_rgba(f_final: Tensor, store: ParamStore, background) -> Tensor:
    """1x1 conv to RGBA, sigmoid, then alpha-blend over ``background``."""
    bg = background.data if isinstance(background, Tensor) else np.asarray(background)
    if bg.shape != f_final.shape[:2] + (3,):
        raise T.ShapeError("compose_rgba", f_final.shape, bg.shape)
    rgba = f_final @ store["rgba.w"] + store["rgba.b"]
    return blend(T.sigmoid(rgba[..., :3]), T.sigmoid(rgba[..., 3:4]), bg.astype(f_final.dtype))


def blend(rgb: Tensor, a: Tensor, background) -> Tensor:
    return a * rgb + (1.0 - a) * background
