"""Implicit fields: head NeRF, deformation MLP and static NeRF.

Points are batched as ``(R, S, 3)`` (rays x samples). Inputs that are constant
within a frame (expression, pose, jaw) or within a ray (view direction) are
projected once and broadcast instead of being concatenated onto every sample;
this is algebraically the same first layer as the concatenated form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor

N_EXPRESSION = 53
N_POSE = 6
N_JAW = 3
N_EMOTION = 5
EMOTIONS = ("neutral", "happy", "sad", "angry", "surprised")


@dataclass
class MotionFrame:
    expression: np.ndarray
    pose: np.ndarray
    jaw: np.ndarray
    emotion: np.ndarray

    def __post_init__(self):
        self.expression = np.asarray(self.expression, dtype=np.float32).reshape(-1)
        self.pose = np.asarray(self.pose, dtype=np.float32).reshape(-1)
        self.jaw = np.asarray(self.jaw, dtype=np.float32).reshape(-1)
        self.emotion = np.asarray(self.emotion, dtype=np.float32).reshape(-1)
        for name, arr, n in (("expression", self.expression, N_EXPRESSION), ("pose", self.pose, N_POSE),
                             ("jaw", self.jaw, N_JAW), ("emotion", self.emotion, N_EMOTION)):
            if arr.size != n:
                raise ValueError(f"MotionFrame.{name}: expected {n} values, got {arr.size}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"MotionFrame.{name}: non-finite values")
        if not (np.sum(self.emotion == 1) == 1 and np.sum(self.emotion == 0) == N_EMOTION - 1):
            raise ValueError(f"MotionFrame.emotion must be one-hot, got {self.emotion.tolist()}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("expression", "pose", "jaw", "emotion")}

    @classmethod
    def from_dict(cls, d: dict) -> MotionFrame:
        return cls(d["expression"], d["pose"], d["jaw"], d["emotion"])


def one_hot(index: int, n: int = N_EMOTION) -> np.ndarray:
    v = np.zeros(n, dtype=np.float32)
    v[index] = 1.0
    return v


@dataclass(frozen=True)
class FieldConfig:
    depth: int = 8
    width: int = 128
    skip: int = 4
    feature_dim: int = 256
    pos_freqs: int = 10
    dir_freqs: int = 4
    cond_freqs: int = 4
    deform_depth: int = 4
    deform_width: int = 64

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.feature_dim < 1:
            raise ValueError("field depth, width and feature_dim must be positive")


# ------------------------------------------------------------------ encoding
def positional_encoding(x, n_freqs: int):
    """[sin(2^m pi x), cos(2^m pi x)] for m = 0..L-1, over the last axis.

    Works on numpy arrays (returns numpy) or Tensors (differentiable).
    """
    if n_freqs < 1:
        raise ValueError("positional_encoding needs at least one frequency")
    freqs = (2.0 ** np.arange(n_freqs) * np.pi).reshape(-1, 1)
    if not isinstance(x, Tensor):
        x = np.asarray(x)
        scaled = x[..., None, :] * freqs.astype(x.dtype if x.dtype == np.float64 else np.float32)
        out = np.stack([np.sin(scaled), np.cos(scaled)], axis=-2)
        return out.reshape(x.shape[:-1] + (2 * n_freqs * x.shape[-1],))
    k = x.shape[-1]
    lead = x.shape[:-1]
    scaled = T.reshape(x, lead + (1, k)) * freqs.astype(x.dtype)
    pair = T.concat([T.reshape(T.sin(scaled), lead + (n_freqs, 1, k)),
                     T.reshape(T.cos(scaled), lead + (n_freqs, 1, k))], axis=-2)
    return T.reshape(pair, lead + (2 * n_freqs * k,))


# ------------------------------------------------------------------ init
def _dense(store: ParamStore, name: str, fan_in: int, fan_out: int, rng, zero: bool = False,
           inputs: dict[str, int] | None = None):
    """Register weights for a linear layer whose input may be split into
    named parts (each gets its own weight block)."""
    bound = np.sqrt(6.0 / fan_in)  # He-uniform for relu stacks
    parts = inputs or {"w": fan_in}
    for part, n in parts.items():
        w = np.zeros((n, fan_out)) if zero else rng.uniform(-bound, bound, (n, fan_out))
        store.add(f"{name}.{part}", w)
    store.add(f"{name}.b", np.zeros(fan_out))


def init_field_params(store: ParamStore, prefix: str, cfg: FieldConfig, rng,
                      cond_dim: int = 0, zero: bool = False) -> None:
    pe = 3 * 2 * cfg.pos_freqs
    de = 3 * 2 * cfg.dir_freqs
    w = cfg.width
    for layer in range(cfg.depth):
        if layer == 0:
            parts = {"wx": pe}
            if cond_dim:
                parts["wc"] = cond_dim
        elif layer == cfg.skip:
            parts = {"w": w, "wskip": pe}
        else:
            parts = {"w": w}
        _dense(store, f"{prefix}.l{layer}", sum(parts.values()), w, rng, zero, parts)
    _dense(store, f"{prefix}.sigma", w, 1, rng, zero)
    half = max(w // 2, 1)
    _dense(store, f"{prefix}.view", w + de, half, rng, zero, {"wt": w, "wd": de})
    _dense(store, f"{prefix}.feat", half, cfg.feature_dim, rng, zero)
    if not zero:
        # small feature head keeps initial renders well scaled
        store[f"{prefix}.feat.w"].data *= 0.1


def init_deform_params(store: ParamStore, cfg: FieldConfig, rng, zero: bool = False) -> None:
    pe = 3 * 2 * cfg.pos_freqs
    ce = (N_POSE + N_JAW) * 2 * cfg.cond_freqs
    w = cfg.deform_width
    for layer in range(cfg.deform_depth):
        parts = {"wx": pe, "wc": ce} if layer == 0 else {"w": w}
        _dense(store, f"deform.l{layer}", sum(parts.values()), w, rng, zero, parts)
    _dense(store, "deform.out", w, 3, rng, zero=True)


def init_nerf_fields(store: ParamStore, cfg: FieldConfig, rng, zero: bool = False) -> None:
    init_field_params(store, "head", cfg, rng, cond_dim=N_EXPRESSION, zero=zero)
    init_deform_params(store, cfg, rng, zero=zero)
    init_field_params(store, "static", cfg, rng, zero=zero)


# ------------------------------------------------------------------ forward
def _check_width(store: ParamStore, name: str, n: int, op: str) -> Tensor:
    w = store[name]
    if w.shape[0] != n:
        raise T.ShapeError(op, (n,), w.shape)
    return w


def _trunk(store: ParamStore, prefix: str, cfg: FieldConfig, enc: Tensor, cond=None) -> Tensor:
    h = None
    for layer in range(cfg.depth):
        p = f"{prefix}.l{layer}"
        if layer == 0:
            z = enc @ _check_width(store, f"{p}.wx", enc.shape[-1], prefix)
            if cond is not None:
                c = T.reshape(cond, (1, -1)) @ _check_width(store, f"{p}.wc", cond.shape[-1], prefix)
                z = z + c
        elif layer == cfg.skip:
            z = h @ store[f"{p}.w"] + enc @ store[f"{p}.wskip"]
        else:
            z = h @ store[f"{p}.w"]
        h = T.relu(z + store[f"{p}.b"])
    return h


def _heads(store: ParamStore, prefix: str, cfg: FieldConfig, h: Tensor, dirs) -> tuple[Tensor, Tensor]:
    sigma = T.softplus(h @ store[f"{prefix}.sigma.w"] + store[f"{prefix}.sigma.b"])
    denc = positional_encoding(np.asarray(dirs), cfg.dir_freqs)  # (R, de)
    dproj = T.Tensor(denc) @ _check_width(store, f"{prefix}.view.wd", denc.shape[-1], prefix)
    r = dproj.shape[0]
    dproj = T.reshape(dproj, (r,) + (1,) * (h.ndim - 2) + (dproj.shape[-1],))
    v = T.relu(h @ store[f"{prefix}.view.wt"] + dproj + store[f"{prefix}.view.b"])
    feat = v @ store[f"{prefix}.feat.w"] + store[f"{prefix}.feat.b"]
    return T.reshape(sigma, sigma.shape[:-1]), feat


def _as_batch(x, d):
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    single = x.ndim == 1
    if single:
        x = T.reshape(x, (1, 1, 3))
        d = np.asarray(d).reshape(1, 3)
    return x, d, single


def head_field_forward(x, z_exp, d, store: ParamStore, cfg: FieldConfig) -> tuple[Tensor, Tensor]:
    """Density (R, S) and features (R, S, C) for points x (R, S, 3),
    expression z_exp (53,) and unit view directions d (R, 3)."""
    x, d, single = _as_batch(x, d)
    enc = positional_encoding(x, cfg.pos_freqs)
    cond = z_exp if isinstance(z_exp, Tensor) else Tensor(np.asarray(z_exp, dtype=x.dtype))
    h = _trunk(store, "head", cfg, enc, cond)
    sigma, feat = _heads(store, "head", cfg, h, d)
    if single:
        return T.reshape(sigma, (1,)), T.reshape(feat, (cfg.feature_dim,))
    return sigma, feat


def deform_forward(x, z_pose, z_jaw, store: ParamStore, cfg: FieldConfig) -> Tensor:
    """Offsets (..., 3) for points x (..., 3) given the frame's pose and jaw."""
    single = not isinstance(x, Tensor) and np.asarray(x).ndim == 1
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if single:
        x = T.reshape(x, (1, 3))
    enc = positional_encoding(x, cfg.pos_freqs)
    cond = np.concatenate([positional_encoding(np.asarray(z_pose, dtype=x.dtype), cfg.cond_freqs),
                           positional_encoding(np.asarray(z_jaw, dtype=x.dtype), cfg.cond_freqs)])
    h = None
    for layer in range(cfg.deform_depth):
        p = f"deform.l{layer}"
        if layer == 0:
            z = enc @ _check_width(store, f"{p}.wx", enc.shape[-1], "deform") + \
                T.Tensor(cond[None]) @ _check_width(store, f"{p}.wc", cond.size, "deform")
        else:
            z = h @ store[f"{p}.w"]
        h = T.relu(z + store[f"{p}.b"])
    out = h @ store["deform.out.w"] + store["deform.out.b"]
    return T.reshape(out, (3,)) if single else out


def static_field_forward(x_warped, d, store: ParamStore, cfg: FieldConfig) -> tuple[Tensor, Tensor]:
    x, d, single = _as_batch(x_warped, d)
    enc = positional_encoding(x, cfg.pos_freqs)
    h = _trunk(store, "static", cfg, enc)
    sigma, feat = _heads(store, "static", cfg, h, d)
    if single:
        return T.reshape(sigma, (1,)), T.reshape(feat, (cfg.feature_dim,))
    return sigma, feat
