from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ParamStore


@dataclass(frozen=True)
class TrainConfig:
    lr_nerf: float = 1e-4
    lr_adf: float = 2e-5
    lr_vq: float = 1e-4
    optimizer: str = "adam"  # adam | adamw
    vq_optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    iters: int = 2000
    seed: int = 0
    beta_h: float = 1.0
    beta_s: float = 1.0
    perceptual_weight: float = 1.0
    deform: bool = True
    perceptual: bool = True
    dual_branch: bool = True
    static_camera: str = "first"  # first | pose; only used with deform off
    log_every: int = 1
    lr_schedule: str = "constant"  # constant | cosine (decays to zero over the run)

    def __post_init__(self):
        for name in ("lr_nerf", "lr_adf", "lr_vq"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.optimizer not in ("adam", "adamw") or self.vq_optimizer not in ("adam", "adamw"):
            raise ValueError("optimizer must be 'adam' or 'adamw'")
        if self.static_camera not in ("first", "pose"):
            raise ValueError("static_camera must be 'first' or 'pose'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.iters < 0 or self.log_every < 1:
            raise ValueError("iters must be >= 0 and log_every >= 1")


def scheduled_lr(base: float, step: int, total: int, schedule: str = "constant") -> float:
    if schedule == "constant" or total <= 1:
        return base
    if schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))
    raise ValueError(f"unknown lr schedule {schedule!r}")


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0, decoupled: bool = False, prefix: str = "") -> None:
    """One bias-corrected Adam update of every trainable parameter.

    ``decoupled=True`` gives AdamW (decay applied to the weights directly);
    otherwise ``weight_decay`` is folded into the gradient as L2.
    """
    names = store.trainable_names(prefix)
    missing = [n for n in names if store[n].grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for name in names:
        p = store[name]
        g = p.grad
        if weight_decay and not decoupled:
            g = g + weight_decay * p.data
        store.step[name] += 1
        t = store.step[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay and decoupled:
            p.data -= (lr * weight_decay) * p.data
        p.data -= update.astype(p.dtype)


def step_with_config(store: ParamStore, cfg: TrainConfig, lr: float, kind: str | None = None,
                     prefix: str = "") -> None:
    kind = kind or cfg.optimizer
    adam_step(store, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, decoupled=(kind == "adamw"),
              prefix=prefix)


def fill_missing_grads(store: ParamStore) -> None:
    """Parameters the loss never reached get an explicit zero gradient."""
    for name in store.trainable_names():
        p = store[name]
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
