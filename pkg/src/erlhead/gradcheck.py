"""Finite-difference gradient suites (ops, renderer pipeline, motion losses)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _weighted(op, w):
    # a fixed random weighting turns any op output into a scalar without
    # making the upstream gradient uniform
    return lambda x: T.sum_(op(x) * w)


def _draw(rng, shape, domain: str) -> np.ndarray:
    if domain == "positive":
        return rng.uniform(0.5, 2.0, shape)
    x = rng.uniform(-2.0, 2.0, shape)
    if domain == "nonzero":  # keeps relu away from its kink
        x = np.where(np.abs(x) < 0.05, 0.5, x)
    return x


def op_cases(rng) -> dict:
    """name -> (function of one tensor, input shape, input domain)."""
    b = Tensor(rng.uniform(-2, 2, (3, 4)))
    pos = Tensor(rng.uniform(0.5, 2, (3, 4)))
    a = Tensor(rng.uniform(-2, 2, (3, 4)))
    m = Tensor(rng.uniform(-2, 2, (4, 5)))
    row = Tensor(rng.uniform(-2, 2, (4,)))
    idx = np.array([2, 0, 2, 1])
    return {
        "add": (lambda x: x + b, (3, 4), "any"),
        "add_broadcast": (lambda x: x + row, (3, 4), "any"),
        "add_reduced": (lambda x: b + x, (4,), "any"),
        "sub": (lambda x: b - x, (3, 4), "any"),
        "mul": (lambda x: x * b, (3, 4), "any"),
        "mul_broadcast": (lambda x: b * x, (1, 4), "any"),
        "div": (lambda x: b / x, (3, 4), "positive"),
        "div_numerator": (lambda x: x / pos, (3, 4), "any"),
        "neg": (lambda x: -x, (3, 4), "any"),
        "power": (lambda x: x ** 3, (3, 4), "any"),
        "power_frac": (lambda x: x ** 1.5, (3, 4), "positive"),
        "exp": (T.exp, (3, 4), "any"),
        "log": (T.log, (3, 4), "positive"),
        "sqrt": (T.sqrt, (3, 4), "positive"),
        "sin": (T.sin, (3, 4), "any"),
        "cos": (T.cos, (3, 4), "any"),
        "relu": (T.relu, (3, 4), "nonzero"),
        "sigmoid": (T.sigmoid, (3, 4), "any"),
        "softplus": (T.softplus, (3, 4), "any"),
        "tanh": (T.tanh, (3, 4), "any"),
        "softmax": (lambda x: T.softmax(x, axis=-1), (3, 4), "any"),
        "sum": (lambda x: T.sum_(x, axis=0), (3, 4), "any"),
        "mean": (lambda x: T.mean(x, axis=1, keepdims=True), (3, 4), "any"),
        "cumsum": (lambda x: T.cumsum(x, axis=1), (3, 4), "any"),
        "cumsum_exclusive": (lambda x: T.cumsum(x, axis=1, exclusive=True), (3, 4), "any"),
        "matmul_left": (lambda x: x @ m, (3, 4), "any"),
        "matmul_right": (lambda x: a @ x, (4, 5), "any"),
        "matmul_batched": (lambda x: x @ m, (2, 3, 4), "any"),
        "matvec": (lambda x: x @ row, (3, 4), "any"),
        "reshape": (lambda x: T.reshape(x, (2, 6)), (3, 4), "any"),
        "transpose": (lambda x: T.transpose(x), (3, 4), "any"),
        "broadcast_to": (lambda x: T.broadcast_to(x, (2, 3, 4)), (3, 4), "any"),
        "concat": (lambda x: T.concat([x, b, x], axis=1), (3, 4), "any"),
        "stack": (lambda x: T.stack([x, b], axis=0), (3, 4), "any"),
        "getitem": (lambda x: x[1:, ::2], (3, 4), "any"),
        "take": (lambda x: T.take(x, idx, axis=1), (3, 4), "any"),
        "pad2d_constant": (lambda x: T.pad2d(x, 2, mode="constant"), (5, 6, 2), "any"),
        "pad2d_reflect": (lambda x: T.pad2d(x, 2, mode="reflect"), (5, 6, 2), "any"),
    }


def check_op(name: str, rng, trials: int = 1, eps: float = 1e-5) -> float:
    op, shape, domain = op_cases(rng)[name]
    worst = 0.0
    for _ in range(trials):
        x = _draw(rng, shape, domain)
        with T.no_grad():
            out_shape = op(Tensor(x)).shape
        w = Tensor(rng.uniform(-2, 2, out_shape))
        worst = max(worst, T.gradient_check(_weighted(op, w), x, eps=eps))
    return worst


def op_suite(seed: int = 0, trials: int = 1) -> dict[str, float]:
    """Worst relative error per registered op over ``trials`` random inputs."""
    rng = np.random.default_rng(seed)
    return {name: check_op(name, rng, trials) for name in op_cases(rng)}


def _randomise_zero_params(store, rng, scale: float = 0.3) -> None:
    # zero-initialised layers (phi2, deform.out) would hide their inputs' gradients
    for _, t in store.items():
        if not np.any(t.data):
            t.data[...] = rng.normal(0, scale, t.shape)


def pipeline_check(seed: int = 0, n_samples: int = 60, feature_dim: int = 3) -> float:
    """Parameter gradients of the 4x4-ray pipeline: both fields, quadrature,
    fusion, one upsample block, RGBA composite, photometric + perceptual
    proxy loss. Float64 throughout."""
    from .optim import TrainConfig
    from .synthetic import make_synthetic_scene
    from .training import init_perceptual_proxy, init_pipeline, miniature_config, perceptual_proxy_loss, \
        photometric_loss, render_frame

    cfg = miniature_config(feature_dim)
    rng = np.random.default_rng(seed)
    store = init_pipeline(cfg, seed).copy(np.float64)
    _randomise_zero_params(store, rng)
    scene = make_synthetic_scene(seed, frames=2, size=cfg.output_size)
    banks = init_perceptual_proxy(seed, cfg.perceptual_channels)
    tcfg = TrainConfig()
    i = 1

    def loss():
        out = render_frame(store, cfg, scene.frames[i], scene.frames[0].pose,
                           scene.background.astype(np.float64), scene.head_mask_at(i, cfg.intrinsics.height), tcfg)
        return photometric_loss(out.image, scene.images[i], scene.head_masks[i], scene.static_masks[i]) + \
            perceptual_proxy_loss(out.image, scene.images[i], banks)

    params = [t for _, t in store.items()]
    return T.check_param_grads(loss, params, n_samples, rng, eps=1e-6)


def motion_check(seed: int = 0, n_samples: int = 40) -> dict[str, float]:
    """Motion losses and the (differentiable) VQ decoder path.

    Encoder and codebook gradients pass through the straight-through
    estimator, which finite differences cannot see, so only the decoder is
    checked against them."""
    from .motion import MotionConfig, contrastive_loss, flame_loss, init_vq_params, vq_forward, vq_loss
    from .synthetic import make_synthetic_sequences

    rng = np.random.default_rng(seed)
    out = {}
    e_a = rng.normal(size=(6, 4))
    out["contrastive"] = T.gradient_check(lambda x: contrastive_loss(x, e_a), rng.normal(size=(6, 4)))
    gt_e, gt_p = rng.normal(size=(5, 53)), rng.normal(size=(5, 6))
    pose = Tensor(rng.normal(size=(5, 6)))
    out["flame"] = T.gradient_check(lambda x: flame_loss(x, gt_e, pose, gt_p), rng.normal(size=(5, 53)))

    cfg = MotionConfig(codebook_size=8, code_dim=4, hidden=8, style_dim=4)
    from .tensor import ParamStore
    store = ParamStore()
    init_vq_params(store, cfg, rng)
    store = store.copy(np.float64)
    exp_seq, _ = make_synthetic_sequences(seed, 6)
    frames = exp_seq.frames.astype(np.float64)

    def loss():
        res = vq_forward(exp_seq, exp_seq.emotion, store, cfg)
        return vq_loss(frames, res.reconstruction, res.latents, res.selected)

    params = [store[n] for n in store.names() if n.startswith("exp.dec")]
    out["vq_decoder"] = T.check_param_grads(loss, params, n_samples, rng, eps=1e-6)
    return out


def run_all(seed: int = 0) -> dict[str, float]:
    res = {f"op:{k}": v for k, v in op_suite(seed).items()}
    res["pipeline:4x4"] = pipeline_check(seed)
    res.update({f"motion:{k}": v for k, v in motion_check(seed).items()})
    return res
