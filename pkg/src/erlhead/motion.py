"""Discrete motion spaces and the audio-plus-style coefficient generator.

Two conditional VQ-VAEs compress expression sequences (conditioned on the
emotion one-hot) and pose-variation sequences (conditioned on the first pose).
Once trained, their decoders and codebooks are frozen and reused by the
generator, which maps audio features plus style features extracted from a
reference sequence into each codebook.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .fields import N_EMOTION, N_EXPRESSION, N_POSE
from .optim import TrainConfig, adam_step, scheduled_lr
from .tensor import ParamStore, Tensor

EXPRESSION = "expression"
DELTA_POSE = "delta_pose"
KIND_DIMS = {EXPRESSION: N_EXPRESSION, DELTA_POSE: N_POSE}
SPACE_PREFIX = {EXPRESSION: "exp", DELTA_POSE: "pose"}


# ---------------------------------------------------------------- sequences
@dataclass
class CoeffSequence:
    kind: str
    frames: np.ndarray  # (t, dim)
    fps: float = 25.0
    first_pose: np.ndarray | None = None  # delta_pose only
    emotion: np.ndarray | None = None  # expression only

    def __post_init__(self):
        if self.kind not in KIND_DIMS:
            raise ValueError(f"unknown sequence kind {self.kind!r}")
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] != KIND_DIMS[self.kind]:
            raise ValueError(f"{self.kind} frames must be (t >= 1, {KIND_DIMS[self.kind]}), got {self.frames.shape}")
        if self.kind == EXPRESSION:
            if self.emotion is None:
                raise ValueError("expression sequences need an emotion one-hot")
            self.emotion = np.asarray(self.emotion, dtype=np.float32)
            if self.emotion.shape != (N_EMOTION,) or sorted(self.emotion.tolist()) != [0.0] * (N_EMOTION - 1) + [1.0]:
                raise ValueError(f"emotion must be a {N_EMOTION}-way one-hot, got {self.emotion.tolist()}")
        else:
            if self.first_pose is None:
                raise ValueError("delta_pose sequences need first_pose")
            self.first_pose = np.asarray(self.first_pose, dtype=np.float32)
            if self.first_pose.shape != (N_POSE,):
                raise ValueError(f"first_pose must have {N_POSE} entries")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def condition(self) -> np.ndarray:
        return self.emotion if self.kind == EXPRESSION else self.first_pose


def save_sequence(seq: CoeffSequence, path) -> None:
    doc = {
        "kind": seq.kind,
        "fps": float(seq.fps),
        "dims": list(seq.frames.shape),
        "frames": [float(v) for v in seq.frames.reshape(-1)],
        "first_pose": None if seq.first_pose is None else [float(v) for v in seq.first_pose],
        "emotion": None if seq.emotion is None else [float(v) for v in seq.emotion],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_sequence(path) -> CoeffSequence:
    doc = json.loads(Path(path).read_text())
    missing = {"kind", "fps", "dims", "frames"} - set(doc)
    if missing:
        raise ValueError(f"{path}: missing sequence fields {sorted(missing)}")
    dims = tuple(int(d) for d in doc["dims"])
    frames = np.asarray(doc["frames"], dtype=np.float32)
    if len(dims) != 2 or frames.size != dims[0] * dims[1]:
        raise ValueError(f"{path}: frames length {frames.size} does not match dims {dims}")
    return CoeffSequence(doc["kind"], frames.reshape(dims), float(doc["fps"]),
                         doc.get("first_pose"), doc.get("emotion"))


def delta_encode(poses) -> tuple[np.ndarray, np.ndarray]:
    poses = np.asarray(poses)
    if poses.ndim == 0 or poses.shape[0] == 0:
        raise ValueError("delta_encode: empty pose sequence")
    return poses[0].copy(), np.diff(poses, axis=0)


def delta_decode(first_pose, deltas) -> np.ndarray:
    first_pose = np.asarray(first_pose)
    deltas = np.asarray(deltas).reshape((-1,) + first_pose.shape)
    return np.concatenate([first_pose[None], first_pose[None] + np.cumsum(deltas, axis=0)], axis=0)


def smooth_poses(poses, window: int = 5) -> np.ndarray:
    """Centred moving average with edge replication."""
    poses = np.asarray(poses, dtype=np.float64)
    if window <= 1:
        return poses.copy()
    half = window // 2
    padded = np.pad(poses, [(half, window - 1 - half)] + [(0, 0)] * (poses.ndim - 1), mode="edge")
    kernel = np.ones(window) / window
    return np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0, padded)


# ---------------------------------------------------------------- quantizer
@dataclass
class Codebook:
    entries: Tensor  # (K, d)

    def __post_init__(self):
        if self.entries.ndim != 2 or self.entries.shape[0] < 2:
            raise ValueError(f"codebook needs K >= 2 entries, got shape {self.entries.shape}")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class LatentSequence:
    codes: Tensor  # (T, d)
    scale: int = 1


def nearest_indices(codes, book) -> np.ndarray:
    """argmin_k ||x_i - c_k||, lowest index on ties."""
    x = np.asarray(codes, dtype=np.float64)
    c = np.asarray(book, dtype=np.float64)
    dist = np.sum((x[:, None, :] - c[None, :, :]) ** 2, axis=-1)
    return np.argmin(dist, axis=1)


def quantize_nearest(codes, book: Codebook) -> tuple[Tensor, np.ndarray]:
    """Snap each latent to its closest codebook entry.

    Forward value is the entry; the gradient passes straight through to
    ``codes`` (x + sg(c - x)).
    """
    codes = codes.codes if isinstance(codes, LatentSequence) else codes
    codes = codes if isinstance(codes, Tensor) else Tensor(codes)
    if codes.ndim != 2 or codes.shape[1] != book.dim:
        raise T.ShapeError("quantize_nearest", codes.shape, book.entries.shape)
    idx = nearest_indices(codes.data, book.entries.data)
    chosen = book.entries.data[idx].astype(codes.dtype)
    return codes + T.stop_gradient(Tensor(chosen) - codes), idx


def vq_loss(z, z_hat, x_hat, x) -> Tensor:
    """Reconstruction + codebook + commitment terms, each a per-element mean.

    ``x`` must be the gathered codebook rows (carrying the codebook
    gradient), ``x_hat`` the encoder output.
    """
    z, z_hat, x_hat, x = (v if isinstance(v, Tensor) else Tensor(v) for v in (z, z_hat, x_hat, x))
    if z.shape != z_hat.shape or x.shape != x_hat.shape:
        raise T.ShapeError("vq_loss", z.shape, z_hat.shape, x_hat.shape, x.shape)
    rec = T.mean((z - z_hat) ** 2)
    book = T.mean((T.stop_gradient(x_hat) - x) ** 2)
    commit = T.mean((T.stop_gradient(x) - x_hat) ** 2)
    return rec + book + commit


# ---------------------------------------------------------------- networks
@dataclass(frozen=True)
class MotionConfig:
    codebook_size: int = 64
    code_dim: int = 64
    tau: int = 1
    hidden: int = 64
    style_dim: int = 64
    audio_dim: int = 29
    embed_dim: int = 16
    mouth_dims: int = 8
    seq_frames: int = 16
    vq_steps: int = 3000
    adf_steps: int = 3000

    def __post_init__(self):
        if self.codebook_size < 2 or self.code_dim < 1 or self.tau < 1:
            raise ValueError("need codebook_size >= 2, code_dim >= 1, tau >= 1")


def _init_linear(store: ParamStore, name: str, n_in: int, n_out: int, rng, zero: bool = False):
    bound = np.sqrt(1.0 / n_in)
    store.add(f"{name}.w", np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, (n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


def init_temporal_net(store: ParamStore, name: str, n_in: int, n_out: int, hidden: int, rng) -> None:
    """Input projection, residual conv1d(k=3), one single-head self-attention
    block, output projection."""
    _init_linear(store, f"{name}.in", n_in, hidden, rng)
    _init_linear(store, f"{name}.conv", 3 * hidden, hidden, rng)
    for part in ("q", "k", "v", "o"):
        _init_linear(store, f"{name}.attn.{part}", hidden, hidden, rng)
    _init_linear(store, f"{name}.ff1", hidden, hidden, rng)
    _init_linear(store, f"{name}.ff2", hidden, hidden, rng)
    _init_linear(store, f"{name}.out", hidden, n_out, rng)


def _linear(x: Tensor, store: ParamStore, name: str) -> Tensor:
    w = store[f"{name}.w"]
    if x.shape[-1] != w.shape[0]:
        raise T.ShapeError(name, x.shape, w.shape)
    return x @ w + store[f"{name}.b"]


def _conv1d(h: Tensor, store: ParamStore, name: str) -> Tensor:
    t, c = h.shape
    zero = Tensor(np.zeros((1, c), dtype=h.dtype))
    padded = T.concat([zero, h, zero], axis=0)
    window = T.concat([padded[0:t], padded[1:t + 1], padded[2:t + 2]], axis=1)
    return _linear(window, store, name)


def temporal_net(x: Tensor, store: ParamStore, name: str) -> Tensor:
    h = T.tanh(_linear(x, store, f"{name}.in"))
    h = h + T.relu(_conv1d(h, store, f"{name}.conv"))
    q = _linear(h, store, f"{name}.attn.q")
    k = _linear(h, store, f"{name}.attn.k")
    v = _linear(h, store, f"{name}.attn.v")
    att = T.softmax((q @ k.T) * (1.0 / np.sqrt(h.shape[-1])), axis=-1)
    h = h + _linear(att @ v, store, f"{name}.attn.o")
    h = h + _linear(T.relu(_linear(h, store, f"{name}.ff1")), store, f"{name}.ff2")
    return _linear(h, store, f"{name}.out")


def _with_condition(x: Tensor, cond) -> Tensor:
    cond = np.asarray(cond, dtype=x.dtype)
    return T.concat([x, Tensor(np.broadcast_to(cond, (x.shape[0], cond.size)).copy())], axis=1)


def init_vq_params(store: ParamStore, cfg: MotionConfig, rng, kinds=(EXPRESSION, DELTA_POSE)) -> None:
    for kind in kinds:
        p = SPACE_PREFIX[kind]
        dim = KIND_DIMS[kind]
        cdim = N_EMOTION if kind == EXPRESSION else N_POSE
        init_temporal_net(store, f"{p}.enc", dim + cdim, cfg.tau * cfg.code_dim, cfg.hidden, rng)
        init_temporal_net(store, f"{p}.dec", cfg.tau * cfg.code_dim + cdim, dim, cfg.hidden, rng)
        k = cfg.codebook_size
        store.add(f"{p}.codebook", rng.uniform(-1.0 / k, 1.0 / k, (k, cfg.code_dim)))
        store.add(f"{p}.norm.mean", np.zeros(dim), trainable=False)
        store.add(f"{p}.norm.std", np.ones(dim), trainable=False)


def fit_normalizer(store: ParamStore, seq: CoeffSequence, floor: float = 1e-4) -> None:
    """Per-dimension mean and std of ``seq`` for the encoder input and the
    decoder output. Pose variations are ~1e-2 in size; unnormalised they
    give near-identical latents that all snap to one code."""
    p = SPACE_PREFIX[seq.kind]
    store[f"{p}.norm.mean"].data[...] = seq.frames.mean(axis=0)
    store[f"{p}.norm.std"].data[...] = np.maximum(seq.frames.std(axis=0), floor)


def _check_condition(kind: str, cond) -> np.ndarray:
    cond = np.asarray(cond, dtype=np.float32).reshape(-1)
    if kind == EXPRESSION:
        if cond.size != N_EMOTION or sorted(cond.tolist()) != [0.0] * (N_EMOTION - 1) + [1.0]:
            raise ValueError("expression space is conditioned on a 5-way emotion one-hot")
    elif cond.size != N_POSE:
        raise ValueError("pose space is conditioned on the 6-D first-frame pose")
    return cond


def vq_encode(frames, cond, store: ParamStore, kind: str, cfg: MotionConfig) -> Tensor:
    """(t, dim) -> latent codes (tau * t, code_dim)."""
    p = SPACE_PREFIX[kind]
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float32))
    x = (x - store[f"{p}.norm.mean"]) / store[f"{p}.norm.std"]
    out = temporal_net(_with_condition(x, cond), store, f"{p}.enc")
    return T.reshape(out, (cfg.tau * x.shape[0], cfg.code_dim))


def vq_decode(codes: Tensor, cond, store: ParamStore, kind: str, cfg: MotionConfig) -> Tensor:
    """Latent codes (tau * t, code_dim) -> (t, dim)."""
    p = SPACE_PREFIX[kind]
    t = codes.shape[0] // cfg.tau
    x = T.reshape(codes, (t, cfg.tau * cfg.code_dim))
    out = temporal_net(_with_condition(x, cond), store, f"{p}.dec")
    return out * store[f"{p}.norm.std"] + store[f"{p}.norm.mean"]


def codebook(store: ParamStore, kind: str) -> Codebook:
    return Codebook(store[f"{SPACE_PREFIX[kind]}.codebook"])


@dataclass
class VQResult:
    reconstruction: Tensor
    latents: Tensor  # encoder output, X-hat
    selected: Tensor  # gathered codebook rows, X
    indices: np.ndarray


def vq_forward(seq: CoeffSequence, cond, store: ParamStore, cfg: MotionConfig) -> VQResult:
    cond = _check_condition(seq.kind, cond)
    x_hat = vq_encode(seq.frames, cond, store, seq.kind, cfg)
    book = codebook(store, seq.kind)
    quantized, idx = quantize_nearest(x_hat, book)
    selected = T.take(book.entries, idx, axis=0)
    recon = vq_decode(quantized, cond, store, seq.kind, cfg)
    return VQResult(recon, x_hat, selected, idx)


def vq_autoencode(seq: CoeffSequence, cond, store: ParamStore, cfg: MotionConfig) -> CoeffSequence:
    with T.no_grad():
        res = vq_forward(seq, cond, store, cfg)
    return CoeffSequence(seq.kind, res.reconstruction.data, seq.fps, seq.first_pose, seq.emotion)


def init_codebook_from_latents(store: ParamStore, seq: CoeffSequence, cfg: MotionConfig, rng) -> None:
    """Seed codebook rows with (jittered) encoder outputs so entries start
    where the data is; limits early collapse onto a single entry."""
    with T.no_grad():
        lat = vq_encode(seq.frames, seq.condition, store, seq.kind, cfg).data
    book = store[f"{SPACE_PREFIX[seq.kind]}.codebook"].data
    scale = float(lat.std()) + 1e-6
    rows = rng.integers(0, lat.shape[0], size=book.shape[0])
    rows[: min(lat.shape[0], book.shape[0])] = np.arange(min(lat.shape[0], book.shape[0]))
    book[...] = lat[rows] + rng.normal(0, 0.01 * scale, book.shape)


def train_vq(seq: CoeffSequence, store: ParamStore, cfg: MotionConfig, tcfg: TrainConfig,
             steps: int | None = None, lr: float | None = None, log_every: int = 50):
    """Fit one VQ-VAE (the space matching ``seq.kind``). Returns loss rows
    (step, vq_loss, reconstruction_mse)."""
    prefix = SPACE_PREFIX[seq.kind] + "."
    steps = cfg.vq_steps if steps is None else steps
    lr = tcfg.lr_vq if lr is None else lr
    rows = []
    for step in range(steps):
        store.zero_grad()
        res = vq_forward(seq, seq.condition, store, cfg)
        loss = vq_loss(seq.frames, res.reconstruction, res.latents, res.selected)
        mse = float(np.mean((res.reconstruction.data - seq.frames) ** 2))
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"VQ training diverged at step {step}")
        if step % log_every == 0 or step == steps - 1:
            rows.append((step, loss.item(), mse))
        T.backward(loss)
        for name in store.trainable_names(prefix):
            if store[name].grad is None:
                store[name].grad = np.zeros_like(store[name].data)
        adam_step(store, scheduled_lr(lr, step, steps, tcfg.lr_schedule), tcfg.beta1, tcfg.beta2, tcfg.eps,
                  tcfg.weight_decay, decoupled=tcfg.vq_optimizer == "adamw", prefix=prefix)
    return rows


def reconstruction_mse(seq: CoeffSequence, store: ParamStore, cfg: MotionConfig) -> float:
    rec = vq_autoencode(seq, seq.condition, store, cfg)
    return float(np.mean((rec.frames - seq.frames) ** 2))


def codebook_usage(seq: CoeffSequence, store: ParamStore, cfg: MotionConfig) -> int:
    with T.no_grad():
        res = vq_forward(seq, seq.condition, store, cfg)
    return int(np.unique(res.indices).size)


# ---------------------------------------------------------------- generator
def init_adf_params(store: ParamStore, cfg: MotionConfig, rng) -> None:
    init_temporal_net(store, "adf.style_exp", N_EXPRESSION + N_EMOTION, cfg.style_dim, cfg.hidden, rng)
    init_temporal_net(store, "adf.style_pose", N_POSE + N_POSE, cfg.style_dim, cfg.hidden, rng)
    n_in = cfg.audio_dim + 2 * cfg.style_dim
    init_temporal_net(store, "adf.dec_exp", n_in + N_EMOTION, cfg.tau * cfg.code_dim, cfg.hidden, rng)
    init_temporal_net(store, "adf.dec_pose", n_in + N_POSE, cfg.tau * cfg.code_dim, cfg.hidden, rng)


@dataclass
class ADFOutput:
    expression: Tensor  # (n, 53)
    delta_pose: Tensor  # (n, 6)
    style_exp: Tensor
    style_pose: Tensor
    exp_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    pose_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def adf_generate(audio, style: tuple[CoeffSequence, CoeffSequence], adf: ParamStore, vq: ParamStore,
                 cfg: MotionConfig) -> ADFOutput:
    """Audio features (n, d_a) + style reference -> (n, 53) expressions and
    (n, 6) pose variations, decoded through the frozen VQ stage."""
    if not vq.frozen:
        raise RuntimeError("adf_generate needs the VQ decoders and codebooks frozen (call freeze())")
    exp_seq, pose_seq = style
    if exp_seq.kind != EXPRESSION or pose_seq.kind != DELTA_POSE:
        raise ValueError("style must be (expression sequence, delta_pose sequence)")
    audio = audio if isinstance(audio, Tensor) else Tensor(np.asarray(audio, dtype=np.float32))
    if audio.ndim != 2 or audio.shape[0] < 1 or audio.shape[1] != cfg.audio_dim:
        raise T.ShapeError("adf_generate", audio.shape, (None, cfg.audio_dim))
    n = audio.shape[0]
    emotion, first_pose = exp_seq.emotion, pose_seq.first_pose

    s_exp = T.mean(temporal_net(_with_condition(Tensor(exp_seq.frames), emotion), adf, "adf.style_exp"),
                   axis=0, keepdims=True)
    s_p = T.mean(temporal_net(_with_condition(Tensor(pose_seq.frames), first_pose), adf, "adf.style_pose"),
                 axis=0, keepdims=True)
    styled = T.concat([audio, T.broadcast_to(s_exp, (n, cfg.style_dim)),
                       T.broadcast_to(s_p, (n, cfg.style_dim))], axis=1)

    outs = []
    for kind, name, cond in ((EXPRESSION, "adf.dec_exp", emotion), (DELTA_POSE, "adf.dec_pose", first_pose)):
        lat = T.reshape(temporal_net(_with_condition(styled, cond), adf, name), (cfg.tau * n, cfg.code_dim))
        q, idx = quantize_nearest(lat, codebook(vq, kind))
        outs.append((vq_decode(q, cond, vq, kind, cfg), idx))
    (z_exp, i_exp), (z_pose, i_pose) = outs
    return ADFOutput(z_exp, z_pose, s_exp, s_p, i_exp, i_pose)


def flame_loss(pred_exp, gt_exp, pred_pose, gt_pose) -> Tensor:
    """Mean squared error of expressions plus mean squared error of pose
    variations."""
    pred_exp, pred_pose = (v if isinstance(v, Tensor) else Tensor(v) for v in (pred_exp, pred_pose))
    gt_exp, gt_pose = np.asarray(gt_exp), np.asarray(gt_pose)
    if pred_exp.shape != gt_exp.shape or pred_pose.shape != gt_pose.shape:
        raise T.ShapeError("flame_loss", pred_exp.shape, gt_exp.shape, pred_pose.shape, gt_pose.shape)
    return T.mean((pred_exp - gt_exp.astype(pred_exp.dtype)) ** 2) + \
        T.mean((pred_pose - gt_pose.astype(pred_pose.dtype)) ** 2)


def contrastive_loss(e_m, e_a, alpha: float = 1e-8) -> Tensor:
    """1 - cosine similarity along the last axis, averaged over any leading
    axes. Zero when the embeddings align."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    e_m, e_a = (v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64)) for v in (e_m, e_a))
    dot = T.sum_(e_m * e_a, axis=-1)
    norm = T.sqrt(T.sum_(e_m * e_m, axis=-1)) * T.sqrt(T.sum_(e_a * e_a, axis=-1))
    return T.mean(1.0 - dot / (norm + alpha))


def adf_total_loss(l_f, l_c) -> Tensor:
    """FLAME loss + contrastive loss. No adversarial term."""
    return T.add(l_f, l_c)


@dataclass
class Embedders:
    """Fixed projections standing in for the pretrained mouth-image and audio
    encoders: e_m reads the mouth expression dims, e_a recovers the same
    dims from audio before projecting."""

    mouth_proj: np.ndarray  # (mouth_dims, k)
    audio_to_mouth: np.ndarray  # (audio_dim, mouth_dims)

    def embed_mouth(self, exp: Tensor) -> Tensor:
        m = self.mouth_proj.shape[0]
        return exp[:, :m] @ self.mouth_proj.astype(exp.dtype)

    def embed_audio(self, audio) -> np.ndarray:
        return np.asarray(audio, dtype=np.float64) @ self.audio_to_mouth @ self.mouth_proj


def adf_losses(out: ADFOutput, gt_exp: np.ndarray, gt_pose: np.ndarray, audio, emb: Embedders):
    l_f = flame_loss(out.expression, gt_exp, out.delta_pose, gt_pose)
    e_m = emb.embed_mouth(out.expression)
    l_c = contrastive_loss(e_m, emb.embed_audio(audio).astype(e_m.dtype))
    return l_f, l_c, adf_total_loss(l_f, l_c)


def train_adf(samples, adf: ParamStore, vq: ParamStore, emb: Embedders, cfg: MotionConfig, tcfg: TrainConfig,
              steps: int | None = None, lr: float | None = None, log_every: int = 50, keep_best: bool = True):
    """``samples``: list of (audio, expr CoeffSequence, delta-pose CoeffSequence),
    each serving as its own style reference. Returns rows
    (step, L_f, L_c, total).

    With ``keep_best`` the held-in loss is measured once per pass over the
    samples and the best weights seen are restored at the end. Latents
    reach the codebook only through the straight-through estimator, so
    once the loss is small they keep drifting and eventually hop to
    another code; stopping early guards against that.
    """
    steps = cfg.adf_steps if steps is None else steps
    lr = tcfg.lr_adf if lr is None else lr
    n = len(samples)
    rows = []
    best, snapshot = np.inf, None
    for step in range(steps):
        audio, exp_seq, pose_seq = samples[step % n]
        adf.zero_grad()
        out = adf_generate(audio, (exp_seq, pose_seq), adf, vq, cfg)
        l_f, l_c, total = adf_losses(out, exp_seq.frames, pose_seq.frames, audio, emb)
        if not np.isfinite(total.item()):
            raise FloatingPointError(f"ADF training diverged at step {step}")
        if step % log_every == 0 or step == steps - 1:
            rows.append((step, l_f.item(), l_c.item(), total.item()))
        if keep_best and step % n == 0:
            held = total.item() if n == 1 else evaluate_adf(samples, adf, vq, emb, cfg)
            if held < best:
                best, snapshot = held, {name: t.data.copy() for name, t in adf.items()}
        T.backward(total)
        for name in adf.trainable_names():
            if adf[name].grad is None:
                adf[name].grad = np.zeros_like(adf[name].data)
        adam_step(adf, scheduled_lr(lr, step, steps, tcfg.lr_schedule), tcfg.beta1, tcfg.beta2, tcfg.eps,
                  tcfg.weight_decay, decoupled=tcfg.optimizer == "adamw")
    if snapshot is not None and evaluate_adf(samples, adf, vq, emb, cfg) > best:
        for name, t in adf.items():
            t.data[...] = snapshot[name]
    return rows


def evaluate_adf(samples, adf: ParamStore, vq: ParamStore, emb: Embedders, cfg: MotionConfig) -> float:
    total = 0.0
    with T.no_grad():
        for audio, exp_seq, pose_seq in samples:
            out = adf_generate(audio, (exp_seq, pose_seq), adf, vq, cfg)
            total += adf_losses(out, exp_seq.frames, pose_seq.frames, audio, emb)[2].item()
    return total / len(samples)


def fit_vq_stage(exp_seq: CoeffSequence, pose_seq: CoeffSequence, cfg: MotionConfig, tcfg: TrainConfig,
                 seed: int, steps: int | None = None, lr: float | None = None, log_every: int = 50):
    """Initialise and train both spaces. Returns the (unfrozen) store and
    rows (kind, step, loss, mse)."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_vq_params(store, cfg, rng)
    rows = []
    for seq in (exp_seq, pose_seq):
        fit_normalizer(store, seq)
        init_codebook_from_latents(store, seq, cfg, rng)
        rows += [(seq.kind,) + r for r in train_vq(seq, store, cfg, tcfg, steps, lr, log_every)]
    return store, rows
