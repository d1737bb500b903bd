"""Seeded synthetic scenes, coefficient tracks and audio features.

Scenes are analytic: a Gaussian "head" blob fixed in world space and seen
through the per-frame head camera (so its image position is a function of
pose), composited over a soft-edged static "torso" rectangle and a smooth
background. Blob hue follows expression[0].
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fields import EMOTIONS, N_EXPRESSION, N_JAW, N_POSE, MotionFrame, one_hot
from .geometry import Intrinsics, pose_to_camera, project_points
from .imageio import read_ppm, write_ppm
from .motion import DELTA_POSE, EXPRESSION, CoeffSequence, Embedders

HEAD_CENTER = np.array([0.0, 0.0, -1.5])  # on the optical axis of the zero pose
HEAD_RADIUS = 0.2  # world-space std of the blob
HEAD_MASK_LEVEL = 0.1


@dataclass
class SyntheticScene:
    frames: list[MotionFrame]
    images: np.ndarray  # (F, S, S, 3) float32 in [0, 1]
    head_masks: np.ndarray  # (F, S, S, 1) binary
    static_masks: np.ndarray  # (F, S, S, 1) binary
    background: np.ndarray  # (S, S, 3)
    seed: int = 0

    @property
    def size(self) -> int:
        return self.images.shape[1]

    def __len__(self) -> int:
        return len(self.frames)

    def head_mask_at(self, index: int, size: int) -> np.ndarray:
        """Head mask pooled (max) to ``size`` x ``size`` for feature-level fusion."""
        return downsample_mask(self.head_masks[index], size)


def downsample_mask(mask: np.ndarray, size: int) -> np.ndarray:
    s = mask.shape[0]
    if s == size:
        return mask.astype(np.float32)
    f = s // size
    if f * size != s:
        raise ValueError(f"mask size {s} is not a multiple of {size}")
    return mask.reshape(size, f, size, f, -1).max(axis=(1, 3)).astype(np.float32)


def output_intrinsics(feature: Intrinsics, factor: int) -> Intrinsics:
    return Intrinsics(feature.focal * factor, feature.cx * factor, feature.cy * factor,
                      feature.height * factor, feature.width * factor, feature.near, feature.far)


def _smoothstep_box(x, lo, hi, soft):
    s = 1.0 / (1.0 + np.exp(-(x - lo) / soft))
    return s * (1.0 / (1.0 + np.exp((x - hi) / soft)))


def head_color(expression0: float) -> np.ndarray:
    hue = 0.05 + 0.12 * np.tanh(expression0)
    return np.array(colorsys.hsv_to_rgb(hue % 1.0, 0.55, 0.95))


def render_scene_frame(frame: MotionFrame, intr: Intrinsics, background: np.ndarray):
    """Analytic ground truth image plus head/static masks for one frame."""
    s = intr.height
    cam = pose_to_camera(frame.pose, intr)
    u0, v0 = project_points(HEAD_CENTER, cam)
    depth = -((HEAD_CENTER - cam.center) @ cam.rotation)[2]
    rad = intr.focal * HEAD_RADIUS / depth
    v, u = np.meshgrid(np.arange(s) + 0.5, np.arange(s) + 0.5, indexing="ij")
    head_a = 0.95 * np.exp(-((u - u0) ** 2 + (v - v0) ** 2) / (2 * rad ** 2))

    soft = 0.02 * s
    torso_a = _smoothstep_box(u, 0.22 * s, 0.78 * s, soft) * _smoothstep_box(v, 0.72 * s, 1.3 * s, soft)
    torso_col = np.stack([0.20 + 0.1 * v / s, 0.30 + 0.05 * u / s, 0.65 * np.ones_like(u)], axis=-1)

    img = background.astype(np.float64)
    img = torso_a[..., None] * torso_col + (1 - torso_a[..., None]) * img
    img = head_a[..., None] * head_color(float(frame.expression[0])) + (1 - head_a[..., None]) * img
    m_h = (head_a > HEAD_MASK_LEVEL).astype(np.float32)[..., None]
    return np.clip(img, 0, 1).astype(np.float32), m_h, 1.0 - m_h


def make_background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.55, 0.85, 3)
    tilt = rng.uniform(-0.15, 0.15, (2, 3))
    v, u = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    bg = base + u[..., None] * tilt[0] + v[..., None] * tilt[1]
    return np.clip(bg, 0, 1).astype(np.float32)


def _sinusoid_track(rng: np.random.Generator, t: int, dims: int, amp: float, max_freq: float = 0.08,
                    n_terms: int = 3) -> np.ndarray:
    """Sum of up to ``n_terms`` sinusoids per dimension (cycles per frame
    below ``max_freq``)."""
    steps = np.arange(t)[:, None, None]
    terms = rng.integers(1, n_terms + 1, dims)
    freq = rng.uniform(0.01, max_freq, (n_terms, dims))
    phase = rng.uniform(0, 2 * np.pi, (n_terms, dims))
    a = rng.uniform(0.3, 1.0, (n_terms, dims)) * (np.arange(n_terms)[:, None] < terms[None])
    a = a / np.maximum(a.sum(axis=0, keepdims=True), 1e-9) * amp
    return np.sum(a * np.sin(2 * np.pi * freq * steps + phase), axis=1)


def make_synthetic_sequences(seed: int, t: int, emotion: int = 0, max_step: float = 0.02,
                             exp_amp: float = 0.8, fps: float = 25.0) -> tuple[CoeffSequence, CoeffSequence]:
    """Expression track (t, 53) and a pose-variation track: t deltas of a
    (t+1)-frame pose trajectory, each |delta| <= max_step."""
    if t < 2:
        raise ValueError("need t >= 2 frames")
    rng = np.random.default_rng(seed)
    exp = _sinusoid_track(rng, t, N_EXPRESSION, exp_amp)
    poses = _sinusoid_track(rng, t + 1, N_POSE, 1.0)
    deltas = np.diff(poses, axis=0)
    scale = max_step / max(np.abs(deltas).max(), 1e-12)
    poses = poses * scale * 0.999
    first = poses[0]
    deltas = np.diff(poses, axis=0)
    emo = one_hot(emotion)
    return (CoeffSequence(EXPRESSION, exp, fps, emotion=emo),
            CoeffSequence(DELTA_POSE, deltas, fps, first_pose=first))


# ------------------------------------------------------------------ audio
@dataclass
class AudioModel:
    """Linear synthetic audio: mouth dims mixed through ``mix`` plus a
    phoneme embedding living in the orthogonal complement."""

    mix: np.ndarray  # (mouth_dims, audio_dim)
    phonemes: np.ndarray  # (n_phonemes, audio_dim), rows orthogonal to range(mix)

    @classmethod
    def from_seed(cls, seed: int, audio_dim: int = 29, mouth_dims: int = 8, n_phonemes: int = 12):
        rng = np.random.default_rng(seed)
        basis, _ = np.linalg.qr(rng.normal(size=(audio_dim, audio_dim)))
        mouth_basis = basis[:, :mouth_dims].T  # (mouth, audio)
        comp = basis[:, mouth_dims:].T
        a = np.eye(mouth_dims) + 0.3 * rng.normal(size=(mouth_dims, mouth_dims)) / np.sqrt(mouth_dims)
        phon = rng.normal(0, 0.5, (n_phonemes, comp.shape[0])) @ comp
        return cls(a @ mouth_basis, phon)

    def features(self, expression: np.ndarray, seed: int, hold: tuple[int, int] = (2, 5)) -> np.ndarray:
        rng = np.random.default_rng(seed)
        n = expression.shape[0]
        track = []
        while len(track) < n:
            track += [int(rng.integers(len(self.phonemes)))] * int(rng.integers(hold[0], hold[1] + 1))
        mouth = expression[:, : self.mix.shape[0]]
        return (mouth @ self.mix + self.phonemes[np.array(track[:n])]).astype(np.float32)

    def embedders(self, seed: int, embed_dim: int = 16) -> Embedders:
        rng = np.random.default_rng(seed)
        proj = rng.normal(size=(self.mix.shape[0], embed_dim)) / np.sqrt(embed_dim)
        return Embedders(proj, np.linalg.pinv(self.mix))


# ------------------------------------------------------------------ scenes
def make_synthetic_scene(seed: int, frames: int = 8, size: int = 128,
                         intr: Intrinsics | None = None) -> SyntheticScene:
    """``size`` is the ground-truth image resolution; the camera defaults to
    the 64x64 feature-grid intrinsics scaled to it."""
    if frames < 1:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(seed)
    if intr is None:
        base = Intrinsics()
        f = size / base.height
        intr = Intrinsics(base.focal * f, base.cx * f, base.cy * f, size, size, base.near, base.far)
    exp = _sinusoid_track(rng, frames, N_EXPRESSION, 0.8, max_freq=0.15)
    jaw = _sinusoid_track(rng, frames, N_JAW, 0.1, max_freq=0.15)
    trans = _sinusoid_track(rng, frames, 2, 0.08, max_freq=0.15)
    trans -= trans[0]
    emotion = int(rng.integers(len(EMOTIONS)))
    background = make_background(size, rng)
    out = []
    images, mh, ms = [], [], []
    for i in range(frames):
        # in-plane translation only, so blob position is injective in pose
        pose = np.array([0.0, 0.0, 0.0, trans[i, 0], trans[i, 1], 0.0])
        fr = MotionFrame(exp[i], pose, jaw[i], one_hot(emotion))
        img, m_h, m_s = render_scene_frame(fr, intr, background)
        out.append(fr)
        images.append(img)
        mh.append(m_h)
        ms.append(m_s)
    return SyntheticScene(out, np.stack(images), np.stack(mh), np.stack(ms), background, seed)


def export_scene(scene: SyntheticScene, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, fr in enumerate(scene.frames):
        names = {"image": f"frame_{i:04d}.ppm", "head_mask": f"head_mask_{i:04d}.ppm",
                 "static_mask": f"static_mask_{i:04d}.ppm"}
        write_ppm(d / names["image"], scene.images[i])
        write_ppm(d / names["head_mask"], scene.head_masks[i])
        write_ppm(d / names["static_mask"], scene.static_masks[i])
        entries.append({**names, **fr.to_dict()})
    write_ppm(d / "background.ppm", scene.background)
    manifest = {"format": "erlhead-scene", "version": 1, "seed": scene.seed, "size": scene.size,
                "background": "background.ppm", "frames": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return d / "manifest.json"


def load_scene(directory) -> SyntheticScene:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    frames, images, mh, ms = [], [], [], []
    for e in manifest["frames"]:
        frames.append(MotionFrame.from_dict(e))
        images.append(read_ppm(d / e["image"]))
        mh.append((read_ppm(d / e["head_mask"])[..., :1] > 0.5).astype(np.float32))
        ms.append((read_ppm(d / e["static_mask"])[..., :1] > 0.5).astype(np.float32))
    return SyntheticScene(frames, np.stack(images), np.stack(mh), np.stack(ms),
                          read_ppm(d / manifest["background"]), int(manifest.get("seed", 0)))


def load_track(path) -> list[MotionFrame]:
    """Motion frames from a scene manifest or a bare ``{"frames": [...]}`` track."""
    doc = json.loads(Path(path).read_text())
    return [MotionFrame.from_dict(e) for e in doc["frames"]]


def save_track(frames: list[MotionFrame], path) -> None:
    Path(path).write_text(json.dumps({"frames": [f.to_dict() for f in frames]}, indent=1) + "\n")


def make_adf_dataset(seed: int, n: int = 1, frames: int = 16, audio_dim: int = 29, mouth_dims: int = 8,
                     embed_dim: int = 16, sequences=None):
    """(audio, expression, delta-pose) triples sharing one audio model, plus
    the matching fixed embedders. Sample ``i`` uses the sequences of
    ``make_synthetic_sequences(seed + i, frames)`` unless ``sequences``
    (a list of (expression, delta-pose) pairs) is given."""
    if sequences is None:
        sequences = [make_synthetic_sequences(seed + i, frames, emotion=i % len(EMOTIONS)) for i in range(n)]
    model = AudioModel.from_seed(seed, audio_dim, mouth_dims)
    samples = [(model.features(exp.frames, seed + 1000 + i), exp, pose) for i, (exp, pose) in enumerate(sequences)]
    return samples, model.embedders(seed, embed_dim)
