"""Head pose -> camera extrinsics, pinhole ray grids and depth sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    focal: float = 64.0
    cx: float = 32.0
    cy: float = 32.0
    height: int = 64
    width: int = 64
    near: float = 0.5
    far: float = 2.5


@dataclass
class Camera:
    extrinsic: np.ndarray  # 4x4 world-from-camera
    focal: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.extrinsic[:3, 3]


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float


@dataclass
class RayBundle:
    """H*W rays in row-major pixel order."""

    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3), unit length
    t_near: float
    t_far: float
    height: int
    width: int

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i], self.t_near, self.t_far)

    def subset(self, idx) -> RayBundle:
        o, d = self.origins[idx], self.directions[idx]
        return RayBundle(o, d, self.t_near, self.t_far, o.shape[0], 1)


def rodrigues(axis_angle) -> np.ndarray:
    """Rotation matrix from an axis-angle vector (angle = norm)."""
    r = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return np.eye(3)
    k = r / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def pose_to_camera(pose, intr: Intrinsics = Intrinsics()) -> Camera:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (6,):
        raise ValueError(f"pose must have 6 entries, got shape {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise ValueError(f"pose has non-finite entries: {pose.tolist()}")
    ext = np.eye(4)
    ext[:3, :3] = rodrigues(pose[:3])
    ext[:3, 3] = pose[3:]
    return Camera(ext, float(intr.focal), (float(intr.cx), float(intr.cy)),
                  (int(intr.height), int(intr.width)))


def generate_rays(cam: Camera, t_near: float = 0.5, t_far: float = 2.5) -> RayBundle:
    if cam.focal <= 0:
        raise ValueError(f"focal length must be positive, got {cam.focal}")
    if not t_near < t_far:
        raise ValueError(f"need t_near < t_far, got {t_near}, {t_far}")
    h, w = cam.image_size
    cx, cy = cam.principal_point
    i, j = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dirs = np.stack([(j + 0.5 - cx) / cam.focal,
                     -(i + 0.5 - cy) / cam.focal,
                     -np.ones_like(i, dtype=np.float64)], axis=-1).reshape(-1, 3)
    dirs = dirs @ cam.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam.center, dirs.shape).copy()
    return RayBundle(origins, dirs, float(t_near), float(t_far), h, w)


def project_points(points, cam: Camera) -> np.ndarray:
    """World points -> continuous pixel coordinates (u, v) = (column, row),
    pixel centres at half-integers. Inverse of the ray construction above."""
    p = (np.asarray(points, dtype=np.float64) - cam.center) @ cam.rotation
    depth = -p[..., 2]
    u = cam.principal_point[0] + cam.focal * p[..., 0] / depth
    v = cam.principal_point[1] - cam.focal * p[..., 1] / depth
    return np.stack([u, v], axis=-1)


def sample_along_ray(ray: Ray, n: int, stratified: bool = False, seed=None) -> np.ndarray:
    return sample_depths(1, ray.t_near, ray.t_far, n, stratified, seed)[0]


def sample_depths(n_rays: int, t_near: float, t_far: float, n: int,
                  stratified: bool = False, seed=None) -> np.ndarray:
    """(n_rays, n) ascending depths; bin midpoints, or uniform jitter per bin."""
    if n < 1:
        raise ValueError(f"need at least one sample per ray, got n={n}")
    offsets = np.full((n_rays, n), 0.5)
    if stratified:
        offsets = np.random.default_rng(seed).random((n_rays, n))
    t = t_near + (np.arange(n) + offsets) / n * (t_far - t_near)
    return t
