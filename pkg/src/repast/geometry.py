"""SE(3) camera poses, pinhole rays, and sinusoidal ray encodings.

Conventions (fixed once, relied on everywhere):

* Poses are camera-to-world: ``rotation`` maps camera axes into the world,
  ``translation`` is the camera origin in world coordinates. The camera
  looks along its local +z axis; +x is screen right, +y is screen down.
* Pixel coordinates are continuous with pixel centers at integer + 0.5;
  ``u`` runs along image columns (x), ``v`` along rows (y).
* ``to_local(ray, cam)`` re-expresses a world ray in ``cam``'s local frame.
  It is equivariant: applying one rigid transform to both the ray and the
  camera leaves the local coordinates unchanged, which is the algebraic
  basis for every frame-invariance property downstream.

Ray encodings (:func:`posenc`) use the frozen layout
``[raw origin, raw direction | origin sin | origin cos | dir sin | dir cos]``
(raw block present only with ``include_raw``), frequencies ``base * 2**l``
ordered l-major then x,y,z within each block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Intrinsics",
    "PosEncConfig",
    "Pose",
    "Ray",
    "look_at",
    "patch_ray",
    "patch_rays",
    "pixel_ray",
    "pixel_rays_grid",
    "pose_compose",
    "pose_inverse",
    "posenc",
    "posenc_batch",
    "random_rigid",
    "rotation_about_axis",
    "to_local",
    "to_local_batch",
    "transform_ray",
]

_ORTHO_TOL = 1e-6


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform: world = rotation @ local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = _as_vec3(self.translation)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got shape {r.shape}")
        err = np.max(np.abs(r.T @ r - np.eye(3)))
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (|R^T R - I| = {err:.3g})")
        det = np.linalg.det(r)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation must have det 1, got {det:.9f}")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def matrix34(self) -> np.ndarray:
        """Row-major [R | t] as a 3x4 array."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    @classmethod
    def from_matrix34(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (3, 4):
            raise ValueError(f"expected a 3x4 matrix, got shape {m.shape}")
        return cls(m[:, :3], m[:, 3])


@dataclass(frozen=True)
class Ray:
    """A 3D ray with unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _as_vec3(self.origin)
        d = _as_vec3(self.direction)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"ray direction must be unit length, |d| = {n:.9f}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class Intrinsics:
    """Shared pinhole intrinsics: focal length and principal point in pixels."""

    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal length must be positive, got {self.focal}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside "
                             f"{self.width}x{self.height} image")


@dataclass(frozen=True)
class PosEncConfig:
    """Sinusoidal ray-encoding layout: frequency counts and base frequency."""

    num_freqs_origin: int = 6
    num_freqs_direction: int = 6
    base_frequency: float = math.pi
    include_raw: bool = True

    def __post_init__(self):
        if self.num_freqs_origin < 0 or self.num_freqs_direction < 0:
            raise ValueError("frequency counts must be non-negative")
        if not self.base_frequency > 0:
            raise ValueError(f"base frequency must be positive, got {self.base_frequency}")

    @property
    def dim(self) -> int:
        raw = 6 if self.include_raw else 0
        return raw + 6 * self.num_freqs_origin + 6 * self.num_freqs_direction


# ---------------------------------------------------------------------------
# SE(3) group ops


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Composition a ∘ b (apply b first, then a)."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis and angle in radians."""
    a = _as_vec3(axis)
    n = np.linalg.norm(a)
    if n == 0:
        raise ValueError("rotation axis must be nonzero")
    a = a / n
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def random_rigid(rng: np.random.Generator, translation_scale: float = 2.0) -> Pose:
    """A uniformly random rotation with a bounded random translation."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    t = rng.uniform(-translation_scale, translation_scale, size=3)
    return Pose(rotation_about_axis(axis, angle), t)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera pose at ``position`` with +z toward ``target``.

    ``up`` resolves roll; it must not be parallel to the view direction.
    """
    position = _as_vec3(position)
    target = _as_vec3(target)
    up = _as_vec3(up)
    fwd = target - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("look_at target coincides with camera position")
    z = fwd / n
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("view direction is parallel to the up vector")
    x = x / nx
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), position)


# ---------------------------------------------------------------------------
# ray maps


def transform_ray(t: Pose, r: Ray) -> Ray:
    """Apply a rigid transform to a world ray."""
    return Ray(t.rotation @ r.origin + t.translation, t.rotation @ r.direction)


def to_local(r: Ray, c: Pose) -> Ray:
    """Re-express a world ray in camera ``c``'s local coordinate frame."""
    rt = c.rotation.T
    d = rt @ r.direction
    return Ray(rt @ (r.origin - c.translation), d / np.linalg.norm(d))


def to_local_batch(origins: np.ndarray, directions: np.ndarray, c: Pose):
    """Vectorized :func:`to_local` over [n,3] origin/direction arrays."""
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    o = (origins - c.translation) @ c.rotation
    d = directions @ c.rotation
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return o, d


def pixel_ray(c: Pose, k: Intrinsics, u: float, v: float) -> Ray:
    """Ray from the camera origin through continuous pixel coordinate (u, v)."""
    if not (0.0 <= u <= k.width and 0.0 <= v <= k.height):
        raise ValueError(f"pixel ({u}, {v}) outside {k.width}x{k.height} image")
    d_cam = np.array([(u - k.cx) / k.focal, (v - k.cy) / k.focal, 1.0])
    d = c.rotation @ d_cam
    return Ray(c.translation.copy(), d / np.linalg.norm(d))


def pixel_rays_grid(c: Pose, k: Intrinsics):
    """Rays through every pixel center, row-major; returns ([HW,3], [HW,3])."""
    us = (np.arange(k.width) + 0.5 - k.cx) / k.focal
    vs = (np.arange(k.height) + 0.5 - k.cy) / k.focal
    uu, vv = np.meshgrid(us, vs)  # [H, W]
    d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    d = d_cam @ c.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(c.translation, d.shape).copy()
    return o, d


def _patch_center(k: Intrinsics, patch_index: int, patch_grid) -> tuple[float, float]:
    ph, pw = int(patch_grid[0]), int(patch_grid[1])
    if ph < 1 or pw < 1:
        raise ValueError(f"patch grid must be positive, got {patch_grid}")
    if not 0 <= patch_index < ph * pw:
        raise IndexError(f"patch index {patch_index} out of range for {ph}x{pw} grid")
    row, col = patch_index // pw, patch_index % pw
    return (col + 0.5) * (k.width / pw), (row + 0.5) * (k.height / ph)


def patch_ray(c: Pose, k: Intrinsics, patch_index: int, patch_grid) -> Ray:
    """Ray through the geometric center of patch ``patch_index``.

    Patches tile the image in a row-major (H', W') grid; index j maps to
    row j // W', column j % W'.
    """
    u, v = _patch_center(k, patch_index, patch_grid)
    return pixel_ray(c, k, u, v)


def patch_rays(c: Pose, k: Intrinsics, patch_grid):
    """All patch-center rays of a grid, row-major; returns ([P,3], [P,3])."""
    ph, pw = int(patch_grid[0]), int(patch_grid[1])
    us = ((np.arange(pw) + 0.5) * (k.width / pw) - k.cx) / k.focal
    vs = ((np.arange(ph) + 0.5) * (k.height / ph) - k.cy) / k.focal
    uu, vv = np.meshgrid(us, vs)
    d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    d = d_cam @ c.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(c.translation, d.shape).copy()
    return o, d


# ---------------------------------------------------------------------------
# sinusoidal encoding


def _freqs(cfg: PosEncConfig, count: int) -> np.ndarray:
    return cfg.base_frequency * (2.0 ** np.arange(count))


def posenc_batch(origins: np.ndarray, directions: np.ndarray,
                 cfg: PosEncConfig) -> np.ndarray:
    """Encode [n,3] origins/directions into [n, cfg.dim] feature rows."""
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    parts = []
    if cfg.include_raw:
        parts.append(origins)
        parts.append(directions)
    for vec, count in ((origins, cfg.num_freqs_origin),
                       (directions, cfg.num_freqs_direction)):
        if count == 0:
            continue
        args = vec[:, None, :] * _freqs(cfg, count)[None, :, None]  # [n, L, 3]
        flat = args.reshape(len(vec), -1)
        parts.append(np.sin(flat))
        parts.append(np.cos(flat))
    if not parts:
        return np.zeros((len(origins), 0))
    return np.concatenate(parts, axis=1)


def posenc(r: Ray, cfg: PosEncConfig) -> np.ndarray:
    """Sinusoidal encoding of a single ray; see the module layout note."""
    return posenc_batch(r.origin[None], r.direction[None], cfg)[0]
