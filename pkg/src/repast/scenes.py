"""Procedural scenes, an analytic ray-traced renderer, and dataset files.

Scenes are small arrangements of spheres and boxes resting on a ground
plane, lit by one directional light; the renderer is an exact nearest-hit
ray tracer with Lambertian shading and serves as the ground-truth oracle
for training and for every invariance experiment.

World frame: z is up, the ground plane is z = 0, objects sit near the
origin, and cameras are sampled on the upper hemisphere looking at the
scene center. All sampling is a deterministic function of the scene seed.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Intrinsics, Pose, look_at, pixel_rays_grid, pose_compose

__all__ = [
    "DatasetFormatError",
    "GeneratorConfig",
    "Scene",
    "SceneExample",
    "SceneObject",
    "images_to_float",
    "make_example",
    "read_dataset",
    "render_view",
    "sample_scene",
    "transform_scene",
    "write_dataset",
]

SCENE_CENTER = np.array([0.0, 0.0, 0.5])

_MAGIC = b"RPA1"
_VERSION = 1
_AMBIENT = 0.2
_HIT_EPS = 1e-9


class DatasetFormatError(IOError):
    """Raised for bad magic bytes, version mismatch, or truncated files."""


@dataclass(frozen=True)
class SceneObject:
    shape: str  # "sphere" | "box"
    pose: Pose
    scale: np.ndarray  # [3] half-extents; spheres use scale[0] as radius
    albedo: np.ndarray  # [3] in [0, 1]

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown shape {self.shape!r}")
        s = np.asarray(self.scale, dtype=np.float64)
        a = np.asarray(self.albedo, dtype=np.float64)
        if s.shape != (3,) or np.any(s <= 0):
            raise ValueError(f"scale must be 3 positive extents, got {s}")
        if a.shape != (3,) or np.any(a < 0) or np.any(a > 1):
            raise ValueError(f"albedo must be RGB in [0,1], got {a}")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "albedo", a)


@dataclass(frozen=True)
class Scene:
    objects: tuple
    ground_albedo: np.ndarray
    background: np.ndarray
    light_dir: np.ndarray  # unit vector pointing toward the light

    def __post_init__(self):
        if len(self.objects) < 1:
            raise ValueError("a scene needs at least one object")
        l = np.asarray(self.light_dir, dtype=np.float64)
        l = l / np.linalg.norm(l)
        object.__setattr__(self, "ground_albedo",
                           np.asarray(self.ground_albedo, dtype=np.float64))
        object.__setattr__(self, "background",
                           np.asarray(self.background, dtype=np.float64))
        object.__setattr__(self, "light_dir", l)


@dataclass(frozen=True)
class GeneratorConfig:
    """Bounds for procedural scene and camera sampling."""

    min_objects: int = 2
    max_objects: int = 4
    placement_radius: float = 1.3
    min_scale: float = 0.25
    max_scale: float = 0.55
    camera_radius: tuple = (3.2, 4.2)
    camera_elevation_deg: tuple = (18.0, 62.0)
    target_jitter: float = 0.35
    background: tuple = (0.07, 0.09, 0.12)
    ground_albedo: tuple = (0.45, 0.45, 0.45)
    max_placement_tries: int = 200

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError(f"bad object count bounds "
                             f"[{self.min_objects}, {self.max_objects}]")
        if not 0 < self.min_scale <= self.max_scale:
            raise ValueError("bad scale bounds")
        if not 0 < self.camera_radius[0] <= self.camera_radius[1]:
            raise ValueError("bad camera radius bounds")


@dataclass(frozen=True)
class SceneExample:
    """One training datum: N posed input views and M posed target views.

    Images are stored as uint8 RGB and poses as float32-exact values so the
    on-disk dataset round-trips bit-exactly.
    """

    images: np.ndarray  # [N, H, W, 3] uint8
    cameras: tuple  # N poses
    target_images: np.ndarray  # [M, H, W, 3] uint8
    target_cameras: tuple  # M poses
    intrinsics: Intrinsics
    seed: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ValueError("need at least one input view")
        if self.images.shape[1:] != self.target_images.shape[1:]:
            raise ValueError("input and target resolutions differ")

    @property
    def n_input(self) -> int:
        return self.images.shape[0]

    @property
    def n_target(self) -> int:
        return self.target_images.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]


# ---------------------------------------------------------------------------
# sampling


def _rng(seed: int, salt: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seeds must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([seed, salt]))


def sample_scene(seed: int, cfg: GeneratorConfig = GeneratorConfig()) -> Scene:
    """Deterministic random arrangement of 2-4 primitives on the ground."""
    rng = _rng(seed, 0xA5)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects = []
    radii = []  # horizontal keep-out radii of placed objects
    centers = []
    for _ in range(n):
        shape = "sphere" if rng.random() < 0.5 else "box"
        if shape == "sphere":
            r = rng.uniform(cfg.min_scale, cfg.max_scale)
            scale = np.array([r, r, r])
            keep_out = r
        else:
            scale = rng.uniform(cfg.min_scale, cfg.max_scale, size=3)
            keep_out = float(np.linalg.norm(scale[:2]))
        placed = False
        for _ in range(cfg.max_placement_tries):
            xy = rng.uniform(-cfg.placement_radius, cfg.placement_radius, size=2)
            ok = all(np.linalg.norm(xy - c) > keep_out + r0 + 0.05
                     for c, r0 in zip(centers, radii))
            if ok:
                placed = True
                break
        if not placed:
            raise RuntimeError(f"could not place object {len(objects)} after "
                               f"{cfg.max_placement_tries} tries (seed {seed})")
        yaw = rng.uniform(0.0, 2 * np.pi)
        rot = np.array([[np.cos(yaw), -np.sin(yaw), 0.0],
                        [np.sin(yaw), np.cos(yaw), 0.0],
                        [0.0, 0.0, 1.0]])
        center = np.array([xy[0], xy[1], scale[2]])  # resting on the ground
        albedo = rng.uniform(0.15, 0.95, size=3)
        objects.append(SceneObject(shape, Pose(rot, center), scale, albedo))
        centers.append(xy)
        radii.append(keep_out)
    light = rng.normal(size=3)
    light[2] = abs(light[2]) + 1.0  # always from above
    return Scene(tuple(objects), np.array(cfg.ground_albedo),
                 np.array(cfg.background), light)


def _sample_camera(rng: np.random.Generator, cfg: GeneratorConfig) -> Pose:
    radius = rng.uniform(*cfg.camera_radius)
    elev = np.deg2rad(rng.uniform(*cfg.camera_elevation_deg))
    azim = rng.uniform(0.0, 2 * np.pi)
    pos = np.array([radius * np.cos(elev) * np.cos(azim),
                    radius * np.cos(elev) * np.sin(azim),
                    radius * np.sin(elev)])
    jitter = rng.normal(size=3)
    jitter *= cfg.target_jitter * rng.random() / np.linalg.norm(jitter)
    return look_at(pos, SCENE_CENTER + jitter)


def _round_pose_f32(p: Pose) -> Pose:
    m = p.matrix34().astype(np.float32).astype(np.float64)
    return Pose.from_matrix34(m)


def make_example(seed: int, n_input: int = 5, n_target: int = 3,
                 resolution: int = 32,
                 cfg: GeneratorConfig = GeneratorConfig()) -> SceneExample:
    """Render one scene from freshly sampled hemisphere cameras."""
    if n_input < 1:
        raise ValueError(f"need at least one input view, got {n_input}")
    scene = sample_scene(seed, cfg)
    rng = _rng(seed, 0xC3)
    k = Intrinsics(focal=float(resolution), cx=resolution / 2.0,
                   cy=resolution / 2.0, width=resolution, height=resolution)
    cams = [_round_pose_f32(_sample_camera(rng, cfg))
            for _ in range(n_input + n_target)]
    images = np.stack([_quantize(render_view(scene, c, k)) for c in cams])
    return SceneExample(images=images[:n_input], cameras=tuple(cams[:n_input]),
                        target_images=images[n_input:],
                        target_cameras=tuple(cams[n_input:]),
                        intrinsics=k, seed=seed)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def images_to_float(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 images -> [0,1] floats (the model-facing representation)."""
    arr = np.asarray(images, dtype=dtype)
    return arr / np.asarray(255.0, dtype=dtype)


# ---------------------------------------------------------------------------
# analytic renderer


def _intersect_sphere(o, d, center, radius):
    oc = o - center
    b = np.sum(oc * d, axis=-1)
    c0 = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c0
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = -b - sq
    t = np.where(hit & (t > _HIT_EPS), t, np.inf)
    finite = np.isfinite(t)
    tsafe = np.where(finite, t, 0.0)
    n = (o + tsafe[..., None] * d - center) / radius
    n = np.where(finite[..., None], n, 0.0)
    return t, n


def _intersect_box(o, d, pose: Pose, scale):
    # slab test in the box's local frame
    rt = pose.rotation.T
    ol = (o - pose.translation) @ rt.T
    dl = d @ rt.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (-scale - ol) * inv
        t2 = (scale - ol) * inv
    near = np.where(np.isfinite(inv), np.minimum(t1, t2), -np.inf)
    far = np.where(np.isfinite(inv), np.maximum(t1, t2), np.inf)
    # degenerate axes hit only if the origin lies inside the slab
    inside = np.abs(ol) <= scale
    near = np.where(np.isfinite(inv), near, np.where(inside, -np.inf, np.inf))
    far = np.where(np.isfinite(inv), far, np.where(inside, np.inf, -np.inf))
    tmin = near.max(axis=-1)
    tmax = far.min(axis=-1)
    hit = (tmax >= tmin) & (tmin > _HIT_EPS)
    t = np.where(hit, tmin, np.inf)
    axis = np.argmax(near, axis=-1)
    local_n = np.zeros_like(ol)
    rows = np.arange(local_n.shape[0])
    local_n[rows, axis] = -np.sign(dl[rows, axis])
    n = local_n @ pose.rotation.T
    n = np.where(np.isfinite(t)[..., None], n, 0.0)
    return t, n


def render_view(scene: Scene, camera: Pose, k: Intrinsics) -> np.ndarray:
    """Nearest-hit ray trace returning an [H, W, 3] float64 image in [0,1]."""
    o, d = pixel_rays_grid(camera, k)
    npix = o.shape[0]
    best_t = np.full(npix, np.inf)
    normal = np.zeros((npix, 3))
    albedo = np.broadcast_to(scene.background, (npix, 3)).copy()
    shaded = np.zeros(npix, dtype=bool)

    def consider(t, n, alb):
        closer = t < best_t
        best_t[closer] = t[closer]
        normal[closer] = n[closer]
        albedo[closer] = alb
        shaded[closer] = True

    # ground plane z = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -o[:, 2] / d[:, 2]
    tg = np.where((d[:, 2] < 0) & (tg > _HIT_EPS), tg, np.inf)
    consider(tg, np.broadcast_to([0.0, 0.0, 1.0], (npix, 3)), scene.ground_albedo)

    for obj in scene.objects:
        if obj.shape == "sphere":
            t, n = _intersect_sphere(o, d, obj.pose.translation, obj.scale[0])
        else:
            t, n = _intersect_box(o, d, obj.pose, obj.scale)
        consider(t, n, obj.albedo)

    lam = np.maximum(0.0, normal @ scene.light_dir)
    img = np.where(shaded[:, None], albedo * (lam[:, None] + _AMBIENT), albedo)
    return np.clip(img, 0.0, 1.0).reshape(k.height, k.width, 3)


def transform_scene(scene: Scene, t: Pose) -> Scene:
    """Apply a rigid world transform to every object and the light."""
    objects = tuple(replace(obj, pose=pose_compose(t, obj.pose))
                    for obj in scene.objects)
    return Scene(objects, scene.ground_albedo, scene.background,
                 t.rotation @ scene.light_dir)


# ---------------------------------------------------------------------------
# dataset container
#
# Layout (little-endian): magic "RPA1", u32 version, u32 count, u32 N,
# u32 M, u32 H, u32 W; then per example: i64 seed, N+M poses as 12 f32
# (row-major 3x4, inputs first), intrinsics as 4 f32 (focal, cx, cy, 0),
# N+M images as raw u8 RGB (inputs first).


def _pack_pose(p: Pose) -> bytes:
    return p.matrix34().astype("<f4").tobytes()


def write_dataset(path: str | os.PathLike, examples: list[SceneExample]) -> None:
    if examples:
        first = examples[0]
        n, m = first.n_input, first.n_target
        h, w = first.resolution
        for ex in examples:
            if (ex.n_input, ex.n_target, ex.resolution) != (n, m, (h, w)):
                raise ValueError("all examples in a dataset must share N, M and resolution")
    else:
        n = m = h = w = 0
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<IIIIII", _VERSION, len(examples), n, m, h, w))
    for ex in examples:
        buf.write(struct.pack("<q", ex.seed))
        for p in list(ex.cameras) + list(ex.target_cameras):
            buf.write(_pack_pose(p))
        k = ex.intrinsics
        buf.write(struct.pack("<4f", k.focal, k.cx, k.cy, 0.0))
        buf.write(ex.images.tobytes())
        buf.write(ex.target_images.tobytes())
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def read_dataset(path: str | os.PathLike) -> list[SceneExample]:
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    if len(raw) < 28 or bytes(view[:4]) != _MAGIC:
        raise DatasetFormatError(f"{path}: not a scene dataset (bad magic bytes)")
    version, count, n, m, h, w = struct.unpack_from("<IIIIII", raw, 4)
    if version != _VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
    pos = 28
    img_bytes = h * w * 3
    need = count * (8 + (n + m) * 48 + 16 + (n + m) * img_bytes)
    if len(raw) - pos != need:
        raise DatasetFormatError(f"{path}: truncated or oversized payload "
                                 f"(expected {need} bytes, found {len(raw) - pos})")
    out = []
    for _ in range(count):
        (seed,) = struct.unpack_from("<q", raw, pos)
        pos += 8
        poses = []
        for _ in range(n + m):
            mat = np.frombuffer(raw, dtype="<f4", count=12, offset=pos).reshape(3, 4)
            poses.append(Pose.from_matrix34(mat.astype(np.float64)))
            pos += 48
        focal, cx, cy, _pad = struct.unpack_from("<4f", raw, pos)
        pos += 16
        k = Intrinsics(focal=focal, cx=cx, cy=cy, width=w, height=h)
        images = np.frombuffer(raw, dtype=np.uint8, count=n * img_bytes,
                               offset=pos).reshape(n, h, w, 3).copy()
        pos += n * img_bytes
        targets = np.frombuffer(raw, dtype=np.uint8, count=m * img_bytes,
                                offset=pos).reshape(m, h, w, 3).copy()
        pos += m * img_bytes
        out.append(SceneExample(images=images, cameras=tuple(poses[:n]),
                                target_images=targets,
                                target_cameras=tuple(poses[n:]),
                                intrinsics=k, seed=seed))
    return out
