"""Procedural RGBD video of box-furnished rooms.

A scene is a closed axis-aligned room (world z up, floor at z=0) with
axis-aligned boxes on the floor and thin panels on the walls.  Frames are
ray cast: every pixel hits the room shell or a box, so depth is total.

Class ids: 0 background (ceiling), 1 floor, 2 wall, 3.. furniture.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, GenerationError, RendererError
from .geometry import Intrinsics, Se3Motion, axis_angle, relative_motion

BACKGROUND, FLOOR, WALL = 0, 1, 2

# kind, (min size), (max size): size is (along-wall width, depth, height)
# "floor" boxes stand on the floor; "wall" panels hang on a wall at z0 range
_TEMPLATES = [
    ("floor", (0.7, 0.6, 0.45), (1.3, 1.0, 0.9), (0.0, 0.0)),     # table-like block
    ("floor", (0.5, 0.35, 1.3), (1.0, 0.55, 2.0), (0.0, 0.0)),    # cabinet
    ("wall", (0.8, 0.05, 1.9), (1.0, 0.07, 2.1), (0.0, 0.0)),     # door
    ("floor", (0.35, 0.35, 0.4), (0.6, 0.6, 0.7), (0.0, 0.0)),    # small crate
    ("wall", (0.6, 0.03, 0.45), (1.1, 0.04, 0.8), (0.8, 1.3)),    # picture
]

_BASE_PALETTE = [
    (0.85, 0.85, 0.80),  # ceiling
    (0.55, 0.42, 0.30),  # floor
    (0.78, 0.74, 0.66),  # wall
    (0.45, 0.30, 0.20),  # table
    (0.60, 0.60, 0.66),  # cabinet
    (0.70, 0.52, 0.34),  # door
    (0.30, 0.45, 0.55),  # crate
    (0.72, 0.36, 0.30),  # picture
]


@dataclass
class SceneConfig:
    room_min: tuple[float, float, float] = (4.0, 4.0, 2.5)
    room_max: tuple[float, float, float] = (6.0, 6.0, 3.0)
    object_count: tuple[int, int] = (5, 9)
    num_classes: int = 8
    image_size: tuple[int, int] = (64, 64)
    focal: float = 48.0
    num_scenes: int = 24
    frames_per_scene: int = 48
    step_size: float = 0.06
    step_smoothing: float = 0.8
    yaw_rate: float = 0.04
    pitch: float = -0.25
    pitch_jitter: float = 0.08
    cam_height: tuple[float, float] = (1.1, 1.6)
    texture_scale: float = 0.35
    texture_frequency: float = 4.0
    color_jitter: float = 0.08
    rarity_decay: float = 0.75
    ambient: float = 0.45
    max_tries: int = 200

    def __post_init__(self):
        self.room_min = tuple(float(x) for x in self.room_min)
        self.room_max = tuple(float(x) for x in self.room_max)
        self.object_count = tuple(int(x) for x in self.object_count)
        self.image_size = tuple(int(x) for x in self.image_size)
        self.cam_height = tuple(float(x) for x in self.cam_height)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.room_min) <= 0 or any(a > b for a, b in zip(self.room_min, self.room_max)):
            raise ConfigError("room extents must be positive and ordered")
        if self.object_count[0] < 0 or self.object_count[0] > self.object_count[1]:
            raise ConfigError("bad object_count range")
        if min(self.image_size) < 1 or self.num_scenes < 1 or self.frames_per_scene < 1:
            raise ConfigError("image size, scene and frame counts must be positive")
        if self.focal <= 0:
            raise ConfigError("focal must be positive")
        if self.num_classes > 3 + len(_TEMPLATES) * 4:
            raise ConfigError("too many classes for the furniture templates")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown scene config keys: {sorted(extra)}")
        return cls(**d)

    def intrinsics(self) -> Intrinsics:
        h, w = self.image_size
        return Intrinsics(self.focal, self.focal, (w - 1) / 2.0, (h - 1) / 2.0)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    cls: int
    color: np.ndarray

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "cls": self.cls,
                "color": self.color.tolist()}


@dataclass
class Scene:
    room_lo: np.ndarray
    room_hi: np.ndarray
    boxes: list[Box]
    palette: np.ndarray
    light: np.ndarray
    texture_seed: int
    free_lo: np.ndarray
    free_hi: np.ndarray

    def to_dict(self) -> dict:
        return {"room_lo": self.room_lo.tolist(), "room_hi": self.room_hi.tolist(),
                "boxes": [b.to_dict() for b in self.boxes], "palette": self.palette.tolist(),
                "light": self.light.tolist(), "texture_seed": self.texture_seed,
                "free_lo": self.free_lo.tolist(), "free_hi": self.free_hi.tolist()}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Frame:
    rgb: np.ndarray
    depth: np.ndarray
    seg: np.ndarray
    pose: Se3Motion
    intrinsics: Intrinsics
    index: int


@dataclass
class Sequence:
    frames: list[Frame]
    scene: Scene
    seed: int
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)


def palette(num_classes: int) -> np.ndarray:
    cols = list(_BASE_PALETTE)
    rng = np.random.default_rng(12345)
    while len(cols) < num_classes:
        cols.append(tuple(rng.uniform(0.2, 0.8, size=3)))
    return np.array(cols[:num_classes])


def class_weights(cfg: SceneConfig) -> np.ndarray:
    """Selection probability of each furniture class (geometric skew)."""
    n = cfg.num_classes - 3
    w = cfg.rarity_decay ** np.arange(n)
    return w / w.sum()


def _overlaps(lo, hi, others, gap=0.05) -> bool:
    return any(np.all(lo < o.hi + gap) and np.all(hi > o.lo - gap) for o in others)


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    size = rng.uniform(cfg.room_min, cfg.room_max)
    room_lo = np.array([-size[0] / 2, -size[1] / 2, 0.0])
    room_hi = np.array([size[0] / 2, size[1] / 2, size[2]])
    # camera keeps to a central rectangle that furniture must not intrude on
    free_half = np.array([size[0] * 0.22, size[1] * 0.22])
    free_lo = np.array([-free_half[0], -free_half[1], 0.0])
    free_hi = np.array([free_half[0], free_half[1], size[2]])
    free_box = Box(free_lo + np.array([-0.3, -0.3, 0]), free_hi + np.array([0.3, 0.3, 0]), -1,
                   np.zeros(3))
    pal = palette(cfg.num_classes)
    n_obj = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1)) if cfg.num_classes > 3 else 0
    probs = class_weights(cfg) if cfg.num_classes > 3 else None
    boxes: list[Box] = []
    for _ in range(n_obj):
        cls = 3 + int(rng.choice(len(probs), p=probs))
        kind, smin, smax, zrange = _TEMPLATES[(cls - 3) % len(_TEMPLATES)]
        for _attempt in range(cfg.max_tries):
            wid, dep, hgt = rng.uniform(smin, smax)
            wall = int(rng.integers(4))
            axis = wall // 2  # 0: walls at x bounds, 1: walls at y bounds
            along = 1 - axis
            ext = np.zeros(3)
            ext[along], ext[axis], ext[2] = wid, dep, hgt
            lo = np.zeros(3)
            slack = (room_hi[along] - room_lo[along]) - wid - 0.1
            if slack <= 0:
                continue
            lo[along] = room_lo[along] + 0.05 + rng.uniform(0, slack)
            if kind == "wall":
                lo[axis] = room_lo[axis] if wall % 2 == 0 else room_hi[axis] - dep
                lo[2] = rng.uniform(*zrange)
            else:
                off = rng.uniform(0.0, 0.6)
                lo[axis] = room_lo[axis] + off if wall % 2 == 0 else room_hi[axis] - dep - off
                lo[2] = 0.0
            hi = lo + ext
            if hi[2] > room_hi[2] - 0.05:
                continue
            if kind == "floor" and _overlaps(lo, hi, [free_box], gap=0.0):
                continue
            if _overlaps(lo, hi, boxes):
                continue
            color = np.clip(pal[cls] + rng.normal(0, cfg.color_jitter, size=3), 0.02, 0.98)
            boxes.append(Box(lo, hi, cls, color))
            break
        else:
            raise GenerationError(f"could not place a class-{cls} object in {cfg.max_tries} tries")
    light = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), room_hi[2] - 0.2])
    return Scene(room_lo, room_hi, boxes, pal, light, int(rng.integers(2**31)), free_lo, free_hi)


# --------------------------------------------------------------------------
# rendering


def _hash01(ix, iy, iz, seed: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1)."""
    with np.errstate(over="ignore"):
        h = (ix.astype(np.uint64) * np.uint64(0x9E3779B185EBCA87)
             ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
             ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
             ^ np.uint64(seed) * np.uint64(0x27D4EB2F165667C5))
        h ^= h >> np.uint64(29)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(np.float64) / float(2**53)


def value_noise(p: np.ndarray, seed: int) -> np.ndarray:
    """Smooth 3D value noise in [0, 1) at points p (..., 3)."""
    f = np.floor(p)
    t = p - f
    s = t * t * (3 - 2 * t)
    i = f.astype(np.int64)
    out = np.zeros(p.shape[:-1])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((s[..., 0] if dx else 1 - s[..., 0]) * (s[..., 1] if dy else 1 - s[..., 1])
                     * (s[..., 2] if dz else 1 - s[..., 2]))
                out += w * _hash01(i[..., 0] + dx, i[..., 1] + dy, i[..., 2] + dz, seed)
    return out


def raycast(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit along each ray ``origin + s * dirs``.

    Returns (s, class id, surface normal, albedo) per ray.
    """
    n = dirs.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_hi = (scene.room_hi - origin) * inv
        t_lo = (scene.room_lo - origin) * inv
        exit_t = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
    axis = np.argmin(exit_t, axis=1)
    s = exit_t[np.arange(n), axis]
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise RendererError("ray escaped the room")
    positive = dirs[np.arange(n), axis] > 0
    cls = np.where(axis == 2, np.where(positive, BACKGROUND, FLOOR), WALL)
    normal = np.zeros((n, 3))
    normal[np.arange(n), axis] = np.where(positive, -1.0, 1.0)
    albedo = scene.palette[cls]

    for box in scene.boxes:
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (box.lo - origin) * inv
            t2 = (box.hi - origin) * inv
            # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
            par = dirs == 0
            inside = (origin >= box.lo) & (origin <= box.hi)
            t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
            t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        near_axis = np.argmax(tmin, axis=1)
        t_near = tmin[np.arange(n), near_axis]
        t_far = tmax.min(axis=1)
        hit = (t_near <= t_far) & (t_near > 1e-6) & (t_near < s)
        if not hit.any():
            continue
        s = np.where(hit, t_near, s)
        cls = np.where(hit, box.cls, cls)
        bn = np.zeros((n, 3))
        bn[np.arange(n), near_axis] = -np.sign(dirs[np.arange(n), near_axis])
        normal = np.where(hit[:, None], bn, normal)
        albedo = np.where(hit[:, None], box.color, albedo)
    return s, cls, normal, albedo


def look_at_rotation(forward: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation with columns (right, down, forward)."""
    f = forward / np.linalg.norm(forward)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return np.stack([r, d, f], axis=1)


def raycast_frame(scene: Scene, pose: Se3Motion, k: Intrinsics, size: tuple[int, int],
                  cfg: SceneConfig | None = None, index: int = 0) -> Frame:
    cfg = cfg or SceneConfig()
    h, w = size
    vs, us = np.mgrid[0:h, 0:w]
    d_cam = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones((h, w))], axis=-1)
    dirs = d_cam.reshape(-1, 3) @ pose.rotation.T
    s, cls, normal, albedo = raycast(scene, pose.translation, dirs)
    pts = pose.translation + s[:, None] * dirs
    # depth is the camera-z coordinate, which equals s because d_cam has unit z
    depth = s.reshape(h, w)

    # texture lives on surfaces in world space; class offset decorrelates classes
    q = pts * cfg.texture_frequency
    tex = 0.65 * value_noise(q + cls[:, None] * 17.3, scene.texture_seed)
    tex += 0.35 * value_noise(q * 2.7 + cls[:, None] * 5.1, scene.texture_seed + 1)
    tex = 1.0 - cfg.texture_scale + cfg.texture_scale * 2.0 * (tex - 0.5)

    to_light = scene.light - pts
    to_light /= np.linalg.norm(to_light, axis=1, keepdims=True)
    lam = np.clip((normal * to_light).sum(axis=1), 0.0, 1.0)
    shade = cfg.ambient + (1.0 - cfg.ambient) * lam
    rgb = np.clip(albedo * (tex * shade)[:, None], 0.0, 1.0).reshape(h, w, 3)
    return Frame(rgb.astype(np.float32), depth.astype(np.float32),
                 cls.reshape(h, w).astype(np.int64), pose, k, index)


def trajectory(scene: Scene, cfg: SceneConfig, n: int, rng: np.random.Generator) -> list[Se3Motion]:
    """Smooth random walk inside the free rectangle, looking around the room."""
    lo, hi = scene.free_lo[:2], scene.free_hi[:2]
    pos = np.array([rng.uniform(lo[0], hi[0]), rng.uniform(lo[1], hi[1]),
                    rng.uniform(*cfg.cam_height)])
    vel = np.zeros(2)
    yaw = rng.uniform(0, 2 * np.pi)
    yaw_vel = 0.0
    pitch_phase = rng.uniform(0, 2 * np.pi)
    poses = []
    for i in range(n):
        pitch = cfg.pitch + cfg.pitch_jitter * np.sin(pitch_phase + 0.15 * i)
        fwd = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
        poses.append(Se3Motion(look_at_rotation(fwd), pos.copy()))
        a = cfg.step_smoothing
        vel = a * vel + (1 - a) * rng.normal(0, 1, size=2)
        speed = np.linalg.norm(vel)
        step = vel / speed * cfg.step_size if speed > 0 else vel
        nxt = pos[:2] + step
        # reflect off the free-rectangle walls
        for j in range(2):
            if nxt[j] < lo[j] or nxt[j] > hi[j]:
                vel[j] = -vel[j]
                nxt[j] = pos[j] - step[j]
        pos = np.array([nxt[0], nxt[1], pos[2]])
        yaw_vel = 0.85 * yaw_vel + 0.15 * rng.normal(0, 1.0)
        yaw += cfg.yaw_rate * np.clip(yaw_vel / 0.4, -1.0, 1.0) + cfg.yaw_rate * 0.5
    return poses


def generate_sequence(cfg: SceneConfig, seed: int, n_frames: int | None = None,
                      name: str = "") -> Sequence:
    n = cfg.frames_per_scene if n_frames is None else n_frames
    scene = generate_scene(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    k = cfg.intrinsics()
    poses = trajectory(scene, cfg, n, rng)
    frames = [raycast_frame(scene, p, k, cfg.image_size, cfg, index=i) for i, p in enumerate(poses)]
    return Sequence(frames, scene, seed, name)


def scene_seeds(seed: int, count: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(count)]


def generate_dataset(cfg: SceneConfig, seed: int) -> list[Sequence]:
    return [generate_sequence(cfg, s, name=f"seq_{i:03d}")
            for i, s in enumerate(scene_seeds(seed, cfg.num_scenes))]


def max_step_motion(seq: Sequence) -> tuple[float, float]:
    """Largest per-step rotation angle (rad) and translation (m)."""
    rot, trans = 0.0, 0.0
    for a, b in zip(seq.frames, seq.frames[1:]):
        m = relative_motion(a.pose, b.pose)
        cosang = np.clip((np.trace(m.rotation) - 1) / 2, -1, 1)
        rot = max(rot, float(np.arccos(cosang)))
        trans = max(trans, float(np.linalg.norm(m.translation)))
    return rot, trans


def class_census(sequences: list[Sequence], num_classes: int) -> np.ndarray:
    """Pixel share of each class over all frames."""
    counts = np.zeros(num_classes)
    for seq in sequences:
        for f in seq.frames:
            counts += np.bincount(f.seg.ravel(), minlength=num_classes)[:num_classes]
    return counts / counts.sum()


__all__ = [
    "SceneConfig", "Scene", "Box", "Frame", "Sequence", "generate_scene", "raycast",
    "raycast_frame", "generate_sequence", "generate_dataset", "class_census",
    "max_step_motion", "look_at_rotation", "value_noise", "scene_seeds", "axis_angle",
]
