"""Ray-cast box-world rooms: Lambertian RGB plus z-depth with Kinect-like holes.

World frame: x right, y up, z forward.  A room is the box
``[0, size_x] x [0, size_y] x [0, size_z]`` seen from inside; objects are
axis-aligned boxes.  Depth is the distance along the camera's optical axis,
which is the ray parameter when camera-frame directions have unit z.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Manifest, ManifestEntry, Sample, channel_mean, save_depth, save_rgb, DataError
from .depthmap import DepthMap

log = logging.getLogger(__name__)

MIN_DEPTH = 0.5
MAX_DEPTH = 10.0


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)


@dataclass
class Camera:
    position: np.ndarray
    yaw: float  # radians, rotation about +y; 0 looks along +z
    pitch: float  # radians, positive looks up
    focal: float  # pixels
    width: int
    height: int

    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation; columns are right, up, forward."""
        cy, sy = np.cos(self.yaw), np.sin(self.yaw)
        cp, sp = np.cos(self.pitch), np.sin(self.pitch)
        forward = np.array([sy * cp, sp, cy * cp])
        right = np.array([cy, 0.0, -sy])
        up = np.cross(forward, right)
        return np.stack([right, up, forward], axis=1)

    def ray_directions(self) -> np.ndarray:
        """(H, W, 3) world directions whose camera-frame z component is 1."""
        u = (np.arange(self.width) + 0.5 - self.width / 2) / self.focal
        v = -(np.arange(self.height) + 0.5 - self.height / 2) / self.focal
        cam = np.stack(np.broadcast_arrays(u[None, :], v[:, None], np.ones((self.height, self.width))), axis=-1)
        return cam @ self.rotation().T


@dataclass
class SceneParams:
    room: np.ndarray  # (3,) extents in metres
    wall_albedo: np.ndarray  # (6, 3): -x, +x, -y (floor), +y (ceiling), -z, +z
    boxes: list[Box]
    light: np.ndarray  # unit vector pointing from the scene towards the light
    ambient: float = 0.35
    scale: float = 1.0
    windows: list[tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list)
    # (wall face index, lo corner, hi corner) of rectangles with no depth return

    def scaled(self, s: float) -> "SceneParams":
        return SceneParams(self.room * s, self.wall_albedo,
                           [Box(b.lo * s, b.hi * s, b.albedo) for b in self.boxes],
                           self.light, self.ambient, self.scale * s,
                           [(f, lo * s, hi * s) for f, lo, hi in self.windows])


FACE_NORMALS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64)
# inward normals of the room faces, in wall_albedo order


def intersect_room(origin: np.ndarray, dirs: np.ndarray, room: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exit distance and face index for rays starting inside the room."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (0.0 - origin) / dirs
        t_hi = (room - origin) / dirs
    t_axis = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
    axis = np.argmin(t_axis, axis=-1)
    t = np.take_along_axis(t_axis, axis[..., None], axis=-1)[..., 0]
    sign_pos = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0] > 0
    face = 2 * axis + sign_pos
    return t, face


def intersect_box(origin: np.ndarray, dirs: np.ndarray, box: Box) -> tuple[np.ndarray, np.ndarray]:
    """Entry distance (inf on miss) and outward normal index (same convention as FACE_NORMALS, flipped)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (box.lo - origin) / dirs
        t2 = (box.hi - origin) / dirs
    # parallel rays: inside the slab -> (-inf, inf), outside -> empty
    inside = (origin >= box.lo) & (origin <= box.hi)
    par = dirs == 0
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    axis = np.argmax(tmin, axis=-1)
    t_near = np.take_along_axis(tmin, axis[..., None], axis=-1)[..., 0]
    t_far = tmax.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    # entering through the face whose outward normal opposes the ray
    d_axis = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0]
    face = 2 * axis + (d_axis < 0)
    return np.where(hit, t_near, np.inf), face


def render(scene: SceneParams, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return rgb (H, W, 3), z-depth (H, W) and a window mask (H, W)."""
    dirs = camera.ray_directions()
    origin = np.asarray(camera.position, dtype=np.float64)
    t, face = intersect_room(origin, dirs, scene.room)
    normal = FACE_NORMALS[face]
    albedo = scene.wall_albedo[face]
    window = np.zeros(t.shape, dtype=bool)
    pts = origin + dirs * t[..., None]
    for f, lo, hi in scene.windows:
        axis = f // 2
        others = [a for a in range(3) if a != axis]
        on = (face == f)
        for a, (l, h) in zip(others, zip(lo, hi)):
            on &= (pts[..., a] >= l) & (pts[..., a] <= h)
        window |= on
    for box in scene.boxes:
        tb, fb = intersect_box(origin, dirs, box)
        closer = tb < t
        t = np.where(closer, tb, t)
        # box faces point outward: opposite of the room's inward convention
        normal = np.where(closer[..., None], -FACE_NORMALS[fb], normal)
        albedo = np.where(closer[..., None], box.albedo, albedo)
        window &= ~closer
    shade = scene.ambient + (1 - scene.ambient) * np.clip(normal @ scene.light, 0, None)
    rgb = np.clip(albedo * shade[..., None], 0, 1)
    rgb = np.where(window[..., None], 0.95, rgb)
    return rgb, t, window


def random_scene(rng: np.random.Generator, scale_jitter: tuple[float, float] = (0.7, 1.4)) -> SceneParams:
    room = np.array([rng.uniform(3.0, 6.0), rng.uniform(2.4, 3.0), rng.uniform(3.5, 6.5)])
    wall_albedo = rng.uniform(0.25, 0.9, size=(6, 3))
    # floor a little darker, ceiling a little lighter
    wall_albedo[2] *= 0.7
    wall_albedo[3] = np.clip(wall_albedo[3] * 1.2, 0, 1)
    boxes = []
    for _ in range(rng.integers(1, 5)):
        size = np.array([rng.uniform(0.3, 1.4), rng.uniform(0.3, 1.3), rng.uniform(0.3, 1.4)])
        x0 = rng.uniform(0.1, room[0] - size[0] - 0.1)
        z0 = rng.uniform(room[2] * 0.35, room[2] - size[2] - 0.1)
        lo = np.array([x0, 0.0, z0])
        boxes.append(Box(lo, lo + size, rng.uniform(0.15, 0.95, size=3)))
    light = np.array([rng.uniform(-0.6, 0.6), 1.0, rng.uniform(-0.8, -0.2)])
    windows = []
    if rng.random() < 0.3:
        f = int(rng.choice([0, 1, 5]))
        horiz = 2 if f < 2 else 0
        h0, v0 = rng.uniform(0.3, room[horiz] - 1.5), rng.uniform(0.9, 1.3)
        h1, v1 = h0 + rng.uniform(0.6, 1.2), v0 + rng.uniform(0.6, 1.0)
        # corners ordered by ascending axis index of the two in-plane axes
        if horiz < 1:
            windows.append((f, np.array([h0, v0]), np.array([h1, v1])))
        else:
            windows.append((f, np.array([v0, h0]), np.array([v1, h1])))
    scene = SceneParams(room, wall_albedo, boxes, light / np.linalg.norm(light))
    s = float(np.exp(rng.uniform(np.log(scale_jitter[0]), np.log(scale_jitter[1]))))
    return scene.scaled(s)


def random_camera(rng: np.random.Generator, scene: SceneParams, width: int, height: int,
                  base: Camera | None = None, hfov_deg: float = 60.0) -> Camera:
    focal = (width / 2) / np.tan(np.radians(hfov_deg) / 2)
    room = scene.room
    if base is None:
        pos = np.array([rng.uniform(0.3, 0.7) * room[0], rng.uniform(1.2, 1.6) * scene.scale,
                        rng.uniform(0.08, 0.2) * room[2]])
        yaw = rng.uniform(-0.35, 0.35)
        pitch = rng.uniform(-0.35, -0.1)
    else:
        pos = base.position + rng.uniform(-0.15, 0.15, size=3) * scene.scale
        yaw = base.yaw + rng.uniform(-0.12, 0.12)
        pitch = base.pitch + rng.uniform(-0.05, 0.05)
    margin = 0.15 * scene.scale
    pos = np.clip(pos, margin, room - margin)
    return Camera(pos, yaw, pitch, focal, width, height)


def hole_mask(depth: np.ndarray, rng: np.random.Generator, jump: float = 0.08, p_drop: float = 0.6) -> np.ndarray:
    """True where depth is missing: near discontinuities (randomly) and outside the sensor range."""
    logd = np.log(depth)
    edge = np.zeros(depth.shape, dtype=bool)
    dx = np.abs(np.diff(logd, axis=1)) > jump
    dy = np.abs(np.diff(logd, axis=0)) > jump
    edge[:, 1:] |= dx
    edge[:, :-1] |= dx
    edge[1:, :] |= dy
    edge[:-1, :] |= dy
    holes = edge & (rng.random(depth.shape) < p_drop)
    return holes | (depth < MIN_DEPTH) | (depth > MAX_DEPTH)


def camera_moved(a: Camera, b: Camera) -> float:
    return float(np.linalg.norm(a.position - b.position) + abs(a.yaw - b.yaw) + abs(a.pitch - b.pitch))


def render_scene_frames(scene_index: int, frames: int, seed: int, width: int, height: int,
                        min_pose_delta: float = 0.0) -> list[Sample]:
    rng = np.random.default_rng([seed, scene_index])
    scene = random_scene(rng)
    base = random_camera(rng, scene, width, height)
    out = []
    prev = None
    for k in range(frames):
        cam = random_camera(rng, scene, width, height, base=base)
        if prev is not None and camera_moved(prev, cam) < min_pose_delta:
            # stationary frame: skip it, as a near-duplicate of the previous one
            continue
        prev = cam
        rgb, depth, window = render(scene, cam)
        missing = hole_mask(depth, rng) | window
        rgb = np.clip(rgb + rng.normal(0, 0.01, size=rgb.shape), 0, 1)
        dm = DepthMap(np.where(missing, 0.0, depth), ~missing)
        ts = k * 0.5 + float(rng.uniform(0, 0.05))
        out.append(Sample(f"s{scene_index:04d}_f{k}", rgb, dm, ts, f"scene{scene_index:04d}"))
    return out


def generate_synthetic_dataset(out_dir: str | Path, n_scenes: int, frames_per_scene: int, seed: int,
                               width: int = 64, height: int = 48, test_fraction: float = 0.2,
                               min_pose_delta: float = 0.0) -> tuple[Manifest, Manifest]:
    """Render scenes to ``out_dir`` and write ``train.tsv`` / ``test.tsv``.

    Scenes are split (not frames) so the test set holds unseen rooms.  The
    channel mean stored in both manifests is computed on the training split.
    """
    if n_scenes < 1 or frames_per_scene < 1:
        raise ValueError("need at least one scene and one frame per scene")
    out = Path(out_dir)
    try:
        (out / "rgb").mkdir(parents=True, exist_ok=True)
        (out / "depth").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    n_test = int(round(n_scenes * test_fraction)) if n_scenes > 1 else 0
    order = np.random.default_rng([seed, 0xC0FFEE]).permutation(n_scenes)
    test_scenes = set(order[:n_test].tolist())
    splits: dict[str, list[Sample]] = {"train": [], "test": []}
    for i in range(n_scenes):
        for s in render_scene_frames(i, frames_per_scene, seed, width, height, min_pose_delta):
            save_rgb(out / "rgb" / f"{s.id}.ppm", s.rgb)
            save_depth(out / "depth" / f"{s.id}.pgm", s.depth)
            splits["test" if i in test_scenes else "train"].append(s)
    mean = channel_mean(splits["train"] or splits["test"])
    manifests = []
    for name in ("train", "test"):
        entries = [ManifestEntry(s.id, f"rgb/{s.id}.ppm", f"depth/{s.id}.pgm", s.scene, s.timestamp)
                   for s in splits[name]]
        m = Manifest(entries, name, mean, out)
        m.write(out / f"{name}.tsv")
        manifests.append(m)
    log.info("wrote %d train / %d test frames to %s", len(manifests[0]), len(manifests[1]), out)
    return manifests[0], manifests[1]


def sample_seed(global_seed: int, sample_id: str, epoch: int) -> np.random.SeedSequence:
    """Per-sample stream so worker count never changes which numbers a sample sees."""
    return np.random.SeedSequence([global_seed, zlib.crc32(sample_id.encode()), epoch])
