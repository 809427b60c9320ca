"""Procedural posed-image datasets of toy driving scenes.

A primary-ray caster renders axis-aligned boxes and vertical cylinders with
flat shading under one directional light. Four archetypes are provided:
``blender_toy``, ``single_scene_intersection``, ``multi_scene_intersection``
and ``two_lane_merge``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraPose, camera_rays, look_at_pose
from .errors import DatasetError, InvalidCameraError

BACKGROUND = (0.5, 0.5, 0.5)
LIGHT_DIR = np.array([0.3, 0.2, 0.93]) / np.linalg.norm([0.3, 0.2, 0.93])
AMBIENT = 0.35
DIFFUSE = 0.65
WORLD_BOX = ((-2.5, -2.5, 0.0), (2.5, 2.5, 1.2))
ARCHETYPES = ("blender_toy", "single_scene_intersection", "multi_scene_intersection", "two_lane_merge")
_EPS = 1e-6


@dataclass
class PrimitiveSpec:
    shape: str
    center: tuple
    dimensions: tuple
    albedo: tuple
    role: str = "static"
    # per-timestamp centers for moving objects; overrides ``center``
    trajectory: list | None = None

    def __post_init__(self):
        if self.shape not in ("box", "cylinder"):
            raise ValueError(f"unknown shape {self.shape}")
        if self.role not in ("ego", "actor", "static"):
            raise ValueError(f"unknown role {self.role}")
        if any(d <= 0 for d in self.dimensions):
            raise ValueError("primitive dimensions must be positive")
        if not np.all(np.isfinite(self.center)):
            raise ValueError("primitive center must be finite")

    def center_at(self, t):
        if self.trajectory is not None:
            return tuple(self.trajectory[t])
        return tuple(self.center)

    def half_extents(self):
        if self.shape == "box":
            return tuple(d / 2.0 for d in self.dimensions)
        r, h = self.dimensions[0], self.dimensions[1]
        return (r, r, h / 2.0)

    def contains(self, t, points):
        c = np.asarray(self.center_at(t))
        p = np.atleast_2d(points) - c
        if self.shape == "box":
            return np.all(np.abs(p) <= np.asarray(self.half_extents()), axis=1)
        r, h = self.dimensions[0], self.dimensions[1]
        return (p[:, 0] ** 2 + p[:, 1] ** 2 <= r * r) & (np.abs(p[:, 2]) <= h / 2.0)

    def bbox_points(self, t):
        """Bounding-box corners plus center (the nine occlusion sample points)."""
        c = np.asarray(self.center_at(t))
        h = np.asarray(self.half_extents())
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return np.vstack([c + signs * h, c])

    def to_dict(self):
        return {"shape": self.shape, "center": list(map(float, self.center)),
                "dimensions": list(map(float, self.dimensions)), "albedo": list(map(float, self.albedo)),
                "role": self.role,
                "trajectory": None if self.trajectory is None else [list(map(float, p)) for p in self.trajectory]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["shape"], tuple(d["center"]), tuple(d["dimensions"]), tuple(d["albedo"]), d["role"],
                   None if d.get("trajectory") is None else [tuple(p) for p in d["trajectory"]])


@dataclass
class SceneSpec:
    scene_id: int
    timestamps: int
    objects: list
    label: str = ""

    def __post_init__(self):
        if self.timestamps < 1:
            raise ValueError("scene needs at least one timestamp")
        if sum(o.role == "ego" for o in self.objects) != 1:
            raise ValueError("scene must contain exactly one ego object")
        for o in self.objects:
            if o.trajectory is not None and len(o.trajectory) != self.timestamps:
                raise ValueError("trajectory length must equal the number of timestamps")

    @property
    def actor(self):
        for o in self.objects:
            if o.role == "actor":
                return o
        return None

    @property
    def ego(self):
        return next(o for o in self.objects if o.role == "ego")

    @property
    def actor_trajectory(self):
        a = self.actor
        if a is None:
            return None
        return [a.center_at(t) for t in range(self.timestamps)]

    def without_actor(self):
        return SceneSpec(self.scene_id, self.timestamps, [o for o in self.objects if o.role != "actor"], self.label)

    def to_dict(self):
        return {"scene_id": self.scene_id, "timestamps": self.timestamps, "label": self.label,
                "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["scene_id"], d["timestamps"], [PrimitiveSpec.from_dict(o) for o in d["objects"]], d.get("label", ""))


@dataclass
class FrameRecord:
    scene_id: int
    timestamp: int
    pose_id: int
    image_path: str
    actor_present: bool
    actor_position: list | None
    occluded: bool

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class DatasetConfig:
    archetype: str
    out_dir: str
    poses: int = 24
    width: int = 64
    height: int = 64
    seed: int = 0


@dataclass
class DatasetManifest:
    name: str
    archetype: str
    scenes: list
    poses: list
    frames: list
    rng_seed: int
    width: int
    height: int
    background: tuple = BACKGROUND
    world_box: tuple = WORLD_BOX
    hazard_scenes: list = field(default_factory=list)
    actions: list = field(default_factory=list)

    def __post_init__(self):
        self._index = {(f.scene_id, f.timestamp, f.pose_id): i for i, f in enumerate(self.frames)}

    def frame_index(self, scene_id, t, pose_id):
        return self._index[(scene_id, t, pose_id)]

    def frame(self, scene_id, t, pose_id):
        return self.frames[self._index[(scene_id, t, pose_id)]]

    def scene(self, scene_id):
        return next(s for s in self.scenes if s.scene_id == scene_id)

    @property
    def states(self):
        return [(s.scene_id, t) for s in self.scenes for t in range(s.timestamps)]

    def poses_in_group(self, group):
        return [p.pose_id for p in self.poses if p.group == group]

    @property
    def encoder_poses(self):
        """Poses whose images may be fed to the encoder (the overhead view is held out)."""
        return [p.pose_id for p in self.poses if p.group != "overhead"]

    @property
    def overhead_pose(self):
        ids = self.poses_in_group("overhead")
        return ids[0] if ids else None

    def to_dict(self):
        return {"name": self.name, "archetype": self.archetype, "rng_seed": self.rng_seed,
                "width": self.width, "height": self.height, "background": list(self.background),
                "world_box": [list(self.world_box[0]), list(self.world_box[1])],
                "hazard_scenes": list(self.hazard_scenes), "actions": list(self.actions),
                "scenes": [s.to_dict() for s in self.scenes],
                "poses": [p.to_dict() for p in self.poses],
                "frames": [f.to_dict() for f in self.frames]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["archetype"], [SceneSpec.from_dict(s) for s in d["scenes"]],
                   [CameraPose.from_dict(p) for p in d["poses"]], [FrameRecord(**f) for f in d["frames"]],
                   d["rng_seed"], d["width"], d["height"], tuple(d["background"]),
                   (tuple(d["world_box"][0]), tuple(d["world_box"][1])), d.get("hazard_scenes", []),
                   d.get("actions", []))

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


# ----------------------------------------------------------------------------
# ray casting


def _ray_box(origins, dirs, center, half):
    d = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    lo = (np.asarray(center) - half - origins) / d
    hi = (np.asarray(center) + half - origins) / d
    t1 = np.minimum(lo, hi)
    t2 = np.maximum(lo, hi)
    tmin = t1.max(axis=1)
    tmax = t2.min(axis=1)
    hit = (tmax >= tmin) & (tmin > _EPS)
    axis = t1.argmax(axis=1)
    normals = np.zeros_like(dirs)
    rows = np.arange(len(dirs))
    normals[rows, axis] = -np.sign(d[rows, axis])
    return np.where(hit, tmin, np.inf), normals


def _ray_cylinder(origins, dirs, center, radius, height):
    n = len(dirs)
    px = origins[:, 0] - center[0]
    py = origins[:, 1] - center[1]
    zlo, zhi = center[2] - height / 2.0, center[2] + height / 2.0
    best = np.full(n, np.inf)
    normals = np.zeros((n, 3))

    a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
    b = 2.0 * (dirs[:, 0] * px + dirs[:, 1] * py)
    c = px ** 2 + py ** 2 - radius ** 2
    disc = b * b - 4 * a * c
    ok = (a > 1e-12) & (disc >= 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ts = (-b - np.sqrt(np.where(ok, disc, 0.0))) / np.where(ok, 2 * a, 1.0)
    z = origins[:, 2] + ts * dirs[:, 2]
    side = ok & (ts > _EPS) & (z >= zlo) & (z <= zhi)
    best = np.where(side, ts, best)
    hx = px + ts * dirs[:, 0]
    hy = py + ts * dirs[:, 1]
    side_n = np.stack([hx, hy, np.zeros(n)], axis=1) / radius
    normals[side] = side_n[side]

    for zc, nz in ((zhi, 1.0), (zlo, -1.0)):
        dz = np.where(np.abs(dirs[:, 2]) < 1e-12, 1e-12, dirs[:, 2])
        tc = (zc - origins[:, 2]) / dz
        cx = px + tc * dirs[:, 0]
        cy = py + tc * dirs[:, 1]
        cap = (tc > _EPS) & (cx ** 2 + cy ** 2 <= radius ** 2) & (tc < best) & (np.sign(dirs[:, 2]) == -nz)
        best = np.where(cap, tc, best)
        normals[cap] = (0.0, 0.0, nz)
    return best, normals


def intersect(obj: PrimitiveSpec, t, origins, dirs):
    center = obj.center_at(t)
    if obj.shape == "box":
        return _ray_box(origins, dirs, center, np.asarray(obj.half_extents()))
    return _ray_cylinder(origins, dirs, center, obj.dimensions[0], obj.dimensions[1])


def raycast(scene: SceneSpec, t, origins, dirs, skip=()):
    """First hit per ray: (distance, object index or -1, normal)."""
    n = len(dirs)
    best = np.full(n, np.inf)
    ids = np.full(n, -1, dtype=int)
    normals = np.zeros((n, 3))
    for k, obj in enumerate(scene.objects):
        if k in skip:
            continue
        tk, nk = intersect(obj, t, origins, dirs)
        closer = tk < best
        best = np.where(closer, tk, best)
        ids[closer] = k
        normals[closer] = nk[closer]
    return best, ids, normals


def _check_camera(cam):
    if np.linalg.norm(np.subtract(cam.target, cam.position)) < 1e-9:
        raise InvalidCameraError("camera position equals target")


def render_frame_with_ids(scene: SceneSpec, t: int, cam: CameraPose, background=BACKGROUND):
    _check_camera(cam)
    if not 0 <= t < scene.timestamps:
        raise ValueError(f"timestamp {t} outside scene range {scene.timestamps}")
    origins, dirs = camera_rays(cam)
    dist, ids, normals = raycast(scene, t, origins, dirs)
    img = np.tile(np.asarray(background, float), (len(dirs), 1))
    hit = ids >= 0
    if hit.any():
        albedo = np.array([scene.objects[k].albedo for k in ids[hit]], float)
        shade = AMBIENT + DIFFUSE * np.clip(normals[hit] @ LIGHT_DIR, 0.0, None)
        img[hit] = albedo * shade[:, None]
    img = np.clip(img, 0.0, 1.0).reshape(cam.height, cam.width, 3)
    return img, ids.reshape(cam.height, cam.width)


def render_frame(scene: SceneSpec, t: int, cam: CameraPose, background=BACKGROUND):
    """Render ``scene`` at timestamp ``t`` from ``cam``; returns an HxWx3 array in [0, 1]."""
    return render_frame_with_ids(scene, t, cam, background)[0]


def quantize(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def rays_blocked(scene: SceneSpec, t, cam: CameraPose):
    """Nine-ray test: True iff every ray to the actor's bbox corners and center hits another object first."""
    actor_idx = next((k for k, o in enumerate(scene.objects) if o.role == "actor"), None)
    if actor_idx is None:
        return False
    targets = scene.objects[actor_idx].bbox_points(t)
    origin = np.asarray(cam.position, float)
    vec = targets - origin
    dist = np.linalg.norm(vec, axis=1)
    dirs = vec / dist[:, None]
    hit_t, ids, _ = raycast(scene, t, np.tile(origin, (len(dirs), 1)), dirs, skip=(actor_idx,))
    return bool(np.all((ids >= 0) & (hit_t < dist - 1e-9)))


def actor_pixel_count(scene: SceneSpec, t, cam: CameraPose):
    actor_idx = next((k for k, o in enumerate(scene.objects) if o.role == "actor"), None)
    if actor_idx is None:
        return 0
    _, ids = render_frame_with_ids(scene, t, cam)
    return int((ids == actor_idx).sum())


def is_occluded(scene: SceneSpec, t, cam: CameraPose):
    # An actor counts as occluded when it contributes no pixel to the frame; the
    # nine-ray test alone misses grazing visibility between sample rays.
    if scene.actor is None:
        return False
    return actor_pixel_count(scene, t, cam) == 0


def occlusion_annotate(manifest: DatasetManifest) -> DatasetManifest:
    poses = {p.pose_id: p for p in manifest.poses}
    for f in manifest.frames:
        scene = manifest.scene(f.scene_id)
        f.occluded = bool(f.actor_present and is_occluded(scene, f.timestamp, poses[f.pose_id]))
    return manifest


# ----------------------------------------------------------------------------
# archetypes

BLUE = (0.0, 0.0, 1.0)
RED = (1.0, 0.0, 0.0)
EGO_BLUE = (0.12, 0.3, 0.95)
ACTOR_RED = (0.95, 0.12, 0.1)
SAND = (0.85, 0.78, 0.55)
GREEN = (0.15, 0.7, 0.25)


def _ego_car(center, trajectory=None):
    return PrimitiveSpec("box", center, (0.35, 0.6, 0.36), EGO_BLUE, "ego", trajectory)


def _building():
    return PrimitiveSpec("box", (-1.35, -1.35, 0.4), (1.1, 1.1, 0.8), SAND, "static")


def _layout(archetype):
    """Scenes, ego-camera rig and metadata for one archetype."""
    if archetype == "blender_toy":
        cube = PrimitiveSpec("box", (0.0, 0.0, 0.3), (0.6, 0.6, 0.6), BLUE, "ego")
        start = (0.0, 0.9, 0.3)

        def cyl(end):
            return PrimitiveSpec("cylinder", start, (0.3, 0.6), RED, "actor", [start, end])

        scenes = [SceneSpec(0, 2, [cube, cyl((-0.8, 0.9, 0.3))], "actor-left"),
                  SceneSpec(1, 2, [cube, cyl((0.8, 0.9, 0.3))], "actor-right"),
                  SceneSpec(2, 2, [cube], "no-actor")]
        # frontal half circle: seen from all around, the near-square cube makes the three cylinder
        # positions look alike up to a rotation
        rig = dict(base=(0.0, -3.0, 0.35), target=(0.0, 0.0, 0.3), dx=0.1, dz=0.1, zoom=2.2,
                   world_box=((-1.5, -1.5, 0.0), (1.5, 1.5, 1.0)), arc_span=math.pi, arc_center=-math.pi / 2)
        return scenes, rig, [], []

    if archetype == "single_scene_intersection":
        xs = np.linspace(-1.8, 1.8, 10)
        actor = PrimitiveSpec("box", (xs[0], 0.35, 0.18), (0.7, 0.4, 0.36), ACTOR_RED, "actor",
                              [(float(x), 0.35, 0.18) for x in xs])
        scenes = [SceneSpec(0, 10, [_ego_car((0.3, -1.2, 0.18)), _building(), actor], "actor-crossing")]
        rig = dict(base=(0.3, -2.6, 0.55), target=(0.1, 0.6, 0.15), dx=0.12, dz=0.25)
        return scenes, rig, [], []

    if archetype == "multi_scene_intersection":
        ego_traj = [(0.3, -1.9, 0.18), (0.3, -1.2, 0.18), (0.3, -0.5, 0.18)]
        actor = PrimitiveSpec("box", (-1.8, 0.35, 0.15), (0.5, 0.3, 0.3), ACTOR_RED, "actor",
                              [(-1.8, 0.35, 0.15), (-1.0, 0.35, 0.15), (-0.2, 0.35, 0.15)])
        scenes = [SceneSpec(0, 3, [_ego_car(ego_traj[0], ego_traj), _building(), actor], "actor-exists"),
                  SceneSpec(1, 3, [_ego_car(ego_traj[0], ego_traj), _building()], "no-actor")]
        rig = dict(base=(0.3, -3.0, 0.55), target=(0.1, 0.5, 0.15), dx=0.12, dz=0.25)
        return scenes, rig, [0], ["ADVANCE", "HALT"]

    if archetype == "two_lane_merge":
        ego = _ego_car((0.35, 0.0, 0.18))
        parked = PrimitiveSpec("box", (-1.3, -0.9, 0.35), (0.6, 1.2, 0.7), GREEN, "static")

        def actor(ys):
            return PrimitiveSpec("box", (-0.35, ys[0], 0.18), (0.4, 0.7, 0.36), ACTOR_RED, "actor",
                                 [(-0.35, y, 0.18) for y in ys])

        scenes = [SceneSpec(0, 3, [ego, parked, actor([-2.0, -0.3, 1.3])], "fast-actor"),
                  SceneSpec(1, 3, [ego, parked, actor([-2.0, -1.5, -1.0])], "slow-actor")]
        # mirror-style rig: looks back along the left lane
        rig = dict(base=(0.5, 1.2, 0.6), target=(-0.4, -2.0, 0.15), dx=0.12, dz=0.25, zoom=1.3)
        return scenes, rig, [0], ["MERGE_BEFORE", "MERGE_AFTER"]

    raise DatasetError(f"unknown archetype '{archetype}'; expected one of {ARCHETYPES}")


def make_poses(count, width, height, rig, seed):
    """Arc poses around the scene, one overhead pose, then four ego-centric poses.

    With ``count < 8`` every pose is on the arc.
    """
    rng = np.random.default_rng(seed)
    scale = width / 64.0
    n_ego = 4 if count >= 8 else 0
    n_over = 1 if count >= 8 else 0
    n_arc = count - n_ego - n_over
    # the arc covers ``arc_span`` radians centred on ``arc_center``; a full circle by default
    span = rig.get("arc_span", 2.0 * math.pi)
    full = span >= 2.0 * math.pi
    step = span / n_arc if full else span / max(n_arc - 1, 1)
    start = 0.0 if full else rig.get("arc_center", 0.0) - span / 2.0
    phase = start + float(rng.uniform(0.0, step if full else 0.0))
    poses = []
    radius = 5.5
    zoom = rig.get("zoom", 1.0)
    arc_focal = 64.0 * 0.5 / math.tan(math.radians(21.0)) * scale * zoom
    for k in range(n_arc):
        az = phase + (2.0 * math.pi * k / n_arc if full else step * k)
        el = math.radians(30.0 if k % 2 == 0 else 50.0)
        pos = (radius * math.cos(el) * math.cos(az), radius * math.cos(el) * math.sin(az), radius * math.sin(el))
        poses.append(look_at_pose(k, pos, (0.0, 0.0, 0.2), arc_focal, width, height, "arc"))
    if n_over:
        poses.append(look_at_pose(n_arc, (0.0, 0.0, 7.0), (0.0, 0.0, 0.0), 100.0 * scale * zoom, width, height,
                                  "overhead", up=(0.0, 1.0, 0.0)))
    bx, by, bz = rig["base"]
    offsets = [(-1, 0), (1, 0), (-1, 1), (1, 1)]
    for k in range(n_ego):
        sx, sz = offsets[k]
        pos = (bx + sx * rig["dx"], by, bz + sz * rig["dz"])
        tgt = (rig["target"][0] + 0.5 * sx * rig["dx"], rig["target"][1], rig["target"][2])
        poses.append(look_at_pose(n_arc + n_over + k, pos, tgt, 40.0 * scale, width, height, "ego"))
    return poses


def build_manifest(config: DatasetConfig) -> DatasetManifest:
    scenes, rig, hazard, actions = _layout(config.archetype)
    poses = make_poses(config.poses, config.width, config.height, rig, config.seed)
    frames = []
    for scene in scenes:
        actor = scene.actor
        for t in range(scene.timestamps):
            for cam in poses:
                frames.append(FrameRecord(
                    scene.scene_id, t, cam.pose_id, f"images/s{scene.scene_id}_t{t}_p{cam.pose_id}.png",
                    actor is not None, None if actor is None else [float(v) for v in actor.center_at(t)], False))
    box = rig.get("world_box", WORLD_BOX)
    manifest = DatasetManifest(config.archetype, config.archetype, scenes, poses, frames, config.seed,
                               config.width, config.height, BACKGROUND, box, hazard, actions)
    return occlusion_annotate(manifest)


def generate_dataset(config: DatasetConfig) -> DatasetManifest:
    """Render every (scene, timestamp, pose) frame to PNG and write ``manifest.json``."""
    manifest = build_manifest(config)
    out = Path(config.out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    poses = {p.pose_id: p for p in manifest.poses}
    for f in manifest.frames:
        img = render_frame(manifest.scene(f.scene_id), f.timestamp, poses[f.pose_id], manifest.background)
        Image.fromarray(quantize(img)).save(out / f.image_path, format="PNG")
    (out / "manifest.json").write_text(manifest.dumps())
    return manifest


class Dataset:
    """A manifest plus its decoded images (float32, HxWx3 in [0, 1])."""

    def __init__(self, root, manifest: DatasetManifest, images: np.ndarray):
        self.root = Path(root)
        self.manifest = manifest
        self.images = images

    @classmethod
    def load(cls, root):
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise DatasetError(f"no manifest.json in {root}")
        manifest = DatasetManifest.from_dict(json.loads(path.read_text()))
        images = np.stack([load_image(root / f.image_path) for f in manifest.frames])
        return cls(root, manifest, images)

    def image(self, scene_id, t, pose_id):
        return self.images[self.manifest.frame_index(scene_id, t, pose_id)]

    @property
    def pose_count(self):
        return len(self.manifest.poses)


def load_image(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def save_image(path, img):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(img)).save(path, format="PNG")


# ----------------------------------------------------------------------------
# state bookkeeping


def state_signature(manifest: DatasetManifest, scene_id, t):
    """Hashable description of the world at (scene, t); equal signatures mean identical worlds."""
    scene = manifest.scene(scene_id)
    return tuple(sorted((o.role, o.shape, tuple(np.round(o.center_at(t), 6))) for o in scene.objects))


def canonical_states(manifest: DatasetManifest):
    """Map each (scene, t) to the first state with an identical world."""
    first = {}
    out = {}
    for st in manifest.states:
        out[st] = first.setdefault(state_signature(manifest, *st), st)
    return out


def plausible_next_states(manifest: DatasetManifest, images, frame_idx):
    """Canonical next states of every scene whose frame from the same pose and time looks identical."""
    f = manifest.frames[frame_idx]
    canon = canonical_states(manifest)
    out = []
    for scene in manifest.scenes:
        if f.timestamp + 1 >= scene.timestamps:
            continue
        j = manifest.frame_index(scene.scene_id, f.timestamp, f.pose_id)
        if np.array_equal(images[j], images[frame_idx]):
            nxt = canon[(scene.scene_id, f.timestamp + 1)]
            if nxt not in out:
                out.append(nxt)
    return out


def unambiguous_frames(manifest: DatasetManifest, images):
    """Indices of frames that no physically different state reproduces pixel for pixel."""
    canon = canonical_states(manifest)
    ok = []
    for i, f in enumerate(manifest.frames):
        mine = canon[(f.scene_id, f.timestamp)]
        clash = any(canon[st] != mine and np.array_equal(images[manifest.frame_index(*st, f.pose_id)], images[i])
                    for st in manifest.states)
        if not clash:
            ok.append(i)
    return ok
