"""Synthetic single-view RGB-D rooms and their on-disk formats.

A scene is a rectangular room (floor + four walls, no ceiling) holding a few
colored boxes and spheres, ray-cast from one pinhole camera. The point cloud
is the back-projection of every pixel that hit geometry, so cloud, depth map
and image agree by construction.

File formats (all little-endian):
  image.ppm   binary PPM, P6, maxval 255
  depth.bin   u32 width, u32 height, then width*height f32 (0 = no hit)
  cloud.bin   u32 count, then per point 3 x f32 xyz, 3 x u8 rgb, u16 label
  camera.txt  key=value lines: fx, fy, cx, cy, width, height, pose (16 floats)
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraModel, PointCloud, backproject

CLASS_NAMES = ("floor", "wall", "box", "sphere")
FLOOR, WALL, BOX, SPHERE = range(4)

CLOUD_DTYPE = np.dtype([("xyz", "<f4", (3,)), ("rgb", "u1", (3,)), ("label", "<u2")])
MANIFEST_HEADER = "# xmpt scene manifest v1"


class SceneError(RuntimeError):
    pass


class SceneIOError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    room: tuple[float, float] = (4.0, 6.0)  # side length range, metres
    wall_height: float = 2.6
    boxes: tuple[int, int] = (1, 3)
    spheres: tuple[int, int] = (1, 3)
    fov_deg: tuple[float, float] = (55.0, 70.0)
    min_coverage: float = 0.25
    depth_noise: float = 0.0  # reserved; must stay 0 for exact consistency
    max_tries: int = 100


@dataclass
class SceneSample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    depth: np.ndarray  # H x W, 0 where no geometry was hit
    camera: CameraModel
    cloud: PointCloud
    scene_id: str = ""

    def cloud_features(self) -> np.ndarray:
        return np.concatenate([self.cloud.points, self.cloud.colors], axis=1)


# ---------------------------------------------------------------------------
# ray casting


@dataclass
class _Hits:
    t: np.ndarray
    normal: np.ndarray
    color: np.ndarray
    label: np.ndarray

    @classmethod
    def empty(cls, n):
        return cls(np.full(n, np.inf), np.zeros((n, 3)), np.zeros((n, 3)), np.full(n, -1, dtype=np.int64))

    def merge(self, t, normal, color, label):
        closer = t < self.t
        self.t[closer] = t[closer]
        self.normal[closer] = normal[closer] if np.ndim(normal) == 2 else normal
        self.color[closer] = color
        self.label[closer] = label


def _plane_hit(origin, dirs, axis, value, lo, hi):
    d = dirs[:, axis]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (value - origin[axis]) / d
    p = origin + t[:, None] * dirs
    ok = (t > 1e-9) & np.isfinite(t)
    for ax, (a, b) in zip([i for i in range(3) if i != axis], zip(lo, hi)):
        ok &= (p[:, ax] >= a) & (p[:, ax] <= b)
    return np.where(ok, t, np.inf)


def _box_hit(origin, dirs, center, half, yaw):
    c, s = np.cos(-yaw), np.sin(-yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o = rot @ (origin - center)
    d = dirs @ rot.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf)
    tmax = np.nan_to_num(np.maximum(t1, t2), nan=np.inf)
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    hit = (near <= far) & (near > 1e-9)
    face = tmin.argmax(axis=1)
    local_n = np.zeros_like(d)
    rows = np.arange(len(d))
    local_n[rows, face] = -np.sign(d[rows, face])
    normal = local_n @ rot  # back to world (rot is orthonormal)
    return np.where(hit, near, np.inf), normal


def _sphere_hit(origin, dirs, center, radius):
    oc = origin - center
    a = np.sum(dirs * dirs, axis=1)
    b = 2 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    t = np.where((disc >= 0) & (t > 1e-9), t, np.inf)
    p = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    return t, (p - center) / radius


def _look_at_pose(eye, target) -> np.ndarray:
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    pose = np.eye(4)
    pose[:3, :3] = rot
    pose[:3, 3] = -rot @ eye
    return pose


def _layout(rng, cfg: SceneConfig):
    lx, ly = rng.uniform(*cfg.room, size=2)
    objects = []
    n_box = int(rng.integers(cfg.boxes[0], cfg.boxes[1] + 1))
    n_sph = int(rng.integers(cfg.spheres[0], cfg.spheres[1] + 1))
    kinds = [BOX] * n_box + [SPHERE] * n_sph
    for kind in kinds:
        for _ in range(50):
            if kind == BOX:
                half = rng.uniform(0.2, 0.5, size=3)
                radius = float(np.linalg.norm(half[:2]))
            else:
                radius = float(rng.uniform(0.25, 0.5))
            xy = rng.uniform([1.0, 1.0], [lx - 1.0, ly - 1.0])
            if all(np.linalg.norm(xy - o["xy"]) > radius + o["radius"] + 0.1 for o in objects):
                break
        obj = {"kind": kind, "xy": xy, "radius": radius, "color": rng.uniform(0.15, 0.95, size=3)}
        if kind == BOX:
            obj["center"] = np.array([xy[0], xy[1], half[2]])
            obj["half"] = half
            obj["yaw"] = float(rng.uniform(0, np.pi))
        else:
            obj["center"] = np.array([xy[0], xy[1], radius])
        objects.append(obj)
    return {
        "size": (float(lx), float(ly)),
        "floor_color": rng.uniform(0.3, 0.8, size=3),
        "wall_color": rng.uniform(0.4, 0.95, size=3),
        "light": np.array([lx / 2, ly / 2, cfg.wall_height - 0.2]) + rng.uniform(-0.5, 0.5, size=3),
        "objects": objects,
    }


def _sample_camera(rng, cfg: SceneConfig, room) -> CameraModel:
    lx, ly = room["size"]
    objs = room["objects"]
    focus = np.mean([o["center"] for o in objs], axis=0)
    for _ in range(20):
        eye = np.array([rng.uniform(0.4, lx - 0.4), rng.uniform(0.4, ly - 0.4), rng.uniform(1.4, 2.0)])
        if np.linalg.norm(eye[:2] - focus[:2]) > 1.5:
            break
    target = np.array([focus[0], focus[1], 0.3]) + np.append(rng.normal(0, 0.3, size=2), 0.0)
    fov = np.deg2rad(rng.uniform(*cfg.fov_deg))
    f = cfg.width / (2 * np.tan(fov / 2))
    return CameraModel(f, f, cfg.width / 2, cfg.height / 2, cfg.width, cfg.height, _look_at_pose(eye, target))


def _raycast(cam: CameraModel, room, cfg: SceneConfig):
    h, w = cam.height, cam.width
    vv, uu = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    dcam = np.stack([(uu.ravel() - cam.cx) / cam.fx, (vv.ravel() - cam.cy) / cam.fy, np.ones(h * w)], axis=1)
    rot = cam.pose[:3, :3]
    dirs = dcam @ rot  # world directions whose camera-frame z is 1, so t is depth
    eye = cam.center
    lx, ly = room["size"]
    hw = cfg.wall_height
    hits = _Hits.empty(h * w)

    hits.merge(_plane_hit(eye, dirs, 2, 0.0, (0, 0), (lx, ly)), np.array([0.0, 0.0, 1.0]), room["floor_color"], FLOOR)
    walls = [
        (0, 0.0, (0, 0), (ly, hw), [1.0, 0.0, 0.0]),
        (0, lx, (0, 0), (ly, hw), [-1.0, 0.0, 0.0]),
        (1, 0.0, (0, 0), (lx, hw), [0.0, 1.0, 0.0]),
        (1, ly, (0, 0), (lx, hw), [0.0, -1.0, 0.0]),
    ]
    for axis, value, lo, hi, normal in walls:
        hits.merge(_plane_hit(eye, dirs, axis, value, lo, hi), np.array(normal), room["wall_color"], WALL)
    for obj in room["objects"]:
        if obj["kind"] == BOX:
            t, normal = _box_hit(eye, dirs, obj["center"], obj["half"], obj["yaw"])
        else:
            t, normal = _sphere_hit(eye, dirs, obj["center"], obj["radius"])
        hits.merge(t, normal, obj["color"], obj["kind"])

    valid = np.isfinite(hits.t)
    depth = np.where(valid, hits.t, 0.0)
    p = eye + np.where(valid, hits.t, 0.0)[:, None] * dirs
    to_light = room["light"] - p
    to_light /= np.linalg.norm(to_light, axis=1, keepdims=True)
    lambert = np.clip(np.sum(hits.normal * to_light, axis=1), 0.0, 1.0)
    color = np.clip(hits.color * (0.35 + 0.65 * lambert)[:, None], 0.0, 1.0)
    color[~valid] = 0.0
    return color.reshape(h, w, 3), depth.reshape(h, w), hits.label.reshape(h, w)


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig(), scene_id: str | None = None) -> SceneSample:
    """Deterministically build, render and back-project one scene."""
    if cfg.height % 8 or cfg.width % 8:
        raise SceneError("scene extents must be divisible by 8")
    rng = np.random.default_rng(seed)
    room = _layout(rng, cfg)
    for _ in range(cfg.max_tries):
        cam = _sample_camera(rng, cfg, room)
        image, depth, labels = _raycast(cam, room, cfg)
        if (depth > 0).mean() >= cfg.min_coverage:
            break
    else:
        raise SceneError(f"seed {seed}: no camera pose covered {cfg.min_coverage:.0%} of pixels in {cfg.max_tries} tries")

    vs, us = np.nonzero(depth > 0)
    points = backproject(us + 0.5, vs + 0.5, depth[vs, us], cam)
    cloud = PointCloud(points, image[vs, us], labels[vs, us])
    return SceneSample(image, depth, cam, cloud, scene_id if scene_id is not None else f"scene_{seed:06d}")


# ---------------------------------------------------------------------------
# file IO


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _read(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise SceneIOError(f"missing file: {path}")
    return path.read_bytes()


def write_ppm(path, image: np.ndarray):
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w, _ = img.shape
    _atomic_write(Path(path), f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary PPM -> H x W x 3 float image in [0, 1]."""
    raw = _read(path)
    if raw[:2] != b"P6":
        raise SceneIOError(f"{path}: bad magic {raw[:2]!r} at byte 0, expected b'P6'")
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SceneIOError(f"{path}: truncated header at byte {pos}")
        try:
            tokens.append(int(raw[start:pos]))
        except ValueError:
            raise SceneIOError(f"{path}: bad header token {raw[start:pos]!r} at byte {start}") from None
    w, h, maxval = tokens
    if maxval != 255:
        raise SceneIOError(f"{path}: unsupported maxval {maxval}, expected 255")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    body = raw[pos:]
    if len(body) < need:
        raise SceneIOError(f"{path}: truncated pixel data at byte {pos}: expected {need} bytes, got {len(body)}")
    return np.frombuffer(body[:need], dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_depth(path, depth: np.ndarray):
    h, w = depth.shape
    _atomic_write(Path(path), np.array([w, h], dtype="<u4").tobytes() + np.asarray(depth, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < 8:
        raise SceneIOError(f"{path}: truncated header: expected 8 bytes, got {len(raw)}")
    w, h = (int(x) for x in np.frombuffer(raw[:8], dtype="<u4"))
    need = 8 + 4 * w * h
    if len(raw) != need:
        raise SceneIOError(f"{path}: expected {need} bytes for a {w}x{h} depth map, got {len(raw)}")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(h, w).astype(np.float64)


def write_cloud(path, cloud: PointCloud):
    rec = np.zeros(len(cloud), dtype=CLOUD_DTYPE)
    rec["xyz"] = cloud.points
    rec["rgb"] = np.round(np.clip(cloud.colors, 0.0, 1.0) * 255).astype(np.uint8)
    rec["label"] = cloud.labels if cloud.labels is not None else 0
    _atomic_write(Path(path), np.array([len(cloud)], dtype="<u4").tobytes() + rec.tobytes())


def read_cloud(path) -> PointCloud:
    raw = _read(path)
    if len(raw) < 4:
        raise SceneIOError(f"{path}: truncated header: expected 4 bytes, got {len(raw)}")
    n = int(np.frombuffer(raw[:4], dtype="<u4")[0])
    need = 4 + n * CLOUD_DTYPE.itemsize
    if len(raw) != need:
        raise SceneIOError(f"{path}: expected {need} bytes for {n} points, got {len(raw)}")
    rec = np.frombuffer(raw[4:], dtype=CLOUD_DTYPE)
    return PointCloud(rec["xyz"].astype(np.float64), rec["rgb"].astype(np.float64) / 255.0, rec["label"].astype(np.int64))


def camera_to_dict(cam: CameraModel) -> dict[str, str]:
    return {
        "fx": repr(float(cam.fx)),
        "fy": repr(float(cam.fy)),
        "cx": repr(float(cam.cx)),
        "cy": repr(float(cam.cy)),
        "width": str(int(cam.width)),
        "height": str(int(cam.height)),
        "pose": ",".join(repr(float(x)) for x in cam.pose.ravel()),
    }


def camera_from_dict(d: dict, where: str = "camera") -> CameraModel:
    try:
        pose = np.array([float(x) for x in d["pose"].split(",")]).reshape(4, 4)
        return CameraModel(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]), pose
        )
    except KeyError as e:
        raise SceneIOError(f"{where}: missing camera key {e.args[0]!r}") from None
    except ValueError as e:
        raise SceneIOError(f"{where}: bad camera parameters: {e}") from None


def write_camera(path, cam: CameraModel):
    text = "".join(f"{k}={v}\n" for k, v in camera_to_dict(cam).items())
    _atomic_write(Path(path), text.encode("ascii"))


def read_camera(path) -> CameraModel:
    d = {}
    for lineno, line in enumerate(_read(path).decode("ascii").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SceneIOError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        d[k.strip()] = v.strip()
    return camera_from_dict(d, str(path))


SCENE_FILES = {"image": "image.ppm", "depth": "depth.bin", "cloud": "cloud.bin", "camera": "camera.txt"}


def save_scene(sample: SceneSample, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {k: d / v for k, v in SCENE_FILES.items()}
    write_ppm(paths["image"], sample.image)
    write_depth(paths["depth"], sample.depth)
    write_cloud(paths["cloud"], sample.cloud)
    write_camera(paths["camera"], sample.camera)
    return paths


def load_scene(directory, scene_id: str | None = None, camera: CameraModel | None = None) -> SceneSample:
    d = Path(directory)
    cam = camera if camera is not None else read_camera(d / SCENE_FILES["camera"])
    return _assemble(
        read_ppm(d / SCENE_FILES["image"]),
        read_depth(d / SCENE_FILES["depth"]),
        cam,
        read_cloud(d / SCENE_FILES["cloud"]),
        scene_id if scene_id is not None else d.name,
    )


def _assemble(image, depth, cam, cloud, scene_id) -> SceneSample:
    if image.shape[:2] != (cam.height, cam.width) or depth.shape != (cam.height, cam.width):
        raise SceneIOError(
            f"scene {scene_id}: image {image.shape[:2]} / depth {depth.shape} do not match camera {cam.height}x{cam.width}"
        )
    return SceneSample(image, depth, cam, cloud, scene_id)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    scene_id: str
    image: Path
    depth: Path
    cloud: Path
    camera: CameraModel


@dataclass
class SceneManifest:
    entries: list[ManifestEntry]
    seed: int = 0
    classes: tuple[str, ...] = CLASS_NAMES
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.entries)

    def load(self, i: int) -> SceneSample:
        e = self.entries[i]
        return _assemble(read_ppm(e.image), read_depth(e.depth), e.camera, read_cloud(e.cloud), e.scene_id)

    def load_all(self, start: int = 0, stop: int | None = None) -> list[SceneSample]:
        return [self.load(i) for i in range(start, len(self) if stop is None else min(stop, len(self)))]


def write_manifest(path, entries: list[ManifestEntry], seed: int, classes=CLASS_NAMES):
    path = Path(path)
    root = path.parent
    lines = [MANIFEST_HEADER, f"seed={seed}", f"classes={','.join(classes)}"]
    for e in entries:
        fields = {
            "scene_id": e.scene_id,
            "image": Path(os.path.relpath(e.image, root)).as_posix(),
            "depth": Path(os.path.relpath(e.depth, root)).as_posix(),
            "cloud": Path(os.path.relpath(e.cloud, root)).as_posix(),
            **camera_to_dict(e.camera),
        }
        lines.append(" ".join(f"{k}={v}" for k, v in fields.items()))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_manifest(path) -> SceneManifest:
    path = Path(path)
    text = _read(path).decode("ascii").splitlines()
    if not text or text[0].strip() != MANIFEST_HEADER:
        raise SceneIOError(f"{path}:1: missing manifest header {MANIFEST_HEADER!r}")
    seed, classes, entries, seen = 0, CLASS_NAMES, [], set()
    for lineno, line in enumerate(text[1:], 2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("seed="):
            seed = int(line[5:])
            continue
        if line.startswith("classes="):
            classes = tuple(line[8:].split(","))
            continue
        try:
            d = dict(tok.split("=", 1) for tok in line.split())
        except ValueError:
            raise SceneIOError(f"{path}:{lineno}: malformed entry") from None
        sid = d.get("scene_id")
        if not sid:
            raise SceneIOError(f"{path}:{lineno}: entry without scene_id")
        if sid in seen:
            raise SceneIOError(f"{path}:{lineno}: duplicate scene_id {sid!r}")
        seen.add(sid)
        files = {}
        for key in ("image", "depth", "cloud"):
            if key not in d:
                raise SceneIOError(f"{path}:{lineno}: entry {sid!r} has no {key} path")
            p = path.parent / d[key]
            if not p.is_file():
                raise SceneIOError(f"{path}:{lineno}: missing file: {p}")
            files[key] = p
        entries.append(ManifestEntry(sid, files["image"], files["depth"], files["cloud"],
                                     camera_from_dict(d, f"{path}:{lineno}")))
    return SceneManifest(entries, seed, classes, path.parent)


def generate_dataset(out_dir, n: int, seed: int, cfg: SceneConfig = SceneConfig()) -> Path:
    """Write ``n`` scenes (seeds seed..seed+n-1) plus ``manifest.txt`` under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        sid = f"scene_{i:04d}"
        sample = generate_scene(seed + i, cfg, sid)
        paths = save_scene(sample, out / sid)
        entries.append(ManifestEntry(sid, paths["image"], paths["depth"], paths["cloud"], sample.camera))
    manifest = out / "manifest.txt"
    write_manifest(manifest, entries, seed)
    return manifest
