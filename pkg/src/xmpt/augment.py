"""Image and point-cloud augmentations that keep track of where every sample came from.

Image coordinates are continuous with pixel (u, v) covering [u, u+1) x [v, v+1).
Each augmented view carries the affine map from original-image coordinates to
view coordinates, which is what lets two views of one image be matched pixel
by pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import PointCloud, apply_rigid, rotation_z
from .tensor import bilinear_weights


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class Augment2DConfig:
    out_size: Optional[tuple[int, int]] = None  # (H, W); None keeps the input size
    area: tuple[float, float] = (0.4, 1.0)
    aspect: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter: tuple[float, float] = (0.6, 1.4)
    jitter_p: float = 0.8
    gray_p: float = 0.2
    force_crop: Optional[tuple[float, float, float, float]] = None  # (x0, y0, w, h)
    force_flip: Optional[bool] = None


@dataclass(frozen=True)
class Augment3DConfig:
    keep_rate: tuple[float, float] = (0.6, 1.0)
    rotation: str = "z"  # "z" (gravity axis), "so3" or "none"
    jitter: tuple[float, float] = (0.6, 1.4)
    jitter_p: float = 0.8
    force_angle: Optional[float] = None


@dataclass(frozen=True)
class Affine2D:
    """2-D affine map stored as a 3x3 homogeneous matrix."""

    matrix: np.ndarray

    @classmethod
    def crop_resize(cls, x0, y0, w, h, out_w, out_h, flip=False) -> "Affine2D":
        sx, sy = out_w / w, out_h / h
        m = np.array([[sx, 0.0, -sx * x0], [0.0, sy, -sy * y0], [0.0, 0.0, 1.0]])
        if flip:
            m = np.array([[-1.0, 0.0, out_w], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) @ m
        return cls(m)

    def __call__(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        m = self.matrix
        x, y = p[..., 0], p[..., 1]
        return np.stack([m[0, 0] * x + m[0, 1] * y + m[0, 2], m[1, 0] * x + m[1, 1] * y + m[1, 2]], axis=-1)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix[:2, :2]))

    def inverse(self) -> "Affine2D":
        return Affine2D(np.linalg.inv(self.matrix))


@dataclass
class JitterParams:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    grayscale: bool = False
    mean_gray: float = 0.0  # contrast pivot, measured on the un-jittered source


@dataclass
class AugmentedView:
    image: np.ndarray
    fwd_map: Affine2D
    params: dict = field(default_factory=dict)

    @property
    def inverse_map(self) -> Affine2D:
        return self.fwd_map.inverse()


@dataclass
class AugmentedCloud:
    points: np.ndarray
    colors: np.ndarray
    index_map: np.ndarray
    params: dict = field(default_factory=dict)

    def features(self) -> np.ndarray:
        return np.concatenate([self.points, self.colors], axis=1)


def _gray(rgb: np.ndarray) -> np.ndarray:
    return rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114


def sample_jitter(rng: np.random.Generator, colors: np.ndarray, jitter, jitter_p, gray_p) -> JitterParams:
    p = JitterParams(mean_gray=float(_gray(colors.reshape(-1, 3)).mean()))
    if rng.random() < jitter_p:
        p.brightness, p.contrast, p.saturation = (float(f) for f in rng.uniform(*jitter, size=3))
    p.grayscale = bool(rng.random() < gray_p)
    return p


def jitter_colors(colors: np.ndarray, p: JitterParams) -> np.ndarray:
    """Pointwise photometric transform: brightness, contrast, saturation, grayscale, clamp."""
    # unit factors are skipped so identity parameters are bit-exact
    c = np.asarray(colors, dtype=np.float64)
    if p.brightness != 1.0:
        c = np.clip(c * p.brightness, 0.0, 1.0)
    if p.contrast != 1.0:
        pivot = p.mean_gray * p.brightness
        c = np.clip((c - pivot) * p.contrast + pivot, 0.0, 1.0)
    if p.saturation != 1.0:
        g = _gray(c)[..., None]
        c = np.clip((c - g) * p.saturation + g, 0.0, 1.0)
    if p.grayscale:
        c = np.repeat(_gray(c)[..., None], 3, axis=-1)
    return c


def resample(image: np.ndarray, inv: Affine2D, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling: each output pixel center pulled back through ``inv``."""
    h, w, c = image.shape
    vv, uu = np.meshgrid(np.arange(out_h) + 0.5, np.arange(out_w) + 0.5, indexing="ij")
    src = inv(np.stack([uu.ravel(), vv.ravel()], axis=1))
    flat = image.reshape(h * w, c)
    idx, wts = bilinear_weights((h, w), src)
    out = np.zeros((out_h * out_w, c))
    for i, wt in zip(idx, wts):
        out += wt[:, None] * flat[i]
    return out.reshape(out_h, out_w, c)


def _sample_crop(rng, h, w, cfg: Augment2DConfig):
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*cfg.area)
        log_r = rng.uniform(np.log(cfg.aspect[0]), np.log(cfg.aspect[1]))
        r = np.exp(log_r)
        cw, ch = np.sqrt(target * r), np.sqrt(target / r)
        if cw <= w and ch <= h:
            return rng.uniform(0, w - cw), rng.uniform(0, h - ch), cw, ch
    return 0.0, 0.0, float(w), float(h)


def augment_image(image: np.ndarray, rng: np.random.Generator, cfg: Augment2DConfig = Augment2DConfig()) -> AugmentedView:
    """Random resized crop, horizontal flip, color jitter and grayscale, in that order."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise AugmentError(f"expected an HxWx3 image, got {image.shape}")
    if image.min() < 0 or image.max() > 1:
        raise AugmentError("image values must lie in [0, 1]")
    h, w, _ = image.shape
    out_h, out_w = cfg.out_size if cfg.out_size else (h, w)

    x0, y0, cw, ch = cfg.force_crop if cfg.force_crop is not None else _sample_crop(rng, h, w, cfg)
    if cw < 2 or ch < 2:
        raise AugmentError(f"degenerate crop {cw:.3f}x{ch:.3f} (need at least 2 pixels per side)")
    flip = cfg.force_flip if cfg.force_flip is not None else bool(rng.random() < cfg.flip_p)
    fwd = Affine2D.crop_resize(x0, y0, cw, ch, out_w, out_h, flip)

    view = resample(image, fwd.inverse(), out_h, out_w)
    jit = sample_jitter(rng, image, cfg.jitter, cfg.jitter_p, cfg.gray_p)
    view = jitter_colors(view, jit)
    params = {"crop": (float(x0), float(y0), float(cw), float(ch)), "flip": flip, "jitter": jit}
    return AugmentedView(view, fwd, params)


def sample_positive_pixels(view_a: AugmentedView, view_b: AugmentedView, n: int, rng: np.random.Generator):
    """Pairs of integer pixels (pixel_a, pixel_b) that see the same original location.

    Locations are drawn uniformly from the overlap of the two crops. Returns an
    (M, 2, 2) int array of ((ua, va), (ub, vb)) with M <= n, unique on pixel_a;
    empty when the crops do not overlap.
    """
    ax, ay, aw, ah = view_a.params["crop"]
    bx, by, bw, bh = view_b.params["crop"]
    x0, x1 = max(ax, bx), min(ax + aw, bx + bw)
    y0, y1 = max(ay, by), min(ay + ah, by + bh)
    if x1 <= x0 or y1 <= y0 or n <= 0:
        return np.zeros((0, 2, 2), dtype=np.int64)
    orig = np.stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)], axis=1)
    pa = np.floor(view_a.fwd_map(orig)).astype(np.int64)
    pb = np.floor(view_b.fwd_map(orig)).astype(np.int64)
    ha, wa = view_a.image.shape[:2]
    hb, wb = view_b.image.shape[:2]
    ok = (
        (pa[:, 0] >= 0) & (pa[:, 0] < wa) & (pa[:, 1] >= 0) & (pa[:, 1] < ha)
        & (pb[:, 0] >= 0) & (pb[:, 0] < wb) & (pb[:, 1] >= 0) & (pb[:, 1] < hb)
    )
    pa, pb = pa[ok], pb[ok]
    _, first = np.unique(pa[:, 1] * wa + pa[:, 0], return_index=True)
    first.sort()
    return np.stack([pa[first], pb[first]], axis=1)


def _random_rotation(rng: np.random.Generator, mode: str, force_angle=None) -> np.ndarray:
    if force_angle is not None:
        return rotation_z(force_angle)
    if mode == "none":
        return np.eye(4)
    if mode == "z":
        return rotation_z(rng.uniform(0.0, 2 * np.pi))
    if mode == "so3":
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        a, b, c, d = q
        t = np.eye(4)
        t[:3, :3] = [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
        ]
        return t
    raise AugmentError(f"unknown rotation mode {mode!r}")


def augment_cloud(cloud: PointCloud, rng: np.random.Generator, cfg: Augment3DConfig = Augment3DConfig()) -> AugmentedCloud:
    """Rotate, randomly drop points and jitter colors; ``index_map`` tracks survivors."""
    if len(cloud) == 0:
        raise AugmentError("cannot augment an empty cloud")
    rot = _random_rotation(rng, cfg.rotation, cfg.force_angle)
    keep_rate = float(rng.uniform(*cfg.keep_rate))
    keep = rng.random(len(cloud)) < keep_rate
    if not keep.any():
        keep[rng.integers(len(cloud))] = True
    index_map = np.flatnonzero(keep)
    jit = sample_jitter(rng, cloud.colors, cfg.jitter, cfg.jitter_p, 0.0)
    points = apply_rigid(cloud.points[index_map], rot)
    colors = jitter_colors(cloud.colors[index_map], jit)
    params = {"rotation": rot, "keep_rate": keep_rate, "jitter": jit}
    return AugmentedCloud(points, colors, index_map, params)
