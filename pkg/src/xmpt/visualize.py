"""PCA-to-RGB heatmaps of pixel and point features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .geometry import build_correspondences
from .models import Image2DNet, Point3DNet
from .scenegen import SceneSample, write_ppm


@dataclass
class PCABasis:
    mean: np.ndarray
    components: np.ndarray  # (3, D)
    lo: np.ndarray
    hi: np.ndarray

    def to_rgb(self, feats: np.ndarray) -> np.ndarray:
        """Affine per-component map onto [0, 255]; flat components become mid-gray."""
        proj = (feats - self.mean) @ self.components.T
        span = self.hi - self.lo
        flat = span < 1e-12
        safe = np.where(flat, 1.0, span)
        rgb = np.where(flat, 128.0, np.round((proj - self.lo) / safe * 255.0))
        return np.clip(rgb, 0, 255).astype(np.uint8)


def fit_pca(feats: np.ndarray, n_components: int = 3) -> PCABasis:
    """Top principal directions, each signed so its largest-magnitude loading is positive."""
    x = np.asarray(feats, dtype=np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = np.zeros((n_components, x.shape[1]))
    for i in range(min(n_components, len(vt))):
        # zero-variance directions stay zero and render as mid-gray
        if s[i] > 1e-12 * max(1.0, s[0]):
            comps[i] = vt[i]
    for c in comps:
        j = np.argmax(np.abs(c))
        if c[j] < 0:
            c *= -1
    proj = centered @ comps.T
    return PCABasis(mean, comps, proj.min(axis=0), proj.max(axis=0))


@dataclass
class Heatmaps:
    image2d: Optional[np.ndarray] = None  # H x W x 3 uint8
    image3d: Optional[np.ndarray] = None  # H x W x 3 uint8, black where no point lands
    coverage: Optional[np.ndarray] = None  # H x W bool, pixels hit by a rendered point
    color_distance: Optional[float] = None


def render_points(colors: np.ndarray, scene: SceneSample):
    """Z-buffered splat of per-point colors into the scene camera."""
    corr = build_correspondences(scene.cloud.points, scene.camera)
    out = np.zeros((scene.camera.height, scene.camera.width, 3), dtype=np.uint8)
    cover = np.zeros(out.shape[:2], dtype=bool)
    u, v = corr.pixels[:, 0], corr.pixels[:, 1]
    out[v, u] = colors[corr.point_index]
    cover[v, u] = True
    return out, cover


def heatmaps(scene: SceneSample, net2d: Optional[Image2DNet] = None, net3d: Optional[Point3DNet] = None) -> Heatmaps:
    if net2d is None and net3d is None:
        raise ValueError("need at least one network to visualize")
    h, w = scene.camera.height, scene.camera.width
    f2 = f3 = None
    with T.no_grad():
        if net2d is not None:
            if scene.image.shape[:2] != (h, w):
                raise ValueError(f"scene image {scene.image.shape[:2]} does not match camera {h}x{w}")
            f2 = net2d(scene.image).data.reshape(h * w, -1)
        if net3d is not None:
            f3 = net3d(scene.cloud_features()).data
    basis = fit_pca(np.concatenate([f for f in (f2, f3) if f is not None]))
    out = Heatmaps()
    if f2 is not None:
        out.image2d = basis.to_rgb(f2).reshape(h, w, 3)
    if f3 is not None:
        out.image3d, out.coverage = render_points(basis.to_rgb(f3), scene)
    if f2 is not None and f3 is not None:
        a = out.image2d[out.coverage].astype(np.float64)
        b = out.image3d[out.coverage].astype(np.float64)
        out.color_distance = float(np.linalg.norm(a - b, axis=1).mean())
    return out


def write_heatmaps(maps: Heatmaps, prefix: str) -> list[str]:
    written = []
    if maps.image2d is not None:
        write_ppm(f"{prefix}_2d.ppm", maps.image2d)
        written.append(f"{prefix}_2d.ppm")
    if maps.image3d is not None:
        write_ppm(f"{prefix}_3d.ppm", maps.image3d)
        written.append(f"{prefix}_3d.ppm")
    return written
