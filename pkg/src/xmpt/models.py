"""Desk-scale feature networks.

``Image2DNet`` is a three-level conv encoder/decoder with skip connections that
emits a unit 16-dim feature per pixel. ``Point3DNet`` is a per-point MLP with
k-nearest-neighbor mean aggregation that emits a unit 16-dim feature per
point. In both, the final 1x1 projection is the detachable head.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .tensor import Tensor

FEATURE_DIM = 16
HEAD_PREFIX = "head."


class ModelError(ValueError):
    pass


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Net:
    kind = ""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict, strict: bool = True):
        for name, p in self.params.items():
            if name not in state:
                if strict:
                    raise ModelError(f"{self.kind}: missing parameter {name!r}")
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ModelError(f"{self.kind}: parameter {name!r} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.copy()
        extra = set(state) - set(self.params)
        if strict and extra:
            raise ModelError(f"{self.kind}: unexpected parameters {sorted(extra)}")

    def reset_head(self, seed: int):
        rng = np.random.default_rng([seed, 0x4EAD])
        for name, p in self.params.items():
            if name.startswith(HEAD_PREFIX):
                if name.endswith("weight"):
                    fan_in = int(np.prod(p.shape[:-1]))
                    p.data = he_uniform(rng, p.shape, fan_in)
                else:
                    p.data = np.zeros(p.shape)
                p.grad = None

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None


class Image2DNet(_Net):
    kind = "image2d"

    def __init__(self, seed: int = 0, widths=(16, 32, 64), out_dim: int = FEATURE_DIM, in_ch: int = 3):
        super().__init__()
        w0, w1, w2 = widths
        rng = np.random.default_rng(seed)
        layers = [
            ("enc1", 3, in_ch, w0),
            ("enc2", 3, w0, w1),
            ("enc3", 3, w1, w2),
            ("dec2", 3, w2 + w1, w1),
            ("dec1", 3, w1 + w0, w0),
            ("dec0", 3, w0 + in_ch, w0),
            ("head", 1, w0, out_dim),
        ]
        for name, k, cin, cout in layers:
            self.params[f"{name}.weight"] = Tensor(he_uniform(rng, (k, k, cin, cout), k * k * cin), requires_grad=True)
            self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def _conv(self, name, x, stride=1):
        w = self.params[f"{name}.weight"]
        pad = w.shape[0] // 2
        return T.add(T.conv2d(x, w, stride=stride, padding=pad), self.params[f"{name}.bias"])

    def backbone(self, x: Tensor) -> Tensor:
        e1 = T.relu(self._conv("enc1", x, 2))
        e2 = T.relu(self._conv("enc2", e1, 2))
        e3 = T.relu(self._conv("enc3", e2, 2))
        d2 = T.relu(self._conv("dec2", T.concat([T.upsample_bilinear(e3), e2], axis=3)))
        d1 = T.relu(self._conv("dec1", T.concat([T.upsample_bilinear(d2), e1], axis=3)))
        return T.relu(self._conv("dec0", T.concat([T.upsample_bilinear(d1), x], axis=3)))

    def forward(self, images) -> Tensor:
        """(N, H, W, 3) or (H, W, 3) -> unit features of matching rank."""
        x = T.as_tensor(images)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[3] != 3:
            raise T.ShapeError("forward_2d", x.shape, detail="expected HxWx3 images")
        if x.shape[1] % 8 or x.shape[2] % 8:
            raise T.ShapeError("forward_2d", x.shape, detail="height and width must be divisible by 8")
        out = T.l2_normalize(self._conv("head", self.backbone(x)))
        return T.reshape(out, out.shape[1:]) if single else out

    __call__ = forward


def centroid(xyz: np.ndarray) -> np.ndarray:
    # exactly rounded sums: independent of point order
    n = len(xyz)
    return np.array([math.fsum(xyz[:, i]) / n for i in range(3)])


def knn_indices(xyz: np.ndarray, k: int) -> np.ndarray:
    """(N, k') neighbor indices excluding self, sorted by distance, k' = min(k, N-1).

    A single point is its own neighbor.
    """
    n = len(xyz)
    if n == 1:
        return np.zeros((1, 1), dtype=np.intp)
    kk = min(k, n - 1)
    _, idx = cKDTree(xyz).query(xyz, k=kk + 1)
    idx = np.asarray(idx).reshape(n, kk + 1)
    # drop self; with duplicate points self may not sit in column 0
    is_self = idx == np.arange(n)[:, None]
    has_self = is_self.any(axis=1)
    keep = ~is_self
    keep[~has_self, kk] = False
    return idx[keep].reshape(n, kk)


def knn_bruteforce(xyz: np.ndarray, k: int) -> np.ndarray:
    """Reference k-NN by exhaustive pairwise distances."""
    n = len(xyz)
    if n == 1:
        return np.zeros((1, 1), dtype=np.intp)
    kk = min(k, n - 1)
    d = ((xyz[:, None, :] - xyz[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :kk]


class Point3DNet(_Net):
    kind = "point3d"

    def __init__(self, seed: int = 0, k: int = 16, out_dim: int = FEATURE_DIM):
        super().__init__()
        self.k = k
        rng = np.random.default_rng(seed)
        layers = [("mlp1", 6, 32), ("mlp2", 32, 64), ("post1", 128, 64), ("post2", 64, 64), ("head", 64, out_dim)]
        for name, cin, cout in layers:
            self.params[f"{name}.weight"] = Tensor(he_uniform(rng, (cin, cout), cin), requires_grad=True)
            self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def _linear(self, name, x):
        return T.add(T.matmul(x, self.params[f"{name}.weight"]), self.params[f"{name}.bias"])

    def backbone(self, cloud: np.ndarray, neighbors: np.ndarray | None = None) -> Tensor:
        """(N, 6) xyz+rgb -> (N, 64) pre-head features."""
        cloud = np.asarray(cloud, dtype=np.float64)
        if cloud.ndim != 2 or cloud.shape[1] != 6 or len(cloud) == 0:
            raise T.ShapeError("forward_3d", cloud.shape, detail="expected a non-empty N x 6 cloud")
        xyz = cloud[:, :3]
        if neighbors is None:
            neighbors = knn_indices(xyz, self.k)
        n, kk = neighbors.shape
        x = Tensor(np.concatenate([xyz - centroid(xyz), cloud[:, 3:]], axis=1))
        h = T.relu(self._linear("mlp1", x))
        h = T.relu(self._linear("mlp2", h))
        nb = T.reshape(T.gather_rows(h, neighbors.ravel()), (n, kk, h.shape[1]))
        h = T.concat([h, T.mean(nb, axis=1)], axis=1)
        h = T.relu(self._linear("post1", h))
        return T.relu(self._linear("post2", h))

    def forward(self, cloud: np.ndarray, neighbors: np.ndarray | None = None) -> Tensor:
        return T.l2_normalize(self._linear("head", self.backbone(cloud, neighbors)))

    __call__ = forward


def forward_2d(net: Image2DNet, image) -> Tensor:
    return net.forward(image)


def forward_3d(net: Point3DNet, cloud) -> Tensor:
    return net.forward(cloud)


def split_backbone_head(net: _Net) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    backbone = {k: v for k, v in net.params.items() if not k.startswith(HEAD_PREFIX)}
    head = {k: v for k, v in net.params.items() if k.startswith(HEAD_PREFIX)}
    return backbone, head


def build_net(kind: str, seed: int = 0) -> _Net:
    if kind == Image2DNet.kind:
        return Image2DNet(seed)
    if kind == Point3DNet.kind:
        return Point3DNet(seed)
    raise ModelError(f"unknown network kind {kind!r}")
