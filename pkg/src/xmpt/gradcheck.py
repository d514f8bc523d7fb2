"""Central finite-difference gradient checks with relu-kink exclusion."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad, record_relu_masks


@dataclass
class GradCheckResult:
    max_rel_err: float
    checked: int
    kinks: list[int] = field(default_factory=list)

    def __float__(self):
        return self.max_rel_err


def _same_masks(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ValueError(f"gradient check needs a scalar function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def check_tensor(
    evaluate: Callable[[], Tensor],
    target: Tensor,
    h: float = 1e-3,
    coords=None,
) -> GradCheckResult:
    """Compare ``target.grad`` from one backward pass against central differences.

    ``evaluate`` must rebuild the scalar output from the current contents of
    ``target.data``; coordinates are perturbed in place and restored.
    A coordinate is a kink when any relu activation pattern differs between
    x, x+h and x-h; kinks are excluded from the error.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    target.grad = None
    with record_relu_masks() as base_masks:
        out = evaluate()
    _scalar(out)
    if out.node is not None:
        backward(out)
    analytic = np.zeros(target.shape) if target.grad is None else target.grad.copy()

    flat = target.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    checked = 0
    kinks = []
    for c in coords:
        orig = flat[c]
        with no_grad():
            flat[c] = orig + h
            with record_relu_masks() as m_plus:
                f_plus = _scalar(evaluate())
            flat[c] = orig - h
            with record_relu_masks() as m_minus:
                f_minus = _scalar(evaluate())
        flat[c] = orig
        if not (_same_masks(base_masks, m_plus) and _same_masks(base_masks, m_minus)):
            kinks.append(int(c))
            continue
        a = analytic.reshape(-1)[c]
        n = (f_plus - f_minus) / (2 * h)
        worst = max(worst, float(abs(a - n) / max(1.0, abs(a), abs(n))))
        checked += 1
    return GradCheckResult(worst, checked, kinks)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3, coords=None) -> GradCheckResult:
    """Max relative error |analytic - numeric| / max(1, |analytic|, |numeric|) of f at x."""
    leaf = Tensor(x, requires_grad=True)
    return check_tensor(lambda: f(leaf), leaf, h=h, coords=coords)


# ---------------------------------------------------------------------------
# release suite


def _weighted(op, g):
    """Scalarize an op output with fixed random weights so every output element matters."""
    from . import tensor as T

    return lambda x: T.sum(T.mul(op(x), g))


def _op_checks(rng: np.random.Generator):
    from . import tensor as T

    def weights(shape):
        return Tensor(rng.normal(size=shape))

    other = Tensor(rng.normal(size=(3, 4)))
    row = Tensor(rng.normal(size=(1, 4)))
    mat = Tensor(rng.normal(size=(4, 5)))
    kern = Tensor(rng.normal(size=(3, 3, 2, 3)))
    image = Tensor(rng.normal(size=(1, 6, 5, 2)))
    coords = rng.uniform(0.2, 4.8, size=(7, 2))
    idx = np.array([0, 2, 2, 1, 0])
    g34, g12 = weights((3, 4)), weights((12,))

    yield "add", _weighted(lambda x: T.add(x, row), g34), rng.normal(size=(3, 4))
    yield "sub", _weighted(lambda x: T.sub(other, x), g34), rng.normal(size=(3, 4))
    yield "mul", _weighted(lambda x: T.mul(x, other), g34), rng.normal(size=(3, 4))
    yield "scale", _weighted(lambda x: T.scale(x, -2.5), g34), rng.normal(size=(3, 4))
    yield "matmul", _weighted(lambda x: T.matmul(x, mat), weights((3, 5))), rng.normal(size=(3, 4))
    yield "conv2d", _weighted(lambda x: T.conv2d(x, kern, stride=2, padding=1), weights((1, 3, 3, 3))), rng.normal(size=(1, 6, 5, 2))
    yield "conv2d_weight", _weighted(lambda w: T.conv2d(image, w, stride=1, padding=1), weights((1, 6, 5, 3))), kern.data.copy()
    yield "upsample_bilinear", _weighted(T.upsample_bilinear, weights((1, 6, 8, 2))), rng.normal(size=(1, 3, 4, 2))
    yield "relu", _weighted(T.relu, g34), rng.normal(size=(3, 4))
    yield "exp", _weighted(T.exp, g34), rng.normal(size=(3, 4))
    yield "log", _weighted(T.log, g34), rng.uniform(0.5, 2.0, size=(3, 4))
    yield "sum", _weighted(lambda x: T.sum(x, axis=1), weights((3,))), rng.normal(size=(3, 4))
    yield "mean", _weighted(lambda x: T.mean(x, axis=0, keepdims=True), weights((1, 4))), rng.normal(size=(3, 4))
    yield "concat", _weighted(lambda x: T.concat([x, other, x], axis=0), weights((9, 4))), rng.normal(size=(3, 4))
    yield "gather_rows", _weighted(lambda x: T.gather_rows(x, idx), weights((5, 4))), rng.normal(size=(3, 4))
    yield "l2_normalize", _weighted(T.l2_normalize, g34), rng.normal(size=(3, 4))
    yield "softmax", _weighted(T.softmax, g34), rng.normal(size=(3, 4))
    yield "bilinear_sample", _weighted(lambda x: T.bilinear_sample(x, coords), weights((7, 3))), rng.normal(size=(5, 5, 3))
    yield "reshape", _weighted(lambda x: T.reshape(x, (12,)), g12), rng.normal(size=(3, 4))
    yield "transpose", _weighted(T.transpose, weights((4, 3))), rng.normal(size=(3, 4))


def _random_graph_check(rng: np.random.Generator):
    """Five chained layers mixing most op kinds."""
    from . import tensor as T

    w1, w2 = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(6, 5)))
    b1 = Tensor(rng.normal(size=(6,)))
    out_w = Tensor(rng.normal(size=(3, 9)))

    def f(x):
        h = T.relu(T.add(T.matmul(x, w1), b1))
        h = T.exp(T.scale(T.matmul(h, w2), 0.2))
        h = T.softmax(T.mul(h, h))
        h = T.l2_normalize(T.concat([h, x], axis=1))
        return T.log(T.exp(T.sum(T.mul(h, out_w))) + 1.0)

    return f, rng.normal(size=(3, 4))


def _info_nce_checks(rng: np.random.Generator):
    from . import tensor as T
    from .contrastive import ContrastiveBatch, info_nce

    d = 16
    positives = T.l2_normalize(Tensor(rng.normal(size=(4, d))))
    negatives = T.l2_normalize(Tensor(rng.normal(size=(8, d))))

    def explicit(x):
        return info_nce(ContrastiveBatch(T.l2_normalize(x), positives, negatives, 0.4, 8))

    def key_side(x):
        return info_nce(ContrastiveBatch(T.l2_normalize(x), positives, None, 0.4, 16, "key"))

    def anchor_side(x):
        return info_nce(ContrastiveBatch(T.l2_normalize(x), positives, None, 0.4, 16, "anchor"))

    yield "info_nce", explicit, rng.normal(size=(4, d))
    yield "info_nce_key", key_side, rng.normal(size=(4, d))
    yield "info_nce_anchor", anchor_side, rng.normal(size=(4, d))


def _model_checks(rng: np.random.Generator, coords_per_tensor: int = 6, h: float = 1e-4):
    from . import tensor as T
    from .contrastive import ContrastiveBatch, info_nce
    from .models import Image2DNet, Point3DNet

    net2d = Image2DNet(seed=int(rng.integers(1 << 31)))
    image = rng.uniform(size=(8, 8, 3))
    pa = rng.choice(64, size=6, replace=False)
    pb = rng.choice(64, size=6, replace=False)

    def loss2d():
        f = T.reshape(net2d(image), (64, 16))
        return info_nce(ContrastiveBatch(T.gather_rows(f, pa), T.gather_rows(f, pb), None, 0.4, 5))

    net3d = Point3DNet(seed=int(rng.integers(1 << 31)))
    cloud = np.concatenate([rng.normal(size=(12, 3)), rng.uniform(size=(12, 3))], axis=1)
    targets = T.l2_normalize(Tensor(rng.normal(size=(12, 16))))

    def loss3d():
        return info_nce(ContrastiveBatch(net3d(cloud), targets, None, 0.4, 11))

    for tag, net, fn in (("model2d", net2d, loss2d), ("model3d", net3d, loss3d)):
        worst, kinks = 0.0, 0
        for name, p in net.params.items():
            coords = rng.choice(p.size, size=min(coords_per_tensor, p.size), replace=False)
            r = check_tensor(fn, p, h=h, coords=coords)
            worst = max(worst, r.max_rel_err)
            kinks += len(r.kinks)
            p.grad = None
        yield tag, worst, kinks


def run_suite(seed: int = 0):
    """Yield (check name, max relative error) for every op kind, the loss and both models."""
    rng = np.random.default_rng(seed)
    for name, f, x in _op_checks(rng):
        yield name, finite_diff_check(f, x).max_rel_err
    f, x = _random_graph_check(rng)
    yield "random_graph", finite_diff_check(f, x).max_rel_err
    for name, f, x in _info_nce_checks(rng):
        yield name, finite_diff_check(f, x).max_rel_err
    for name, worst, _ in _model_checks(rng):
        yield name, worst
