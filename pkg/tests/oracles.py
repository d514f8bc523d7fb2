"""Independent reference implementations used by the tests."""

import math

import numpy as np


def pinhole(point, fx, fy, cx, cy, pose):
    """Scalar projection with plain Python floats."""
    x, y, z = (float(c) for c in point)
    cam = [pose[r][0] * x + pose[r][1] * y + pose[r][2] * z + pose[r][3] for r in range(3)]
    if cam[2] <= 1e-4:
        return None
    return fx * cam[0] / cam[2] + cx, fy * cam[1] / cam[2] + cy, cam[2]


def correspondences_bruteforce(points, cam, depth=None, tol=0.05):
    """For every pixel, exhaustively find the nearest projecting point (lowest index on ties)."""
    pose = cam.pose.tolist()
    best = {}
    for i, p in enumerate(points):
        pr = pinhole(p, cam.fx, cam.fy, cam.cx, cam.cy, pose)
        if pr is None:
            continue
        u, v, z = pr
        pu, pv = math.floor(u), math.floor(v)
        if not (0 <= pu < cam.width and 0 <= pv < cam.height):
            continue
        if depth is not None:
            d = float(depth[pv, pu])
            if abs(z - d) > tol * d:
                continue
        key = (pu, pv)
        if key not in best or z < best[key][1]:
            best[key] = (i, z)
    return {(i, u, v) for (u, v), (i, _) in best.items()}


def infonce_scalar(pos, negs, tau):
    """-log(e^{pos/t} / (e^{pos/t} + sum e^{neg/t})) evaluated term by term."""
    num = math.exp(pos / tau)
    return -math.log(num / (num + sum(math.exp(n / tau) for n in negs)))


def random_rigid(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    t = np.eye(4)
    t[:3, :3] = [
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ]
    t[:3, 3] = rng.normal(size=3)
    return t
