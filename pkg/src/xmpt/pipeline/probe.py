"""Linear-probe semantic segmentation on frozen point features, scored by mIoU."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .. import tensor as T
from ..models import Point3DNet, he_uniform, split_backbone_head
from ..scenegen import CLASS_NAMES, SceneSample
from .checkpoint import Checkpoint, CheckpointError
from .optim import Adam
from .train import ConfigError, TrainConfig, _scenes_from, eval_scenes_from


@dataclass
class ProbeResult:
    per_class_iou: list[float]  # NaN for classes absent from the ground truth
    miou: float
    confusion: np.ndarray  # rows: ground truth, columns: prediction
    config_hash: str = ""


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def miou_from_confusion(conf: np.ndarray) -> tuple[list[float], float]:
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1)
    denom = gt_count + conf.sum(axis=0) - tp
    present = gt_count > 0
    iou = np.full(len(conf), np.nan)
    iou[present] = tp[present] / denom[present]
    if not present.any():
        raise ValueError("no ground-truth points to score")
    return iou.tolist(), float(iou[present].mean())


def score(pred, gt, num_classes: int) -> ProbeResult:
    conf = confusion_matrix(pred, gt, num_classes)
    iou, miou = miou_from_confusion(conf)
    return ProbeResult(iou, miou, conf)


def _features(net: Point3DNet, scenes: Sequence[SceneSample]):
    with T.no_grad():
        feats = [net.backbone(s.cloud_features()).data for s in scenes]
    labels = [s.cloud.labels for s in scenes]
    return np.concatenate(feats), np.concatenate(labels)


def probe_hash(cfg: TrainConfig) -> str:
    """Config hash that ignores which backbone is probed."""
    return cfg.hash(exclude=("checkpoint", "log_path", "backbone"))


def linear_probe(
    cfg: TrainConfig,
    backbone: Optional[Checkpoint],
    train_scenes: Optional[Sequence[SceneSample]] = None,
    eval_scenes: Optional[Sequence[SceneSample]] = None,
) -> ProbeResult:
    """Train a per-point linear classifier on frozen backbone features.

    ``backbone=None`` probes a randomly initialized network (seeded by cfg.seed).
    """
    cfg.validate()
    train = _scenes_from(cfg, train_scenes)
    evals = list(eval_scenes) if eval_scenes is not None else eval_scenes_from(cfg)
    if not evals:
        raise ConfigError("probe needs at least one evaluation scene")
    c = cfg.num_classes

    net = Point3DNet(cfg.seed)
    if backbone is not None:
        if backbone.kind != Point3DNet.kind:
            raise CheckpointError(f"probe backbone must be a {Point3DNet.kind} checkpoint, got {backbone.kind!r}")
        net.load_state_dict(backbone.tensors)
    net.reset_head(cfg.seed)
    net.freeze()
    split_backbone_head(net)  # the head is unused: the classifier replaces it

    x_train, y_train = _features(net, train)
    x_eval, y_eval = _features(net, evals)
    missing = sorted(set(range(c)) - set(np.unique(y_train).tolist()))
    if missing:
        names = [CLASS_NAMES[i] if i < len(CLASS_NAMES) else str(i) for i in missing]
        raise ConfigError(f"classes absent from the probe training split: {names}")

    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    sd[sd < 1e-8] = 1.0
    x_train = T.Tensor((x_train - mu) / sd)
    x_eval = (x_eval - mu) / sd

    rng = np.random.default_rng([cfg.seed, 0x9B0E])
    head = {
        "weight": T.Tensor(he_uniform(rng, (x_train.shape[1], c), x_train.shape[1]), requires_grad=True),
        "bias": T.Tensor(np.zeros(c), requires_grad=True),
    }
    opt = Adam(head, cfg.lr)
    n = len(y_train)
    target_idx = np.arange(n) * c + y_train
    for _ in range(cfg.steps):
        logits = T.add(T.matmul(x_train, head["weight"]), head["bias"])
        picked = T.gather_rows(T.reshape(logits, (n * c,)), target_idx)
        loss = T.mean(T.sub(T.logsumexp(logits, axis=1), picked))
        opt.zero_grad()
        T.backward(loss)
        opt.step()

    pred = np.argmax(x_eval @ head["weight"].data + head["bias"].data, axis=1)
    result = score(pred, y_eval, c)
    result.config_hash = probe_hash(cfg)
    return result
