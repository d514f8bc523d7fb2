"""Stage-1 (pixel contrastive) and Stage-2 (frozen-teacher distillation) training."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .. import tensor as T
from ..augment import (
    Augment2DConfig,
    Augment3DConfig,
    augment_cloud,
    augment_image,
    sample_positive_pixels,
)
from ..contrastive import NEGATIVE_MODES, ContrastiveBatch, SimilarityStats, info_nce, similarity_stats
from ..geometry import build_correspondences
from ..models import Image2DNet, Point3DNet
from ..scenegen import SceneSample, read_manifest
from .checkpoint import Checkpoint, CheckpointError, checkpoint_from_net, config_hash, net_from_checkpoint
from .optim import Adam, NonFiniteGradient

log = logging.getLogger(__name__)

STAGES = ("stage1", "stage2", "probe")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: str = "stage1"
    steps: int = 500
    batch_size: int = 4
    lr: float = 1e-3
    tau: float = 0.4
    K: int = 1024
    seed: int = 0
    negatives: str = "key"
    log_interval: int = 10
    pairs_per_image: int = 512  # stage 1: positive pixel pairs sampled per image
    max_pairs: int = 1024  # stage 2: anchors per step
    depth_tol: float = 0.05
    num_classes: int = 4
    augment2d: Augment2DConfig = field(default_factory=Augment2DConfig)
    augment3d: Augment3DConfig = field(default_factory=Augment3DConfig)
    manifest: Optional[str] = None
    train_scenes: Optional[int] = None  # first N manifest entries; None = all
    eval_scenes: int = 0  # the next N entries after the training ones
    checkpoint: Optional[str] = None  # output path
    log_path: Optional[str] = None
    teacher: Optional[str] = None  # stage 2 input
    backbone: Optional[str] = None  # probe input; None = scratch
    init_checkpoint: Optional[str] = None  # optional warm start for the trained net

    def validate(self, check_paths: bool = True) -> "TrainConfig":
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.negatives not in NEGATIVE_MODES:
            raise ConfigError(f"negatives must be one of {NEGATIVE_MODES}, got {self.negatives!r}")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be >= 1")
        if check_paths:
            for name in ("manifest", "teacher", "backbone", "init_checkpoint"):
                p = getattr(self, name)
                if p is not None and not Path(p).exists():
                    raise ConfigError(f"{name} path does not exist: {p}")
        return self

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self, exclude: Sequence[str] = ("checkpoint", "log_path")) -> str:
        d = {k: v for k, v in self.as_dict().items() if k not in exclude}
        return config_hash(d)


class StepLogger:
    """Writes ``step=<n> loss=<f> pos_sim=<f> neg_sim=<f>`` lines."""

    def __init__(self, path: Optional[str] = None, sink: Optional[Callable[[str], None]] = None):
        self.sink = sink
        self.fh = None
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w")

    def __call__(self, step: int, loss: float, stats: SimilarityStats):
        line = f"step={step} loss={loss:.6f} pos_sim={stats.mean_pos_sim:.6f} neg_sim={stats.mean_neg_sim:.6f}"
        log.info(line)
        if self.fh:
            self.fh.write(line + "\n")
        if self.sink:
            self.sink(line)

    def note(self, msg: str):
        log.warning(msg)

    def close(self):
        if self.fh:
            self.fh.close()


def parse_log_line(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, v = tok.split("=", 1)
        out[k] = int(v) if k == "step" else float(v)
    if set(out) != {"step", "loss", "pos_sim", "neg_sim"}:
        raise ValueError(f"not a training log line: {line!r}")
    return out


def _scenes_from(cfg: TrainConfig, scenes):
    if scenes is not None:
        return list(scenes)
    if cfg.manifest is None:
        raise ConfigError("no scenes given and no manifest configured")
    man = read_manifest(cfg.manifest)
    return man.load_all(0, cfg.train_scenes)


def eval_scenes_from(cfg: TrainConfig) -> list[SceneSample]:
    man = read_manifest(cfg.manifest)
    start = cfg.train_scenes if cfg.train_scenes is not None else 0
    return man.load_all(start, start + cfg.eval_scenes)


def _check_finite(x: T.Tensor, step: int):
    # overflowing activations surface as NaN or as all-zero rows after normalization
    norms = np.sqrt(np.sum(x.data * x.data, axis=1))
    if not np.all(np.abs(norms - 1.0) <= 1e-6):
        raise NonFiniteGradient(f"network output at step {step}", "value")


def _maybe_warm_start(net, cfg: TrainConfig):
    if cfg.init_checkpoint:
        net.load_state_dict(Checkpoint.load(cfg.init_checkpoint).tensors)


# ---------------------------------------------------------------------------
# stage 1


def _pixel_batch(net: Image2DNet, images, rng, cfg: TrainConfig):
    """Augment each image twice, run the net on all views and gather matched pixel features."""
    views, pairs = [], []
    for img in images:
        va = augment_image(img, rng, cfg.augment2d)
        vb = augment_image(img, rng, cfg.augment2d)
        pp = sample_positive_pixels(va, vb, cfg.pairs_per_image, rng)
        if len(pp):
            views += [va.image, vb.image]
            pairs.append(pp)
    if not pairs:
        return None
    feats = net(np.stack(views))
    v, h, w, d = feats.shape
    flat = T.reshape(feats, (v * h * w, d))
    ia = np.concatenate([(2 * j) * h * w + pp[:, 0, 1] * w + pp[:, 0, 0] for j, pp in enumerate(pairs)])
    ib = np.concatenate([(2 * j + 1) * h * w + pp[:, 1, 1] * w + pp[:, 1, 0] for j, pp in enumerate(pairs)])
    return T.gather_rows(flat, ia), T.gather_rows(flat, ib)


def train_stage1(
    cfg: TrainConfig,
    images: Optional[Sequence[np.ndarray]] = None,
    sink: Optional[Callable[[str], None]] = None,
) -> Checkpoint:
    """Pixel-level contrastive pre-training of the 2-D network."""
    cfg.validate()
    if images is None:
        images = [s.image for s in _scenes_from(cfg, None)]
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ConfigError("stage 1 dataset is empty")
    net = Image2DNet(cfg.seed)
    _maybe_warm_start(net, cfg)
    opt = Adam(net.params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    logger = StepLogger(cfg.log_path, sink)
    try:
        for step in range(1, cfg.steps + 1):
            pick = rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
            batch = _pixel_batch(net, [images[i] for i in pick], rng, cfg)
            if batch is None:
                logger.note(f"step={step} skipped: no overlapping crops in batch")
                continue
            a, p = batch
            _check_finite(a, step)
            loss = info_nce(ContrastiveBatch(a, p, None, cfg.tau, cfg.K, cfg.negatives), rng)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            if step % cfg.log_interval == 0 or step == 1:
                logger(step, loss.item(), similarity_stats(a.data, p.data))
    finally:
        logger.close()
    ckpt = checkpoint_from_net(net, "stage1", cfg.steps, cfg.seed, cfg.hash())
    if cfg.checkpoint:
        ckpt.save(cfg.checkpoint)
    return ckpt


def evaluate_stage1(net: Image2DNet, images, seed: int, cfg: TrainConfig = TrainConfig(), rounds: int = 4) -> SimilarityStats:
    """Similarity statistics pooled over ``rounds`` fresh (held-out) augmentations of ``images``."""
    rng = np.random.default_rng([seed, 0xE7A1])
    pos, neg = [], []
    with T.no_grad():
        for _ in range(rounds):
            batch = _pixel_batch(net, list(images), rng, cfg)
            if batch is None:
                continue
            s = similarity_stats(batch[0].data, batch[1].data)
            pos.append((s.mean_pos_sim, len(batch[0].data)))
            neg.append(s.mean_neg_sim)
    if not pos:
        raise ValueError("no overlapping crops to evaluate")
    w = np.array([n for _, n in pos], dtype=np.float64)
    return SimilarityStats(float(np.dot([p for p, _ in pos], w) / w.sum()), float(np.mean(neg)))


# ---------------------------------------------------------------------------
# stage 2


def teacher_features(teacher: Image2DNet, scenes: Sequence[SceneSample]) -> list[np.ndarray]:
    with T.no_grad():
        return [teacher(s.image).data for s in scenes]


def load_teacher(frozen2d: Checkpoint) -> Image2DNet:
    try:
        teacher = net_from_checkpoint(frozen2d, Image2DNet.kind)
    except (CheckpointError, ValueError) as e:
        raise CheckpointError(f"cannot load 2-D teacher: {e}") from None
    teacher.freeze()
    return teacher


def train_stage2(
    cfg: TrainConfig,
    frozen2d: Checkpoint,
    scenes: Optional[Sequence[SceneSample]] = None,
    sink: Optional[Callable[[str], None]] = None,
    teacher: Optional[Image2DNet] = None,
) -> Checkpoint:
    """Train the 3-D network to reproduce the frozen 2-D features at matched pixels."""
    cfg.validate()
    scenes = _scenes_from(cfg, scenes)
    if not scenes:
        raise ConfigError("stage 2 dataset is empty")
    teacher = teacher or load_teacher(frozen2d)
    frozen_before = teacher.state_dict()
    targets = teacher_features(teacher, scenes)

    net = Point3DNet(cfg.seed)
    _maybe_warm_start(net, cfg)
    opt = Adam(net.params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    logger = StepLogger(cfg.log_path, sink)
    try:
        for step in range(1, cfg.steps + 1):
            si = int(rng.integers(len(scenes)))
            scene = scenes[si]
            aug = augment_cloud(scene.cloud, rng, cfg.augment3d)
            # projection uses the un-rotated survivors, so the camera stays valid
            corr = build_correspondences(scene.cloud.points[aug.index_map], scene.camera, scene.depth, cfg.depth_tol)
            if len(corr) == 0:
                logger.note(f"step={step} skipped: scene {scene.scene_id} has no correspondences")
                continue
            sel = np.arange(len(corr))
            if len(sel) > cfg.max_pairs:
                sel = np.sort(rng.choice(len(sel), size=cfg.max_pairs, replace=False))
            pix = corr.pixels[sel]
            positives = T.Tensor(targets[si][pix[:, 1], pix[:, 0]])
            feats = net(aug.features())
            anchors = T.gather_rows(feats, corr.point_index[sel])
            _check_finite(anchors, step)
            loss = info_nce(ContrastiveBatch(anchors, positives, None, cfg.tau, cfg.K, cfg.negatives), rng)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            if step % cfg.log_interval == 0 or step == 1:
                logger(step, loss.item(), similarity_stats(anchors.data, positives.data))
    finally:
        logger.close()

    for name, before in frozen_before.items():
        if not np.array_equal(before, teacher.params[name].data):
            raise RuntimeError(f"frozen 2-D parameter {name!r} changed during stage 2")
    ckpt = checkpoint_from_net(net, "stage2", cfg.steps, cfg.seed, cfg.hash())
    if cfg.checkpoint:
        ckpt.save(cfg.checkpoint)
    return ckpt


def mimicry_cosine(net3d: Point3DNet, teacher: Image2DNet, scenes: Sequence[SceneSample], tol: float = 0.05) -> float:
    """Mean cosine between point features and the teacher's features at their matched pixels."""
    sims = []
    for scene, target in zip(scenes, teacher_features(teacher, scenes)):
        corr = build_correspondences(scene.cloud.points, scene.camera, scene.depth, tol)
        with T.no_grad():
            feats = net3d(scene.cloud_features()).data
        pix = corr.pixels
        sims.append(np.sum(feats[corr.point_index] * target[pix[:, 1], pix[:, 0]], axis=1))
    return float(np.concatenate(sims).mean())
