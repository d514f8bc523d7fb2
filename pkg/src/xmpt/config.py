"""Run configuration: ``section.key = value`` text files plus ``--set`` overrides."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Optional

from .augment import Augment2DConfig, Augment3DConfig
from .pipeline.train import ConfigError, TrainConfig

_NONE = ("", "none", "null")


def _opt_str(v: str) -> Optional[str]:
    return None if v.strip().lower() in _NONE else v.strip()


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# key -> (parser, default); seeds default to None and fall back to XMPT_SEED, then 0
SCHEMA: dict[str, tuple[Any, Any]] = {
    "data.manifest": (_opt_str, None),
    "data.train_scenes": (int, 16),
    "data.eval_scenes": (int, 8),
    "stage1.images": (int, 8),
    "stage1.steps": (int, 500),
    "stage1.batch_size": (int, 4),
    "stage1.lr": (float, 1e-3),
    "stage1.seed": (int, None),
    "stage1.log_interval": (int, 10),
    "stage1.pairs_per_image": (int, 512),
    "stage1.checkpoint": (str, "stage1.xmpt"),
    "stage1.log": (_opt_str, None),
    "stage1.init": (_opt_str, None),
    "stage2.steps": (int, 800),
    "stage2.lr": (float, 1e-3),
    "stage2.seed": (int, None),
    "stage2.log_interval": (int, 10),
    "stage2.max_pairs": (int, 1024),
    "stage2.depth_tol": (float, 0.05),
    "stage2.checkpoint": (str, "stage2.xmpt"),
    "stage2.log": (_opt_str, None),
    "probe.steps": (int, 300),
    "probe.lr": (float, 1e-2),
    "probe.seed": (int, None),
    "probe.num_classes": (int, 4),
    "loss.tau": (float, 0.4),
    "loss.k": (int, 1024),
    "loss.negatives": (str, "key"),
    "augment2d.area_min": (float, 0.4),
    "augment2d.area_max": (float, 1.0),
    "augment2d.aspect_min": (float, 3 / 4),
    "augment2d.aspect_max": (float, 4 / 3),
    "augment2d.flip_p": (float, 0.5),
    "augment2d.jitter_min": (float, 0.6),
    "augment2d.jitter_max": (float, 1.4),
    "augment2d.jitter_p": (float, 0.8),
    "augment2d.gray_p": (float, 0.2),
    "augment3d.keep_min": (float, 0.6),
    "augment3d.keep_max": (float, 1.0),
    "augment3d.rotation": (str, "z"),
    "augment3d.jitter_min": (float, 0.6),
    "augment3d.jitter_max": (float, 1.4),
    "augment3d.jitter_p": (float, 0.8),
}


class RunConfig:
    def __init__(self, values: Optional[dict] = None):
        self.values = {k: d for k, (_, d) in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, raw, where: str = "") -> None:
        if key not in SCHEMA:
            raise ConfigError(f"{where}unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            self.values[key] = parser(raw) if isinstance(raw, str) else raw
        except ValueError as e:
            raise ConfigError(f"{where}bad value for {key}: {e}") from None

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            for lineno, line in enumerate(p.read_text().splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{p}:{lineno}: expected section.key = value")
                k, v = line.split("=", 1)
                cfg.set(k.strip(), v.strip(), f"{p}:{lineno}: ")
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v.strip(), "--set: ")
        return cfg

    def seed(self, section: str) -> int:
        s = self.values[f"{section}.seed"]
        if s is not None:
            return s
        env = os.environ.get("XMPT_SEED")
        if env is not None:
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"XMPT_SEED must be an integer, got {env!r}") from None
        return 0

    def resolved(self) -> list[str]:
        out = []
        for k in sorted(self.values):
            v = self.values[k]
            if k.endswith(".seed"):
                v = self.seed(k.split(".")[0])
            out.append(f"{k}={v}")
        return out

    def augment2d(self) -> Augment2DConfig:
        v = self.values
        return Augment2DConfig(
            area=(v["augment2d.area_min"], v["augment2d.area_max"]),
            aspect=(v["augment2d.aspect_min"], v["augment2d.aspect_max"]),
            flip_p=v["augment2d.flip_p"],
            jitter=(v["augment2d.jitter_min"], v["augment2d.jitter_max"]),
            jitter_p=v["augment2d.jitter_p"],
            gray_p=v["augment2d.gray_p"],
        )

    def augment3d(self) -> Augment3DConfig:
        v = self.values
        return Augment3DConfig(
            keep_rate=(v["augment3d.keep_min"], v["augment3d.keep_max"]),
            rotation=v["augment3d.rotation"],
            jitter=(v["augment3d.jitter_min"], v["augment3d.jitter_max"]),
            jitter_p=v["augment3d.jitter_p"],
        )

    def train_config(self, stage: str, **extra) -> TrainConfig:
        v = self.values
        common = dict(
            stage=stage,
            tau=v["loss.tau"],
            K=v["loss.k"],
            negatives=v["loss.negatives"],
            augment2d=self.augment2d(),
            augment3d=self.augment3d(),
            manifest=v["data.manifest"],
        )
        if stage == "stage1":
            ckpt = v["stage1.checkpoint"]
            tc = TrainConfig(
                steps=v["stage1.steps"],
                batch_size=v["stage1.batch_size"],
                lr=v["stage1.lr"],
                seed=self.seed("stage1"),
                log_interval=v["stage1.log_interval"],
                pairs_per_image=v["stage1.pairs_per_image"],
                train_scenes=v["stage1.images"],
                checkpoint=ckpt,
                log_path=v["stage1.log"] or ckpt + ".log",
                init_checkpoint=v["stage1.init"],
                **common,
            )
        elif stage == "stage2":
            ckpt = v["stage2.checkpoint"]
            tc = TrainConfig(
                steps=v["stage2.steps"],
                lr=v["stage2.lr"],
                seed=self.seed("stage2"),
                log_interval=v["stage2.log_interval"],
                max_pairs=v["stage2.max_pairs"],
                depth_tol=v["stage2.depth_tol"],
                train_scenes=v["data.train_scenes"],
                checkpoint=ckpt,
                log_path=v["stage2.log"] or ckpt + ".log",
                **common,
            )
        elif stage == "probe":
            tc = TrainConfig(
                steps=v["probe.steps"],
                lr=v["probe.lr"],
                seed=self.seed("probe"),
                num_classes=v["probe.num_classes"],
                train_scenes=v["data.train_scenes"],
                eval_scenes=v["data.eval_scenes"],
                **common,
            )
        else:
            raise ConfigError(f"unknown stage {stage!r}")
        for k, val in extra.items():
            setattr(tc, k, val)
        return tc.validate()
