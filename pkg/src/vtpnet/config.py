"""Run configuration: a flat ``dotted.key = value`` text format.

Lines starting with ``#`` and blank lines are ignored. Tuples are written
comma-separated. Every key has a fixed type, so parsing never guesses::

    task = cls
    blocks.0.c_out = 32
    blocks.0.r = 0.4
    data.shapes = sphere, cube, cylinder, torus
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .attention import Aggregation, FeatureMode
from .network import (
    DESK_CLS_BLOCKS,
    DESK_SEG_BLOCKS,
    PAPER_CLS_BLOCKS,
    PAPER_SEG_BLOCKS,
    ClsNet,
    ClsNetConfig,
    SegNet,
    SegNetConfig,
)
from .training.data import PART_NAMES, SHAPES, Dataset, SyntheticDatasetSpec, generate_synthetic
from .training.optim import Optimizer, Schedule, make_optimizer
from .vtp import FPS_SEED_POLICIES, VtpConfig


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


PRESET_BLOCKS = {
    ("cls", "desk"): DESK_CLS_BLOCKS,
    ("seg", "desk"): DESK_SEG_BLOCKS,
    ("cls", "paper"): PAPER_CLS_BLOCKS,
    ("seg", "paper"): PAPER_SEG_BLOCKS,
}
PRESET_HEADS = {
    ("cls", "desk"): dict(head_dims=(256, 128)),
    ("seg", "desk"): dict(head_dims=(256, 128), mlp_dims=(256, 1024)),
    ("cls", "paper"): dict(head_dims=(512, 256)),
    ("seg", "paper"): dict(head_dims=(512, 256), mlp_dims=(512, 2048)),
}


@dataclass
class DataConfig:
    shapes: tuple[str, ...] = SHAPES
    points_per_cloud: int = 256
    num_train: int = 200
    num_eval: int = 100
    noise_sigma: float = 0.01
    rotate: bool = False
    seed: int = 1


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    schedule: str = "step"
    gamma: float = 0.5
    every: int = 10
    t_max: int = 150
    lr_min: float = 0.0
    seed: int = 0
    metrics_split: str = "eval"
    stop_at: float = 0.0  # stop once the task metric reaches this (0 disables)


@dataclass
class RunConfig:
    task: str = "cls"
    preset: str = "desk"
    blocks: tuple[VtpConfig, ...] = ()
    head_dims: tuple[int, ...] = ()
    mlp_dims: tuple[int, ...] = ()
    dropout: float = 0.5
    model_seed: int = 0
    train_fps_seed: str = "random"  # FPS start point in train mode: random, first or centroid
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "runs/default"

    def resolved(self) -> "RunConfig":
        """Copy with preset-derived fields filled in and everything validated."""
        if self.task not in ("cls", "seg"):
            raise ConfigError(f"task must be cls or seg, got {self.task!r}")
        key = (self.task, self.preset)
        if self.preset != "custom" and key not in PRESET_BLOCKS:
            raise ConfigError(f"unknown preset {self.preset!r} (desk, paper or custom)")
        heads = PRESET_HEADS.get(key, {})
        out = dataclasses.replace(
            self,
            blocks=self.blocks or PRESET_BLOCKS.get(key, ()),
            head_dims=self.head_dims or heads.get("head_dims", (256, 128)),
            mlp_dims=self.mlp_dims or (heads.get("mlp_dims", (256, 1024)) if self.task == "seg" else ()),
        )
        out.validate()
        return out

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigError("no VTP blocks configured (set preset or blocks.*)")
        if len(self.head_dims) != 2:
            raise ConfigError("head_dims needs two widths")
        if self.task == "seg" and len(self.mlp_dims) != 2:
            raise ConfigError("mlp_dims needs two widths for seg")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.train_fps_seed not in FPS_SEED_POLICIES:
            raise ConfigError(f"train_fps_seed must be one of {FPS_SEED_POLICIES}")
        d, t = self.data, self.train
        unknown = set(d.shapes) - set(SHAPES)
        if unknown or not d.shapes:
            raise ConfigError(f"data.shapes must be a non-empty subset of {SHAPES}")
        if d.points_per_cloud < max(b.M for b in self.blocks):
            raise ConfigError("data.points_per_cloud is smaller than a block's keypoint count M")
        if d.num_train < 2 or d.num_eval < 1:
            raise ConfigError("data.num_train must be >= 2 and data.num_eval >= 1")
        if t.epochs < 0 or t.batch_size < 2 or t.lr <= 0:
            raise ConfigError("train.epochs >= 0, train.batch_size >= 2 and train.lr > 0 required")
        if t.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {t.optimizer!r}")
        if t.schedule not in ("constant", "step", "cosine"):
            raise ConfigError(f"unknown schedule {t.schedule!r}")
        if t.metrics_split not in ("train", "eval"):
            raise ConfigError("train.metrics_split must be train or eval")

    # -- builders -------------------------------------------------------------
    def dataset(self, split: str) -> Dataset:
        d = self.data
        task = "classification" if self.task == "cls" else "part_segmentation"
        if split not in ("train", "eval"):
            raise ConfigError(f"unknown split {split!r}")
        # the eval split uses the next seed so the two never share clouds
        n, offset = (d.num_train, 0) if split == "train" else (d.num_eval, 1)
        return generate_synthetic(SyntheticDatasetSpec(
            task=task, shapes=d.shapes, points_per_cloud=d.points_per_cloud, num_clouds=n,
            noise_sigma=d.noise_sigma, seed=d.seed + offset, rotate=d.rotate))

    def model(self, dtype=None):
        kw = {} if dtype is None else {"dtype": dtype}
        n_shapes = len(self.data.shapes)
        if self.task == "cls":
            cfg = ClsNetConfig(tuple(self.blocks), n_shapes, head_dims=tuple(self.head_dims),
                               dropout=self.dropout, train_fps_seed=self.train_fps_seed)
            return ClsNet(cfg, seed=self.model_seed, **kw)
        n_parts = self.dataset_parts()
        cfg = SegNetConfig(tuple(self.blocks), n_parts, n_shapes, mlp_dims=tuple(self.mlp_dims),
                           head_dims=tuple(self.head_dims), dropout=self.dropout,
                           train_fps_seed=self.train_fps_seed)
        return SegNet(cfg, seed=self.model_seed, **kw)

    def dataset_parts(self) -> int:
        return sum(len(PART_NAMES[s]) for s in self.data.shapes)

    def optimizer(self, params) -> Optimizer:
        return make_optimizer(self.train.optimizer, params, self.train.lr,
                              weight_decay=self.train.weight_decay)

    def schedule(self) -> Schedule:
        t = self.train
        return Schedule(t.schedule, gamma=t.gamma, every=t.every, t_max=t.t_max, lr_min=t.lr_min)


# -- text format ----------------------------------------------------------------

_BLOCK_KEY = re.compile(r"^blocks\.(\d+)\.(\w+)$")
_BLOCK_FIELDS = {f.name: f for f in dataclasses.fields(VtpConfig)}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (FeatureMode, Aggregation)):
        return value.value
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _convert(raw: str, kind, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind in (FeatureMode, Aggregation):
            return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from exc
    raise ConfigError(f"{key}: unsupported type")


def _tuple_of(raw: str, kind, key: str) -> tuple:
    if not raw.strip():
        return ()
    return tuple(_convert(p.strip(), kind, key) for p in raw.split(","))


# field name -> (element type, is_tuple)
_TOP = {"task": (str, False), "preset": (str, False), "head_dims": (int, True),
        "mlp_dims": (int, True), "dropout": (float, False), "model_seed": (int, False),
        "train_fps_seed": (str, False), "output_dir": (str, False)}
_SECTIONS = {"data": DataConfig, "train": TrainConfig}
_SECTION_TYPES = {
    "data": {"shapes": (str, True), "points_per_cloud": (int, False), "num_train": (int, False),
             "num_eval": (int, False), "noise_sigma": (float, False), "rotate": (bool, False),
             "seed": (int, False)},
    "train": {f.name: ({"int": int, "float": float, "str": str}[f.type], False)
              for f in dataclasses.fields(TrainConfig)},
}
_BLOCK_TYPES = {"c_out": int, "R": int, "M": int, "r": float, "K": int,
                "feature_mode": FeatureMode, "agg": Aggregation, "scaled_logits": bool,
                "attn_dropout": float}


def parse_config_text(text: str) -> RunConfig:
    top: dict = {}
    sections: dict = {"data": {}, "train": {}}
    blocks: dict[int, dict] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        m = _BLOCK_KEY.match(key)
        if m:
            idx, name = int(m.group(1)), m.group(2)
            if name not in _BLOCK_TYPES:
                raise ConfigError(f"line {lineno}: unknown block field {name!r}")
            blocks.setdefault(idx, {})[name] = _convert(raw, _BLOCK_TYPES[name], key)
        elif "." in key:
            sec, name = key.split(".", 1)
            if sec not in _SECTION_TYPES or name not in _SECTION_TYPES[sec]:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kind, is_tuple = _SECTION_TYPES[sec][name]
            sections[sec][name] = _tuple_of(raw, kind, key) if is_tuple else _convert(raw, kind, key)
        elif key in _TOP:
            kind, is_tuple = _TOP[key]
            top[key] = _tuple_of(raw, kind, key) if is_tuple else _convert(raw, kind, key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if blocks and sorted(blocks) != list(range(len(blocks))):
        raise ConfigError(f"block indices must be 0..n-1, got {sorted(blocks)}")
    block_cfgs = []
    for i in range(len(blocks)):
        missing = {"c_out", "R", "M", "r", "K"} - set(blocks[i])
        if missing:
            raise ConfigError(f"blocks.{i} is missing {sorted(missing)}")
        try:
            block_cfgs.append(VtpConfig(**blocks[i]))
        except ValueError as exc:
            raise ConfigError(f"blocks.{i}: {exc}") from exc
    return RunConfig(
        blocks=tuple(block_cfgs),
        data=DataConfig(**sections["data"]),
        train=TrainConfig(**sections["train"]),
        **top,
    )


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"task = {cfg.task}", f"preset = {cfg.preset}"]
    for i, b in enumerate(cfg.blocks):
        for name in _BLOCK_FIELDS:
            lines.append(f"blocks.{i}.{name} = {_fmt(getattr(b, name))}")
    for key in ("head_dims", "mlp_dims", "dropout", "model_seed", "train_fps_seed"):
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    for sec in ("data", "train"):
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            lines.append(f"{sec}.{f.name} = {_fmt(getattr(obj, f.name))}")
    lines.append(f"output_dir = {cfg.output_dir}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def preset_path(name: str) -> Path:
    """Path of a bundled preset file such as ``toy_cls.cfg``."""
    return Path(str(resources.files("vtpnet") / "presets" / name))
