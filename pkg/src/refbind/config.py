"""Declarative TOML run configuration.

One file drives every subcommand; sections map onto module configs. Unknown
keys are rejected, defaults are filled in, invariants are checked at load
time, and the fully resolved config is echoed next to the run outputs so a
run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .synthdata import ALL_MOTIONS, CONFIG_KINDS, LINEAR_MOTIONS, PREFIX_POOL


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    kinds: list = field(default_factory=lambda: list(CONFIG_KINDS))
    train_count: int = 400
    eval_count: int = 200
    canvas: list = field(default_factory=lambda: [4, 16, 24])
    hard_case_prob: float = 0.7
    eval_hard_case_prob: float = 1.0
    eval_motions: str = "linear"        # "linear" | "all"
    prefixes: list = field(default_factory=lambda: list(PREFIX_POOL))

    def validate(self):
        for kind in self.kinds:
            if kind not in CONFIG_KINDS:
                raise ConfigError(f"unknown config kind {kind!r}; expected {CONFIG_KINDS}")
        if len(self.canvas) != 3:
            raise ConfigError("canvas must be [frames, height, width]")
        if not 0.0 <= self.hard_case_prob <= 1.0:
            raise ConfigError("hard_case_prob must lie in [0, 1]")
        if self.eval_motions not in ("linear", "all"):
            raise ConfigError("eval_motions must be 'linear' or 'all'")

    def eval_motion_pool(self):
        return LINEAR_MOTIONS if self.eval_motions == "linear" else ALL_MOTIONS


@dataclass
class CurationSection:
    kind: str = "double"
    p_miss: float = 0.0
    jitter: int = 0
    matcher_noise: float = 0.0

    def validate(self):
        if self.kind not in CONFIG_KINDS:
            raise ConfigError(f"unknown curation kind {self.kind!r}")
        if not 0.0 <= self.p_miss <= 1.0:
            raise ConfigError("p_miss must lie in [0, 1]")


@dataclass
class ModelSection:
    layers: int = 4
    heads: int = 4
    channels: int = 64
    mlp_ratio: int = 4
    text_len: int = 24
    vision_grid: int = 2
    patch: list = field(default_factory=lambda: [1, 2, 2])
    r_max: int = 4
    dtype: str = "float32"

    def validate(self):
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if len(self.patch) != 3:
            raise ConfigError("patch must be [t, h, w]")


@dataclass
class TrainSection:
    lr_pretrain: float = 1e-4
    lr_finetune: float = 2e-5
    batch_size: int = 8
    steps_pretrain: int = 3000
    steps_finetune: int = 300
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    kinds: list = field(default_factory=lambda: ["double"])
    use_ap: bool = True
    use_ce: bool = True
    ce_mode: str = "block"
    log_every: int = 50
    checkpoint_every: int = 0

    def validate(self):
        if self.lr_finetune >= self.lr_pretrain:
            raise ConfigError(
                f"lr_finetune {self.lr_finetune} must be below lr_pretrain {self.lr_pretrain}")
        for kind in self.kinds:
            if kind not in CONFIG_KINDS:
                raise ConfigError(f"unknown train kind {kind!r}")
        if self.ce_mode not in ("block", "per_token"):
            raise ConfigError("ce_mode must be 'block' or 'per_token'")


@dataclass
class EvalSection:
    kind: str = "double"
    sample_steps: int = 8
    count: int = 200
    swap: bool = False
    contact_sheets: int = 0

    def validate(self):
        if self.kind not in CONFIG_KINDS:
            raise ConfigError(f"unknown eval kind {self.kind!r}")
        if self.sample_steps < 1:
            raise ConfigError("sample_steps must be >= 1")


_SECTIONS = {"data": DataSection, "curation": CurationSection,
             "model": ModelSection, "train": TrainSection, "eval": EvalSection}
_TOP_KEYS = {"seed", "threads"}


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    data: DataSection = field(default_factory=DataSection)
    curation: CurationSection = field(default_factory=CurationSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        for name in _SECTIONS:
            getattr(self, name).validate()
        if self.model.text_len < 20:
            raise ConfigError("text_len below 20 cannot hold double-body prompts")

    def model_config(self):
        from .model import ModelConfig
        frames, height, width = self.data.canvas
        return ModelConfig(layers=self.model.layers, heads=self.model.heads,
                           channels=self.model.channels,
                           mlp_ratio=self.model.mlp_ratio,
                           frames=frames, height=height, width=width,
                           patch_t=self.model.patch[0],
                           patch_h=self.model.patch[1],
                           patch_w=self.model.patch[2],
                           text_len=self.model.text_len,
                           vision_grid=self.model.vision_grid,
                           ref_size=height // 2, r_max=self.model.r_max,
                           dtype=self.model.dtype)

    def train_config(self, **overrides):
        from .train import TrainConfig
        base = dict(lr_pretrain=self.train.lr_pretrain,
                    lr_finetune=self.train.lr_finetune,
                    batch_size=self.train.batch_size,
                    steps_pretrain=self.train.steps_pretrain,
                    steps_finetune=self.train.steps_finetune,
                    weight_decay=self.train.weight_decay,
                    grad_clip=self.train.grad_clip,
                    seed=self.seed, kinds=tuple(self.train.kinds),
                    use_ap=self.train.use_ap, use_ce=self.train.use_ce,
                    ce_mode=self.train.ce_mode, log_every=self.train.log_every,
                    checkpoint_every=self.train.checkpoint_every)
        base.update(overrides)
        return TrainConfig(**base)

    def to_dict(self) -> dict:
        doc = {"seed": self.seed, "threads": self.threads}
        for name in _SECTIONS:
            doc[name] = asdict(getattr(self, name))
        return doc


def _build_section(cls, table: dict, where: str):
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(table) - fields
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{where}]")
    return cls(**table)


def parse_config(doc: dict) -> RunConfig:
    unknown = set(doc) - _TOP_KEYS - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    cfg = RunConfig(seed=int(doc.get("seed", 0)), threads=int(doc.get("threads", 1)))
    for name, cls in _SECTIONS.items():
        if name in doc:
            if not isinstance(doc[name], dict):
                raise ConfigError(f"[{name}] must be a table")
            setattr(cfg, name, _build_section(cls, doc[name], name))
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    return parse_config(doc)


# -- resolved-config echo ------------------------------------------------------


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        escaped = v.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {type(v).__name__} to TOML")


def dump_toml(doc: dict) -> str:
    lines = []
    tables = []
    for key, value in doc.items():
        if isinstance(value, dict):
            tables.append((key, value))
        else:
            lines.append(f"{key} = {_toml_value(value)}")
    for name, table in tables:
        lines.append("")
        lines.append(f"[{name}]")
        for key, value in table.items():
            lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.toml"
    path.write_text(dump_toml(cfg.to_dict()))
    return path
