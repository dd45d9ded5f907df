"""Run configuration: flat `key = value` text with [section] headers.

No external config dependency; files are trivially diffable and the writer
round-trips exactly, which the determinism guarantees lean on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path


@dataclass
class DataConfig:
    dir: str = "data"
    scenes: int = 8
    resolution: int = 64
    n_dense: int = 4096
    n_input: int = 512
    n_views: int = 12
    seed: int = 0


@dataclass
class ModelConfig:
    upsample_factor: int = 4
    token_dim: int = 64
    heads: int = 4
    patch: int = 8
    seed: int = 0


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 0.002
    m_views: int = 4
    seed: int = 0
    log_interval: int = 50
    eval_interval: int = 500
    jitter_xyz: float = 0.01
    jitter_rgb: float = 0.02
    stop_at_psnr: float = 0.0  # 0 disables early stopping


@dataclass
class AblationConfig:
    projection: bool = True
    attention: bool = True
    multiscale: bool = True
    offsets: bool = True
    views: int = 1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def copy(self) -> "RunConfig":
        return parse_config(format_config(self))


_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


def _parse_value(raw: str, target_type):
    raw = raw.strip()
    if target_type is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    return target_type(raw)


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name not in sections:
                raise ValueError(f"line {lineno}: unknown section [{name}]")
            current = sections[name]
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        if current is None:
            raise ValueError(f"line {lineno}: key outside of any [section]")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in {f.name for f in fields(current)}:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        setattr(current, key, _parse_value(raw, type(getattr(current, key))))
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        section = getattr(cfg, f.name)
        lines.append(f"[{f.name}]")
        for sf in fields(section):
            val = getattr(section, sf.name)
            if isinstance(val, bool):
                val = "on" if val else "off"
            lines.append(f"{sf.name} = {val}")
        lines.append("")
    return "\n".join(lines)


def save_config(path, cfg: RunConfig):
    Path(path).write_text(format_config(cfg))
