"""Run configuration: nested dataclasses read from flat ``section.key=value`` text."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import ConfigError


@dataclass
class WindowConfig:
    length: int = 16
    stride: int = 8


@dataclass
class EncoderConfig:
    blocks: int = 2
    channels: int = 32
    kernel: int = 3
    F: int = 32
    pool: str = "mean"


@dataclass
class MocoConfig:
    m: float = 0.999
    tau: float = 0.07
    queue_size: int = 4096
    steps: int = 1500
    lr: float = 0.03
    batch: int = 16


@dataclass
class EpisodicConfig:
    K: int = 3
    N: int = 5
    Qn: int = 3
    episodes: int = 2000
    eval_episodes: int = 500
    lr: float = 0.01
    # lambda decays linearly to lambda_decay over the run; equal values keep it fixed
    lam: float = 1.0
    lambda_decay: float = 0.1
    clip_norm: float = 5.0


@dataclass
class PoolingConfig:
    normalize_weights: bool = True
    H: int = 64
    f1_scale: float = 10.0


@dataclass
class AblationConfig:
    use_pretrain: bool = True
    use_attention_pool: bool = True
    use_multihead: bool = True


@dataclass
class DataConfig:
    num_classes: int = 40
    num_test: int = 12
    motifs_per_class: int = 4
    videos_per_class: int = 24
    D: int = 32
    length_min: int = 48
    length_max: int = 128
    noise_sigma: float = 0.05
    filler: str = "heterogeneous"
    motif_centering: float = 0.9


@dataclass
class PathConfig:
    dataset: str = ""
    splits: str = ""
    checkpoint: str = ""
    metrics: str = ""


@dataclass
class RunConfig:
    window: WindowConfig = field(default_factory=WindowConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    moco: MocoConfig = field(default_factory=MocoConfig)
    episodic: EpisodicConfig = field(default_factory=EpisodicConfig)
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    seed: int = 0

    def validate(self) -> "RunConfig":
        w, e, m, ep, p, d = self.window, self.encoder, self.moco, self.episodic, self.pooling, self.data
        checks = [
            (1 <= w.stride <= w.length, "window.stride must be in [1, window.length]"),
            (e.blocks >= 1 and e.channels >= 1 and e.F >= 1, "encoder sizes must be positive"),
            (e.kernel >= 1 and e.kernel % 2 == 1, "encoder.kernel must be odd"),
            (e.pool in ("mean", "max"), "encoder.pool must be mean or max"),
            (0.0 <= m.m <= 1.0, "moco.m must be in [0, 1]"),
            (m.tau > 0, "moco.tau must be > 0"),
            (m.queue_size >= 0 and m.steps >= 0 and m.batch >= 1 and m.lr > 0, "moco sizes/lr out of range"),
            (ep.K >= 2 and ep.N >= 1 and ep.Qn >= 1, "episodic K >= 2, N >= 1, Qn >= 1 required"),
            (ep.episodes >= 0 and ep.eval_episodes >= 1 and ep.lr > 0, "episodic counts/lr out of range"),
            (ep.lam >= 0 and ep.lambda_decay >= 0, "episodic.lam and lambda_decay must be >= 0"),
            (ep.clip_norm > 0, "episodic.clip_norm must be > 0"),
            (p.H >= 1, "pooling.H must be >= 1"),
            (0 < d.num_test < d.num_classes, "data.num_test must be in (0, num_classes)"),
            (8 <= d.length_min <= d.length_max <= 512, "data lengths must satisfy 8 <= min <= max <= 512"),
            (d.filler in ("heterogeneous", "homogeneous", "none"), "data.filler unknown"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def set(self, dotted: str, raw: str) -> None:
        """Assign ``raw`` (text) to the field named by ``dotted``, converting by the field's type."""
        parts = dotted.strip().split(".")
        if parts == ["episodic", "lambda"]:
            parts = ["episodic", "lam"]
        target = self
        for name in parts[:-1]:
            if not dataclasses.is_dataclass(target) or name not in _field_names(target):
                raise ConfigError(f"unknown config key {dotted!r}")
            target = getattr(target, name)
        leaf = parts[-1]
        if not dataclasses.is_dataclass(target) or leaf not in _field_names(target) \
                or dataclasses.is_dataclass(getattr(target, leaf)):
            raise ConfigError(f"unknown config key {dotted!r}")
        setattr(target, leaf, _convert(dotted, raw.strip(), type(getattr(target, leaf))))

    def items(self) -> list[tuple[str, object]]:
        out = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for g in dataclasses.fields(value):
                    key = "lambda" if (f.name, g.name) == ("episodic", "lam") else g.name
                    out.append((f"{f.name}.{key}", getattr(value, g.name)))
            else:
                out.append((f.name, value))
        return out

    def dumps(self) -> str:
        def fmt(v):
            return str(v).lower() if isinstance(v, bool) else str(v)
        return "".join(f"{k}={fmt(v)}\n" for k, v in self.items())


def _field_names(obj) -> set[str]:
    return {f.name for f in dataclasses.fields(obj)}


def _convert(key: str, raw: str, kind: type):
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} (expected {kind.__name__})") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig() if base is None else base
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        cfg.set(key, value)
    return cfg.validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
