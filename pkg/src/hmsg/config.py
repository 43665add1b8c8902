"""Flat ``key = value`` run configuration (see docs/config.md)."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .exceptions import ConfigError, MissingFile
from .model import ModelConfig
from .train import TrainConfig

TASKS = ("node-class", "link-pred")
ABLATIONS = ("full", "ho-only", "mean", "pool", "attention")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    dataset: str = ""
    metapaths: tuple[str, ...] = ()
    target_type: str = ""
    task: str = "node-class"
    link_relation: str = ""
    ablation: str = "full"
    # model
    hidden_dim: int = 64
    n_heads: int = 8
    subgraph_attn_dim: int = 128
    dropout: float = 0.6
    leaky_slope: float = 0.2
    activation: str = "elu"
    dtype: str = "float64"
    # optimiser and loop
    lr: float = 0.005
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 1000
    patience: int = 30
    loss_reduction: str = "mean"
    record_time: bool = False
    # splits and evaluation
    # empty means the task default: 0.1,0.1,0.8 for node-class, 0.5,0.1,0.4 for link-pred
    split: tuple[float, ...] = ()
    use_dataset_splits: bool = True
    seed: int = 0
    probe_ratio: float = 0.8
    eval_repeats: int = 10
    cluster_restarts: int = 10
    n_clusters: int = 0
    # directory the config was read from; relative dataset paths resolve against it
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def validate(self) -> "RunConfig":
        if not self.dataset:
            raise ConfigError("config needs 'dataset'")
        if not self.metapaths:
            raise ConfigError("config needs at least one entry in 'metapaths'")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.task == "link-pred" and not self.link_relation:
            raise ConfigError("task link-pred needs 'link_relation'")
        r = self.split
        if r and (len(r) != 3 or any(v < 0 for v in r) or abs(sum(r) - 1.0) > 1e-9):
            raise ConfigError(f"split must be three non-negative ratios summing to 1, got {r}")
        if self.max_epochs < 1 or self.patience < 0:
            raise ConfigError("max_epochs must be >= 1 and patience >= 0")
        if not 0.0 < self.probe_ratio < 1.0:
            raise ConfigError("probe_ratio must lie in (0, 1)")
        if self.eval_repeats < 1 or self.cluster_restarts < 1:
            raise ConfigError("eval_repeats and cluster_restarts must be >= 1")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.model_config()
        self.train_config()
        return self

    @property
    def dataset_path(self) -> Path:
        p = Path(self.dataset)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def split_ratios(self) -> tuple[float, float, float]:
        if self.split:
            return tuple(self.split)
        return (0.1, 0.1, 0.8) if self.task == "node-class" else (0.5, 0.1, 0.4)

    @property
    def aggregator(self) -> str:
        return "attention" if self.ablation in ("full", "ho-only") else self.ablation

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            hidden_dim=self.hidden_dim, n_heads=self.n_heads, subgraph_attn_dim=self.subgraph_attn_dim,
            aggregator=self.aggregator, dropout=self.dropout, leaky_slope=self.leaky_slope,
            activation=self.activation, seed=self.seed, dtype=self.dtype,
        )

    def train_config(self) -> TrainConfig:
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError("loss_reduction must be mean or sum")
        return TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            max_epochs=self.max_epochs, patience=self.patience, seed=self.seed,
            loss_reduction=self.loss_reduction, record_time=self.record_time,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "base_dir"}


def _convert(key: str, text: str):
    kind = _FIELDS[key].type
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            return _bool(text)
        if kind == "tuple[float, ...]":
            return _floats(text)
        if kind == "tuple[str, ...]":
            return _names(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind}") from None


def apply_setting(cfg: RunConfig, line: str, where: str = "override") -> None:
    if "=" not in line:
        raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
    key, value = (s.strip() for s in line.split("=", 1))
    if key not in _FIELDS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    setattr(cfg, key, _convert(key, value))


def parse_config(text: str, base_dir: Path | str = ".", overrides=(), source: str = "<config>") -> RunConfig:
    """Parse config text, then apply ``overrides`` (``key=value`` strings) in order."""
    cfg = RunConfig(base_dir=Path(base_dir))
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            apply_setting(cfg, line, f"{source}:{no}")
    for o in overrides:
        apply_setting(cfg, o)
    return cfg


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"config file {path} not found")
    return parse_config(path.read_text(), path.parent, overrides, str(path))
