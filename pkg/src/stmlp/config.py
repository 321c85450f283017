"""Flat ``section.key = value`` run configuration with ``--set`` overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ConfigError, ModelConfig, _coerce, _fmt, parse_kv
from .training import TrainConfig


@dataclass
class DatasetConfig:
    data_path: str = ""
    graph_path: str = ""
    graph_format: str = "edges"  # edges | matrix | none
    graph_kappa: float = 0.1
    start_timestamp: str = "2016-07-01T00:00:00"
    interval_minutes: int = 5
    n_nodes: int = 0  # 0 = infer from the data file
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)


# model keys that the dataset block determines
_DERIVED_MODEL_KEYS = {"n_nodes", "K"}


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/default"
    seed: int = 0
    threads: int = 0  # 0 = deterministic single-threaded

    def model_config(self, n_nodes: int) -> ModelConfig:
        k = 1440 // self.dataset.interval_minutes
        return ModelConfig.from_mapping({**self.model, "n_nodes": n_nodes, "K": k})

    def to_text(self) -> str:
        lines = ["# resolved run configuration"]
        for f in fields(DatasetConfig):
            lines.append(f"dataset.{f.name}={_fmt(getattr(self.dataset, f.name))}")
        defaults = asdict(ModelConfig(n_nodes=1))
        for k, v in defaults.items():
            if k in _DERIVED_MODEL_KEYS:
                continue
            lines.append(f"model.{k}={_fmt(_coerce(self.model.get(k, v), type(v).__name__))}")
        for f in fields(TrainConfig):
            v = getattr(self.train, f.name)
            lines.append(f"train.{f.name}={','.join(map(str, v)) if isinstance(v, list) else _fmt(v)}")
        lines += [f"out_dir={self.out_dir}", f"seed={self.seed}", f"threads={self.threads}"]
        return "\n".join(lines) + "\n"


def _parse_list(v: str) -> list[int]:
    v = v.strip().strip("[]")
    return [int(x) for x in v.replace(" ", "").split(",") if x]


def _typed(cls, name: str, value: str):
    f = {f.name: f for f in fields(cls)}[name]
    typ = f.type if isinstance(f.type, str) else f.type.__name__
    if typ.startswith("list"):
        return _parse_list(value)
    return _coerce(value, typ)


def build_run_config(values: dict[str, str]) -> RunConfig:
    """Build a RunConfig from flat dotted keys, rejecting anything unknown."""
    ds_keys = {f.name for f in fields(DatasetConfig)}
    tr_keys = {f.name for f in fields(TrainConfig)}
    md_keys = {f.name for f in fields(ModelConfig)} - _DERIVED_MODEL_KEYS
    ds, tr, md, top = {}, {}, {}, {}
    for key, value in values.items():
        section, _, name = key.partition(".")
        try:
            if section == "dataset" and name in ds_keys:
                ds[name] = _typed(DatasetConfig, name, value)
            elif section == "train" and name in tr_keys:
                tr[name] = _typed(TrainConfig, name, value)
            elif section == "model" and name in md_keys:
                md[name] = value
            elif not name and section in ("out_dir", "seed", "threads"):
                top[section] = value if section == "out_dir" else int(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from None
    try:
        train = TrainConfig(**tr)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(DatasetConfig(**ds), md, train, **top)
    # one root seed: top-level wins over train.seed
    cfg.seed = cfg.train.seed = top.get("seed", tr.get("seed", 0))
    # validate model keys early against a placeholder node count
    try:
        cfg.model_config(max(cfg.dataset.n_nodes, 1))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_run_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    values = parse_kv(Path(path).read_text()) if path else {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    return build_run_config(values)


def require_dataset(cfg: RunConfig, *, graph: bool) -> None:
    if not cfg.dataset.data_path:
        raise ConfigError("missing required key 'dataset.data_path'")
    needs_graph = graph and _coerce(str(cfg.model.get("use_sp", "true")), "bool")
    if needs_graph and cfg.dataset.graph_format != "none" and not cfg.dataset.graph_path:
        raise ConfigError("missing required key 'dataset.graph_path'")
