"""Run configuration: one JSON document with five sections.

Unknown sections or keys are errors so a typo in a sweep script never
silently falls back to a default.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None
    format: str = "csv"
    adjacency: str | None = None
    forward_fill: bool = False
    split: tuple = (0.8, 0.1, 0.1)


@dataclass
class ClusteringConfig:
    k: int = 5
    seed: int = 0
    max_iter: int = 100
    tol: float = 1e-4
    dtw_window: int | None = None


@dataclass
class ModelConfig:
    seq_len: int = 12
    horizon: int = 12
    hidden_dim: int = 64
    gcn_mode: str = "first-order"
    gcn_layers: int = 1
    cheb_k: int = 3
    d_state: int = 16
    d_inner: int = 4
    scan_axis: str = "embedding"
    dropout: float = 0.1
    temporal: str = "fbmamba"
    shared_weights: bool = False


@dataclass
class TrainingConfig:
    batch_size: int = 32
    epochs: int = 100
    lr: float = 0.001
    seed: int = 0
    precision: str = "float32"


@dataclass
class GrpoConfig:
    enabled: bool = True
    epsilon: float = 0.3
    tau: float = 0.1
    sigma: float = 1.0
    gamma: float = 0.99  # accepted for completeness; the loss has no discounting
    snapshot_cadence: int = 1


_SECTIONS = {
    "data": DataConfig,
    "clustering": ClusteringConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "grpo": GrpoConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        m, t, g, c = self.model, self.training, self.grpo, self.clustering
        positive = {
            "clustering.k": c.k, "clustering.max_iter": c.max_iter,
            "model.seq_len": m.seq_len, "model.horizon": m.horizon,
            "model.hidden_dim": m.hidden_dim, "model.gcn_layers": m.gcn_layers,
            "model.cheb_k": m.cheb_k, "model.d_state": m.d_state, "model.d_inner": m.d_inner,
            "training.batch_size": t.batch_size, "training.epochs": t.epochs,
            "grpo.snapshot_cadence": g.snapshot_cadence,
        }
        for key, v in positive.items():
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{key} must be a positive integer, got {v!r}")
        choices = {
            "data.format": (self.data.format, ("csv", "raw-f32")),
            "model.gcn_mode": (m.gcn_mode, ("first-order", "chebyshev")),
            "model.scan_axis": (m.scan_axis, ("embedding", "node")),
            "model.temporal": (m.temporal, ("fbmamba", "linear")),
            "training.precision": (t.precision, ("float32", "float64")),
        }
        for key, (v, allowed) in choices.items():
            if v not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {v!r}")
        if not 0 < g.epsilon < 1:
            raise ConfigError(f"grpo.epsilon must lie in (0, 1), got {g.epsilon!r}")
        if g.tau < 0:
            raise ConfigError("grpo.tau must be >= 0")
        if g.sigma <= 0:
            raise ConfigError("grpo.sigma must be > 0")
        if not 0 <= g.gamma <= 1:
            raise ConfigError("grpo.gamma must lie in [0, 1]")
        if t.lr <= 0:
            raise ConfigError("training.lr must be > 0")
        if not 0 <= m.dropout < 1:
            raise ConfigError("model.dropout must lie in [0, 1)")
        if c.tol < 0:
            raise ConfigError("clustering.tol must be >= 0")
        if c.dtw_window is not None and c.dtw_window < 0:
            raise ConfigError("clustering.dtw_window must be >= 0")
        split = tuple(self.data.split)
        if len(split) != 3 or abs(sum(split) - 1) > 1e-9 or min(split) < 0:
            raise ConfigError("data.split must be three non-negative ratios summing to 1")
        self.data.split = split

    # -- serialization --------------------------------------------------------
    def to_dict(self):
        d = asdict(self)
        d["data"]["split"] = list(self.data.split)
        return d

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        sections = {}
        for name, klass in _SECTIONS.items():
            body = raw.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in fields(klass)}
            bad = set(body) - known
            if bad:
                raise ConfigError(
                    "unknown config key(s): " + ", ".join(f"{name}.{k}" for k in sorted(bad)))
            sections[name] = klass(**body)
        return cls(**sections)

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        cfg = cls.from_dict(raw)
        base = Path(path).resolve().parent
        for key in ("path", "adjacency"):
            v = getattr(cfg.data, key)
            if v is not None and not Path(v).is_absolute():
                setattr(cfg.data, key, str(base / v))
        return cfg

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    def replace(self, **dotted):
        """Copy with ``section__key=value`` overrides applied."""
        d = self.to_dict()
        for k, v in dotted.items():
            section, key = k.split("__", 1)
            if section not in d or key not in d[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            d[section][key] = v
        return RunConfig.from_dict(d)

    def model_hash(self):
        """Hash of everything except the data section."""
        d = self.to_dict()
        d.pop("data")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def copy(self):
        return copy.deepcopy(self)
