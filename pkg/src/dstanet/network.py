"""Stacked spatial/temporal attention layers with a pooled linear classifier."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensorkit as tk
from .attention import (
    SCORE_NORMS,
    SPATIAL,
    STRATEGIES,
    TEMPORAL,
    AttentionConfig,
    AttentionMap,
    AttentionModule,
    module_param_count,
)
from .tensorkit import Parameter, Tensor

DEFAULT_CHANNELS = (64, 64, 128, 128, 256, 256, 256, 256)
DEFAULT_HEADS = 3


class ConfigError(ValueError):
    """Invalid network configuration; the message names the offending field."""


@dataclass
class LayerSpec:
    c_out: int
    heads: int = DEFAULT_HEADS
    c_e: Optional[int] = None
    strategy: str = "c"
    use_sgr: bool = True
    alpha: float = 1.0
    c_in: Optional[int] = None

    @property
    def embed_width(self) -> int:
        return self.c_e if self.c_e is not None else max(1, self.c_out // 4)


@dataclass
class NetworkConfig:
    num_joints: int
    num_frames: int
    in_channels: int
    num_classes: int
    layers: list = field(default_factory=list)
    score_norm: str = "tanh"
    scale_logits: bool = True
    average_frames: bool = True
    use_pe: bool = True
    mean_values: bool = True
    leaky_slope: float = tk.DEFAULT_LEAKY_SLOPE

    def validate(self) -> "NetworkConfig":
        for name in ("num_joints", "num_frames", "in_channels", "num_classes"):
            _positive_int(getattr(self, name), name)
        if self.score_norm not in SCORE_NORMS:
            raise ConfigError(f"score_norm: must be one of {list(SCORE_NORMS)}")
        if not self.layers:
            raise ConfigError("layers: at least one layer is required")
        prev = self.in_channels
        for i, spec in enumerate(self.layers):
            where = f"layers[{i}]"
            _positive_int(spec.c_out, f"{where}.c_out")
            _positive_int(spec.heads, f"{where}.heads")
            if spec.c_e is not None:
                _positive_int(spec.c_e, f"{where}.c_e")
            if spec.strategy not in STRATEGIES:
                raise ConfigError(f"{where}.strategy: must be one of {list(STRATEGIES)}")
            if not isinstance(spec.use_sgr, bool):
                raise ConfigError(f"{where}.use_sgr: must be a boolean")
            if isinstance(spec.alpha, bool) or not isinstance(spec.alpha, (int, float)):
                raise ConfigError(f"{where}.alpha: must be a number")
            if spec.c_in is not None and spec.c_in != prev:
                raise ConfigError(
                    f"{where}.c_in: inconsistent channel chain, expected {prev}, got {spec.c_in}")
            prev = spec.c_out
        return self

    def channel_chain(self) -> list:
        chain, prev = [], self.in_channels
        for spec in self.layers:
            chain.append((prev, spec.c_out))
            prev = spec.c_out
        return chain

    def module_configs(self) -> list:
        """``(spatial, temporal)`` attention configs for every layer."""
        out = []
        shared = dict(score_norm=self.score_norm, scale_logits=self.scale_logits,
                      average_frames=self.average_frames, use_pe=self.use_pe,
                      mean_values=self.mean_values,
                      leaky_slope=self.leaky_slope)
        for spec, (c_in, c_out) in zip(self.layers, self.channel_chain()):
            common = dict(strategy=spec.strategy, heads=spec.heads, c_e=spec.embed_width,
                          alpha=float(spec.alpha), **shared)
            out.append((
                AttentionConfig(axis=SPATIAL, c_in=c_in, c_out=c_out,
                                use_sgr=spec.use_sgr, **common),
                AttentionConfig(axis=TEMPORAL, c_in=c_out, c_out=c_out,
                                use_sgr=False, **common),
            ))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [{k: v for k, v in layer.items() if v is not None}
                       for layer in d["layers"]]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected an object at top level")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown field")
        missing = [k for k in ("num_joints", "num_frames", "in_channels", "num_classes", "layers")
                   if k not in data]
        if missing:
            raise ConfigError(f"{missing[0]}: required field missing")
        if not isinstance(data["layers"], list):
            raise ConfigError("layers: expected an array")
        layer_fields = {f.name for f in fields(LayerSpec)}
        layers = []
        for i, item in enumerate(data["layers"]):
            if not isinstance(item, dict):
                raise ConfigError(f"layers[{i}]: expected an object")
            bad = sorted(set(item) - layer_fields)
            if bad:
                raise ConfigError(f"layers[{i}].{bad[0]}: unknown field")
            if "c_out" not in item:
                raise ConfigError(f"layers[{i}].c_out: required field missing")
            layers.append(LayerSpec(**item))
        kwargs = {k: v for k, v in data.items() if k != "layers"}
        for flag in ("scale_logits", "average_frames", "use_pe", "mean_values"):
            if flag in kwargs and not isinstance(kwargs[flag], bool):
                raise ConfigError(f"{flag}: must be a boolean")
        return cls(layers=layers, **kwargs).validate()


def _positive_int(value, where: str) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ConfigError(f"{where}: must be a positive integer, got {value!r}")


def default_config(num_joints: int = 22, num_frames: int = 128, in_channels: int = 3,
                   num_classes: int = 14) -> NetworkConfig:
    """Eight layers, three heads, widths 64-64-128-128-256-256-256-256."""
    layers = [LayerSpec(c_out=c, heads=DEFAULT_HEADS) for c in DEFAULT_CHANNELS]
    return NetworkConfig(num_joints, num_frames, in_channels, num_classes, layers).validate()


def parse_config(text: str, source: str = "<config>") -> tuple:
    """Parse a JSON config document into ``(NetworkConfig, extra)``.

    ``extra`` holds the optional ``train`` section untouched.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected an object at top level")
    data = dict(data)
    train = data.pop("train", {})
    try:
        return NetworkConfig.from_dict(data), train
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> tuple:
    return parse_config(Path(path).read_text(), str(path))


def param_count(config: NetworkConfig) -> int:
    """Scalar parameter count, computed from the config alone."""
    config.validate()
    total = 0
    for s_cfg, t_cfg in config.module_configs():
        total += module_param_count(s_cfg, config.num_joints)
        total += module_param_count(t_cfg, config.num_frames)
    c_last = config.layers[-1].c_out
    return total + c_last * config.num_classes + config.num_classes


class DSTANet:
    """L alternating spatial and temporal attention modules, GAP, then FC."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config.validate()
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.blocks = []
        for i, (s_cfg, t_cfg) in enumerate(config.module_configs()):
            prefix = f"layer{i}."
            self.blocks.append((
                AttentionModule(s_cfg, config.num_joints, rng, prefix),
                AttentionModule(t_cfg, config.num_joints, rng, prefix),
            ))
        c_last = config.layers[-1].c_out
        self.fc_w = Parameter(tk.uniform_init(rng, (c_last, config.num_classes), c_last),
                              "classifier.weight")
        self.fc_b = Parameter(np.zeros(config.num_classes), "classifier.bias")

    def parameters(self) -> list:
        params = []
        for spatial, temporal in self.blocks:
            params += spatial.parameters() + temporal.parameters()
        return params + [self.fc_w, self.fc_b]

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def pipeline(self) -> list:
        """Module sequence as ``(layer, axis)`` pairs."""
        return [(i, m.cfg.axis) for i, block in enumerate(self.blocks) for m in block]

    def forward(self, x) -> Tensor:
        x = tk._as_tensor(x)
        cfg = self.config
        expected = (cfg.num_joints, cfg.num_frames, cfg.in_channels)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise tk.ShapeError(f"expected input (B, {', '.join(map(str, expected))}), "
                                f"got {x.shape}")
        for spatial, temporal in self.blocks:
            x = temporal(spatial(x))
        pooled = tk.mean_pool(x, (1, 2))
        return tk.linear(pooled, self.fc_w, self.fc_b)

    __call__ = forward

    def predict_proba(self, x, batch_size: int = 64) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = []
        for start in range(0, len(x), batch_size):
            logits = self.forward(x[start:start + batch_size]).data
            z = np.exp(logits - logits.max(axis=1, keepdims=True))
            out.append(z / z.sum(axis=1, keepdims=True))
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes))

    def state_dict(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError(f"parameter mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ConfigError(f"{name}: shape {value.shape} does not match {p.shape}")
            p.data = value.copy()
            p.velocity = np.zeros_like(p.data)
            p.grad = None


def build(config: NetworkConfig, seed: int = 0) -> DSTANet:
    return DSTANet(config, seed)


def export_attention(net: DSTANet, sample) -> list:
    """Score maps of every (layer, axis, head) for one ``(N, T, C)`` sample."""
    sample = np.asarray(sample, dtype=np.float64)
    net.forward(sample[None])
    maps = []
    for i, block in enumerate(net.blocks):
        for module in block:
            for h, values in enumerate(module.maps()):
                maps.append(AttentionMap(values, i, h, module.cfg.axis))
    return maps
