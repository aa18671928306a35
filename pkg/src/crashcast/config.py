"""Key = value run configuration with typed validation and defaults.

The file format is UTF-8 text, one `key = value` per line, `#` comments.
Every key has a default; unknown keys and type mismatches are rejected with
their location. Command-line overrides win over file values.
"""

import hashlib
import math
from dataclasses import dataclass, field, fields

from .dropout import DropoutSpec
from .network import NetworkConfig
from .sim import CAMERA_ORDER, CameraSpec, WorldConfig, default_cameras
from .stats import UncertaintyThresholds
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad configuration input; message carries key and location."""


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_int(text):
    return int(text.strip())


def _parse_float(text):
    return float(text.strip())


def _parse_str(text):
    return text.strip()


def _list_parser(item):
    def parse(text):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(item(p) for p in parts)

    return parse


@dataclass
class SimSettings:
    dt: float = 0.05
    max_duration: float = 12.0
    top_speed: float = 10.0
    max_accel: float = 5.0
    start_distance: float = 40.0
    lane_offset: float = 2.0
    vehicle_length: float = 4.5
    vehicle_width: float = 2.0
    vehicle_height: float = 1.5
    image_size: int = 32
    fov_deg: float = 90.0
    episodes_per_scenario: int = 10
    scenarios: tuple = (1, 2, 3, 4)
    delay_window: float = 0.25
    cameras: tuple = CAMERA_ORDER


@dataclass
class DataSettings:
    seq_len: int = 5
    window_stride: int = 1
    horizon: float = 5.0
    split: tuple = (0.8, 0.1, 0.1)


@dataclass
class NetSettings:
    input_mode: str = "images_state_action"
    cameras: tuple = CAMERA_ORDER
    conv_filters: tuple = (8, 8)
    conv_kernels: tuple = (3, 3)
    conv_strides: tuple = (1, 2)
    lstm_units: int = 16
    merge_units: int = 32


@dataclass
class DropoutSettings:
    rate: float = 0.01
    targets: tuple = ("inputs", "outputs", "recurrent")


@dataclass
class TrainSettings:
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_iterations: int = 3000
    patience: int = 5
    validation_interval: int = 50
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout_in_training: bool = True


@dataclass
class EvalSettings:
    threshold: float = 0.5
    sfp_passes: int = 1000
    bins: int = 20
    sigma_lo: float = 0.10
    peak_mass_frac: float = 0.10
    valley_ratio: float = 0.5
    fold_k: int = 10
    fold_unit: str = "episodes"
    val_fraction: float = 0.1


@dataclass
class RunConfig:
    sim: SimSettings = field(default_factory=SimSettings)
    data: DataSettings = field(default_factory=DataSettings)
    net: NetSettings = field(default_factory=NetSettings)
    dropout: DropoutSettings = field(default_factory=DropoutSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def items(self):
        """Canonical (key, value-as-text) pairs covering every field."""
        out = []
        for section_name in ("sim", "data", "net", "dropout", "train", "eval"):
            section = getattr(self, section_name)
            for f in fields(section):
                value = getattr(section, f.name)
                out.append((f"{section_name}.{f.name}", _canonical(value)))
        return out

    def config_hash(self):
        text = "\n".join(f"{k} = {v}" for k, v in self.items())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _canonical(value):
    if isinstance(value, tuple):
        return ",".join(_canonical(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_PARSERS = {
    int: _parse_int,
    float: _parse_float,
    str: _parse_str,
    bool: _parse_bool,
}


def _registry():
    """key -> (section name, field name, parser) for every known key."""
    reg = {}
    defaults = RunConfig()
    tuple_items = {
        "sim.scenarios": _parse_int,
        "sim.cameras": _parse_str,
        "data.split": _parse_float,
        "net.cameras": _parse_str,
        "net.conv_filters": _parse_int,
        "net.conv_kernels": _parse_int,
        "net.conv_strides": _parse_int,
        "dropout.targets": _parse_str,
    }
    for section_name in ("sim", "data", "net", "dropout", "train", "eval"):
        section = getattr(defaults, section_name)
        for f in fields(section):
            key = f"{section_name}.{f.name}"
            if isinstance(getattr(section, f.name), tuple):
                parser = _list_parser(tuple_items[key])
            else:
                parser = _PARSERS[type(getattr(section, f.name))]
            reg[key] = (section_name, f.name, parser)
    return reg


REGISTRY = _registry()


def _apply(cfg, key, raw, where):
    if key not in REGISTRY:
        raise ConfigError(f"unknown configuration key {key!r} at {where}")
    section_name, field_name, parser = REGISTRY[key]
    try:
        value = parser(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r} at {where}: {exc}") from None
    setattr(getattr(cfg, section_name), field_name, value)


def parse_config(text, overrides=(), source="<config>"):
    """Defaults, then file values, then overrides; returns a RunConfig."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value' at {source}:{lineno}, got {line.strip()!r}")
        key, raw = body.split("=", 1)
        _apply(cfg, key.strip(), raw, f"{source}:{lineno}")
    for i, item in enumerate(overrides, start=1):
        if "=" not in item:
            raise ConfigError(f"override #{i} must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _apply(cfg, key.strip(), raw, f"override #{i}")
    _validate(cfg)
    return cfg


def load_config(path=None, overrides=()):
    if path is None:
        return parse_config("", overrides, source="<defaults>")
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config(text, overrides, source=str(path))


def _validate(cfg):
    if cfg.sim.dt <= 0:
        raise ConfigError("sim.dt must be positive")
    if cfg.sim.image_size < 1:
        raise ConfigError("sim.image_size must be positive")
    for s in cfg.sim.scenarios:
        if s not in (1, 2, 3, 4):
            raise ConfigError(f"sim.scenarios entries must be 1..4, got {s}")
    for cam in tuple(cfg.sim.cameras) + tuple(cfg.net.cameras):
        if cam not in CAMERA_ORDER:
            raise ConfigError(f"unknown camera {cam!r}; choose from {CAMERA_ORDER}")
    if not (0.0 <= cfg.dropout.rate < 1.0):
        raise ConfigError("dropout.rate must lie in [0, 1)")
    if cfg.eval.fold_unit not in ("episodes", "samples"):
        raise ConfigError("eval.fold_unit must be 'episodes' or 'samples'")
    if len(cfg.data.split) != 3 or abs(sum(cfg.data.split) - 1.0) > 1e-9:
        raise ConfigError("data.split must be three fractions summing to 1")
    if not set(cfg.net.cameras) <= set(cfg.sim.cameras):
        raise ConfigError("net.cameras must be a subset of sim.cameras")


# --- conversion into engine objects ------------------------------------------

def world_config(cfg):
    return WorldConfig(
        start_distance=cfg.sim.start_distance,
        lane_offset=cfg.sim.lane_offset,
        vehicle_length=cfg.sim.vehicle_length,
        vehicle_width=cfg.sim.vehicle_width,
        vehicle_height=cfg.sim.vehicle_height,
        top_speed=cfg.sim.top_speed,
        max_accel=cfg.sim.max_accel,
    )


def camera_specs(cfg):
    fov = math.radians(cfg.sim.fov_deg)
    base = {c.name: c for c in default_cameras(rows=cfg.sim.image_size, cols=cfg.sim.image_size)}
    return tuple(
        CameraSpec(name, base[name].mount, base[name].yaw_offset, fov=fov,
                   rows=cfg.sim.image_size, cols=cfg.sim.image_size)
        for name in cfg.sim.cameras
    )


def network_config(cfg, input_mode=None, cameras=None):
    return NetworkConfig(
        input_mode=input_mode or cfg.net.input_mode,
        cameras=tuple(cameras) if cameras is not None else tuple(cfg.net.cameras),
        image_rows=cfg.sim.image_size,
        image_cols=cfg.sim.image_size,
        seq_len=cfg.data.seq_len,
        conv_filters=tuple(cfg.net.conv_filters),
        conv_kernels=tuple(cfg.net.conv_kernels),
        conv_strides=tuple(cfg.net.conv_strides),
        conv_return_sequences=tuple([True] * (len(cfg.net.conv_filters) - 1) + [False]),
        lstm_units=cfg.net.lstm_units,
        merge_units=cfg.net.merge_units,
    )


def train_config(cfg, rng_seed=0):
    t = cfg.train
    return TrainConfig(
        batch_size=t.batch_size, learning_rate=t.learning_rate,
        max_iterations=t.max_iterations, patience=t.patience,
        validation_interval=t.validation_interval, optimizer=t.optimizer,
        beta1=t.beta1, beta2=t.beta2, epsilon=t.epsilon,
        rng_seed=rng_seed, dropout_in_training=t.dropout_in_training,
    )


def dropout_spec(cfg):
    return DropoutSpec(rate=cfg.dropout.rate, targets=tuple(cfg.dropout.targets))


def uncertainty_thresholds(cfg):
    return UncertaintyThresholds(
        bins=cfg.eval.bins, sigma_lo=cfg.eval.sigma_lo,
        peak_mass_frac=cfg.eval.peak_mass_frac, valley_ratio=cfg.eval.valley_ratio,
    )
