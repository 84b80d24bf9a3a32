"""Flat YAML config files whose keys are exactly the ``TrainConfig`` field names."""

from __future__ import annotations

import os
from importlib import resources

import yaml

from ..errors import ConfigError
from ..trainer import INAPPLICABLE, Method, TrainConfig

REQUIRED = ("method",)

_INT_FIELDS = {"epochs", "warmup_epochs", "batch_l", "batch_u", "seed", "data_seed", "classes",
               "image_size", "n_labeled", "n_unlabeled", "n_heldout", "partition_boundary"}
_FLOAT_FIELDS = {"alpha", "alpha_transmit", "tau", "quantile", "fixed_gamma", "mu", "lr_init",
                 "weight_decay", "power"}
_BOOL_FIELDS = {"reweight_enabled", "laplace_enabled"}
_NULLABLE = {"alpha_transmit", "fixed_gamma", "partition_boundary", "dataset"}


def _coerce(key, value, line):
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigError(f"{key} may not be null", line)
    if key in _BOOL_FIELDS:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}", line)
        return value
    if key in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}", line)
        return value
    if key in _FLOAT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}", line)
        return float(value)
    if key == "hidden":
        if not isinstance(value, list) or not value or not all(isinstance(v, int) and v > 0 for v in value):
            raise ConfigError(f"hidden must be a non-empty list of positive integers, got {value!r}", line)
        return tuple(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}", line)
    return value


def parse_config(text: str, overrides: dict | None = None) -> TrainConfig:
    """Parse config text. Errors carry the 1-based line of the offending key."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed config: {getattr(exc, 'problem', exc)}",
                          None if mark is None else mark.line + 1) from None
    if node is None:
        raise ConfigError("empty config; at least 'method' is required", 1)
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError("config must be a flat key: value mapping", node.start_mark.line + 1)

    known = set(TrainConfig.field_names())
    values, lines = {}, {}
    for key_node, value_node in node.value:
        line = key_node.start_mark.line + 1
        key = key_node.value
        if not isinstance(key_node, yaml.ScalarNode):
            raise ConfigError("keys must be plain names", line)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line)
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", line)
        if isinstance(value_node, yaml.MappingNode):
            raise ConfigError(f"{key} must be a scalar (the config is flat)", line)
        raw = yaml.SafeLoader(yaml.serialize(value_node)).get_single_data()
        values[key] = _coerce(key, raw, line)
        lines[key] = line
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(f"missing required key {key!r}", 1)
    if overrides:
        values.update(overrides)

    try:
        cfg = TrainConfig(**values)
    except ConfigError as exc:
        # anchor to the line of the field named in the message, if any
        key = next((k for k in lines if str(exc).startswith(k)), None)
        raise ConfigError(str(exc), lines.get(key)) from None
    bad = sorted(set(values) & INAPPLICABLE[Method(cfg.method)])
    if bad:
        raise ConfigError(f"method {cfg.method.value} does not use {', '.join(bad)}", lines.get(bad[0]))
    return cfg


PRESET_NAMES = ("gta", "mean_teacher", "suponly")


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    """Read a config file; a bare preset name loads the packaged reference config."""
    if str(path) in PRESET_NAMES and not os.path.exists(path):
        text = resources.files(__package__).joinpath("presets", f"{path}.yaml").read_text(encoding="utf-8")
        return parse_config(text, overrides)
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), overrides)


def dump_config(cfg: TrainConfig) -> str:
    """Flat YAML for ``cfg``, omitting fields its method does not use."""
    d = cfg.as_dict()
    skip = INAPPLICABLE[cfg.method]
    return yaml.safe_dump({k: v for k, v in d.items() if k not in skip}, sort_keys=False)



def parse_axes(spec: str):
    """``--axes`` value: a preset name, or ``field=v1,v2;field2=v3`` (cross product).

    Values are YAML scalars coerced like config values.
    """
    from ..trainer import AXIS_FIELDS, PRESETS

    spec = spec.strip()
    if spec in PRESETS:
        return spec
    if "=" not in spec:
        raise ConfigError(f"unknown ablation preset {spec!r}; choose from {', '.join(PRESETS)} "
                          "or give field=v1,v2;field2=...")
    axes = {}
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        key, _, raw = part.partition("=")
        key = key.strip()
        if key not in AXIS_FIELDS:
            raise ConfigError(f"{key!r} is not an ablation axis; choose from {', '.join(sorted(AXIS_FIELDS))}")
        if key in axes:
            raise ConfigError(f"axis {key!r} given twice")
        values = [v.strip() for v in raw.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"axis {key!r} has no values")
        axes[key] = [_coerce(key, yaml.safe_load(v), None) for v in values]
    return axes
