"""Flat key=value configuration shared by the CLI and the library.

One source of truth for every tunable: a text file of ``key=value`` lines
(# comments and blank lines allowed). Command-line flags overlay file values,
which overlay the desk-scale defaults. Unknown keys are rejected.
"""

from __future__ import annotations


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    if s in ("true", "1", "yes"):
        return True
    if s in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected true or false, got {s!r}")


def _parse_int_triple(s: str) -> tuple[int, int, int]:
    parts = s.split(",")
    if len(parts) != 3:
        raise ConfigError(f"expected three comma-separated values, got {s!r}")
    return tuple(int(p) for p in parts)


def _parse_float_triple(s: str) -> tuple[float, float, float]:
    parts = s.split(",")
    if len(parts) != 3:
        raise ConfigError(f"expected three comma-separated values, got {s!r}")
    return tuple(float(p) for p in parts)


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(","))


def _parse_choice(*choices):
    def parse(s: str) -> str:
        if s not in choices:
            raise ConfigError(f"expected one of {choices}, got {s!r}")
        return s

    return parse


# key -> (parser, formatter)
_SCHEMA = {
    "input": (_parse_int_triple, lambda v: ",".join(str(x) for x in v)),  # x,y,z voxels
    "spacing": (_parse_float_triple, lambda v: ",".join(format(x, "g") for x in v)),  # x,y,z mm
    "stages": (int, str),
    "base_channels": (int, str),
    "convs_down": (_parse_int_list, lambda v: ",".join(str(x) for x in v)),
    "convs_up": (_parse_int_list, lambda v: ",".join(str(x) for x in v)),
    "loss": (_parse_choice("dice", "weighted_logistic"), str),
    "dice_reduction": (_parse_choice("mean_per_volume"), str),
    "minibatch": (int, str),
    "momentum": (float, lambda v: format(v, "g")),
    "lr": (float, lambda v: format(v, "g")),
    "lr_decay": (float, lambda v: format(v, "g")),
    "lr_decay_interval": (int, str),
    "max_iterations": (int, str),
    "checkpoint_interval": (int, str),
    "seed": (int, str),
    "augment": (_parse_bool, lambda v: "true" if v else "false"),
    "deform_sigma": (float, lambda v: format(v, "g")),
    "deform_grid": (int, str),
    "deform_order": (int, str),
    "hist_match": (_parse_bool, lambda v: "true" if v else "false"),
    "augment_seed": (int, str),
    "normalize": (_parse_bool, lambda v: "true" if v else "false"),
}


def desk_scale_defaults() -> dict:
    """Defaults that train in minutes on a CPU."""
    return {
        "input": (32, 32, 32),
        "spacing": (1.0, 1.0, 1.0),
        "stages": 3,
        "base_channels": 4,
        "convs_down": (1, 2, 3),
        "convs_up": (2, 1),
        "loss": "dice",
        "dice_reduction": "mean_per_volume",
        "minibatch": 2,
        "momentum": 0.99,
        "lr": 1e-4,
        "lr_decay": 0.1,
        "lr_decay_interval": 200,
        "max_iterations": 600,
        "checkpoint_interval": 200,
        "seed": 0,
        "augment": False,
        "deform_sigma": 15.0,
        "deform_grid": 2,
        "deform_order": 1,
        "hist_match": False,
        "augment_seed": 0,
        "normalize": True,
    }


def full_scale_defaults() -> dict:
    """The full-sized regime: 128x128x64 volumes at 1x1x1.5 mm, 5 stages of
    base width 16, decade decay every 25K iterations. Documented for
    completeness; expect days of CPU time."""
    cfg = desk_scale_defaults()
    cfg.update(
        {
            "input": (128, 128, 64),
            "spacing": (1.0, 1.0, 1.5),
            "stages": 5,
            "base_channels": 16,
            "convs_down": (1, 2, 3, 3, 3),
            "convs_up": (3, 3, 2, 1),
            "lr_decay_interval": 25000,
            "max_iterations": 30000,
            "checkpoint_interval": 5000,
            "augment": True,
            "deform_sigma": 15.0,
            "hist_match": True,
        }
    )
    return cfg


def parse_kv_text(text: str) -> dict:
    """Parse ``key=value`` lines into typed values; unknown keys error."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser = _SCHEMA[key][0]
        try:
            out[key] = parser(value)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}")
    return out


def load_config_file(path: str) -> dict:
    with open(path) as f:
        return parse_kv_text(f.read())


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Desk-scale defaults, overlaid by file values, overlaid by flag values."""
    cfg = desk_scale_defaults()
    for layer in (file_values, overrides):
        if layer:
            for key, value in layer.items():
                if key not in _SCHEMA:
                    raise ConfigError(f"unknown key {key!r}")
                if value is not None:
                    cfg[key] = value
    return cfg


def format_config(cfg: dict) -> str:
    """Render the resolved configuration as key=value lines."""
    lines = []
    for key in _SCHEMA:
        if key in cfg:
            lines.append(f"{key}={_SCHEMA[key][1](cfg[key])}")
    return "\n".join(lines)
