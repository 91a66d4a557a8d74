"""YAML deployment config: thresholds, reference box, tariff, noise defaults, backends.

Example::

    conf_thresh: 0.5
    nms_thresh: 0.3
    ref_box: [100, 80, 316, 400]
    input_size: [416, 416]
    tariff: {bus: 90, car: 30, carry-van: 60, truck-type1: 120, truck-type2: 180, van: 50}
    noise: {drop: 0.1, jitter: 2.0, plate.misclass: 0.0}
    backends:
      vehicle: [python, vehicle_net.py]
      plate: [python, lp_net.py]
      character: [python, cr_net.py]
"""
from __future__ import annotations

from pathlib import Path

import yaml

from .exceptions import ConfigurationError

_KEYS = {"conf_thresh", "nms_thresh", "ref_box", "input_size", "tariff", "noise", "backends"}


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    unknown = set(data) - _KEYS
    if unknown:
        raise ConfigurationError(f"{path}: unknown key(s) {sorted(unknown)}")
    if "tariff" in data and not isinstance(data["tariff"], dict):
        raise ConfigurationError(f"{path}: tariff must map vehicle class to amount")
    backends = data.get("backends") or {}
    for stage, cmd in backends.items():
        if stage not in ("vehicle", "plate", "character"):
            raise ConfigurationError(f"{path}: unknown backend stage {stage!r}")
        if isinstance(cmd, str):
            backends[stage] = cmd.split()
    if backends and set(backends) != {"vehicle", "plate", "character"}:
        raise ConfigurationError(f"{path}: backends must name all three stages")
    data["backends"] = backends
    return data


def noise_to_spec(noise) -> str:
    """Flatten a config ``noise`` mapping into the ``key=value,...`` override syntax."""
    if not noise:
        return ""
    if not isinstance(noise, dict):
        raise ConfigurationError("noise must be a mapping")
    parts = []
    for key, value in noise.items():
        if isinstance(value, (list, tuple)):
            value = ":".join(str(v) for v in value)
        parts.append(f"{key}={value}")
    return ",".join(parts)
