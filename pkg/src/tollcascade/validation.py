"""Input validation helpers in the spirit of ``sklearn.utils.validation``.

Each ``check_*`` function either returns a normalized value or raises
:class:`~tollcascade.exceptions.ValidationError`.
"""
from __future__ import annotations

import math
from numbers import Real
from typing import Iterable, Sequence

from .exceptions import ValidationError


def check_finite(value, name: str = "value") -> float:
    if isinstance(value, bool) or not isinstance(value, Real):
        raise ValidationError(f"{name} must be a real number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError(f"{name} must be finite, got {value!r}")
    return value


def check_probability(value, name: str = "probability") -> float:
    value = check_finite(value, name)
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_non_negative(value, name: str = "value") -> float:
    value = check_finite(value, name)
    if value < 0:
        raise ValidationError(f"{name} must be >= 0, got {value}")
    return value


def check_positive_int(value, name: str = "value") -> int:
    if isinstance(value, bool):
        raise ValidationError(f"{name} must be a positive integer, got {value!r}")
    try:
        ivalue = int(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a positive integer, got {value!r}") from None
    if ivalue != value or ivalue < 1:
        raise ValidationError(f"{name} must be a positive integer, got {value!r}")
    return ivalue


def check_box_coords(coords: Sequence, name: str = "box") -> tuple[float, float, float, float]:
    """Validate ``(xmin, ymin, xmax, ymax)`` and return it as floats."""
    if len(coords) != 4:
        raise ValidationError(f"{name} needs 4 coordinates, got {len(coords)}")
    xmin, ymin, xmax, ymax = (check_finite(c, name) for c in coords)
    if xmin > xmax or ymin > ymax:
        raise ValidationError(
            f"{name} has inverted corners: ({xmin}, {ymin}, {xmax}, {ymax})"
        )
    return xmin, ymin, xmax, ymax


def check_range(pair: Iterable, name: str = "range") -> tuple[float, float]:
    lo, hi = (check_probability(v, name) for v in pair)
    if lo > hi:
        raise ValidationError(f"{name} is empty: [{lo}, {hi}]")
    return lo, hi
