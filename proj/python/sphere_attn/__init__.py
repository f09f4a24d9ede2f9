"""Radial-window point cloud attention."""

import json

from ._core import (
    ConfigError,
    NumericError,
    ShapeError,
    SizeError,
    TableIndexError,
    brute_force_forward,
    exp_split_index,
    generate_scene,
    partition,
    sphereformer_forward,
    to_spherical,
    uniform_split_index,
)
from . import _core

__version__ = "0.1.0"


def partition_stats(points, mode="radial", **window):
    """Occupancy histogram and reach statistics as a dict."""
    return json.loads(_core.partition_stats_json(points, mode, **window))


def gradient_check(seed=0, tokens=6, heads=2, head_dim=4, table_length=8):
    """Per-parameter max relative error of analytic vs central-difference gradients."""
    return json.loads(_core.gradient_check_json(seed, tokens, heads, head_dim, table_length))


__all__ = [
    "ConfigError",
    "NumericError",
    "ShapeError",
    "SizeError",
    "TableIndexError",
    "brute_force_forward",
    "exp_split_index",
    "generate_scene",
    "gradient_check",
    "partition",
    "partition_stats",
    "sphereformer_forward",
    "to_spherical",
    "uniform_split_index",
]
