#!/usr/bin/env python3
"""
Error types for the layer-aggregation detection toolkit.

Every failure the toolkit reports deliberately is one of these; the CLI turns
them into exit code 1 and a one-line JSON error on stderr.
"""


class LafError(Exception):
    """Base class for all toolkit errors"""


class InvalidArgumentError(LafError, ValueError):
    """An argument is outside its documented domain (bad size, shape, landmark...)"""


class DegenerateGeometryError(LafError):
    """Landmark geometry does not define a transform (e.g. coincident eyes)"""


class InvalidDatasetError(LafError):
    """A dataset cannot be used for the requested operation (empty, single label)"""


class UndefinedMetricError(LafError):
    """A metric is undefined for the given inputs (e.g. AP with one class)"""


class DegenerateVarianceError(LafError):
    """Standard deviation is zero so CoV^-1 is undefined"""


class DegenerateActivationError(LafError):
    """Every channel of a feature map is constant; no class activation map exists"""


class CheckpointFormatError(LafError):
    """A checkpoint file is truncated, corrupt or structurally invalid"""


class UnsupportedVersionError(CheckpointFormatError):
    """A checkpoint was written with a format version this code cannot read"""


class ConfigError(LafError):
    """A run configuration failed schema validation"""


class ConfigMismatchError(LafError):
    """A checkpoint's model configuration does not match what the run expects"""
