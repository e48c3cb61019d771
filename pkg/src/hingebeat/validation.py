"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numbers

import numpy as np

from .data import BeatAnnotation
from .foundation import LayerFeatureStack
from .tensorcore import InvalidArgumentError


def check_features(X, n_channels: int | None = None, name: str = "X") -> list:
    """Validate a sequence of per-item feature matrices.

    Each item is either a ``(channels, frames)`` array or a
    :class:`LayerFeatureStack` of cached encoder outputs with batch size one.
    Arrays are returned as float64; stacks are passed through.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise InvalidArgumentError(f"{name} must be a sequence of (channels, frames) arrays, "
                                   "not a single matrix; wrap it in a list")
    try:
        items = list(X)
    except TypeError:
        raise InvalidArgumentError(f"{name} must be a sequence of items") from None
    if not items:
        raise InvalidArgumentError(f"{name} is empty")
    out = []
    for k, item in enumerate(items):
        if isinstance(item, LayerFeatureStack):
            if item.shape[0] != 1:
                raise InvalidArgumentError(f"{name}[{k}]: stacks must have batch size 1")
            out.append(item)
            continue
        arr = np.asarray(item, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidArgumentError(f"{name}[{k}] must be 2-D (channels, frames), got shape {arr.shape}")
        if arr.shape[1] == 0:
            raise InvalidArgumentError(f"{name}[{k}] has no frames")
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError(f"{name}[{k}] contains NaN or infinite values")
        if n_channels is not None and arr.shape[0] != n_channels:
            raise InvalidArgumentError(f"{name}[{k}] has {arr.shape[0]} channels, expected {n_channels}")
        out.append(arr)
    return out


def check_annotations(y, n_items: int, name: str = "y") -> list[BeatAnnotation]:
    """Coerce targets to :class:`BeatAnnotation` objects.

    Accepted per item: a ``BeatAnnotation``, an array of beat times, or a
    ``(times, positions)`` pair.
    """
    if y is None:
        raise InvalidArgumentError(f"{name} is required")
    items = list(y)
    if len(items) != n_items:
        raise InvalidArgumentError(f"{name} has {len(items)} items but X has {n_items}")
    out = []
    for k, item in enumerate(items):
        if isinstance(item, BeatAnnotation):
            out.append(item)
            continue
        if isinstance(item, tuple) and len(item) == 2:
            times, positions = item
        else:
            times, positions = item, None
        try:
            out.append(BeatAnnotation(np.asarray(times, dtype=np.float64), positions))
        except InvalidArgumentError as exc:
            raise InvalidArgumentError(f"{name}[{k}]: {exc}") from None
    return out


def check_seed(random_state) -> int:
    """Turn ``None``, an int or a ``numpy`` generator into a non-negative int seed."""
    if random_state is None:
        return 0
    if isinstance(random_state, numbers.Integral):
        if random_state < 0:
            raise InvalidArgumentError(f"random_state must be non-negative, got {random_state}")
        return int(random_state)
    if isinstance(random_state, np.random.Generator):
        return int(random_state.integers(2**31))
    if isinstance(random_state, np.random.RandomState):
        return int(random_state.randint(2**31))
    raise InvalidArgumentError(f"cannot use {random_state!r} as a random_state")
