"""Input validation helpers for the estimator API."""

import numpy as np

from .tensor import ShapeError


def check_clip(clip, channels=None, name="clip"):
    """Validate one [t, c, h, w] clip; returns a float64 array in [0, 1]."""
    arr = np.asarray(clip, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[0] < 1:
        raise ShapeError(f"{name} must be a non-empty [t,c,h,w] array, "
                         f"got shape {arr.shape}")
    if channels is not None and arr.shape[1] != channels:
        raise ShapeError(f"{name} must have {channels} channels, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name} contains non-finite values")
    if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
        raise ShapeError(f"{name} values must lie in [0, 1], got "
                         f"[{arr.min():.4g}, {arr.max():.4g}]")
    return np.clip(arr, 0.0, 1.0)


def check_clip_batch(clips, channels=None, name="X"):
    """Validate a batch: a [n, t, c, h, w] array or a sequence of clips.

    Returns a list of float64 clips (ragged shapes allowed across clips).
    """
    if isinstance(clips, np.ndarray) and clips.ndim == 5:
        clips = list(clips)
    if not hasattr(clips, "__len__") or len(clips) == 0:
        raise ShapeError(f"{name} must be a non-empty batch of clips")
    return [check_clip(c, channels=channels, name=f"{name}[{i}]")
            for i, c in enumerate(clips)]


def check_paired_batches(x, y, channels=None):
    xs = check_clip_batch(x, channels=channels, name="X")
    ys = check_clip_batch(y, channels=channels, name="y")
    if len(xs) != len(ys):
        raise ShapeError(f"X has {len(xs)} clips but y has {len(ys)}")
    for i, (a, b) in enumerate(zip(xs, ys)):
        if a.shape != b.shape:
            raise ShapeError(f"X[{i}] shape {a.shape} != y[{i}] shape {b.shape}")
    return xs, ys
