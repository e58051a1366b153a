"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import Sample, SampleArrays, stack_samples
from .ndmath import DimensionError


def check_trajectories(X, length: int | None = None, name: str = "X", allow_nan: bool = False) -> np.ndarray:
    """Return ``X`` as a float64 array shaped (n, T, 2)."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 2:
        raise DimensionError(f"{name} must be shaped (n, T, 2), got {arr.shape}")
    if length is not None and arr.shape[1] != length:
        raise DimensionError(f"{name} must have {length} timesteps, got {arr.shape[1]}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    bad = ~np.isfinite(arr) if not allow_nan else np.isinf(arr)
    if bad.any():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_neighbors(neighbors, n: int, obs_len: int) -> np.ndarray:
    """Neighbour positions (n, obs_len, K, 2), NaN rows marking absent neighbours."""
    if neighbors is None:
        return np.full((n, obs_len, 0, 2), np.nan)
    nb = np.asarray(neighbors, dtype=np.float64)
    if nb.ndim != 4 or nb.shape[:2] != (n, obs_len) or nb.shape[-1] != 2:
        raise DimensionError(f"neighbors must be shaped ({n}, {obs_len}, K, 2), got {nb.shape}")
    return nb


def as_sample_arrays(X, y=None, neighbors=None, obs_len: int = 8, pred_len: int = 12) -> SampleArrays:
    """Accept SampleArrays, a sequence of Sample, or raw (n, obs_len, 2) arrays."""
    if isinstance(X, SampleArrays):
        if y is not None or neighbors is not None:
            raise ValueError("pass y/neighbors only with raw arrays")
        return X
    if isinstance(X, Sequence) and X and isinstance(X[0], Sample):
        if y is not None or neighbors is not None:
            raise ValueError("pass y/neighbors only with raw arrays")
        return stack_samples(X)
    obs = check_trajectories(X, obs_len, "X")
    n = obs.shape[0]
    fut = np.full((n, pred_len, 2), np.nan) if y is None else check_trajectories(y, pred_len, "y")
    if fut.shape[0] != n:
        raise DimensionError(f"X has {n} samples but y has {fut.shape[0]}")
    nb = check_neighbors(neighbors, n, obs_len)
    counts = (~np.isnan(nb).any(-1)).sum(-1).astype(np.int64)
    keys = [f"sample:{i}:0" for i in range(n)]
    return SampleArrays(keys, ["sample"] * n, obs, fut, nb, counts)
