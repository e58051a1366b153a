"""Coordinate normalization and trajectory augmentation.

Array functions take a leading batch axis: ``obs`` is (n, T_obs, 2),
``future`` (n, T_pred, 2) and ``neighbors`` (n, T_obs, K, 2) with NaN padding.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .data import Sample
from .ndmath import ContractError

NORM_MODES = ("abs", "t0", "tobs", "rel")
AUGMENTATIONS = ("rotate", "mirror", "noise")


class NormMode(str, enum.Enum):
    ABS = "abs"
    T0 = "t0"
    TOBS = "tobs"
    REL = "rel"


@dataclass(frozen=True)
class NormContext:
    mode: NormMode
    anchor: np.ndarray  # (n, 2); last observed world position for rel


def normalize_arrays(obs: np.ndarray, future: np.ndarray | None, neighbors: np.ndarray | None,
                     mode: str):
    """Returns ``(obs_n, target_n, neighbors_n, context)``."""
    mode = NormMode(mode)
    n = obs.shape[0]
    if mode is NormMode.ABS:
        anchor = np.zeros((n, 2), dtype=obs.dtype)
    elif mode is NormMode.T0:
        anchor = obs[:, 0].copy()
    else:
        anchor = obs[:, -1].copy()

    if mode is NormMode.REL:
        obs_n = np.zeros_like(obs)
        obs_n[:, 1:] = np.diff(obs, axis=1)
        target = None
        if future is not None:
            target = np.diff(np.concatenate([obs[:, -1:], future], axis=1), axis=1)
        nb = None if neighbors is None else neighbors - obs[:, :, None, :]
        return obs_n, target, nb, NormContext(mode, anchor)

    a = anchor[:, None, :]
    target = None if future is None else future - a
    nb = None if neighbors is None else neighbors - anchor[:, None, None, :]
    return obs - a, target, nb, NormContext(mode, anchor)


def denormalize_arrays(pred: np.ndarray, context: NormContext) -> np.ndarray:
    try:
        mode = NormMode(context.mode)
    except ValueError:
        raise ContractError(f"unknown normalization mode {context.mode!r}") from None
    anchor = np.asarray(context.anchor)[:, None, :]
    if mode is NormMode.REL:
        return anchor + np.cumsum(pred, axis=1)
    return pred + anchor


def subject_positions(obs_n: np.ndarray, mode: str) -> np.ndarray:
    """Subject position per observed frame, in the frame neighbours live in."""
    if NormMode(mode) is NormMode.REL:
        return np.zeros_like(obs_n)
    return obs_n


def neighbor_offsets(obs_n: np.ndarray, neighbors_n: np.ndarray, mode: str) -> np.ndarray:
    return neighbors_n - subject_positions(obs_n, mode)[:, :, None, :]


def target_positions(target, mode: str):
    """Map a normalized target to positions relative to the last observation.

    Works on numpy arrays and on :class:`~trajconv.ndmath.NdArray`.
    """
    if NormMode(mode) is not NormMode.REL:
        return target
    if isinstance(target, np.ndarray):
        return np.cumsum(target, axis=1)
    from .ndmath import cumsum
    return cumsum(target, axis=1)


# single-sample API ------------------------------------------------------------------

def _sample_neighbors(sample: Sample) -> np.ndarray:
    k = max((len(nb) for nb in sample.neighbors), default=0)
    out = np.full((1, len(sample.neighbors), k, 2), np.nan)
    for t, nb in enumerate(sample.neighbors):
        out[0, t, :len(nb)] = nb
    return out


def _unpad(nb: np.ndarray, counts) -> list[np.ndarray]:
    return [nb[t, :c].copy() for t, c in enumerate(counts)]


def normalize(sample: Sample, mode: str) -> tuple[Sample, NormContext]:
    """Normalized copy of ``sample``; its ``future`` holds the training target."""
    counts = [len(nb) for nb in sample.neighbors]
    obs_n, target, nb, ctx = normalize_arrays(sample.obs[None], sample.future[None],
                                              _sample_neighbors(sample), mode)
    out = replace(sample, obs=obs_n[0], future=target[0], neighbors=_unpad(nb[0], counts))
    return out, ctx


def denormalize(pred: np.ndarray, context: NormContext) -> np.ndarray:
    """Inverse of :func:`normalize` for a single (T_pred, 2) prediction."""
    return denormalize_arrays(np.asarray(pred)[None], context)[0]


def _rotation(theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _map_sample(sample: Sample, fn) -> Sample:
    return replace(sample, obs=fn(sample.obs), future=fn(sample.future),
                   neighbors=[fn(nb) for nb in sample.neighbors])


def rotate_sample(sample: Sample, theta: float) -> Sample:
    """Rotate every position counter-clockwise about the origin by ``theta``."""
    r = _rotation(theta)
    return _map_sample(sample, lambda a: a @ r.T)


MIRROR_NONE, MIRROR_X, MIRROR_Y = 0, 1, 2


def draw_mirror(rng: np.random.Generator) -> int:
    u = rng.random()
    if u < 0.25:
        return MIRROR_X
    if u < 0.5:
        return MIRROR_Y
    return MIRROR_NONE


def _mirror_factor(code) -> np.ndarray:
    code = np.asarray(code)
    f = np.ones(code.shape + (2,))
    f[code == MIRROR_X, 1] = -1.0
    f[code == MIRROR_Y, 0] = -1.0
    return f


def mirror_sample(sample: Sample, rng: np.random.Generator | None = None, axis: str | None = None) -> Sample:
    """Reflect across the x-axis (25%), the y-axis (25%) or not at all.

    ``axis`` forces a reflection ("x" or "y") instead of drawing one.
    """
    if axis is not None:
        code = {"x": MIRROR_X, "y": MIRROR_Y, "none": MIRROR_NONE}[axis]
    else:
        code = draw_mirror(rng)
    f = _mirror_factor(code)
    return _map_sample(sample, lambda a: a * f)


def jitter_sample(sample: Sample, sigma: float, rng: np.random.Generator) -> Sample:
    """Add N(0, sigma^2) to observed inputs and neighbours; the future is left clean."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return replace(sample)
    return replace(
        sample,
        obs=sample.obs + rng.normal(0.0, sigma, sample.obs.shape),
        neighbors=[nb + rng.normal(0.0, sigma, nb.shape) for nb in sample.neighbors],
    )


# batched augmentation --------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    rotate: bool = False
    mirror: bool = False
    noise: bool = False
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @classmethod
    def from_names(cls, names, noise_sigma: float = 0.05, seed: int = 0) -> "AugmentConfig":
        names = set(names or ())
        unknown = names - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentations: {sorted(unknown)}")
        return cls("rotate" in names, "mirror" in names, "noise" in names, noise_sigma, seed)

    @property
    def active(self) -> bool:
        return self.rotate or self.mirror or (self.noise and self.noise_sigma > 0)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def augment_arrays(obs: np.ndarray, target: np.ndarray, neighbors: np.ndarray, counts: np.ndarray,
                   indices, epoch: int, cfg: AugmentConfig):
    """Rotate, mirror, then jitter a normalized batch.

    Draws come from a per-sample stream keyed by (seed, epoch, sample index),
    so results do not depend on batch composition.
    """
    if not cfg.active:
        return obs, target, neighbors
    n = obs.shape[0]
    thetas = np.zeros(n)
    mirrors = np.zeros(n, dtype=np.int64)
    obs_noise = np.zeros_like(obs)
    nb_noise = np.zeros_like(neighbors)
    for i, idx in enumerate(indices):
        rng = sample_rng(cfg.seed, epoch, int(idx))
        if cfg.rotate:
            thetas[i] = rng.uniform(0.0, 2 * np.pi)
        if cfg.mirror:
            mirrors[i] = draw_mirror(rng)
        if cfg.noise and cfg.noise_sigma > 0:
            obs_noise[i] = rng.normal(0.0, cfg.noise_sigma, obs.shape[1:])
            k = int(counts[i].max()) if counts.shape[1] else 0
            if k:
                nb_noise[i, :, :k] = rng.normal(0.0, cfg.noise_sigma, (obs.shape[1], k, 2))
    if cfg.rotate:
        r = _rotation(thetas)  # (n, 2, 2)
        obs = np.einsum("nij,ntj->nti", r, obs)
        target = np.einsum("nij,ntj->nti", r, target)
        neighbors = np.einsum("nij,ntkj->ntki", r, neighbors)
    if cfg.mirror:
        f = _mirror_factor(mirrors)
        obs = obs * f[:, None, :]
        target = target * f[:, None, :]
        neighbors = neighbors * f[:, None, None, :]
    if cfg.noise and cfg.noise_sigma > 0:
        obs = obs + obs_noise
        neighbors = neighbors + nb_noise
    return obs, target, neighbors
