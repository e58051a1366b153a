"""Occupancy encodings of neighbouring pedestrians.

All encoders consume neighbour offsets relative to the subject, shaped
(..., K, 2) with NaN rows for absent neighbours, and return flat features
(..., S). Bins are half-open: a point on a boundary goes to the higher bin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

SOCIAL_KINDS = ("none", "square_grid", "circular_map", "angular_grid")


@dataclass(frozen=True)
class SocialConfig:
    kind: str = "none"
    l: int = 10  # noqa: E741
    cell_side: float = 0.5
    c: int = 12
    ring_spacing: float = 0.5
    d: float = 8.0
    angular_range: float = 6.0
    binary: bool = False

    def __post_init__(self):
        if self.kind not in SOCIAL_KINDS:
            raise ValueError(f"unknown social kind {self.kind!r}; expected one of {SOCIAL_KINDS}")
        if self.l <= 0 or self.c <= 0:
            raise ValueError("l and c must be positive")
        if self.cell_side <= 0 or self.ring_spacing <= 0 or self.angular_range <= 0:
            raise ValueError("cell_side, ring_spacing and angular_range must be positive")
        if int(360 / self.d) < 1:
            raise ValueError(f"d={self.d} gives an empty angular vector")

    @property
    def size(self) -> int:
        return {
            "none": 0,
            "square_grid": self.l * self.l,
            "circular_map": self.c * 4,
            "angular_grid": int(360 / self.d),
        }[self.kind]

    @property
    def shape(self) -> tuple[int, ...]:
        return {
            "none": (0,),
            "square_grid": (self.l, self.l),
            "circular_map": (self.c, 4),
            "angular_grid": (int(360 / self.d),),
        }[self.kind]


def _valid(offsets: np.ndarray) -> np.ndarray:
    return ~np.isnan(offsets).any(axis=-1)


def _bearing_deg(offsets: np.ndarray) -> np.ndarray:
    ang = np.degrees(np.arctan2(offsets[..., 1], offsets[..., 0]))
    ang = np.where(ang < 0, ang + 360.0, ang)
    # tiny negative bearings round up to 360.0 but belong to the last sector
    return np.minimum(ang, np.nextafter(360.0, 0.0))


def _scatter_count(lead: tuple[int, ...], size: int, bins: np.ndarray, ok: np.ndarray) -> np.ndarray:
    n = int(np.prod(lead)) if lead else 1
    out = np.zeros(n * size)
    rows = np.broadcast_to(np.arange(n).reshape(lead + (1,)), bins.shape)
    np.add.at(out, (rows * size + bins)[ok], 1.0)
    return out.reshape(lead + (size,))


def square_grid_features(offsets: np.ndarray, cfg: SocialConfig) -> np.ndarray:
    ok = _valid(offsets)
    with np.errstate(invalid="ignore"):
        cell = np.floor(np.nan_to_num(offsets) / cfg.cell_side).astype(np.int64) + cfg.l // 2
    ok &= (cell >= 0).all(-1) & (cell < cfg.l).all(-1)
    bins = cell[..., 0] * cfg.l + cell[..., 1]
    out = _scatter_count(offsets.shape[:-2], cfg.l * cfg.l, bins, ok)
    return np.minimum(out, 1.0) if cfg.binary else out


def circular_map_features(offsets: np.ndarray, cfg: SocialConfig) -> np.ndarray:
    ok = _valid(offsets)
    off = np.nan_to_num(offsets)
    ring = np.floor(np.hypot(off[..., 0], off[..., 1]) / cfg.ring_spacing).astype(np.int64)
    quad = np.minimum(np.floor(_bearing_deg(off) / 90.0).astype(np.int64), 3)
    ok &= ring < cfg.c
    out = _scatter_count(offsets.shape[:-2], cfg.c * 4, ring * 4 + quad, ok)
    return np.minimum(out, 1.0) if cfg.binary else out


def angular_grid_features(offsets: np.ndarray, cfg: SocialConfig) -> np.ndarray:
    n_sec = int(360 / cfg.d)
    ok = _valid(offsets)
    off = np.nan_to_num(offsets)
    dist = np.hypot(off[..., 0], off[..., 1])
    sector = np.minimum(np.floor(_bearing_deg(off) / cfg.d).astype(np.int64), n_sec - 1)
    # co-located neighbours have no direction
    ok &= (dist > 0) & (dist < cfg.angular_range)
    lead = offsets.shape[:-2]
    n = int(np.prod(lead)) if lead else 1
    out = np.full(n * n_sec, float(cfg.angular_range))
    rows = np.broadcast_to(np.arange(n).reshape(lead + (1,)), sector.shape)
    np.minimum.at(out, (rows * n_sec + sector)[ok], dist[ok])
    return out.reshape(lead + (n_sec,))


def encode_offsets(offsets: np.ndarray, cfg: SocialConfig) -> np.ndarray:
    if cfg.kind == "square_grid":
        return square_grid_features(offsets, cfg)
    if cfg.kind == "circular_map":
        return circular_map_features(offsets, cfg)
    if cfg.kind == "angular_grid":
        return angular_grid_features(offsets, cfg)
    return np.zeros(offsets.shape[:-2] + (0,))


def _offsets(subject_pos, neighbor_positions) -> np.ndarray:
    nb = np.asarray(neighbor_positions, dtype=np.float64).reshape(-1, 2)
    return nb - np.asarray(subject_pos, dtype=np.float64).reshape(1, 2)


def square_occupancy(subject_pos, neighbor_positions, cfg: SocialConfig) -> np.ndarray:
    """Neighbour counts on an l x l axis-aligned grid centred on the subject."""
    return square_grid_features(_offsets(subject_pos, neighbor_positions), cfg)


def circular_occupancy(subject_pos, neighbor_positions, cfg: SocialConfig) -> np.ndarray:
    """Neighbour counts per (ring, quadrant), flattened ring-major."""
    return circular_map_features(_offsets(subject_pos, neighbor_positions), cfg)


def angular_grid(subject_pos, neighbor_positions, cfg: SocialConfig) -> np.ndarray:
    """Distance to the closest neighbour per angular sector (free space = range)."""
    return angular_grid_features(_offsets(subject_pos, neighbor_positions), cfg)


class OccupancyEncoder(TransformerMixin, BaseEstimator):
    """Stateless transformer from neighbour offsets to occupancy features."""

    def __init__(self, kind="square_grid", l=10, cell_side=0.5, c=12, ring_spacing=0.5,  # noqa: E741
                 d=8.0, angular_range=6.0, binary=False):
        self.kind = kind
        self.l = l
        self.cell_side = cell_side
        self.c = c
        self.ring_spacing = ring_spacing
        self.d = d
        self.angular_range = angular_range
        self.binary = binary

    def config(self) -> SocialConfig:
        return SocialConfig(**self.get_params())

    def fit(self, X=None, y=None):
        self.config_ = self.config()
        self.n_features_out_ = self.config_.size
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim < 2 or X.shape[-1] != 2:
            raise ValueError(f"expected offsets shaped (..., K, 2), got {X.shape}")
        return encode_offsets(X, getattr(self, "config_", None) or self.config())
