"""Track-file parsing, fixed-length windowing and leave-one-out folds."""

from __future__ import annotations

import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

OBS_LEN = 8
PRED_LEN = 12
FRAME_INTERVAL = 0.4


class TrackParseError(ValueError):
    """A malformed line in a track file."""


class DuplicateRecordError(TrackParseError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class TrackTable:
    """Per-scene annotations sorted by (ped_id, frame_id).

    Coordinates are NaN where the file carries ``?`` placeholders (unlabeled
    test splits); ``labeled`` is False for such tables.
    """

    scene_id: str
    frames: np.ndarray
    peds: np.ndarray
    xy: np.ndarray
    frame_interval: float = FRAME_INTERVAL
    labeled: bool = True

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def records(self) -> list[tuple[int, int, float, float]]:
        return [(int(f), int(p), float(x), float(y)) for f, p, (x, y) in zip(self.frames, self.peds, self.xy)]

    def frame_step(self) -> int:
        """Most common gap between consecutive annotated frame ids."""
        uniq = np.unique(self.frames)
        if len(uniq) < 2:
            return 1
        diffs = np.diff(uniq)
        return int(Counter(diffs.tolist()).most_common(1)[0][0])

    def shifted(self, offset: int) -> "TrackTable":
        return TrackTable(self.scene_id, self.frames + offset, self.peds.copy(), self.xy.copy(),
                          self.frame_interval, self.labeled)


def _integral(token: str, lineno: int, name: str) -> int:
    try:
        value = float(token)
    except ValueError:
        raise TrackParseError(f"line {lineno}: {name} {token!r} is not numeric") from None
    if not math.isfinite(value) or value != int(value):
        raise TrackParseError(f"line {lineno}: {name} {token!r} is not an integer")
    return int(value)


def _coord(token: str, lineno: int) -> float:
    if token == "?":
        return math.nan
    try:
        value = float(token)
    except ValueError:
        raise TrackParseError(f"line {lineno}: coordinate {token!r} is not numeric") from None
    if not math.isfinite(value):
        raise TrackParseError(f"line {lineno}: coordinate {token!r} is not finite")
    return value


def parse_track_file(content: bytes | str, scene_id: str) -> TrackTable:
    """Parse ``frame ped x y`` lines (whitespace or tab separated)."""
    text = content.decode("utf-8") if isinstance(content, (bytes, bytearray)) else content
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 4:
            raise TrackParseError(f"line {lineno}: expected 4 fields, got {len(fields)}")
        rows.append((
            _integral(fields[0], lineno, "frame_id"),
            _integral(fields[1], lineno, "ped_id"),
            _coord(fields[2], lineno),
            _coord(fields[3], lineno),
            lineno,
        ))
    seen: dict[tuple[int, int], int] = {}
    for f, p, _, _, lineno in rows:
        if (f, p) in seen:
            raise DuplicateRecordError(
                f"line {lineno}: duplicate record for frame {f}, pedestrian {p} (first at line {seen[f, p]})"
            )
        seen[f, p] = lineno
    rows.sort(key=lambda r: (r[1], r[0]))
    frames = np.array([r[0] for r in rows], dtype=np.int64)
    peds = np.array([r[1] for r in rows], dtype=np.int64)
    xy = np.array([(r[2], r[3]) for r in rows], dtype=np.float64).reshape(-1, 2)
    labeled = not bool(np.isnan(xy).any())
    return TrackTable(scene_id, frames, peds, xy, labeled=labeled)


def load_track_file(path: str | Path, scene_id: str | None = None) -> TrackTable:
    path = Path(path)
    return parse_track_file(path.read_bytes(), scene_id or path.stem)


def serialize_track_table(table: TrackTable) -> str:
    buf = io.StringIO()
    for f, p, (x, y) in zip(table.frames, table.peds, table.xy):
        xs = "?" if math.isnan(x) else repr(float(x))
        ys = "?" if math.isnan(y) else repr(float(y))
        buf.write(f"{int(f)}\t{int(p)}\t{xs}\t{ys}\n")
    return buf.getvalue()


@dataclass
class Sample:
    """One pedestrian window: observed and future positions plus neighbours.

    ``neighbors[t]`` holds the (x, y) of every other pedestrian annotated in
    observed frame ``t``.
    """

    scene_id: str
    ped_id: int
    start_frame: int
    obs: np.ndarray
    future: np.ndarray
    neighbors: list[np.ndarray] = field(default_factory=list)

    @property
    def key(self) -> str:
        return f"{self.scene_id}:{self.ped_id}:{self.start_frame}"

    @property
    def labeled(self) -> bool:
        return not bool(np.isnan(self.future).any())


def window_samples(table: TrackTable, obs_len: int = OBS_LEN, pred_len: int = PRED_LEN,
                   stride: int = 1, frame_step: int | None = None) -> list[Sample]:
    """Cut every fully-present ``obs_len + pred_len`` window of each pedestrian."""
    if obs_len < 1 or pred_len < 1 or stride < 1:
        raise ConfigurationError("obs_len, pred_len and stride must be >= 1")
    if len(table) == 0:
        return []
    step = frame_step or table.frame_step()
    total = obs_len + pred_len

    by_frame: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    order = np.argsort(table.frames, kind="stable")
    f_sorted = table.frames[order]
    cuts = np.flatnonzero(np.diff(f_sorted)) + 1
    for chunk in np.split(order, cuts):
        by_frame[int(table.frames[chunk[0]])] = (table.peds[chunk], table.xy[chunk])

    samples = []
    ped_cuts = np.flatnonzero(np.diff(table.peds)) + 1
    for idx in np.split(np.arange(len(table)), ped_cuts):
        frames = table.frames[idx]
        if len(frames) < total:
            continue
        ped = int(table.peds[idx[0]])
        xy = table.xy[idx]
        ok = np.concatenate([[0], np.cumsum(np.diff(frames) == step)])
        for i in range(0, len(frames) - total + 1, stride):
            if ok[i + total - 1] - ok[i] != total - 1:
                continue
            neigh = []
            for f in frames[i:i + obs_len]:
                pids, pxy = by_frame[int(f)]
                neigh.append(pxy[pids != ped].copy())
            samples.append(Sample(
                scene_id=table.scene_id,
                ped_id=ped,
                start_frame=int(frames[i]),
                obs=xy[i:i + obs_len].copy(),
                future=xy[i + obs_len:i + total].copy(),
                neighbors=neigh,
            ))
    return samples


@dataclass
class FoldPlan:
    folds: list[tuple[tuple[str, ...], str]]

    def __iter__(self):
        return iter(self.folds)

    def __len__(self) -> int:
        return len(self.folds)


def leave_one_out_folds(scene_ids: Sequence[str]) -> FoldPlan:
    scenes = list(dict.fromkeys(scene_ids))
    if len(scenes) < 2:
        raise ConfigurationError(f"leave-one-out needs at least 2 scenes, got {len(scenes)}")
    return FoldPlan([(tuple(s for s in scenes if s != test), test) for test in scenes])


@dataclass
class SampleArrays:
    """Stacked samples; neighbours padded with NaN to a common count."""

    keys: list[str]
    scene_ids: list[str]
    obs: np.ndarray          # (n, obs_len, 2)
    future: np.ndarray       # (n, pred_len, 2)
    neighbors: np.ndarray    # (n, obs_len, K, 2)
    neighbor_counts: np.ndarray  # (n, obs_len)

    def __len__(self) -> int:
        return len(self.keys)

    def subset(self, idx) -> "SampleArrays":
        idx = np.asarray(idx)
        counts = self.neighbor_counts[idx]
        k = int(counts.max()) if counts.size else 0
        return SampleArrays(
            [self.keys[i] for i in idx], [self.scene_ids[i] for i in idx],
            self.obs[idx], self.future[idx], self.neighbors[idx][:, :, :k], counts,
        )

    @property
    def labeled(self) -> bool:
        return not bool(np.isnan(self.future).any())

    def save(self, path: str | Path) -> None:
        np.savez_compressed(
            path, keys=np.array(self.keys), scene_ids=np.array(self.scene_ids), obs=self.obs,
            future=self.future, neighbors=self.neighbors, neighbor_counts=self.neighbor_counts,
        )

    @classmethod
    def load(cls, path: str | Path) -> "SampleArrays":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["keys"].tolist(), z["scene_ids"].tolist(), z["obs"], z["future"],
                       z["neighbors"], z["neighbor_counts"])

    @classmethod
    def concat(cls, parts: Iterable["SampleArrays"]) -> "SampleArrays":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ConfigurationError("no samples to concatenate")
        k = max(p.neighbors.shape[2] for p in parts)
        nb = [np.pad(p.neighbors, ((0, 0), (0, 0), (0, k - p.neighbors.shape[2]), (0, 0)),
                     constant_values=np.nan) for p in parts]
        return cls(
            sum((p.keys for p in parts), []), sum((p.scene_ids for p in parts), []),
            np.concatenate([p.obs for p in parts]), np.concatenate([p.future for p in parts]),
            np.concatenate(nb), np.concatenate([p.neighbor_counts for p in parts]),
        )


def stack_samples(samples: Sequence[Sample]) -> SampleArrays:
    n = len(samples)
    obs_len = samples[0].obs.shape[0] if n else OBS_LEN
    pred_len = samples[0].future.shape[0] if n else PRED_LEN
    counts = np.array([[len(nb) for nb in s.neighbors] for s in samples], dtype=np.int64).reshape(n, obs_len)
    k = int(counts.max()) if counts.size else 0
    neighbors = np.full((n, obs_len, k, 2), np.nan)
    for i, s in enumerate(samples):
        for t, nb in enumerate(s.neighbors):
            neighbors[i, t, :len(nb)] = nb
    return SampleArrays(
        [s.key for s in samples], [s.scene_id for s in samples],
        np.array([s.obs for s in samples], dtype=np.float64).reshape(n, obs_len, 2),
        np.array([s.future for s in samples], dtype=np.float64).reshape(n, pred_len, 2),
        neighbors, counts,
    )


def holdout_split(arrays: SampleArrays, fraction: float, seed: int = 0) -> tuple[SampleArrays, SampleArrays]:
    """Random (train, held-out) split of a sample set."""
    if not 0 < fraction < 1:
        raise ConfigurationError(f"holdout fraction must be in (0, 1), got {fraction}")
    perm = np.random.default_rng(seed).permutation(len(arrays))
    n_hold = max(1, int(round(fraction * len(arrays))))
    return arrays.subset(np.sort(perm[n_hold:])), arrays.subset(np.sort(perm[:n_hold]))
