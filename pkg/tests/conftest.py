import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trajconv.data import TrackTable, serialize_track_table, stack_samples, window_samples  # noqa: E402


def walkers(seed=0, n_peds=12, n_frames=40, scene_id="s", frame_step=10):
    """Smoothly turning constant-speed walkers, annotated every ``frame_step`` ids."""
    rng = np.random.default_rng(seed)
    rows = []
    for p in range(n_peds):
        start = int(rng.integers(0, 10))
        length = int(rng.integers(20, max(21, n_frames - start + 1)))
        pos = rng.uniform(-5, 5, 2)
        vel = rng.normal(0, 0.5, 2)
        turn = rng.normal(0, 0.05)
        c, s = np.cos(turn), np.sin(turn)
        for k in range(length):
            rows.append(((start + k) * frame_step, p, pos[0], pos[1]))
            vel = np.array([c * vel[0] - s * vel[1], s * vel[0] + c * vel[1]])
            pos = pos + vel * 0.4
    r = np.array(rows)
    r = r[np.lexsort((r[:, 0], r[:, 1]))]
    return TrackTable(scene_id, r[:, 0].astype(np.int64), r[:, 1].astype(np.int64), r[:, 2:].copy())


@pytest.fixture
def walker_arrays():
    return stack_samples(window_samples(walkers()))


@pytest.fixture
def scene_files(tmp_path):
    """Three synthetic scenes written as track files."""
    out = {}
    for i, sid in enumerate(("alpha", "beta", "gamma")):
        p = tmp_path / f"{sid}.txt"
        p.write_text(serialize_track_table(walkers(seed=i, n_peds=6, n_frames=30, scene_id=sid)))
        out[sid] = p
    return out


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number: int, ok: bool, detail: str) -> None:
        lines[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(lines[number])
        if not ok:
            pytest.fail(detail, pytrace=False)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
