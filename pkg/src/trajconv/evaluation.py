"""Displacement metrics, fold reports, gradient flow and latency timing."""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import ndmath as nm
from .data import SampleArrays
from .models import ModelSpec, ParamStore, forward_fn, predict_array
from .prep import denormalize_arrays, normalize_arrays
from .train import Checkpoint, batch_loss, prepare_batch

HIST_BIN = 0.1
WORST_K = 10


class UnlabeledSplitError(ValueError):
    pass


def _check_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 3 or pred.shape[-1] != 2:
        raise nm.DimensionError(f"pred {pred.shape} and truth {truth.shape} must both be (n, T, 2)")
    if pred.shape[0] == 0 or pred.shape[1] == 0:
        raise nm.DimensionError("ADE/FDE need at least one pedestrian and one timestep")
    return pred, truth


def point_errors(pred, truth) -> np.ndarray:
    """Euclidean distance per (pedestrian, timestep)."""
    pred, truth = _check_pair(pred, truth)
    d = pred - truth
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


def ade(pred, truth) -> float:
    return float(point_errors(pred, truth).mean())


def fde(pred, truth) -> float:
    return float(point_errors(pred, truth)[:, -1].mean())


@dataclass
class EvalReport:
    keys: list[str]
    scene_ids: list[str]
    sample_ade: np.ndarray
    sample_fde: np.ndarray
    bin_width: float = HIST_BIN
    worst_k: int = WORST_K
    dumps: list[dict] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.keys)

    @property
    def ade(self) -> float:
        return float(self.sample_ade.mean())

    @property
    def fde(self) -> float:
        return float(self.sample_fde.mean())

    @property
    def per_scene(self) -> dict[str, tuple[float, float, int]]:
        out = {}
        sid = np.asarray(self.scene_ids)
        for s in dict.fromkeys(self.scene_ids):
            m = sid == s
            out[s] = (float(self.sample_ade[m].mean()), float(self.sample_fde[m].mean()), int(m.sum()))
        return out

    def histogram(self) -> tuple[np.ndarray, np.ndarray]:
        """Counts of per-sample ADE in ``bin_width`` bins starting at 0; returns (edges, counts)."""
        top = float(self.sample_ade.max()) if self.n else 0.0
        nbins = max(1, int(np.floor(top / self.bin_width)) + 1)
        edges = np.arange(nbins + 1) * self.bin_width
        idx = np.minimum((self.sample_ade / self.bin_width).astype(np.int64), nbins - 1)
        return edges, np.bincount(idx, minlength=nbins)

    def summary(self) -> dict[str, float]:
        a = self.sample_ade
        return {"n": self.n, "ade": self.ade, "fde": self.fde, "mean": float(a.mean()),
                "std": float(a.std()), "max": float(a.max())}

    def worst(self) -> list[tuple[str, float]]:
        order = np.argsort(-self.sample_ade, kind="stable")[:self.worst_k]
        return [(self.keys[i], float(self.sample_ade[i])) for i in order]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene", "n", "ade", "fde"])
            for s, (a, f, n) in self.per_scene.items():
                w.writerow([s, n, repr(a), repr(f)])
            w.writerow(["average", self.n, repr(self.ade), repr(self.fde)])

    def write_samples_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "scene", "ade", "fde"])
            for k, s, a, f in zip(self.keys, self.scene_ids, self.sample_ade, self.sample_fde):
                w.writerow([k, s, repr(float(a)), repr(float(f))])

    def write_histogram_csv(self, path: str | Path) -> None:
        edges, counts = self.histogram()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([f"{lo:.4f}", f"{hi:.4f}", int(c)])

    def write_worst_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.dumps, indent=1))


def evaluate_predictions(pred_world, samples: SampleArrays, worst_k: int = WORST_K,
                         bin_width: float = HIST_BIN) -> EvalReport:
    """Score world-frame predictions against the samples' ground truth."""
    if not samples.labeled:
        raise UnlabeledSplitError("test split has no ground-truth futures (unlabeled); refusing to score it")
    err = point_errors(pred_world, samples.future)
    report = EvalReport(list(samples.keys), list(samples.scene_ids), err.mean(axis=1), err[:, -1].copy(),
                        bin_width, worst_k)
    pred = np.asarray(pred_world, dtype=np.float64)
    index = {k: i for i, k in enumerate(samples.keys)}
    for key, score in report.worst():
        i = index[key]
        report.dumps.append({"key": key, "ade": score, "obs": samples.obs[i].tolist(),
                             "truth": samples.future[i].tolist(), "pred": pred[i].tolist()})
    return report


def predict_world(ckpt: Checkpoint, samples: SampleArrays, batch_size: int = 256) -> np.ndarray:
    """Eval-mode predictions mapped back to scene coordinates."""
    idx = np.arange(len(samples))
    obs, _, social = prepare_batch(samples, idx, ckpt.config)
    pred = predict_array(ckpt.spec, ckpt.params, obs, social, batch_size)
    _, _, _, ctx = normalize_arrays(samples.obs, None, None, ckpt.config.norm_mode)
    return denormalize_arrays(pred.astype(np.float64), ctx)


def evaluate_fold(ckpt: Checkpoint, test_samples: SampleArrays, norm_mode: str | None = None,
                  worst_k: int = WORST_K, bin_width: float = HIST_BIN) -> EvalReport:
    if not test_samples.labeled:
        raise UnlabeledSplitError("test split has no ground-truth futures (unlabeled); refusing to score it")
    if norm_mode is not None and norm_mode != ckpt.config.norm_mode:
        raise ValueError(f"checkpoint was trained with norm mode {ckpt.config.norm_mode!r}, not {norm_mode!r}")
    return evaluate_predictions(predict_world(ckpt, test_samples), test_samples, worst_k, bin_width)


@dataclass(frozen=True)
class LayerGradient:
    layer: str
    n_params: int
    mean_abs: float
    max_abs: float


def gradient_flow_report(ckpt: Checkpoint, batch: SampleArrays, train: bool = True) -> list[LayerGradient]:
    """One backward pass on ``batch``; mean and max |grad| per parameter group."""
    if not batch.labeled:
        raise UnlabeledSplitError("gradient flow needs a labeled batch")
    obs, target, social = prepare_batch(batch, np.arange(len(batch)), ckpt.config)
    params = ckpt.params.copy()  # keep the checkpoint's running statistics untouched
    params.zero_grad()
    loss = batch_loss(ckpt.spec, params, obs, target, social, ckpt.config.norm_mode, train=train)
    nm.backward(loss, list(params.params.values()))
    grads = params.grads()
    out = []
    for layer, names in params.layers().items():
        g = np.abs(np.concatenate([grads[n].ravel() for n in names]))
        out.append(LayerGradient(layer, int(g.size), float(g.mean()), float(g.max())))
    return out


def write_gradient_csv(rows: Sequence[LayerGradient], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "n_params", "mean_abs_grad", "max_abs_grad"])
        for r in rows:
            w.writerow([r.layer, r.n_params, repr(r.mean_abs), repr(r.max_abs)])


@dataclass(frozen=True)
class TimingReport:
    model: str
    batch_size: int
    per_element_seconds: float
    repeats: int
    iqr_seconds: float
    params: int


def _time_forward(spec: ModelSpec, params: ParamStore, batch: int, repeats: int, warmup: int,
                  rng: np.random.Generator) -> list[float]:
    fwd = forward_fn(spec)
    obs = rng.normal(0.0, 1.0, (batch, spec.obs_len, 2)).astype(np.float32)
    social = None
    if spec.social.kind != "none":
        social = rng.random((batch, spec.obs_len, spec.social.size)).astype(np.float32)
    times = []
    with nm.no_grad():
        for i in range(warmup + repeats):
            t0 = time.perf_counter()
            fwd(params, obs, social, train=False)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt)
    return times


def latency_benchmark(models: Mapping[str, Checkpoint | tuple[ModelSpec, ParamStore]],
                      batch_sizes: Sequence[int] = (1, 32), repeats: int = 30, warmup: int = 5,
                      seed: int = 0) -> list[TimingReport]:
    """Median per-element forward time for every (model, batch size)."""
    if repeats < 30:
        raise ValueError("latency benchmark needs at least 30 repeats")
    rng = np.random.default_rng(seed)
    out = []
    for name, m in models.items():
        spec, params = (m.spec, m.params) if isinstance(m, Checkpoint) else m
        for b in batch_sizes:
            times = np.asarray(_time_forward(spec, params, int(b), repeats, warmup, rng)) / b
            q1, q3 = np.percentile(times, [25, 75])
            out.append(TimingReport(name, int(b), float(statistics.median(times)), repeats,
                                    float(q3 - q1), params.trainable_count()))
    return out


def write_timing_csv(rows: Sequence[TimingReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "batch_size", "per_element_seconds", "params", "repeats", "iqr_seconds"])
        for r in rows:
            w.writerow([r.model, r.batch_size, repr(r.per_element_seconds), r.params, r.repeats,
                        repr(r.iqr_seconds)])
