"""``trajconv`` command line: ingest, train, xval, eval, bench, report."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import DataConfig, RunConfig, SceneSource, load_run_config
from .data import (ConfigurationError, SampleArrays, TrackParseError, leave_one_out_folds, load_track_file,
                   stack_samples, window_samples, holdout_split)
from .evaluation import (EvalReport, UnlabeledSplitError, evaluate_fold, latency_benchmark, write_timing_csv)
from .models import FAMILIES, ModelSpec, init_params
from .ndmath import OptimizerError
from .train import (CheckpointError, Checkpoint, NumericError, TrainConfig, load_checkpoint, save_checkpoint,
                    train_run, write_loss_log)

log = logging.getLogger("trajconv")

RUN_ROOT_ENV = "TRAJCONV_RUNS"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# flag dest -> config key; flags always win over the file
FLAG_KEYS = {
    "preset": "train.preset",
    "epochs": "train.epochs",
    "lr": "train.base_lr",
    "gamma": "train.gamma",
    "step": "train.step_size",
    "batch_size": "train.batch_size",
    "seed": "train.seed",
    "norm": "prep.norm_mode",
    "augment": "prep.augment",
    "sigma": "prep.noise_sigma",
    "model": "model.family",
    "ks": "model.kernel_size",
    "positional_embedding": "model.positional_embedding",
    "residual": "model.residual",
    "transpose_conv": "model.transpose_conv",
    "social": "social.kind",
    "holdout": "data.holdout",
    "stride": "data.stride",
}


# manifest ----------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    datasets: dict[str, str] = field(default_factory=dict)
    version: str = __version__
    seed: int = 0
    started: str = ""
    finished: str | None = None

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(self.__dict__, indent=1, sort_keys=True))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _run_dir(args, cfg_dict: dict) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        digest = hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()[:10]
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        out = Path(os.environ.get(RUN_ROOT_ENV, "runs")) / f"{args.command}-{digest}-{stamp}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _start(args, argv, cfg: RunConfig | None, datasets: dict[str, str] | None = None) -> tuple[Path, RunManifest]:
    cfg_dict = cfg.to_dict() if cfg is not None else {}
    out = _run_dir(args, cfg_dict)
    manifest = RunManifest(args.command, list(argv), cfg_dict, datasets or {},
                           seed=cfg.train.seed if cfg is not None else 0, started=_now())
    manifest.write(out / "manifest.json")
    return out, manifest


def _finish(out: Path, manifest: RunManifest) -> None:
    manifest.finished = _now()
    manifest.write(out / "manifest.json")


# data --------------------------------------------------------------------------------

def scene_samples(src: SceneSource, spec: ModelSpec, stride: int = 1) -> SampleArrays:
    if not src.path.exists():
        raise FileNotFoundError(f"dataset file not found: {src.path}")
    table = load_track_file(src.path, src.scene_id)
    samples = window_samples(table, spec.obs_len, spec.pred_len, stride, src.frame_step)
    if not samples:
        raise ConfigurationError(f"scene {src.scene_id} ({src.path}) yields no complete windows")
    arrays = stack_samples(samples)
    if src.labeled is False:
        arrays.future[:] = np.nan
    return arrays


def _load_scenes(data: DataConfig, spec: ModelSpec, only: Sequence[str] | None = None) -> dict[str, SampleArrays]:
    if not data.scenes:
        raise ConfigurationError("no scenes configured; add a [data] section or pass --scene ID=PATH")
    wanted = set(only) if only else None
    if wanted:
        unknown = wanted - {s.scene_id for s in data.scenes}
        if unknown:
            raise ConfigurationError(f"unknown scenes {sorted(unknown)}")
    return {s.scene_id: scene_samples(s, spec, data.stride) for s in data.scenes
            if wanted is None or s.scene_id in wanted}


def _fingerprints(data: DataConfig) -> dict[str, str]:
    out = {}
    for s in data.scenes:
        if not s.path.exists():
            raise FileNotFoundError(f"dataset file not found: {s.path}")
        out[s.scene_id] = file_sha256(s.path)
    return out


def _resolve(args) -> RunConfig:
    overrides = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        overrides[key] = value
    for item in getattr(args, "scene", None) or []:
        sid, sep, path = item.partition("=")
        if not sep or not sid or not path:
            raise ConfigurationError(f"--scene expects ID=PATH, got {item!r}")
        overrides[f"data.{sid}"] = str(Path(path).resolve())
    return load_run_config(args.config, overrides)


# commands ----------------------------------------------------------------------------

def cmd_ingest(args, argv) -> int:
    cfg = _resolve(args)
    out, manifest = _start(args, argv, cfg, _fingerprints(cfg.data))
    rows = []
    (out / "samples").mkdir(exist_ok=True)
    for sid, arrays in _load_scenes(cfg.data, cfg.train.model).items():
        arrays.save(out / "samples" / f"{sid}.npz")
        rows.append((sid, len(arrays), arrays.labeled))
    with open(out / "ingest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "samples", "labeled"])
        w.writerows(rows)
    _finish(out, manifest)
    print(out)
    return EXIT_OK


def _train_one(config: TrainConfig, samples: SampleArrays, out: Path, stem: str) -> Checkpoint:
    ckpt, history = train_run(config, samples)
    save_checkpoint(ckpt, out / f"{stem}.ckpt")
    write_loss_log(history, out / f"{stem}_loss.csv")
    return ckpt


def cmd_train(args, argv) -> int:
    cfg = _resolve(args)
    out, manifest = _start(args, argv, cfg, _fingerprints(cfg.data))
    scenes = _load_scenes(cfg.data, cfg.train.model, args.scenes.split(",") if args.scenes else None)
    samples = SampleArrays.concat(scenes.values())
    if args.holdout_eval:
        samples, held = holdout_split(samples, cfg.data.holdout, cfg.train.seed)
        held.save(out / "holdout.npz")
    if not samples.labeled:
        raise UnlabeledSplitError("training scenes contain unlabeled samples")
    ckpt = _train_one(cfg.train, samples, out, "model")
    if args.holdout_eval:
        report = evaluate_fold(ckpt, held)
        _write_report(report, out, "holdout")
    _finish(out, manifest)
    print(out)
    return EXIT_OK


def _write_report(report: EvalReport, out: Path, stem: str) -> None:
    report.write_csv(out / f"{stem}_eval.csv")
    report.write_samples_csv(out / f"{stem}_samples.csv")
    report.write_histogram_csv(out / f"{stem}_hist.csv")
    report.write_worst_json(out / f"{stem}_worst.json")


def write_fold_csv(rows: list[tuple[str, int, float, float]], path: Path) -> None:
    """Per-fold rows plus an ``average`` row (unweighted mean over scenes)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "n", "ade", "fde"])
        for sid, n, a, f in rows:
            w.writerow([sid, n, repr(a), repr(f)])
        w.writerow(["average", sum(r[1] for r in rows), repr(float(np.mean([r[2] for r in rows]))),
                    repr(float(np.mean([r[3] for r in rows])))])


def _cell(a: float, f: float) -> str:
    return f"{a:.3f} / {f:.3f}"


def write_table_csv(rows: list[tuple[str, int, float, float]], path: Path) -> None:
    """One "ADE / FDE" cell per scene plus the average."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([r[0] for r in rows] + ["average"])
        w.writerow([_cell(r[2], r[3]) for r in rows]
                   + [_cell(float(np.mean([r[2] for r in rows])), float(np.mean([r[3] for r in rows])))])


def cmd_xval(args, argv) -> int:
    cfg = _resolve(args)
    out, manifest = _start(args, argv, cfg, _fingerprints(cfg.data))
    scenes = _load_scenes(cfg.data, cfg.train.model)
    rows = []
    for train_ids, test_id in leave_one_out_folds(list(scenes)):
        log.info("fold %s: training on %s", test_id, ", ".join(train_ids))
        samples = SampleArrays.concat(scenes[s] for s in train_ids)
        ckpt = _train_one(cfg.train, samples, out, f"fold_{test_id}")
        report = evaluate_fold(ckpt, scenes[test_id])
        _write_report(report, out, f"fold_{test_id}")
        rows.append((test_id, report.n, report.ade, report.fde))
    write_fold_csv(rows, out / "folds.csv")
    write_table_csv(rows, out / "table.csv")
    _finish(out, manifest)
    print(out)
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _resolve(args)
    data = cfg.data
    out, manifest = _start(args, argv, RunConfig(data, ckpt.config), _fingerprints(data))
    scenes = _load_scenes(data, ckpt.spec, args.scenes.split(",") if args.scenes else None)
    samples = SampleArrays.concat(scenes.values())
    if not samples.labeled:
        raise UnlabeledSplitError("evaluation split is unlabeled (no ground-truth futures); refusing to score it")
    report = evaluate_fold(ckpt, samples)
    _write_report(report, out, "eval")
    _finish(out, manifest)
    print(out)
    return EXIT_OK


def cmd_bench(args, argv) -> int:
    models = {}
    for item in args.checkpoints or []:
        name, _, path = item.partition("=")
        models[name] = load_checkpoint(path)
    for fam in _split(args.models):
        if fam not in FAMILIES:
            raise ConfigurationError(f"unknown model family {fam!r}")
        if fam not in models:
            spec = ModelSpec(family=fam, kernel_size=args.ks or 5)
            models[fam] = (spec, init_params(spec, args.seed or 0))
    if not models:
        raise ConfigurationError("nothing to benchmark: pass --models or --checkpoints")
    out, manifest = _start(args, argv, None)
    rows = latency_benchmark(models, [int(b) for b in _split(args.batch)], args.repeats, args.warmup)
    write_timing_csv(rows, out / "timing.csv")
    _finish(out, manifest)
    print(out)
    return EXIT_OK


def read_fold_csv(path: Path) -> list[tuple[str, int, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"scene", "n", "ade", "fde"}:
        raise ConfigurationError(f"{path} is not a per-fold CSV (scene,n,ade,fde)")
    return [(r["scene"], int(r["n"]), float(r["ade"]), float(r["fde"])) for r in rows if r["scene"] != "average"]


def _per_sample_summary(run_dir: Path) -> tuple[int, float, float, float] | None:
    files = sorted(run_dir.glob("*_samples.csv"))
    if not files:
        return None
    values = []
    for f in files:
        with open(f, newline="") as fh:
            values.extend(float(r["ade"]) for r in csv.DictReader(fh))
    a = np.asarray(values)
    return len(a), float(a.mean()), float(a.std()), float(a.max())


def cmd_report(args, argv) -> int:
    inputs = [Path(p) for p in args.inputs]
    out, manifest = _start(args, argv, None)
    tables, dists = [], []
    for p in inputs:
        csv_path = p / "folds.csv" if p.is_dir() else p
        if not csv_path.exists():
            raise FileNotFoundError(f"report input not found: {csv_path}")
        rows = read_fold_csv(csv_path)
        name = p.name if p.is_dir() else p.stem
        tables.append((name, rows))
        summary = _per_sample_summary(csv_path.parent)
        if summary is not None:
            dists.append((name,) + summary)
    scenes = list(dict.fromkeys(s for _, rows in tables for s, *_ in rows))
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run"] + scenes + ["average_ade", "average_fde"])
        for name, rows in tables:
            by = {r[0]: r for r in rows}
            cells = [_cell(by[s][2], by[s][3]) if s in by else "" for s in scenes]
            w.writerow([name] + cells + [repr(float(np.mean([r[2] for r in rows]))),
                                         repr(float(np.mean([r[3] for r in rows])))])
    if dists:
        with open(out / "distribution.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "n", "mean_ade", "std_ade", "max_ade"])
            for name, n, m, s, mx in dists:
                w.writerow([name, n, repr(m), repr(s), repr(mx)])
    _finish(out, manifest)
    print(out)
    return EXIT_OK


# parser ------------------------------------------------------------------------------

def _split(text: str | None) -> list[str]:
    return [t.strip() for t in (text or "").split(",") if t.strip()]


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [data] [prep] [social] [model] [train]")
    p.add_argument("--scene", action="append", metavar="ID=PATH", help="add a track file (repeatable)")
    p.add_argument("--preset", choices=("eth_ucy", "trajnet"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--step", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--norm", choices=("abs", "t0", "tobs", "rel"))
    p.add_argument("--augment", help="comma list from rotate,mirror,noise")
    p.add_argument("--sigma", type=float, help="noise standard deviation (m)")
    p.add_argument("--model", choices=FAMILIES)
    p.add_argument("--ks", type=int, help="kernel size")
    p.add_argument("--positional-embedding", action="store_true", default=None)
    p.add_argument("--residual", action="store_true", default=None)
    p.add_argument("--transpose-conv", action="store_true", default=None)
    p.add_argument("--social", choices=("none", "square_grid", "circular_map", "angular_grid"))
    p.add_argument("--holdout", type=float)
    p.add_argument("--stride", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajconv", description=__doc__)
    parser.add_argument("--version", action="version", version=f"trajconv {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", help=f"output directory (default: ${RUN_ROOT_ENV}/<cmd>-<hash>-<time>)")
        return p

    p = command("ingest", "parse and window track files into cached samples")
    _add_run_flags(p)
    p = command("train", "train one model on the configured scenes")
    _add_run_flags(p)
    p.add_argument("--scenes", help="comma list of scene ids to train on (default: all)")
    p.add_argument("--holdout-eval", action="store_true", help="hold out data.holdout of the samples and score them")
    p = command("xval", "leave-one-scene-out cross-validation")
    _add_run_flags(p)
    p = command("eval", "score a checkpoint on labeled scenes")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", help="comma list of scene ids (default: all configured)")
    p = command("bench", "inference latency per element")
    p.add_argument("--models", default="conv2d,lstm,encdec")
    p.add_argument("--checkpoints", action="append", metavar="NAME=PATH")
    p.add_argument("--batch", default="1,32")
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--ks", type=int)
    p.add_argument("--seed", type=int)
    p = command("report", "merge per-fold CSVs into comparison tables")
    p.add_argument("inputs", nargs="+", help="xval run directories or folds.csv files")
    return parser


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "xval": cmd_xval, "eval": cmd_eval,
            "bench": cmd_bench, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv)
    except (NumericError, OptimizerError, FloatingPointError) as exc:
        print(f"trajconv: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, TrackParseError, UnlabeledSplitError, CheckpointError) as exc:
        print(f"trajconv: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigurationError, ValueError) as exc:
        print(f"trajconv: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
