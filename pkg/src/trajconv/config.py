"""INI run configuration with sections [data], [prep], [social], [model], [train].

Example::

    [data]
    scenes = eth, hotel
    eth = raw/eth.txt
    eth.frame_step = 6
    hotel = raw/hotel.txt

    [prep]
    norm_mode = tobs
    augment = rotate, noise

    [model]
    family = conv2d
    kernel_size = 5

    [train]
    preset = eth_ucy

Relative scene paths resolve against the config file's directory. Overrides
use ``section.key`` names and always win over the file.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .data import ConfigurationError
from .models import ModelSpec
from .prep import NORM_MODES
from .social import SocialConfig
from .train import PRESETS, TrainConfig

SECTIONS = ("data", "prep", "social", "model", "train")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class SceneSource:
    scene_id: str
    path: Path
    frame_step: int | None = None
    labeled: bool | None = None  # None: decided by the file contents


@dataclass(frozen=True)
class DataConfig:
    scenes: tuple[SceneSource, ...] = ()
    stride: int = 1
    holdout: float = 0.1

    def to_dict(self) -> dict:
        return {"scenes": [{"scene_id": s.scene_id, "path": str(s.path), "frame_step": s.frame_step,
                            "labeled": s.labeled} for s in self.scenes],
                "stride": self.stride, "holdout": self.holdout}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"data": self.data.to_dict(), "train": self.train.to_dict()}


def _bool(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")


def _convert(text: str, default, key: str, optional_type=None):
    text = text.strip()
    if optional_type is not None and text.lower() in ("", "none", "auto"):
        return None
    kind = optional_type or type(default)
    try:
        if kind is bool:
            return _bool(text, key)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(json.loads(text))
        return text
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"{key}: cannot parse {text!r} ({exc})") from exc


_OPTIONAL = {"model.batchnorm": bool, "model.channels": tuple}


def _typed(cls, raw: Mapping[str, str], section: str, skip=()) -> dict:
    names = {f.name: f for f in dataclasses.fields(cls)}
    out = {}
    for key, text in raw.items():
        if key in skip:
            continue
        if key not in names:
            raise ConfigurationError(f"unknown key [{section}] {key}")
        f = names[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        out[key] = _convert(text, default, f"{section}.{key}", _OPTIONAL.get(f"{section}.{key}"))
    return out


def _split_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.replace(";", ",").split(",") if t.strip())


def _data_config(raw: Mapping[str, str], base: Path) -> DataConfig:
    raw = dict(raw)
    stride = int(raw.pop("stride", 1))
    holdout = float(raw.pop("holdout", 0.1))
    order = _split_list(raw.pop("scenes", ""))
    paths, steps, labels = {}, {}, {}
    for key, value in raw.items():
        sid, _, attr = key.partition(".")
        if not attr:
            paths[sid] = value.strip()
        elif attr == "frame_step":
            steps[sid] = int(value)
        elif attr == "labeled":
            labels[sid] = _bool(value, f"data.{key}")
        else:
            raise ConfigurationError(f"unknown key [data] {key}")
    for sid in list(steps) + list(labels):
        if sid not in paths:
            raise ConfigurationError(f"[data] sets attributes for scene {sid!r} without a path")
    missing = [s for s in order if s not in paths]
    if missing:
        raise ConfigurationError(f"[data] scenes lists {missing} without paths")
    ids = list(order) + [s for s in paths if s not in order]
    scenes = []
    for sid in ids:
        p = Path(paths[sid]).expanduser()
        scenes.append(SceneSource(sid, p if p.is_absolute() else base / p, steps.get(sid), labels.get(sid)))
    return DataConfig(tuple(scenes), stride, holdout)


def build_run_config(sections: Mapping[str, Mapping[str, str]], base: Path | None = None) -> RunConfig:
    unknown = set(sections) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
    base = base or Path.cwd()
    data = _data_config(sections.get("data", {}), base)

    prep = dict(sections.get("prep", {}))
    norm = prep.pop("norm_mode", "tobs").strip()
    if norm not in NORM_MODES:
        raise ConfigurationError(f"prep.norm_mode must be one of {NORM_MODES}, got {norm!r}")
    augment = _split_list(prep.pop("augment", ""))
    sigma = prep.pop("noise_sigma", None)
    if prep:
        raise ConfigurationError(f"unknown [prep] keys {sorted(prep)}")

    social = SocialConfig(**_typed(SocialConfig, sections.get("social", {}), "social"))
    model_kw = _typed(ModelSpec, sections.get("model", {}), "model", skip=("social",))
    if model_kw.get("channels") is not None:
        model_kw["channels"] = tuple(tuple(c) for c in model_kw["channels"])
    model = ModelSpec(social=social, **model_kw)
    model.validate()

    tr = dict(sections.get("train", {}))
    preset = tr.pop("preset", "eth_ucy").strip()
    if preset not in PRESETS:
        raise ConfigurationError(f"train.preset must be one of {sorted(PRESETS)}, got {preset!r}")
    tr_kw = _typed(TrainConfig, tr, "train", skip=("model", "augment", "norm_mode", "noise_sigma"))
    train = TrainConfig.from_preset(preset, norm_mode=norm, augment=augment, model=model,
                                    noise_sigma=None if sigma is None else float(sigma), **tr_kw)
    try:
        train.augment_config()
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    return RunConfig(data, train)


def read_sections(path: str | Path | None) -> dict[str, dict[str, str]]:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep scene-id case
    cp.read(path, encoding="utf-8")
    return {s: dict(cp.items(s)) for s in cp.sections()}


def load_run_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Read ``path`` (optional) and apply ``section.key`` overrides on top."""
    sections = read_sections(path)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigurationError(f"override {dotted!r} must look like section.key")
        sections.setdefault(section, {})[key] = str(value)
    base = Path(path).resolve().parent if path is not None else Path.cwd()
    return build_run_config(sections, base)
