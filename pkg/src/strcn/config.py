"""Run configuration: flat ``section.key = value`` text, defaults, overrides and hashing.

Example file::

    # comments and blank lines are ignored
    variant = G
    magnify.alpha = 8
    mask.p = 30
    train.max_epochs = 50
    augment.alphas = 5,6,7,8,9,10,11,12,13,14

Resolution order is defaults, then the file, then command-line overrides.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Tuple

from .flow import FlowParams
from .magnify import MagnificationConfig
from .spatial import OUT_SIZE_A, OUT_SIZE_G, CropConstants
from .training import AugmentationSpec, TrainHyper

OUTPUT_DIR_ENV = "STRCN_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class DataSection:
    manifest: str = ""
    output_dir: str = ""
    fps: float = 100.0


@dataclass(frozen=True)
class CropSection:
    delta1: float = 0.4
    delta2: float = 0.6
    delta3: float = 2.2
    delta4: float = 1.8
    rows: int = 0  # 0 selects the variant default
    cols: int = 0
    lwm_n: int = 12


@dataclass(frozen=True)
class MaskSection:
    p: float = 30.0
    frames: int = 30


@dataclass(frozen=True)
class ModelSection:
    feature_maps: int = 32
    rcl_count: int = 4
    recurrences: int = 3


@dataclass(frozen=True)
class AugmentSection:
    enabled: bool = True
    alphas: Tuple[float, ...] = tuple(float(a) for a in range(5, 15))
    keeps: Tuple[int, ...] = (100, 90, 80, 70, 60)
    seed: int = 0


@dataclass(frozen=True)
class ProtocolSection:
    name: str = "loso"
    test_fraction: float = 0.05
    literal_lovo: bool = False


@dataclass(frozen=True)
class RunConfig:
    variant: str = "G"
    seed: int = 0
    data: DataSection = DataSection()
    crop: CropSection = CropSection()
    magnify: MagnificationConfig = MagnificationConfig()
    mask: MaskSection = MaskSection()
    flow: FlowParams = FlowParams()
    model: ModelSection = ModelSection()
    train: TrainHyper = TrainHyper()
    augment: AugmentSection = AugmentSection()
    protocol: ProtocolSection = ProtocolSection()

    # derived views -----------------------------------------------------------

    @property
    def out_size(self) -> Tuple[int, int]:
        default = OUT_SIZE_A if self.variant == "A" else OUT_SIZE_G
        return (self.crop.rows or default[0], self.crop.cols or default[1])

    @property
    def crop_constants(self) -> CropConstants:
        c = self.crop
        return CropConstants(c.delta1, c.delta2, c.delta3, c.delta4)

    @property
    def augmentation(self) -> AugmentationSpec:
        a = self.augment
        return AugmentationSpec(tuple(a.alphas), tuple(a.keeps), a.seed)

    def output_dir(self) -> Path:
        return Path(self.data.output_dir or os.environ.get(OUTPUT_DIR_ENV, "strcn-out"))

    # serialization -----------------------------------------------------------

    def to_flat(self) -> Dict[str, Any]:
        return flatten(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self.to_flat().items()))

    def hash(self, keys: Optional[Iterable[str]] = None) -> str:
        """SHA-256 prefix over the canonical text of the selected keys (or sections)."""
        flat = self.to_flat()
        if keys is not None:
            keys = list(keys)
            flat = {k: v for k, v in flat.items()
                    if any(k == s or k.startswith(s + ".") for s in keys)}
        text = "".join(f"{k}={format_value(v)}\n" for k, v in sorted(flat.items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        return apply_overrides(self, overrides)




def flatten(cfg: RunConfig) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if dataclasses.is_dataclass(val):
            for g in fields(val):
                out[f"{f.name}.{g.name}"] = getattr(val, g.name)
        else:
            out[f.name] = val
    return out


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: Any, current: Any) -> Any:
    if not isinstance(raw, str):
        raw_s = None
    else:
        raw_s = raw.strip()
    try:
        if isinstance(current, bool):
            if isinstance(raw, bool):
                return raw
            low = raw_s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(current, tuple):
            items = raw if isinstance(raw, (list, tuple)) else [s for s in raw_s.split(",") if s.strip()]
            elem = type(current[0]) if current else float
            return tuple(elem(float(x)) if elem is int else elem(x) for x in items)
        if isinstance(current, int):
            val = float(raw)
            if val != int(val):
                raise ValueError(f"not an integer: {raw!r}")
            return int(val)
        if isinstance(current, float):
            return float(raw)
        return str(raw_s if raw_s is not None else raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    top: Dict[str, Any] = {}
    sections: Dict[str, Dict[str, Any]] = {}
    flat = cfg.to_flat()
    for key, raw in overrides.items():
        key = key.strip()
        if key not in flat:
            raise ConfigError(f"{key}: unknown configuration key")
        val = _coerce(key, raw, flat[key])
        if key in ("variant", "protocol.name"):
            val = val.upper() if key == "variant" else val.lower()
        if "." in key:
            sec, name = key.split(".", 1)
            sections.setdefault(sec, {})[name] = val
        else:
            top[key] = val
    for sec, vals in sections.items():
        top[sec] = dataclasses.replace(getattr(cfg, sec), **vals)
    out = dataclasses.replace(cfg, **top)
    validate(out)
    return out


def validate(cfg: RunConfig) -> None:
    def need(cond: bool, key: str, msg: str) -> None:
        if not cond:
            raise ConfigError(f"{key}: {msg}")

    need(cfg.variant in ("A", "G"), "variant", f"must be A or G, got {cfg.variant!r}")
    need(0 < cfg.mask.p <= 100, "mask.p", "must lie in (0, 100]")
    need(cfg.mask.frames >= 2, "mask.frames", "must be >= 2")
    need(cfg.crop.delta3 > 0, "crop.delta3", "must be positive")
    need(cfg.crop.delta4 > 0, "crop.delta4", "must be positive")
    need(cfg.crop.rows >= 0 and cfg.crop.cols >= 0, "crop.rows", "sizes must be >= 0")
    need(cfg.crop.lwm_n >= 6, "crop.lwm_n", "must be >= 6")
    need(cfg.magnify.alpha >= 0, "magnify.alpha", "must be >= 0")
    need(cfg.magnify.wavelength > 0, "magnify.wavelength", "must be positive")
    need(0 < cfg.magnify.cutoff_lo < cfg.magnify.cutoff_hi < cfg.data.fps / 2, "magnify.cutoff_lo",
         "cutoffs must satisfy 0 < cutoff_lo < cutoff_hi < fps/2")
    need(cfg.magnify.levels >= 1, "magnify.levels", "must be >= 1")
    need(cfg.flow.sigma > 0, "flow.sigma", "must be positive")
    need(cfg.flow.smooth_sigma > 0, "flow.smooth_sigma", "must be positive")
    need(cfg.flow.smoothness >= 0, "flow.smoothness", "must be >= 0")
    need(cfg.flow.levels >= 1 and cfg.flow.warps >= 1, "flow.levels", "levels and warps must be >= 1")
    need(cfg.model.feature_maps >= 1, "model.feature_maps", "must be >= 1")
    need(0 <= cfg.model.rcl_count <= 4, "model.rcl_count", "must lie in [0, 4]")
    need(cfg.model.recurrences >= 0, "model.recurrences", "must be >= 0")
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    need(len(cfg.augment.alphas) > 0, "augment.alphas", "must not be empty")
    need(len(cfg.augment.keeps) > 0 and all(0 < q <= 100 for q in cfg.augment.keeps),
         "augment.keeps", "must be percentages in (0, 100]")
    need(cfg.protocol.name in ("loso", "lovo"), "protocol.name", "must be loso or lovo")
    need(0 < cfg.protocol.test_fraction <= 0.5, "protocol.test_fraction", "must lie in (0, 0.5]")
    need(cfg.data.fps > 0, "data.fps", "must be positive")


def parse_text(text: str, source: str = "<config>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def parse_assignments(items: Iterable[str]) -> Dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"{item}: overrides take the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then ``path`` (if given), then ``overrides``."""
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config: file not found: {path}")
        values.update(parse_text(path.read_text(), str(path)))
    if overrides:
        values.update(overrides)
    cfg = RunConfig()
    return apply_overrides(cfg, values) if values else (validate(cfg) or cfg)
