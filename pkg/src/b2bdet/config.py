"""Run configuration: one plain-text document for both pipeline stages.

INI-style sections [srgan], [detector], [data], [eval]. Parsing is strict:
any unknown section or key aborts before work starts, and typed values are
validated on load.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .data import AnchorSet
from .detector import DEFAULT_ANCHORS, DetectorConfig
from .srgan import SrConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"   # "synthetic" or a dataset directory
    synthetic_n: int = 16
    synthetic_size: int = 256
    synthetic_classes: int = 3


@dataclass
class EvalConfig:
    conf_thres: float = 0.25
    iou_thres: float = 0.45
    sizes: tuple = (256,)
    score_iou: float = 0.5
    audit_floor: float = 0.5


@dataclass
class RunConfig:
    srgan: SrConfig = field(default_factory=SrConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def parse_anchor_string(s):
    """Nine anchors as 'w,h w,h w,h; w,h w,h w,h; w,h w,h w,h'."""
    groups = [g.strip() for g in s.split(";") if g.strip()]
    if len(groups) != 3:
        raise ConfigError(f"anchors need 3 ';'-separated scale groups, got {len(groups)}")
    out = []
    for g in groups:
        pairs = g.split()
        if len(pairs) != 3:
            raise ConfigError(f"each anchor group needs 3 'w,h' pairs, got {len(pairs)}")
        row = []
        for p in pairs:
            w, h = p.split(",")
            row.append((float(w), float(h)))
        out.append(row)
    return AnchorSet(np.asarray(out, np.float32))


def anchors_to_string(anchors):
    arr = anchors.as_array()
    return "; ".join(
        " ".join(f"{w:g},{h:g}" for w, h in scale) for scale in arr
    )


def _convert(raw, kind, key):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is tuple:  # comma-separated ints
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for key {key!r}") from None


_SCHEMA = {
    "srgan": {
        "b_blocks": int, "base_channels": int, "hr_size": int, "scale": int,
        "batch_size": int, "iterations": int, "lr": float, "beta1": float,
        "beta2": float, "adversarial_weight": float, "checkpoint_every": int,
    },
    "detector": {
        "n_classes": int, "input_size": int, "width_multiple": float,
        "depth_multiple": float, "anchors": str, "box_weight": float,
        "obj_weight": float, "cls_weight": float, "lr0": float, "lrf": float,
        "momentum": float, "weight_decay": float, "epochs": int,
        "warmup_epochs": int, "mosaic": float, "mixup": float, "patience": int,
        "batch_size": int, "multi_scale": bool, "eval_conf": float, "eval_iou": float,
    },
    "data": {
        "source": str, "synthetic_n": int, "synthetic_size": int,
        "synthetic_classes": int,
    },
    "eval": {
        "conf_thres": float, "iou_thres": float, "sizes": tuple,
        "score_iou": float, "audit_floor": float,
    },
}


def load_run_config(path=None, text=None):
    """Parse and validate a run configuration document."""
    cfg = RunConfig()
    if path is None and text is None:
        return cfg
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive
    if text is None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as f:
            text = f.read()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from None

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        schema = _SCHEMA[section]
        target = getattr(cfg, section if section != "eval" else "eval")
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            if section == "detector" and key == "anchors":
                cfg.detector.anchors = parse_anchor_string(raw)
            else:
                setattr(target, key, _convert(raw, schema[key], key))
    try:
        cfg.srgan.validate()
        cfg.detector.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if not (0.0 <= cfg.eval.conf_thres <= 1.0 and 0.0 <= cfg.eval.iou_thres <= 1.0):
        raise ConfigError("eval thresholds must lie in [0, 1]")
    for s in cfg.eval.sizes:
        if s % 32:
            raise ConfigError(f"eval size {s} not divisible by 32")
    return cfg


def dump_run_config(cfg):
    """Render a RunConfig back to its document form (round-trips load)."""
    lines = []
    sections = {
        "srgan": cfg.srgan, "detector": cfg.detector,
        "data": cfg.data, "eval": cfg.eval,
    }
    for sec, obj in sections.items():
        lines.append(f"[{sec}]")
        for key in _SCHEMA[sec]:
            if sec == "detector" and key == "anchors":
                lines.append(f"anchors = {anchors_to_string(obj.anchors)}")
                continue
            val = getattr(obj, key)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)
