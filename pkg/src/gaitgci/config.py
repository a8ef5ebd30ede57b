"""Plain-text ``key = value`` run configs with sections model, dcdc, cil, data, train.

Every key has a default; unknown sections or keys are errors. ``train.preset``
selects a named bundle of defaults which explicit keys then override.
"""
from __future__ import annotations

import configparser
from dataclasses import fields

from .data_synth import DatasetSpec
from .errors import ConfigError
from .model import ModelConfig
from .train_eval import ABLATIONS, ARMS, TrainConfig

DEFAULTS = {
    "model": {
        "channels": (32, 64, 128, 128),
        "pool": (True, True, True, False),
        "strips": 4,
        "embed_dim": 64,
        "num_classes": 4,
        "slope": 0.01,
    },
    "dcdc": {"L": 8, "r": 4, "kernel": 3, "candidates": 4, "md_on": True, "dc_on": True, "lam": 0.1},
    "cil": {"M": 2, "cil_on": True, "gfa_on": True, "gca_on": True, "cf_dist": "normal"},
    "data": {
        **{f.name: f.default for f in fields(DatasetSpec)},
        "min_frames": 1,
    },
    "train": {
        "preset": "default",
        "P": 8,
        "Kp": 8,
        "iterations": 2000,
        "lr": 1e-4,
        "margin": 0.2,
        "frames": 30,
        "seed": 0,
        "checkpoint_every": 0,
        "wall_clock": False,
    },
}

# Desk-scale bundles. "overfit" fits 32 sequences of 4 identities with one
# full batch; "confounder" is the planted-shortcut experiment.
_DESK_MODEL = {"channels": (4, 8, 16, 16), "embed_dim": 16}
PRESETS = {
    "default": {},
    "overfit": {
        "model": _DESK_MODEL,
        "data": {"num_classes": 4, "train_per_class": 8, "test_per_class": 0},
        "train": {"P": 4, "Kp": 8, "iterations": 2000, "frames": 0},
    },
    "confounder": {
        "model": _DESK_MODEL,
        "data": {"num_classes": 4, "train_per_class": 16, "test_per_class": 8, "train_corr": 0.95, "test_corr": None},
        "train": {"P": 4, "Kp": 4, "iterations": 2000, "frames": 0},
    },
}

_BOOL = {"true": True, "1": True, "yes": True, "on": True, "false": False, "0": False, "no": False, "off": False}


def _parse(section, key, text, default):
    where = f"[{section}] {key}"
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in _BOOL:
                raise ValueError(f"expected a boolean, got {text!r}")
            return _BOOL[text.lower()]
        if isinstance(default, tuple) or key == "signal_box":
            if text.lower() in ("", "none", "auto"):
                return None if key == "signal_box" else ()
            items = [t.strip() for t in text.split(",") if t.strip()]
            if key == "pool":
                return tuple(_parse(section, key, t, True) for t in items)
            return tuple(int(t) for t in items)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return None if text.lower() in ("none", "auto") else float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"config key {where}: {exc}") from exc


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return "none" if v is None else str(v)


class RunConfig:
    """Resolved values for every section; ``text`` keeps the source verbatim."""

    def __init__(self, values: dict, text: str = ""):
        self.values = values
        self.text = text

    def __getitem__(self, section):
        return self.values[section]

    @classmethod
    def parse(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str  # keys such as L and M are case-sensitive
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        for section in cp.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section [{section}]; expected one of {sorted(DEFAULTS)}")
            for key in cp[section]:
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown config key [{section}] {key}")
        preset = cp.get("train", "preset", fallback="default").strip()
        if preset not in PRESETS:
            raise ConfigError(f"config key [train] preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values = {s: dict(d) for s, d in DEFAULTS.items()}
        for section, upd in PRESETS[preset].items():
            values[section].update(upd)
        for section in cp.sections():
            for key, raw in cp[section].items():
                values[section][key] = _parse(section, key, raw, DEFAULTS[section][key])
        for (section, key), v in (overrides or {}).items():
            values[section][key] = v
        return cls(values, text)

    @classmethod
    def from_file(cls, path, overrides=None):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text, overrides)

    @classmethod
    def preset(cls, name="default", overrides=None):
        return cls.parse(f"[train]\npreset = {name}\n", overrides)

    def resolved_text(self) -> str:
        lines = []
        for section, vals in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_format(v)}" for k, v in vals.items())
            lines.append("")
        return "\n".join(lines)

    def model_config(self) -> ModelConfig:
        m, d, c = self["model"], self["dcdc"], self["cil"]
        try:
            return ModelConfig(
                channels=tuple(m["channels"]), pool=tuple(m["pool"]), strips=m["strips"], embed_dim=m["embed_dim"],
                num_classes=m["num_classes"], M=c["M"], L=d["L"], r=d["r"], kernel=d["kernel"],
                candidates=d["candidates"], slope=m["slope"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self, ablation=None) -> TrainConfig:
        t, d, c = self["train"], self["dcdc"], self["cil"]
        sw = dict(cil_on=c["cil_on"], gfa_on=c["gfa_on"], gca_on=c["gca_on"], md_on=d["md_on"], dc_on=d["dc_on"])
        for item in ablation or ():
            if item in ARMS:
                sw = dict(ARMS[item])
            elif item in ABLATIONS:
                sw[ABLATIONS[item]] = False
            else:
                raise ConfigError(f"unknown ablation {item!r}; choose from {sorted(ABLATIONS) + sorted(ARMS)}")
        try:
            return TrainConfig(
                preset=t["preset"], P=t["P"], Kp=t["Kp"], iterations=t["iterations"], lr=t["lr"], lam=d["lam"],
                margin=t["margin"], frames=t["frames"], seed=t["seed"], cf_dist=c["cf_dist"],
                checkpoint_every=t["checkpoint_every"], wall_clock=t["wall_clock"], model=self.model_config(), **sw,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def dataset_spec(self) -> DatasetSpec:
        kw = {f.name: self["data"][f.name] for f in fields(DatasetSpec)}
        if kw["signal_box"] is not None and len(kw["signal_box"]) != 4:
            raise ConfigError("config key [data] signal_box: expected four integers top,left,bottom,right")
        spec = DatasetSpec(**kw)
        spec.validate()
        return spec
