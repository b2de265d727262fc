"""Flat ``key = value`` run configuration covering data, training, loss and eval."""
from __future__ import annotations

from dataclasses import fields

from .data import SynthSpec
from .losses import LossWeights
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


# synthetic-data keys that would clash with training keys get a prefix
_SYNTH_RENAME = {"seed": "data_seed"}

EVAL_DEFAULTS = {
    "K": 5,
    "N": 1,
    "Q": 15,
    "n_episodes": 600,
    "eval_seed": 0,
    "n_bins": 32,
    "n_samples": 1000,
    "k_f": 15,
    "k_w": 5,
    "ablation_ks": (1, 2, 4, 8, 16, 32, 64),
    "known_class": 0,
    "image_index": 0,
    "channel": -1,
}


def _defaults():
    out = {}
    for f in fields(SynthSpec):
        out[_SYNTH_RENAME.get(f.name, f.name)] = getattr(SynthSpec(), f.name)
    cfg = TrainConfig()
    for f in fields(TrainConfig):
        if f.name != "loss_weights":
            out[f.name] = getattr(cfg, f.name)
    for f in fields(LossWeights):
        out[f.name] = getattr(LossWeights(), f.name)
    out.update(EVAL_DEFAULTS)
    return out


DEFAULTS = _defaults()


def _parse(key, text):
    default = DEFAULTS[key]
    text = str(text).strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, value) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_file(cls, path):
        cfg = cls()
        try:
            lines = open(path).read().splitlines()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        for n, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            cfg.set(k, v)
        return cfg

    def dumps(self):
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def dump(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    def synth_spec(self) -> SynthSpec:
        kw = {f.name: self.values[_SYNTH_RENAME.get(f.name, f.name)] for f in fields(SynthSpec)}
        return SynthSpec(**kw)

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(**{f.name: self.values[f.name] for f in fields(LossWeights)})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        kw = {f.name: self.values[f.name] for f in fields(TrainConfig) if f.name != "loss_weights"}
        cfg = TrainConfig(**kw, loss_weights=self.loss_weights())
        try:
            cfg.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def with_overrides(self, **kw):
        new = RunConfig()
        new.values = dict(self.values)
        for k, v in kw.items():
            new.set(k, v)
        return new

