"""Flat ``section.key=value`` run configuration.

Values in a config file override the defaults below; command-line flags
override the file. Keys are typed by their default value.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .data import SieScheme, SynthConfig
from .errors import ConfigError, ParameterError
from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig

DEFAULT_CONFIG = """\
# Desk-scale defaults: a small from-scratch ViT on 1 CPU.

seed=0

synth.n_ids=8
synth.domains=2
synth.per_domain=10
synth.n_cameras=2
synth.image_h=64
synth.image_w=32
synth.noise=0.04
synth.jitter=1
synth.palette=0.6
synth.domain_mix=0.35
synth.ranges=false

model.patch=8
model.dim=64
model.layers=2
model.heads=4
model.k_local=3           # face, torso, lower body
model.lambda_sie=3.0
model.gem_enabled=false
model.gem_p_init=3.0
model.mlp_ratio=4

loss.margin=0.3
loss.lambda_t=0.0         # the summed triplet collapses a from-scratch desk model

sie.mode=domain           # domain | camera | domain+camera | domain+range

train.lr_init=0.01
train.warmup_epochs=5
train.total_epochs=30
train.momentum=0.9
train.weight_decay=0.0001
train.P=8
train.K_batch=4
train.pair_ranges=false
train.flip=true
train.pad_crop=true
train.pad=4
train.erase=true
train.erase_prob=0.5
train.checkpoint_every=0
train.triplet_from_epoch=0

eval.gallery=0
eval.probe=1
eval.n_gallery=10
eval.n_probe=100
eval.normalize=true
eval.both_directions=true

gradcheck.h=0.0001
gradcheck.tol=0.0001
gradcheck.coords=200
gradcheck.lambda_t=1.0    # the check always covers CE + triplet
gradcheck.floor=0.00001   # |a-n| / max(|a|,|n|,floor); zero-gradient coords see FD roundoff ~3e-10
"""


def _parse_lines(text, source):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected key=value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


DEFAULTS = _parse_lines(DEFAULT_CONFIG, "<defaults>")


def _kind(template):
    if template in ("true", "false"):
        return bool
    for kind in (int, float):
        try:
            kind(template)
            return kind
        except ValueError:
            pass
    return str


def _coerce(key, raw, template):
    kind = _kind(template)
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ConfigError(key, f"invalid value {raw!r}") from None


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name):
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    @property
    def seed(self):
        return self.values["seed"]

    def synth_config(self):
        s = self.section("synth")
        return SynthConfig(image_h=s["image_h"], image_w=s["image_w"], n_cameras=s["n_cameras"], noise=s["noise"],
                           jitter=s["jitter"], palette=s["palette"], domain_mix=s["domain_mix"], ranges=s["ranges"])

    def model_config(self, n_sie, n_classes, image_hw=None, channels=3):
        m = self.section("model")
        h, w = image_hw or (self["synth.image_h"], self["synth.image_w"])
        return _build(ModelConfig, "model", image_h=h, image_w=w, channels=channels, n_sie=n_sie,
                      n_classes=n_classes, **m)

    def loss_config(self):
        return _build(LossConfig, "loss", **self.section("loss"))

    def train_config(self):
        return _build(TrainConfig, "train", seed=self.seed, **self.section("train"))

    def sie_scheme(self, dataset):
        try:
            return SieScheme.for_dataset(self["sie.mode"], dataset)
        except ValueError as exc:
            raise ConfigError("sie.mode", str(exc)) from None


def _build(cls, section, **kwargs):
    try:
        return cls(**kwargs)
    except ParameterError as exc:
        msg = str(exc)
        key = msg.split(":", 1)[0] if ":" in msg else section
        raise ConfigError(key, msg.split(":", 1)[-1].strip()) from None


def load_config(path=None, overrides=None) -> RunConfig:
    values = dict(DEFAULTS)
    layers = []
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(str(path), f"cannot read config: {exc.strerror}") from None
        layers.append(_parse_lines(text, str(path)))
    if overrides:
        layers.append({k: str(v) for k, v in overrides.items() if v is not None})
    for layer in layers:
        for key, raw in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(key, "unknown configuration key")
            values[key] = raw
    typed = {k: _coerce(k, v, DEFAULTS[k]) for k, v in values.items()}
    _validate(typed)
    return RunConfig(typed)


def _validate(v):
    positive = ["synth.per_domain", "synth.image_h", "synth.image_w", "synth.n_cameras", "model.patch", "model.dim",
                "model.heads", "model.k_local", "train.P", "train.K_batch", "eval.n_gallery", "eval.n_probe",
                "gradcheck.coords"]
    for key in positive:
        if v[key] <= 0:
            raise ConfigError(key, f"must be positive, got {v[key]}")
    if v["synth.n_ids"] < 2:
        raise ConfigError("synth.n_ids", f"need at least 2 identities, got {v['synth.n_ids']}")
    if v["synth.domains"] < 2:
        raise ConfigError("synth.domains", f"need at least 2 domains, got {v['synth.domains']}")
    for key in ("gradcheck.h", "gradcheck.tol", "gradcheck.lambda_t"):
        if v[key] <= 0:
            raise ConfigError(key, f"must be positive, got {v[key]}")
