"""Run configuration: one JSON document, fully defaulted per mode."""

from __future__ import annotations

import copy
import hashlib
import json

from .feasibility import KinematicLimits
from .model import LossWeights

MODES = {
    "pedestrian": dict(t_hist=8, t_fut=12, dt=0.4, scale=1.0),
    "driving": dict(t_hist=4, t_fut=10, dt=0.5, scale=0.1),
}

DEFAULT_ARCH = dict(
    hidden=128,
    encoder=[256, 128, 64],
    disc_fc=[128, 128],
    gauss_components=1,
    gauss_channels=[4, 8, 8],
    gauss_fc=[64, 64],
    base_channels=[8, 16, 16],
    diagonal_cov=False,
)

DEFAULTS = dict(
    mode="driving",
    t_hist=None,
    t_fut=None,
    dt=None,
    max_agents=6,
    stride=1,
    rotate=True,
    scale=None,
    raster_size=64,
    raster_extent=40.0,
    arch=DEFAULT_ARCH,
    weights={},
    ablation=dict(context=True, clsl=True, vdm=True),
    optimizer=dict(lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=100.0),
    batch_size=32,
    iterations=200,
    epochs=None,
    checkpoint_every=0,
    seed=0,
    samples=20,
    train_data={},
    test_data={},
    frame_duration=None,
    long_horizon_rollout=False,
)

# fields that change the parameter layout or the meaning of the model's inputs
MODEL_KEYS = ("mode", "t_hist", "t_fut", "dt", "max_agents", "rotate", "scale", "raster_size",
              "raster_extent", "arch", "ablation")


class ConfigError(ValueError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class RunConfig:
    """Validated configuration.  Access values as attributes or via ``doc``."""

    def __init__(self, doc=None, **overrides):
        doc = _merge(doc or {}, overrides)
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        full = _merge(DEFAULTS, doc)
        mode = full["mode"]
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}, got {mode!r}")
        for k, v in MODES[mode].items():
            if full.get(k) is None:
                full[k] = v
        if full["frame_duration"] is None:
            full["frame_duration"] = full["dt"]
        if mode == "pedestrian":
            full["weights"]["feas"] = 0.0
        self.doc = full
        self._validate()

    def _validate(self):
        d = self.doc
        for k in ("t_hist", "t_fut", "max_agents", "batch_size", "stride"):
            if not isinstance(d[k], int) or d[k] < 1:
                raise ConfigError(f"{k} must be a positive integer")
        if d["t_hist"] < 2:
            raise ConfigError("t_hist must be at least 2 (baselines need a velocity)")
        if d["iterations"] < 0:
            raise ConfigError("iterations must be nonnegative")
        if d["dt"] <= 0 or d["scale"] <= 0:
            raise ConfigError("dt and scale must be positive")
        if d["raster_size"] % 8 or d["raster_size"] < 8:
            raise ConfigError("raster_size must be a positive multiple of 8")
        if d["samples"] < 1:
            raise ConfigError("samples must be >= 1")
        try:
            self.weights
        except (TypeError, ValueError) as err:
            raise ConfigError(f"invalid weights: {err}") from None

    def __getattr__(self, name):
        doc = self.__dict__.get("doc")
        if doc is not None and name in doc:
            return doc[name]
        raise AttributeError(name)

    @property
    def context(self):
        return bool(self.doc["ablation"].get("context", True))

    @property
    def weights(self):
        w = LossWeights(**self.doc["weights"])
        ab = self.doc["ablation"]
        if not ab.get("clsl", True):
            w.rc = w.kl = 0.0
        if not ab.get("vdm", True):
            w.vdm = w.vdm_enc = 0.0
        if self.doc["mode"] == "pedestrian":
            w.feas = 0.0
        return w

    @property
    def limits(self):
        w = self.weights
        return KinematicLimits(w.a_max, w.kappa_max, self.doc["dt"])

    def to_json(self):
        return json.dumps(self.doc, sort_keys=True, indent=2)

    def model_hash(self):
        sub = {k: self.doc[k] for k in MODEL_KEYS}
        blob = json.dumps(sub, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def load(cls, path, **overrides):
        with open(path) as fh:
            return cls(json.load(fh), **overrides)

    def replace(self, **overrides):
        return RunConfig(self.doc, **overrides)
