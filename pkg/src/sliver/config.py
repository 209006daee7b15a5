"""Experiment configuration: YAML file merged over commented defaults."""

from __future__ import annotations

import copy
import os

import yaml

from .simgen import ConfigError, GeneratorConfig
from .windowing import PARADIGMS, policy_from_name

OUTPUT_ROOT_ENV = "SLIVER_OUTPUT_ROOT"

DEFAULT_CONFIG_YAML = """\
# Output directory for every subcommand. null -> $SLIVER_OUTPUT_ROOT/run, else ./runs/run
output_dir: null

# Synthetic log. Any GeneratorConfig field may be set here.
generator:
  seed: 0
  num_users: 2000
  num_lives: 60
  num_anchors: 200
  horizon_ms: 43200000            # 12 h of requests
  drain_ms: 7200000               # log keeps running 2 h after the last request
  content_shift_period_ms: 7200000  # mean time between room content changes; null = stationary
  request_rate: 4.4               # requests per user per hour
  p_unimpressed: 0.05

# Labelling paradigms and their windows.
paradigms:
  one-hour: {window_ms: 3600000}
  five-minute: {window_ms: 300000}
  sliver: {window_ms: 30000, t_uni_ms: 0}

model:
  archs: [shared-bottom]          # any of shared-bottom, mmoe
  hash_size: 65536                # buckets per ID field (+1 out-of-vocabulary row)
  include_user_id: false
  loss_weights: [1.0, 1.0, 1.0]   # click, follow, like
  fusion_weights: [1.0, 1.0, 1.0]

optimizer:
  lr: 0.001
  beta1: 0.9
  beta2: 0.999
  eps: 1.0e-8
  batch_size: 512

eval:
  start_hour: 7                   # train on everything emitted before this hour
  hours: 5                        # then score five one-hour test windows
  seeds: [0, 1, 2, 3, 4]          # model-initialisation seeds averaged in reports
  baseline: one-hour

audit:
  windows_ms: [60000, 120000, 300000, 600000, 1800000]

rereco:
  enabled: true
  period_ms: 30000
  episodes: 10000
  candidates: 8
  seed: 0
  scorer: content                 # content (reads room state) or model (checkpoint from train)
  # generator settings for the serving simulation, applied over `generator`
  generator_overrides: {content_shift_period_ms: 30000, num_users: 500, horizon_ms: 3600000, drain_ms: 1800000}
"""


def default_config() -> dict:
    return yaml.safe_load(DEFAULT_CONFIG_YAML)


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base and path not in ("generator.", "paradigms.", "rereco.generator_overrides."):
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    cfg = default_config()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = yaml.safe_load(fh) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML ({e})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    generator_config(cfg)
    for name, p in cfg["paradigms"].items():
        if name not in PARADIGMS:
            raise ConfigError(f"unknown paradigm {name!r}")
        if not isinstance(p, dict) or int(p.get("window_ms", 0)) <= 0:
            raise ConfigError(f"paradigm {name!r} needs a positive window_ms")
    for a in cfg["model"]["archs"]:
        if a not in ("shared-bottom", "mmoe"):
            raise ConfigError(f"unknown architecture {a!r}")
    if int(cfg["model"]["hash_size"]) <= 0:
        raise ConfigError("model.hash_size must be positive")
    for key in ("loss_weights", "fusion_weights"):
        w = cfg["model"][key]
        if len(w) != 3 or any(float(x) < 0 for x in w):
            raise ConfigError(f"model.{key} needs three non-negative numbers")
    if int(cfg["optimizer"]["batch_size"]) <= 0 or float(cfg["optimizer"]["lr"]) < 0:
        raise ConfigError("optimizer.batch_size must be positive and lr non-negative")
    ev = cfg["eval"]
    if int(ev["hours"]) <= 0 or not ev["seeds"]:
        raise ConfigError("eval needs at least one hour and one seed")
    if ev["baseline"] not in cfg["paradigms"]:
        raise ConfigError(f"eval.baseline {ev['baseline']!r} is not a configured paradigm")
    rr = cfg["rereco"]
    if int(rr["period_ms"]) <= 0 or int(rr["candidates"]) <= 0 or int(rr["episodes"]) < 0:
        raise ConfigError("rereco.period_ms and candidates must be positive")
    if rr["scorer"] not in ("content", "model"):
        raise ConfigError("rereco.scorer must be 'content' or 'model'")
    generator_config(cfg, rereco=True)


def generator_config(cfg: dict, rereco: bool = False) -> GeneratorConfig:
    d = dict(cfg["generator"])
    if rereco:
        d.update(cfg["rereco"]["generator_overrides"] or {})
    try:
        return GeneratorConfig.from_dict(d).validate()
    except TypeError as e:
        raise ConfigError(str(e)) from None


def policy(cfg: dict, name: str):
    p = cfg["paradigms"][name]
    return policy_from_name(name, int(p["window_ms"]), int(p.get("t_uni_ms", 0)))


def output_dir(cfg: dict) -> str:
    if cfg.get("output_dir"):
        return cfg["output_dir"]
    root = os.environ.get(OUTPUT_ROOT_ENV) or "runs"
    return os.path.join(root, "run")


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
