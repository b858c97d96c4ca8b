"""Run configuration: JSON file + dotted-key overrides over documented defaults.

Every key that may appear in a config file is present in ``default_config()``;
anything else is rejected.  Precedence: defaults < file < overrides.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .attacks import ATTACK_KINDS, THREAT_KINDS, AttackBudget
from .errors import ConfigurationError
from .evaluation import DEFAULT_WARMUP, REFERENCE_LATENCY_SAMPLES
from .networks import ClassifierConfig, DiscriminatorConfig, GeneratorConfig
from .training import TrainConfig

WORKFLOWS = ("train", "attack", "eval", "bench", "purify")
TRAIN_MODES = ("lightpure", "single_step", "iterative", "classifier")
OUTPUT_ROOT_ENV = "ONESHOTPURE_OUTPUT_ROOT"


def _arch(cfg) -> dict:
    d = cfg.to_dict()
    d.pop("image_shape", None)
    return d


def default_config() -> dict:
    tc = TrainConfig()
    train = {k: v for k, v in tc.to_dict().items() if k not in ("generator", "discriminator", "classifier", "seed")}
    train["mode"] = "lightpure"
    budget = AttackBudget().to_dict()
    return {
        "seed": 0,
        "data": {
            "source": "synthetic",
            "seed": 0,
            "path": None,
            "split_file": None,
            "n": 2000,
            "test_n": 500,
            "classes": 2,
            "size": 32,
            "separability": 0.0,
            "noise": 0.03,
            "limit": None,
        },
        "train": train,
        "generator": _arch(GeneratorConfig()),
        "discriminator": _arch(DiscriminatorConfig()),
        "classifier": {k: v for k, v in _arch(ClassifierConfig()).items() if k != "widths"},
        "purify": {"noise_beta": None, "rescale_input": False, "t_star": 10},
        "attack": {"threat": "grayA", "kind": "pgd", "batch_size": 100, **budget},
        "eval": {"threats": ["black", "grayA", "grayB", "white"], "attacks": ["pgd"], "batch_size": 100,
                 "latency": True},
        "bench": {"n": REFERENCE_LATENCY_SAMPLES, "warmup": DEFAULT_WARMUP, "with_purifier": True},
        "checkpoints": {"classifier": None, "purifier": None, "shadow_classifier": None,
                        "surrogate_purifier": None, "surrogate_classifier": None},
    }


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, val in update.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {dotted!r}", key=dotted)
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigurationError(f"config key {dotted!r} must be an object", key=dotted)
            _merge(base[key], val, dotted + ".")
        else:
            base[key] = val


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key=value", key=text)
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip(), val


def _nest(key: str, val) -> dict:
    out: dict = {}
    cur = out
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = val
    return out


def resolve_config(path: str | Path | None = None, overrides: list[str] | dict | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file {path} not found", key="config") from None
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path} does not parse: {e}", key="config") from None
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a JSON object", key="config")
        _merge(cfg, data)
    items = overrides.items() if isinstance(overrides, dict) else [parse_override(o) for o in overrides or []]
    for key, val in items:
        _merge(cfg, _nest(key, val))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    def fail(key, msg):
        raise ConfigurationError(f"{key}: {msg}", key=key)

    if cfg["train"]["mode"] not in TRAIN_MODES:
        fail("train.mode", f"must be one of {TRAIN_MODES}")
    if cfg["attack"]["threat"] not in THREAT_KINDS:
        fail("attack.threat", f"must be one of {THREAT_KINDS}")
    if cfg["attack"]["kind"] not in ATTACK_KINDS:
        fail("attack.kind", f"must be one of {ATTACK_KINDS}")
    for t in cfg["eval"]["threats"]:
        if t not in THREAT_KINDS:
            fail("eval.threats", f"unknown threat {t!r}")
    for a in cfg["eval"]["attacks"]:
        if a not in ATTACK_KINDS:
            fail("eval.attacks", f"unknown attack {a!r}")
    if cfg["data"]["source"] not in ("synthetic", "cifar10", "imagedir"):
        fail("data.source", "must be synthetic, cifar10 or imagedir")
    if cfg["bench"]["n"] < 1:
        fail("bench.n", "must be >= 1")
    if len(cfg["train"]["betas"]) < 1:
        fail("train.betas", "needs at least one value")
    checks = [("generator", lambda: GeneratorConfig(**cfg["generator"])),
              ("discriminator", lambda: DiscriminatorConfig(**cfg["discriminator"])),
              ("classifier", lambda: ClassifierConfig(**cfg["classifier"])),
              ("train", lambda: train_config(cfg)),
              ("attack", lambda: budget(cfg))]
    for key, build in checks:
        try:
            build()
        except ConfigurationError:
            raise
        except (ValueError, TypeError) as e:
            fail(key, str(e))


def train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k != "mode"}
    return TrainConfig(seed=cfg["seed"], generator=GeneratorConfig(**cfg["generator"]),
                       discriminator=DiscriminatorConfig(**cfg["discriminator"]),
                       classifier=ClassifierConfig(**cfg["classifier"]), **t)


def budget(cfg: dict) -> AttackBudget:
    a = {k: v for k, v in cfg["attack"].items() if k not in ("threat", "kind", "batch_size")}
    return AttackBudget(**a)


def snapshot_text(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def write_snapshot(cfg: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(snapshot_text(cfg), encoding="utf-8")
    return path
