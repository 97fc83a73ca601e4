"""Experiment configuration: INI sections with typed defaults.

Precedence, lowest first: built-in defaults, config file, ``CTTP_<SECTION>_<KEY>``
environment variables, command-line flags.  Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import copy
import os
from io import StringIO
from pathlib import Path

from . import __version__

DEFAULTS = {
    "dataset": {
        "seed": 0,
        "pretrain_per_tool": 200,
        "probe_train_per_tool": 100,
        "probe_test_per_tool": 50,
        "unseen_train_per_tool": 100,
        "unseen_test_per_tool": 50,
        "noise_std": 0.01,
    },
    "model": {
        "backbone_dim": 128,
    },
    "pretrain": {
        "mode": "cttp",
        "batch_size": 128,
        "epochs": 30,
        "lr": 3e-4,
        "tau": 0.2,
        "symmetric": True,
        "tied": True,
        "seed": 0,
    },
    "probes": {
        "class_epochs": 200,
        "pose_epochs": 300,
        "class_lr": 1e-2,
        "pose_lr": 1e-3,
        "scaling": "isotropic",
        "seed": 0,
    },
    "eval": {
        "train_sensor": "membrane",
        "tol_mm": 3.0,
        "tol_deg": 5.0,
    },
    "sweep": {
        "sizes": "8,32,128,256",
    },
}

ENV_PREFIX = "CTTP_"


class ConfigError(ValueError):
    pass


def _coerce(section, key, raw, default):
    if isinstance(default, bool):
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(str(raw).strip())
        if isinstance(default, float):
            return float(str(raw).strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {type(default).__name__}, got {raw!r}") from None
    return str(raw).strip()


def _apply(cfg, section, key, raw, origin):
    if section not in DEFAULTS:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    if key not in DEFAULTS[section]:
        known = ", ".join(sorted(DEFAULTS[section]))
        raise ConfigError(f"{origin}: unknown key {key!r} in [{section}] (known: {known})")
    cfg[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])


def load_config(path=None, overrides: dict | None = None, env=None) -> dict:
    """Resolve a config dict ``{section: {key: value}}``.

    ``overrides`` maps ``"section.key"`` to a value; ``None`` values are skipped
    so unset CLI flags fall through.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw, str(path))
    env = os.environ if env is None else env
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        _apply(cfg, section, key, raw, f"environment {name}")
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        _apply(cfg, section, key, value, "command line")
    return cfg


def to_ini(cfg: dict) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in cfg.items():
        parser[section] = {k: str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
                           for k, v in values.items()}
    buf = StringIO()
    parser.write(buf)
    return f"# cttp {__version__} resolved configuration\n" + buf.getvalue()


def write_resolved(cfg: dict, out_dir, name="config.ini") -> Path:
    path = Path(out_dir) / name
    path.write_text(to_ini(cfg))
    return path


def parse_sizes(text: str) -> list[int]:
    """Strict comma-separated positive integers ("128," is rejected)."""
    parts = str(text).split(",")
    sizes = []
    for p in parts:
        p = p.strip()
        if not p.isdigit():
            raise ConfigError(f"bad batch-size list {text!r}")
        sizes.append(int(p))
    bad = [s for s in sizes if s < 2]
    if bad:
        raise ConfigError(f"batch sizes must be >= 2, got {bad}")
    return sizes


# ----------------------------------------------------------------- typed views

def dataset_config(cfg):
    from .sensorsim import DatasetConfig
    return DatasetConfig(**cfg["dataset"])


def pretrain_config(cfg, mode=None):
    from .pretrain import PretrainConfig
    p = dict(cfg["pretrain"])
    if mode is not None:
        p["mode"] = mode
    try:
        return PretrainConfig(backbone_dim=cfg["model"]["backbone_dim"], **p)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def probe_config(cfg):
    from .evaluation import ProbeConfig
    try:
        return ProbeConfig(**cfg["probes"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def tolerances(cfg):
    e = cfg["eval"]
    return (e["tol_mm"], e["tol_mm"], e["tol_deg"])
