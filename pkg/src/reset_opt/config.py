"""Experiment configuration: a YAML document with one block per concern.

Unknown keys are errors. ``dump`` writes the fully-defaulted config in a
canonical form that parses back to the same object, and ``config_hash`` is
the SHA-256 of that canonical text.
"""
from __future__ import annotations

import copy
import hashlib
from typing import Any, Optional

import yaml

SWEEP_AXES = ("r", "B", "tau", "checkpoint_offset", "epsilon", "section_mask")

# block -> key -> default
SCHEMA: dict = {
    "network": {"preset": "fcn", "hidden": 50, "batch_norm": True, "text": None},
    "data": {"source": "blobs", "classes": 10, "per_class": 300, "dim": 32,
             "separation": 4.0, "val_fraction": 1.0 / 3.0, "paths": None,
             "test_paths": None, "standardize": True, "limit": None},
    "noise": {"kind": "symmetric", "rate": 0.4, "flip_map": None},
    "reset": {"reset_probability": 0.0, "patience": 1000, "validation_interval": 20,
              "sections": ["former", "latter"], "perturbation_eps": 0.0,
              "selection_metric": "val_loss", "fixed_checkpoint_iteration": None,
              "arm_on_improvement": False},
    "optimizer": {"learning_rate": 1e-2, "momentum": 0.0, "batch_size": 16,
                  "total_iters": 10000, "loss": "ce", "lr_decay_step": None,
                  "lr_decay_factor": 0.1, "sampling": "replacement"},
    "diagnostics": {"interval": 20, "mode": "both", "window": 50, "grid_size": None,
                    "diffusion_samples": 256, "batch_norm_pair": False},
    "langevin": {"D": [1.0], "v": [0.0], "L": [1.0], "gammas": [0.5, 1.0, 2.5396, 5.0],
                 "dt": 1e-3, "n_trajectories": 100000, "bridge": True, "max_time": None},
    "sweep": {"axis": "r", "values": [0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0], "r_values": None},
}
TOP_LEVEL = {"seeds": None, "repetitions": 5, "seed_base": 0, "output_dir": None,
             "save_snapshots": True}


class ConfigError(ValueError):
    """Invalid configuration; message names the offending field (and line)."""


def _key_lines(text: str) -> dict:
    """Map dotted key paths to 1-based line numbers, for diagnostics."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    out = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[path] = k.start_mark.line + 1
                walk(v, path)
    walk(root, "")
    return out


def _fail(msg: str, path: str, lines: dict):
    line = lines.get(path)
    where = f" (line {line})" if line else ""
    raise ConfigError(f"{path}{where}: {msg}")


def defaults() -> dict:
    cfg = copy.deepcopy(TOP_LEVEL)
    cfg.update(copy.deepcopy(SCHEMA))
    return cfg


def _as_list(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _check_types(cfg: dict, lines: dict) -> None:
    def num(block, key, lo=None, integer=False, allow_none=False):
        v = cfg[block][key] if block else cfg[key]
        path = f"{block}.{key}" if block else key
        if v is None and allow_none:
            return
        ok = isinstance(v, int) if integer else isinstance(v, (int, float))
        if isinstance(v, bool) or not ok:
            _fail(f"expected {'an integer' if integer else 'a number'}, got {v!r}", path, lines)
        if lo is not None and v < lo:
            _fail(f"must be >= {lo}", path, lines)

    num(None, "repetitions", 1, integer=True)
    num(None, "seed_base", integer=True)
    if cfg["seeds"] is not None:
        if not isinstance(cfg["seeds"], list) or not cfg["seeds"] or not all(
                isinstance(s, int) and not isinstance(s, bool) for s in cfg["seeds"]):
            _fail("expected a nonempty list of integers", "seeds", lines)
        if len(set(cfg["seeds"])) != len(cfg["seeds"]):
            _fail("seeds must be distinct", "seeds", lines)
    if cfg["network"]["preset"] not in ("fcn", "small_cnn", "vcnn", "text"):
        _fail("expected one of fcn, small_cnn, vcnn, text", "network.preset", lines)
    if cfg["network"]["preset"] == "text" and not isinstance(cfg["network"]["text"], str):
        _fail("preset 'text' needs a network description string", "network.text", lines)
    num("network", "hidden", 1, integer=True)
    if cfg["data"]["source"] not in ("blobs", "cifar"):
        _fail("expected 'blobs' or 'cifar'", "data.source", lines)
    if cfg["data"]["source"] == "cifar" and not cfg["data"]["paths"]:
        _fail("cifar source needs paths", "data.paths", lines)
    for key, lo in (("classes", 2), ("per_class", 1), ("dim", 1)):
        num("data", key, lo, integer=True)
    num("data", "separation", 0)
    num("data", "limit", 1, integer=True, allow_none=True)
    if not 0 < cfg["data"]["val_fraction"] < 1:
        _fail("must lie strictly between 0 and 1", "data.val_fraction", lines)
    if cfg["noise"]["kind"] not in ("symmetric", "asymmetric"):
        _fail("expected 'symmetric' or 'asymmetric'", "noise.kind", lines)
    num("noise", "rate", 0)
    if cfg["noise"]["rate"] > 1:
        _fail("must be <= 1", "noise.rate", lines)
    num("reset", "reset_probability", 0)
    if cfg["reset"]["reset_probability"] > 1:
        _fail("must be <= 1", "reset.reset_probability", lines)
    num("reset", "patience", 1, integer=True)
    num("reset", "validation_interval", 1, integer=True)
    num("reset", "perturbation_eps", 0)
    num("reset", "fixed_checkpoint_iteration", 1, integer=True, allow_none=True)
    sections = cfg["reset"]["sections"]
    if not isinstance(sections, list) or set(sections) - {"former", "latter"}:
        _fail("expected a list drawn from former, latter", "reset.sections", lines)
    if cfg["reset"]["selection_metric"] not in ("val_loss", "val_accuracy"):
        _fail("expected 'val_loss' or 'val_accuracy'", "reset.selection_metric", lines)
    num("optimizer", "learning_rate", 0)
    num("optimizer", "momentum", 0)
    num("optimizer", "batch_size", 1, integer=True)
    num("optimizer", "total_iters", 1, integer=True)
    num("optimizer", "lr_decay_step", 1, integer=True, allow_none=True)
    if cfg["optimizer"]["loss"] not in ("ce", "mae"):
        _fail("expected 'ce' or 'mae'", "optimizer.loss", lines)
    if cfg["optimizer"]["sampling"] not in ("replacement", "shuffle"):
        _fail("expected 'replacement' or 'shuffle'", "optimizer.sampling", lines)
    num("diagnostics", "interval", 1, integer=True)
    num("diagnostics", "window", 1, integer=True)
    num("diagnostics", "grid_size", 2, integer=True, allow_none=True)
    num("diagnostics", "diffusion_samples", 0, integer=True)
    if cfg["diagnostics"]["mode"] not in ("train", "eval", "both"):
        _fail("expected 'train', 'eval' or 'both'", "diagnostics.mode", lines)
    lang = cfg["langevin"]
    for key in ("D", "v", "L", "gammas"):
        lang[key] = _as_list(lang[key])
        if not lang[key] or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in lang[key]):
            _fail("expected a number or a nonempty list of numbers", f"langevin.{key}", lines)
    if any(x <= 0 for x in lang["D"] + lang["L"]):
        _fail("D and L must be positive", "langevin.D", lines)
    if any(g < 0 for g in lang["gammas"]):
        _fail("reset rates must be >= 0", "langevin.gammas", lines)
    num("langevin", "dt", 0)
    num("langevin", "n_trajectories", 0, integer=True)
    num("langevin", "max_time", 0, allow_none=True)
    sweep = cfg["sweep"]
    if sweep["axis"] not in SWEEP_AXES:
        _fail(f"expected one of {', '.join(SWEEP_AXES)}", "sweep.axis", lines)
    if not isinstance(sweep["values"], list) or not sweep["values"]:
        _fail("expected a nonempty list", "sweep.values", lines)
    if sweep["r_values"] is not None and (not isinstance(sweep["r_values"], list) or not sweep["r_values"]):
        _fail("expected a nonempty list", "sweep.r_values", lines)


def parse(text: str) -> dict:
    """Parse and validate config text; returns the fully-defaulted dict."""
    lines = _key_lines(text)
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML syntax error: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    cfg = defaults()
    for key, value in raw.items():
        if key in SCHEMA:
            if value is None:
                continue
            if not isinstance(value, dict):
                _fail("expected a mapping", key, lines)
            for sub, v in value.items():
                if sub not in SCHEMA[key]:
                    _fail(f"unknown key (allowed: {', '.join(SCHEMA[key])})", f"{key}.{sub}", lines)
                cfg[key][sub] = v
        elif key in TOP_LEVEL:
            cfg[key] = value
        else:
            _fail(f"unknown key (allowed: {', '.join(list(TOP_LEVEL) + list(SCHEMA))})", str(key), lines)
    _check_types(cfg, lines)
    return cfg


def load(path) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text)


def dump(cfg: dict) -> str:
    """Canonical text form (sorted keys, block style)."""
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False, allow_unicode=True)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dump(cfg).encode("utf-8")).hexdigest()[:16]


def seeds_of(cfg: dict, seed_base: Optional[int] = None) -> list:
    """Effective run seeds: ``seed_base + s`` for each configured seed."""
    base = cfg["seed_base"] if seed_base is None else int(seed_base)
    seeds = cfg["seeds"] if cfg["seeds"] is not None else list(range(cfg["repetitions"]))
    return [base + s for s in seeds]


def with_value(cfg: dict, dotted: str, value: Any) -> dict:
    out = copy.deepcopy(cfg)
    block, key = dotted.split(".")
    out[block][key] = value
    return out
