"""INI-style run configuration (``.cfg``) with ``section.key=value`` overrides.

Sections and keys::

    [model]     in_channels, encoder_widths, convs_per_block, decoder_widths,
                denoiser_widths, fusion, input_size
    [data]      root, test_fraction
    [train]     mode, k, u, lambda, iterations, learning_rate, beta1, beta2, adam_eps,
                seed, episodes_per_step, batch_size, encoder_weights,
                checkpoint_dir, checkpoint_every, log_path, eval_every, augment
    [surrogate] pool_dir, sigma, copies
    [eval]      n_episodes, eval_seed, k

Relative paths are resolved against the current working directory. The environment
variable ``SEMIFSS_DATA_ROOT`` replaces ``data.root`` when set.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .network import ModelConfig
from .trainer import TrainConfig

DATA_ROOT_ENV = "SEMIFSS_DATA_ROOT"

# key -> (parser, TrainConfig/ModelConfig attribute)
_INT_TUPLE = "int_tuple"
_BOOL = "bool"
_TRUE, _FALSE = {"1", "true", "yes", "on"}, {"0", "false", "no", "off"}
SCHEMA = {
    "model.in_channels": (int, "in_channels"),
    "model.encoder_widths": (_INT_TUPLE, "encoder_widths"),
    "model.convs_per_block": (_INT_TUPLE, "convs_per_block"),
    "model.decoder_widths": (_INT_TUPLE, "decoder_widths"),
    "model.denoiser_widths": (_INT_TUPLE, "denoiser_widths"),
    "model.fusion": (str, "fusion"),
    "model.input_size": (_INT_TUPLE, "input_size"),
    "data.root": (str, "data_root"),
    "data.test_fraction": (float, "test_fraction"),
    "train.mode": (str, "mode"),
    "train.k": (int, "k"),
    "train.u": (int, "u"),
    "train.lambda": (float, "lam"),
    "train.iterations": (int, "iterations"),
    "train.learning_rate": (float, "learning_rate"),
    "train.beta1": (float, None),
    "train.beta2": (float, None),
    "train.adam_eps": (float, "adam_eps"),
    "train.seed": (int, "seed"),
    "train.episodes_per_step": (int, "episodes_per_step"),
    "train.batch_size": (int, "batch_size"),
    "train.encoder_weights": (str, "encoder_weights"),
    "train.checkpoint_dir": (str, "checkpoint_dir"),
    "train.checkpoint_every": (int, "checkpoint_every"),
    "train.log_path": (str, "log_path"),
    "train.eval_every": (int, "eval_every"),
    "train.augment": (_BOOL, "augment"),
    "surrogate.pool_dir": (str, "pool_dir"),
    "surrogate.sigma": (float, "sigma"),
    "surrogate.copies": (int, "copies"),
    "eval.n_episodes": (int, None),
    "eval.eval_seed": (int, None),
    "eval.k": (int, None),
}


@dataclass
class RunConfig:
    train: TrainConfig
    n_episodes: int = 500
    eval_seed: int = 0
    eval_k: int | None = None  # defaults to train.k


def preset_path(name: str) -> Path:
    """Resolve a shipped preset (``paper``/``tiny``, with or without ``.cfg``)."""
    stem = Path(name).name
    if not stem.endswith(".cfg"):
        stem += ".cfg"
    return Path(str(resources.files("semifss") / "presets" / stem))


def resolve_config_path(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    candidate = preset_path(p.name)
    if candidate.exists():
        return candidate
    raise FileNotFoundError(f"config file {path} not found")


def _parse(key, kind, raw):
    raw = raw.strip()
    try:
        if kind == _INT_TUPLE:
            return tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())
        if kind == _BOOL:
            if raw.lower() not in _TRUE | _FALSE:
                raise ValueError("expected true/false")
            return raw.lower() in _TRUE
        if kind is str:
            return raw or None
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from None


def _flatten(parser):
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            values[f"{section}.{key}"] = raw
    return values


def build_run_config(values: dict) -> RunConfig:
    """Validate ``{"section.key": str}`` into a RunConfig; errors name the key."""
    unknown = sorted(set(values) - set(SCHEMA))
    if unknown:
        raise ConfigError(unknown[0], "unknown configuration key")
    # an empty value means "unset": the default applies
    parsed = {k: _parse(k, SCHEMA[k][0], v) for k, v in values.items() if str(v).strip()}
    model_kwargs = {SCHEMA[k][1]: v for k, v in parsed.items() if k.startswith("model.")}
    try:
        model = ModelConfig(**model_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError("model", str(exc)) from None
    train_kwargs = {
        SCHEMA[k][1]: v for k, v in parsed.items()
        if SCHEMA[k][1] and not k.startswith("model.")
    }
    defaults = TrainConfig()
    train_kwargs["betas"] = (parsed.get("train.beta1", defaults.betas[0]), parsed.get("train.beta2", defaults.betas[1]))
    if os.environ.get(DATA_ROOT_ENV):
        train_kwargs["data_root"] = os.environ[DATA_ROOT_ENV]
    cfg = TrainConfig(model=model, **train_kwargs)
    try:
        cfg.validate()
    except ConfigError as exc:
        section = "model" if exc.key == "input_size" else ("surrogate" if exc.key in ("sigma", "copies") else "train")
        raise ConfigError(f"{section}.{exc.key}", str(exc).split(": ", 1)[1]) from None
    for key in ("eval.n_episodes", "eval.k"):
        if key in parsed and parsed[key] < 1:
            raise ConfigError(key, "must be >= 1")
    if not 0 <= cfg.betas[0] < 1 or not 0 <= cfg.betas[1] < 1:
        raise ConfigError("train.beta1" if not 0 <= cfg.betas[0] < 1 else "train.beta2", "must lie in [0, 1)")
    return RunConfig(
        train=cfg,
        n_episodes=parsed.get("eval.n_episodes", 500),
        eval_seed=parsed.get("eval.eval_seed", 0),
        eval_k=parsed.get("eval.k"),
    )


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a ``.cfg`` file (optional) and apply ``section.key`` overrides (they win)."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        resolved = resolve_config_path(path)
        try:
            parser.read(resolved)
        except configparser.Error as exc:
            raise ConfigError(str(resolved), f"malformed config: {exc}") from None
        values = _flatten(parser)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = str(value)
    return build_run_config(values)


def dump_run_config(rc: RunConfig) -> str:
    """Serialise a RunConfig back to ``.cfg`` text."""
    cfg = rc.train
    parser = configparser.ConfigParser(interpolation=None)
    for key, (kind, attr) in SCHEMA.items():
        section, name = key.split(".")
        if not parser.has_section(section):
            parser.add_section(section)
        if section == "model":
            value = getattr(cfg.model, attr)
        elif key == "train.beta1":
            value = cfg.betas[0]
        elif key == "train.beta2":
            value = cfg.betas[1]
        elif key == "eval.n_episodes":
            value = rc.n_episodes
        elif key == "eval.eval_seed":
            value = rc.eval_seed
        elif key == "eval.k":
            value = rc.eval_k
        else:
            value = getattr(cfg, attr)
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        parser.set(section, name, "" if value is None else str(value))
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()


def with_train(rc: RunConfig, **changes) -> RunConfig:
    return replace(rc, train=replace(rc.train, **changes))
