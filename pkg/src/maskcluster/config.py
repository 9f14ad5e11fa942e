"""Fail-closed key=value config files with [section] headers.

Unknown sections or keys are hard errors with line numbers: a typo in a
hyperparameter name must never silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .data import DatasetSpec
from .encoder import EncoderConfig
from .losses import ClusterConfig, ReconConfig, default_layer_set
from .trainer import TrainerConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _int_tuple(s: str) -> tuple:
    return tuple(int(x) for x in s.split(",") if x.strip())


_SCHEMA = {
    "encoder": {
        "image_size": int, "patch_size": int, "embed_dim": int, "depth": int,
        "heads": int, "mlp_ratio": int, "image_channels": int,
    },
    "recon": {
        "hidden": int, "decode_channels": int, "layer_set": _int_tuple,
    },
    "cluster": {
        "n_clusters": int, "tau_student": float, "tau_teacher": float,
        "embed_dim": int, "hidden": int, "alpha1": float, "alpha2": float,
    },
    "trainer": {
        "steps": int, "batch_size": int, "peak_lr": float,
        "weight_decay": float, "clip_norm": float, "warmup_frac": float,
        "ema_start": float, "ema_end": float, "n_locals": int,
        "global_size": int, "local_size": int, "mask_ratio": float,
        "seed": int,
    },
    "data": {
        "source": str, "image_size": int, "n": int, "seed": int,
    },
}


@dataclass(frozen=True)
class ConfigBundle:
    encoder: EncoderConfig
    recon: ReconConfig
    cluster: ClusterConfig
    trainer: TrainerConfig
    data: DatasetSpec


def parse_config_text(text: str) -> dict:
    """-> {section: {key: parsed value}}; raises ConfigError with the
    offending line number."""
    values: dict = {name: {} for name in _SCHEMA}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got '{line}'", lineno)
        if section is None:
            raise ConfigError("key before any [section] header", lineno)
        key, _, val = (part.strip() for part in line.partition("="))
        if key not in _SCHEMA[section]:
            raise ConfigError(f"unknown key '{key}' in [{section}]", lineno)
        try:
            values[section][key] = _SCHEMA[section][key](val)
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {exc}", lineno) from None
    return values


def load_config(path: Optional[str] = None) -> ConfigBundle:
    values = {name: {} for name in _SCHEMA}
    if path is not None:
        with open(path) as fh:
            values = parse_config_text(fh.read())
    try:
        ecfg = EncoderConfig(**values["encoder"])
        tcfg = TrainerConfig(**values["trainer"])
        recon_kw = dict(values["recon"])
        recon_kw.setdefault("layer_set", default_layer_set(ecfg.depth))
        rcfg = ReconConfig(patch_size=ecfg.patch_size, **recon_kw)
        rcfg.validate(ecfg.depth)
        ccfg = ClusterConfig(**values["cluster"])
        dspec = DatasetSpec(**values["data"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if tcfg.global_size != ecfg.image_size:
        raise ConfigError(
            f"trainer.global_size {tcfg.global_size} must equal "
            f"encoder.image_size {ecfg.image_size}")
    return ConfigBundle(ecfg, rcfg, ccfg, tcfg, dspec)
