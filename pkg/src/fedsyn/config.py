"""TOML run configs and built-in presets.

``load_config`` accepts either a preset name (``desk-mnist``) or a path to
a TOML file. Desk presets trade widths and epoch counts for laptop-class
runtimes; ``paper-*`` presets carry the full-scale hyperparameters.
"""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .distillation import FedSynConfig
from .generator_stage import GenLossWeights
from .local_training import LocalTrainConfig

_FEDSYN_KEYS = {
    "epochs", "t_g", "t_s", "batch_size", "lr_s", "lr_g", "momentum_s",
    "rounds", "seed", "noise_dim", "kl_temperature", "bn_norm", "eval_every",
    "fresh_z", "width_scale",
}
_LOCAL_KEYS = {"epochs", "batch_size", "lr", "momentum", "loss_id", "seed"}


def _config_from_dict(d: dict) -> FedSynConfig:
    d = dict(d)
    local_d = d.pop("local", {})
    weights = GenLossWeights(
        lambda1=float(d.pop("lambda1", 1.0)),
        lambda2=float(d.pop("lambda2", 0.5)),
    )
    unknown = set(d) - _FEDSYN_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    unknown_local = set(local_d) - _LOCAL_KEYS
    if unknown_local:
        raise ValueError(f"unknown [local] keys: {sorted(unknown_local)}")
    return FedSynConfig(weights=weights, local=LocalTrainConfig(**local_d), **d)


def _desk_local(epochs: int) -> LocalTrainConfig:
    return LocalTrainConfig(epochs=epochs, batch_size=128, lr=0.01, momentum=0.9)


PRESETS: dict[str, FedSynConfig] = {
    # full-scale settings: 200 local epochs, 200 distillation epochs,
    # T_G=30, Adam 1e-3, lambda1=1, lambda2=0.5, SGD 0.01/0.9
    "paper-mnist": FedSynConfig(local=_desk_local(200)),
    "paper-fmnist": FedSynConfig(local=_desk_local(200)),
    "paper-cifar10": FedSynConfig(local=_desk_local(200)),
    # desk scale: halved widths, short local training, fewer generator
    # steps, distillation budget spread over more student steps per epoch
    "desk-mnist": FedSynConfig(
        epochs=50, t_g=20, t_s=10, batch_size=128, lr_s=0.02,
        width_scale=0.5, eval_every=5, local=_desk_local(20),
    ),
    "desk-fmnist": FedSynConfig(
        epochs=50, t_g=20, t_s=10, batch_size=128, lr_s=0.02,
        width_scale=0.5, eval_every=5, local=_desk_local(20),
    ),
    "desk-cifar10": FedSynConfig(
        epochs=60, t_g=20, t_s=10, batch_size=128, lr_s=0.02,
        width_scale=0.5, eval_every=10, local=_desk_local(10),
    ),
    # fast smoke preset for demos and CI plumbing tests
    "desk-synth": FedSynConfig(
        epochs=30, t_g=10, t_s=10, batch_size=64, lr_s=0.05,
        width_scale=0.25, eval_every=5, noise_dim=32,
        local=LocalTrainConfig(epochs=3, batch_size=64, lr=0.02, momentum=0.9),
    ),
}


def load_config(source: str | Path) -> FedSynConfig:
    """Resolve a preset name or parse a TOML file into a FedSynConfig."""
    name = str(source)
    if name in PRESETS:
        return replace(PRESETS[name])
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(
            f"{source!r} is neither a preset ({sorted(PRESETS)}) nor a config file"
        )
    with open(path, "rb") as f:
        raw = tomllib.load(f)
    return _config_from_dict(raw)


def load_matrix_spec(path: str | Path) -> "ExperimentSpec":
    """Parse a declarative matrix spec TOML file."""
    from .harness import ExperimentSpec

    with open(path, "rb") as f:
        raw = tomllib.load(f)
    cfg_field = raw.pop("config", {})
    if isinstance(cfg_field, str):
        config = load_config(cfg_field)
    else:
        config = _config_from_dict(cfg_field)
    return ExperimentSpec(config=config, **raw)
