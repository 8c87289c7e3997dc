"""Run configuration: a flat, commented key=value format with dotted
namespaces. Resolution order is defaults < config file < command-line
overrides; the fully resolved mapping is written verbatim into the run
directory and hashed for resume checks.
"""

from __future__ import annotations

import hashlib

from . import losses as L
from .data import DatasetSpec
from .probe import ProbeConfig
from .trainer import MODES, TrainConfig
from .views import ViewPolicy


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "mode": "full",
    "seed": 0,
    "data.format": "idx",
    "data.root": "",
    "data.channels": 1,
    "data.image_size": 28,
    "data.fraction": 1.0,
    "data.split_seed": 0,
    "train.n_raw": 128,
    "train.epochs": 10,
    "train.lr_encoder": 0.1,
    "train.encoder_momentum": 0.9,
    "train.lr_generator": 5e-4,
    "train.lr_discriminator": 2e-4,
    "train.gen_period": 1,
    "train.ema_momentum": 0.999,
    "train.latent_dim": 64,
    "train.pretrain_steps": 2000,
    "train.checkpoint_every_epochs": 1,
    "train.grid_every_steps": 500,
    "loss.tau": 0.5,
    "loss.gan_variant": "hinge",
    "loss.lambda_cl": 1.0,
    "loss.lambda_gan": 1.0,
    "loss.reduction": "mean",
    "view.crop_lo": 0.5,
    "view.crop_hi": 1.0,
    "view.flip_prob": 0.5,
    "view.brightness": 0.4,
    "view.contrast_lo": 0.6,
    "view.contrast_hi": 1.4,
    "view.enable_crop": True,
    "view.enable_flip": True,
    "view.enable_brightness": True,
    "view.enable_contrast": True,
    "model.channels": "12,24,48",
    "model.proj_hidden": 96,
    "model.proj_dim": 64,
    "model.gen_channels": "32,16",
    "probe.epochs": 500,
    "probe.lr": 3e-4,
    "probe.batch_size": 256,
    "probe.label_fraction": 1.0,
    "probe.seed": 0,
    "probe.projector": False,
    "log.timing": True,
}


def _coerce(key: str, raw: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    ref = DEFAULTS[key]
    if isinstance(ref, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(ref, int) and not isinstance(ref, bool):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(ref, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def parse_config_file(path: str) -> dict[str, object]:
    values: dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, "
                                  f"got {stripped!r}")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            values[key] = _coerce(key, raw)
    return values


def resolve(file_path: str | None = None,
            overrides: dict[str, str] | None = None) -> dict[str, object]:
    """Fully resolved configuration: no defaults left implicit."""
    cfg = dict(DEFAULTS)
    if file_path:
        cfg.update(parse_config_file(file_path))
    for key, raw in (overrides or {}).items():
        cfg[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    if cfg["mode"] not in MODES:
        raise ConfigError(f"unknown mode {cfg['mode']!r}; expected one of {MODES}")
    return cfg


def render(cfg: dict[str, object]) -> str:
    """Canonical text form of a resolved config (sorted key=value lines)."""
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict[str, object]) -> str:
    return hashlib.sha256(render(cfg).encode("utf-8")).hexdigest()


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in str(text).split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") \
            from None


def train_config(cfg: dict[str, object]) -> TrainConfig:
    return TrainConfig(
        mode=cfg["mode"], n_raw=cfg["train.n_raw"], epochs=cfg["train.epochs"],
        lr_encoder=cfg["train.lr_encoder"],
        encoder_momentum=cfg["train.encoder_momentum"],
        lr_generator=cfg["train.lr_generator"],
        lr_discriminator=cfg["train.lr_discriminator"],
        gen_period=cfg["train.gen_period"],
        ema_momentum=cfg["train.ema_momentum"],
        latent_dim=cfg["train.latent_dim"],
        seed=cfg["seed"], pretrain_steps=cfg["train.pretrain_steps"],
        checkpoint_every_epochs=cfg["train.checkpoint_every_epochs"],
        grid_every_steps=cfg["train.grid_every_steps"],
        log_timing=cfg["log.timing"],
        loss=loss_config(cfg))


def loss_config(cfg: dict[str, object]) -> L.LossConfig:
    return L.LossConfig(tau=cfg["loss.tau"], gan_variant=cfg["loss.gan_variant"],
                        lambda_cl=cfg["loss.lambda_cl"],
                        lambda_gan=cfg["loss.lambda_gan"],
                        reduction=cfg["loss.reduction"])


def view_policy(cfg: dict[str, object]) -> ViewPolicy:
    return ViewPolicy(
        crop_scale=(cfg["view.crop_lo"], cfg["view.crop_hi"]),
        flip_prob=cfg["view.flip_prob"], brightness=cfg["view.brightness"],
        contrast=(cfg["view.contrast_lo"], cfg["view.contrast_hi"]),
        enable_crop=cfg["view.enable_crop"], enable_flip=cfg["view.enable_flip"],
        enable_brightness=cfg["view.enable_brightness"],
        enable_contrast=cfg["view.enable_contrast"])


def dataset_spec(cfg: dict[str, object], root: str | None = None,
                 with_labels: bool = False) -> DatasetSpec:
    return DatasetSpec(format=cfg["data.format"],
                       root=root if root is not None else cfg["data.root"],
                       channels=cfg["data.channels"],
                       image_size=cfg["data.image_size"],
                       with_labels=with_labels)


def probe_config(cfg: dict[str, object]) -> ProbeConfig:
    return ProbeConfig(epochs=cfg["probe.epochs"], lr=cfg["probe.lr"],
                       batch_size=cfg["probe.batch_size"],
                       label_fraction=cfg["probe.label_fraction"],
                       seed=cfg["probe.seed"],
                       probe_projector=cfg["probe.projector"])


def model_dims(cfg: dict[str, object]):
    return {
        "channels": _int_tuple(cfg["model.channels"]),
        "proj_hidden": cfg["model.proj_hidden"],
        "proj_dim": cfg["model.proj_dim"],
        "gen_channels": _int_tuple(cfg["model.gen_channels"]),
    }
