"""Run orchestration for the image pipeline: build models from a resolved
config, wire datasets, and drive the pretrain / train / eval / transfer /
grid flows used by both the CLI and the test suite."""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad
from . import config as C
from . import persist
from .data import ImageCollection, LabelStore, SplitSpec, load_dataset, subsample
from .nn import (ConvDiscriminator, ConvEncoder, ConvGenerator, GeneratorPair)
from .probe import EvalReport, linear_probe, transfer_probe
from .trainer import Trainer, mode_flags
from .views import ImageViewFamily, ViewPolicy


def build_image_models(cfg: dict, with_generator: bool):
    dims = C.model_dims(cfg)
    rng = np.random.default_rng(
        np.random.SeedSequence([int(cfg["seed"]), 0x6d0d]))
    encoder = ConvEncoder(rng, in_ch=cfg["data.channels"],
                          image_size=cfg["data.image_size"],
                          channels=dims["channels"],
                          proj_hidden=dims["proj_hidden"],
                          out_dim=dims["proj_dim"])
    pair = disc = None
    if with_generator:
        g = ConvGenerator(rng, latent_dim=cfg["train.latent_dim"],
                          out_ch=cfg["data.channels"],
                          channels=dims["gen_channels"])
        g_ema = ConvGenerator(rng, latent_dim=cfg["train.latent_dim"],
                              out_ch=cfg["data.channels"],
                              channels=dims["gen_channels"])
        pair = GeneratorPair(g, g_ema, momentum=cfg["train.ema_momentum"])
        pair.sync_ema()
        disc = ConvDiscriminator(rng, in_ch=cfg["data.channels"],
                                 image_size=cfg["data.image_size"],
                                 channels=dims["channels"])
    return encoder, pair, disc


def load_train_collection(cfg: dict, root: str | None = None) -> ImageCollection:
    spec = C.dataset_spec(cfg, root=root, with_labels=False)
    collection, _ = load_dataset(spec)
    if cfg["data.fraction"] < 1.0:
        collection, _ = subsample(collection, SplitSpec(
            fraction=cfg["data.fraction"], seed=cfg["data.split_seed"],
            role="train"))
    return collection


def load_labeled(cfg: dict, root: str) -> tuple[ImageCollection, LabelStore]:
    spec = C.dataset_spec(cfg, root=root, with_labels=True)
    collection, labels = load_dataset(spec)
    return collection, labels


def build_image_trainer(cfg: dict, collection: ImageCollection,
                        out_dir: str | None = None,
                        metrics: persist.MetricsLog | None = None) -> Trainer:
    tc = C.train_config(cfg)
    flags = mode_flags(tc.mode)
    encoder, pair, disc = build_image_models(cfg, flags.use_generator)
    family = ImageViewFamily(C.view_policy(cfg),
                             (cfg["data.image_size"], cfg["data.image_size"]))
    grid_fn = None
    if out_dir is not None and flags.use_generator:
        def grid_fn(trainer):
            export_pair_grid(trainer.pair, trainer.latents.latent_dim,
                             os.path.join(out_dir, f"grid_{trainer.step:07d}.png"),
                             pairs=8, seed=cfg["seed"])
    return Trainer(tc, encoder, pair, disc, family, collection.images,
                   metrics=metrics, out_dir=out_dir, grid_fn=grid_fn)


def export_pair_grid(pair: GeneratorPair, latent_dim: int, path: str,
                     pairs: int = 8, seed: int = 0) -> None:
    """One row per latent: the G sample next to its G_ema positive."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9a1d]))
    z = rng.standard_normal((pairs, latent_dim)).astype(
        pair.g.parameters()[0].dtype)
    with ad.no_grad():
        a = pair.g(ad.constant(z)).numpy()
        b = pair.g_ema(ad.constant(z)).numpy()
    rows = [[a[i], b[i]] for i in range(pairs)]
    persist.save_image_grid(path, rows)


def load_encoder_from_checkpoint(path: str):
    """Rebuild the encoder recorded in a train checkpoint."""
    tensors, meta = persist.load_checkpoint(path)
    cfg = meta.get("config")
    if cfg is None:
        raise persist.CheckpointError(f"{path}: no embedded config; cannot "
                                      f"rebuild the encoder")
    encoder, _, _ = build_image_models(cfg, with_generator=False)
    state = {name[len("encoder."):]: arr for name, arr in tensors.items()
             if name.startswith("encoder.")}
    encoder.load_state_dict(state)
    return encoder, cfg, meta


def load_pair_from_checkpoint(path: str):
    """Rebuild the generator pair (and discriminator) from a checkpoint."""
    tensors, meta = persist.load_checkpoint(path)
    cfg = meta.get("config")
    if cfg is None:
        raise persist.CheckpointError(f"{path}: no embedded config; cannot "
                                      f"rebuild the generator pair")
    _, pair, disc = build_image_models(cfg, with_generator=True)
    for prefix, module in (("generator", pair.g), ("generator_ema", pair.g_ema),
                           ("discriminator", disc)):
        state = {name[len(prefix) + 1:]: arr for name, arr in tensors.items()
                 if name.startswith(prefix + ".")}
        module.load_state_dict(state)
    return pair, disc, cfg, meta


def run_pretrain(cfg: dict, out_dir: str, steps: int | None = None) -> str:
    os.makedirs(out_dir, exist_ok=True)
    _write_resolved(cfg, out_dir)
    collection = load_train_collection(cfg)
    metrics = persist.MetricsLog(os.path.join(out_dir, "pretrain_metrics.jsonl"))
    trainer = build_image_trainer(cfg, collection, out_dir=out_dir,
                                  metrics=metrics)
    if trainer.pair is None:
        raise C.ConfigError(f"mode {cfg['mode']!r} has no generator to pretrain")
    trainer.pretrain_gan(steps if steps is not None
                         else cfg["train.pretrain_steps"])
    ckpt = os.path.join(out_dir, "pretrain.ckpt")
    trainer.save_checkpoint(ckpt, config_hash=C.config_hash(cfg),
                            extra_meta={"config": cfg, "phase": "pretrain"})
    export_pair_grid(trainer.pair, trainer.latents.latent_dim,
                     os.path.join(out_dir, "pretrain_samples.png"),
                     pairs=8, seed=cfg["seed"])
    metrics.close()
    return ckpt


def run_train(cfg: dict, out_dir: str, generator_ckpt: str | None = None,
              resume_ckpt: str | None = None,
              pretrain_inline: bool = False) -> str:
    os.makedirs(out_dir, exist_ok=True)
    _write_resolved(cfg, out_dir)
    collection = load_train_collection(cfg)
    metrics = persist.MetricsLog(os.path.join(out_dir, "metrics.jsonl"))
    trainer = build_image_trainer(cfg, collection, out_dir=out_dir,
                                  metrics=metrics)
    flags = mode_flags(cfg["mode"])
    chash = C.config_hash(cfg)

    if resume_ckpt is not None:
        trainer.load_checkpoint(resume_ckpt, expect_config_hash=chash)
    elif flags.use_generator:
        if generator_ckpt is not None:
            pair, disc, _, _ = load_pair_from_checkpoint(generator_ckpt)
            _adopt_pair(trainer, pair, disc)
        elif pretrain_inline:
            trainer.pretrain_gan(cfg["train.pretrain_steps"])
        else:
            raise C.ConfigError(
                f"mode {cfg['mode']!r} requires --generator CKPT or "
                f"--pretrain-inline")

    def on_epoch_end(tr: Trainer):
        if tr.epoch % cfg["train.checkpoint_every_epochs"] == 0 \
                or tr.epoch == tr.config.epochs:
            tr.save_checkpoint(os.path.join(out_dir, f"epoch_{tr.epoch:04d}.ckpt"),
                               config_hash=chash,
                               extra_meta={"config": cfg, "phase": "train"})

    trainer.train(on_epoch_end=on_epoch_end)
    final = os.path.join(out_dir, "final.ckpt")
    trainer.save_checkpoint(final, config_hash=chash,
                            extra_meta={"config": cfg, "phase": "train"})
    metrics.close()
    return final


def _adopt_pair(trainer: Trainer, pair: GeneratorPair, disc):
    for dst, src in ((trainer.pair.g, pair.g), (trainer.pair.g_ema, pair.g_ema),
                     (trainer.disc, disc)):
        dst.load_state_dict(src.state_dict())


def run_eval(cfg: dict, encoder_ckpt: str, train_root: str, test_root: str,
             transfer: bool = False) -> EvalReport:
    encoder, _, _ = _encoder_for_eval(cfg, encoder_ckpt)
    eval_cfg = dict(cfg)
    train_imgs, train_labels = load_labeled(eval_cfg, train_root)
    test_imgs, test_labels = load_labeled(eval_cfg, test_root)
    probe_cfg = C.probe_config(cfg)
    fn = transfer_probe if transfer else linear_probe
    return fn(encoder, train_imgs.images, train_labels,
              test_imgs.images, test_labels, probe_cfg)


def _encoder_for_eval(cfg: dict, path: str):
    encoder, ckpt_cfg, meta = load_encoder_from_checkpoint(path)
    return encoder, ckpt_cfg, meta


def run_grid(cfg: dict, generator_ckpt: str, out_path: str, pairs: int) -> str:
    pair, _, ckpt_cfg, _ = load_pair_from_checkpoint(generator_ckpt)
    export_pair_grid(pair, ckpt_cfg["train.latent_dim"], out_path,
                     pairs=pairs, seed=cfg["seed"])
    return out_path


def _write_resolved(cfg: dict, out_dir: str):
    path = os.path.join(out_dir, "config.resolved")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(C.render(cfg))
