"""Joint training loop: GAN pretraining, then per-iteration batch forming,
encoder descent, and periodic generator ascent with EMA and GAN
regularization. The ablation modes compose from three switches (generator
on/off, pseudo-label positives on/off, ascent on/off) plus the doubled-real
control.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import persist
from .autodiff import Tensor
from .nn import GeneratorPair, LatentSampler, Module
from .optim import SGD, Adam, cosine_lr

log = logging.getLogger("genclr.trainer")

MODES = ("baseline", "baseline-dd", "G", "G+Hard", "G+Pos", "full")


@dataclass(frozen=True)
class ModeFlags:
    use_generator: bool
    use_ppcl: bool
    use_ascent: bool
    double_real: bool


def mode_flags(mode: str) -> ModeFlags:
    table = {
        "baseline":    ModeFlags(False, False, False, False),
        "baseline-dd": ModeFlags(False, False, False, True),
        "G":           ModeFlags(True, False, False, False),
        "G+Hard":      ModeFlags(True, False, True, False),
        "G+Pos":       ModeFlags(True, True, False, False),
        "full":        ModeFlags(True, True, True, False),
    }
    if mode not in table:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return table[mode]


@dataclass
class TrainConfig:
    mode: str = "full"
    n_raw: int = 128               # raw samples per branch and step
    epochs: int = 10
    lr_encoder: float = 0.1
    encoder_momentum: float = 0.9
    lr_generator: float = 5e-4     # plain-SGD ascent rate
    lr_discriminator: float = 2e-4
    adam_betas: tuple = (0.5, 0.999)
    gen_period: int = 1            # generator update every n iterations
    ema_momentum: float = 0.999
    latent_dim: int = 64
    seed: int = 0
    pretrain_steps: int = 2000
    checkpoint_every_epochs: int = 1
    grid_every_steps: int = 500
    log_timing: bool = True
    loss: L.LossConfig = field(default_factory=L.LossConfig)

    def __post_init__(self):
        mode_flags(self.mode)
        if self.n_raw < 2 or self.n_raw % 2:
            raise ValueError(f"raw batch size must be even and >= 2, "
                             f"got {self.n_raw}")
        if self.gen_period < 1:
            raise ValueError(f"generator update period must be >= 1, "
                             f"got {self.gen_period}")
        for name in ("lr_encoder", "lr_generator", "lr_discriminator"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("EMA momentum must lie in [0, 1]")

    @property
    def flags(self) -> ModeFlags:
        return mode_flags(self.mode)


@dataclass
class MultiviewBatch:
    views: np.ndarray                 # (n_views, ...) detached view tensors
    index: L.BatchIndex
    latents: np.ndarray | None        # (N/2, latent_dim) for generation modes
    real_raws: np.ndarray             # raw real samples drawn this step
    view_params: list                 # one per view slot, in slot order


class NonFiniteLoss(RuntimeError):
    pass


def _snapshot_buffers(module: Module) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(buf, buf.copy()) for _, buf in module.named_buffers()]


def _restore_buffers(snapshot):
    for buf, saved in snapshot:
        buf[...] = saved


class Trainer:
    """Owns the models, optimizers and RNG streams of one training run.

    `view_family` supplies sample(rng, n) -> params and apply(x, params);
    `data` is the raw unlabeled sample array (images or 2-D points). The
    same loop drives both the image models and the synthetic 2-D harness.
    """

    def __init__(self, config: TrainConfig, encoder: Module,
                 pair: GeneratorPair | None, disc: Module | None,
                 view_family, data: np.ndarray,
                 metrics: persist.MetricsLog | None = None,
                 out_dir: str | None = None,
                 grid_fn=None):
        self.config = config
        self.flags = config.flags
        self.encoder = encoder
        self.pair = pair
        self.disc = disc
        self.view_family = view_family
        self.data = data
        self.metrics = metrics
        self.out_dir = out_dir
        self.grid_fn = grid_fn

        if self.flags.use_generator and (pair is None or disc is None):
            raise ValueError(f"mode {config.mode!r} needs a generator pair "
                             f"and discriminator")

        ss = np.random.SeedSequence(config.seed)
        init_ss, data_ss, latent_ss, view_ss = ss.spawn(4)
        self.rng_data = np.random.Generator(np.random.PCG64(data_ss))
        self.rng_view = np.random.Generator(np.random.PCG64(view_ss))
        rng_latent = np.random.Generator(np.random.PCG64(latent_ss))
        dtype = encoder.parameters()[0].dtype
        latent_dim = pair.g.latent_dim if pair is not None else config.latent_dim
        self.latents = LatentSampler(latent_dim, rng_latent, dtype)

        self.opt_encoder = SGD(encoder.parameters(), config.lr_encoder,
                               momentum=config.encoder_momentum)
        self.opt_generator = SGD(pair.g.parameters(), config.lr_generator) \
            if pair is not None else None
        self.opt_disc = Adam(disc.parameters(), config.lr_discriminator,
                             betas=config.adam_betas) if disc is not None else None

        self.step = 0
        self.epoch = 0
        self.best_loss = float("inf")
        self._epoch_perm = None
        self._cursor = 0
        self.incidents: list[str] = []
        # introspection hooks for the sign-discipline and isolation tests
        self.last_encoder_grads: list[np.ndarray] | None = None
        self.last_encoder_update: list[np.ndarray] | None = None
        self.last_ascent_grads: list[np.ndarray] | None = None
        self.last_w_update: list[np.ndarray] | None = None
        self.last_ascent_loss: float | None = None

    # -- bookkeeping ----------------------------------------------------

    @property
    def reals_per_step(self) -> int:
        return 2 * self.config.n_raw if self.flags.double_real else self.config.n_raw

    @property
    def steps_per_epoch(self) -> int:
        return len(self.data) // self.reals_per_step

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.steps_per_epoch

    def encoder_lr(self) -> float:
        return cosine_lr(self.config.lr_encoder, self.step, self.total_steps)

    def _next_real_indices(self, n: int) -> np.ndarray:
        # Epoch semantics: a fresh permutation at every epoch boundary,
        # trailing partial batches dropped.
        if self._epoch_perm is None or self._cursor + n > len(self._epoch_perm):
            self._epoch_perm = self.rng_data.permutation(len(self.data))
            self._cursor = 0
        out = self._epoch_perm[self._cursor:self._cursor + n]
        self._cursor += n
        return out

    # -- Algorithm step 0: GAN pretraining --------------------------------

    def pretrain_gan(self, steps: int) -> tuple[float, float]:
        """Alternating hinge D/G updates on unlabeled real data; on
        completion the EMA shadow is set equal to G exactly."""
        if self.pair is None or self.disc is None:
            raise ValueError("pretraining requires a generator and discriminator")
        if len(self.data) == 0:
            raise ValueError("pretraining requires a nonempty dataset")
        n = self.config.n_raw
        opt_g = Adam(self.pair.g.parameters(), self.config.lr_discriminator,
                     betas=self.config.adam_betas)
        variant = self.config.loss.gan_variant
        bad_streak = 0
        l_d = l_g = 0.0
        t0 = time.perf_counter()
        for t in range(1, steps + 1):
            real = self.data[self.rng_data.integers(0, len(self.data), size=n)]
            z = self.latents.sample(n)
            with ad.no_grad():
                fake = self.pair.g(ad.constant(z)).numpy()
            self.disc.set_requires_grad(True)
            self.disc.zero_grad()
            d_loss, _ = L.gan_losses(self.disc(ad.constant(real)),
                                     self.disc(ad.constant(fake)), variant)
            l_d = d_loss.item()
            if np.isfinite(l_d):
                d_loss.backward()
                self.opt_disc.step()
            # generator step through the freshly updated discriminator
            z2 = self.latents.sample(n)
            self.disc.set_requires_grad(False)
            self.pair.g.zero_grad()
            _, g_loss = L.gan_losses(ad.constant(np.zeros(1, dtype=real.dtype)),
                                     self.disc(self.pair.g(ad.constant(z2))),
                                     variant)
            l_g = g_loss.item()
            if np.isfinite(l_g):
                g_loss.backward()
                opt_g.step()
            self.disc.set_requires_grad(True)
            if np.isfinite(l_d) and np.isfinite(l_g):
                bad_streak = 0
            else:
                bad_streak += 1
                if bad_streak >= 100:
                    raise NonFiniteLoss(
                        f"pretraining diverged: non-finite GAN losses for "
                        f"{bad_streak} consecutive steps (last: "
                        f"L_D={l_d}, L_G={l_g} at step {t})")
            if self.metrics is not None:
                seconds = time.perf_counter() - t0 if self.config.log_timing else 0.0
                self.metrics.append({"phase": "pretrain", "step": t,
                                     "loss_gan_d": l_d, "loss_gan_g": l_g,
                                     "seconds": seconds})
                t0 = time.perf_counter()
        self.pair.sync_ema()
        return l_d, l_g

    # -- Algorithm step 1: batch forming ----------------------------------

    def form_batch(self) -> MultiviewBatch:
        n = self.config.n_raw
        real_idx = self._next_real_indices(self.reals_per_step)
        real_raws = self.data[real_idx]

        if self.flags.use_generator:
            z = self.latents.sample(n // 2)
            with ad.no_grad():
                x_g = self.pair.g(ad.constant(z)).numpy()
                x_e = self.pair.g_ema(ad.constant(z)).numpy()
            # raw order per latent: (G raw, G_ema raw)
            gen_raws = np.empty((n,) + x_g.shape[1:], dtype=x_g.dtype)
            gen_raws[0::2] = x_g
            gen_raws[1::2] = x_e
            raws = np.concatenate([gen_raws, real_raws], axis=0)
            index = L.BatchIndex.paired_layout(n // 2, len(real_raws))
        else:
            z = None
            raws = real_raws
            index = L.BatchIndex.two_view(len(real_raws))

        # slot r*2, r*2+1 hold the two views of raw r
        slot_to_raw = np.repeat(np.arange(len(raws)), 2)
        params = self.view_family.sample(self.rng_view, index.n_views)
        with ad.no_grad():
            views = self.view_family.apply(
                ad.constant(raws[slot_to_raw]), params).numpy()
        return MultiviewBatch(views=views, index=index, latents=z,
                              real_raws=real_raws, view_params=params)

    def _contrastive_loss(self, v: Tensor, index: L.BatchIndex) -> Tensor:
        cfg = self.config.loss
        if self.flags.use_ppcl:
            return L.ppcl(v, index, cfg.tau, cfg.reduction)
        return L.nt_xent(v, index.pair, cfg.tau, cfg.reduction)

    # -- Algorithm step 2: encoder descent --------------------------------

    def encoder_step(self, batch: MultiviewBatch) -> float:
        """One descent step on the mode's contrastive loss; a non-finite
        loss rejects the step and leaves all state untouched."""
        lr = self.encoder_lr()
        self.encoder.train(True)
        self.encoder.set_requires_grad(True)
        stats = _snapshot_buffers(self.encoder)
        self.encoder.zero_grad()
        v = self.encoder(ad.constant(batch.views))
        loss = self._contrastive_loss(v, batch.index)
        value = loss.item()
        if not np.isfinite(value):
            _restore_buffers(stats)
            self.incidents.append(f"step {self.step + 1}: non-finite encoder "
                                  f"loss {value}; step rejected")
            log.warning(self.incidents[-1])
            return value
        loss.backward()
        params = self.opt_encoder.params
        self.last_encoder_grads = [p.grad_array().copy() for p in params]
        before = [p.data.copy() for p in params]
        self.opt_encoder.step(lr=lr)
        self.last_encoder_update = [p.data - b for p, b in zip(params, before)]
        return value

    # -- Algorithm step 3: generator ascent + GAN refresh + EMA -----------

    def _ascent_gradients(self, batch: MultiviewBatch) -> list[np.ndarray] | None:
        """d(contrastive loss)/dw through the stored latents and view
        params, at the current (frozen) encoder."""
        n_gen = batch.index.n_gen
        g = self.pair.g
        g.zero_grad()
        z = ad.constant(batch.latents)
        x_g = g(z)
        # two view slots per G raw: slots 4k, 4k+1
        gen_dup = ad.index_rows(x_g, np.repeat(np.arange(x_g.shape[0]), 2))
        g_slots = np.arange(n_gen).reshape(-1, 4)[:, :2].reshape(-1)
        gen_views = self.view_family.apply(gen_dup,
                                           [batch.view_params[s] for s in g_slots])
        # G_ema and real views are constants from the stored batch
        other = np.setdiff1d(np.arange(batch.index.n_views), g_slots)
        stacked = ad.concat([gen_views, ad.constant(batch.views[other])], axis=0)
        order = np.empty(batch.index.n_views, dtype=np.intp)
        order[g_slots] = np.arange(len(g_slots))
        order[other] = len(g_slots) + np.arange(len(other))
        views = ad.index_rows(stacked, order)

        self.encoder.train(True)
        self.encoder.set_requires_grad(False)
        enc_stats = _snapshot_buffers(self.encoder)
        v = self.encoder(views)
        loss = self._contrastive_loss(v, batch.index)
        value = loss.item()
        self.last_ascent_loss = value
        _restore_buffers(enc_stats)
        if not np.isfinite(value):
            self.encoder.set_requires_grad(True)
            self.incidents.append(f"step {self.step + 1}: non-finite generator "
                                  f"ascent loss {value}; ascent skipped")
            log.warning(self.incidents[-1])
            return None
        loss.backward()
        self.encoder.set_requires_grad(True)
        return [p.grad_array().copy() for p in g.parameters()]

    def generator_step(self, batch: MultiviewBatch) -> tuple[float, float]:
        """Combined ascent + GAN generator update on w, one discriminator
        update, then the EMA update of the shadow. Returns (L_G, L_D)."""
        cfg = self.config
        variant = cfg.loss.gan_variant
        g = self.pair.g

        ascent = None
        self.last_ascent_loss = None
        if self.flags.use_ascent:
            ascent = self._ascent_gradients(batch)
        self.last_ascent_grads = ascent

        # GAN generator gradient at the current discriminator; the fake
        # images are kept (detached) for the discriminator update below
        z_gan = self.latents.sample(cfg.n_raw)
        self.disc.set_requires_grad(False)
        g.zero_grad()
        fake_t = g(ad.constant(z_gan))
        fake = fake_t.numpy()
        _, g_loss = L.gan_losses(
            ad.constant(np.zeros(1, dtype=batch.views.dtype)),
            self.disc(fake_t), variant)
        l_g = g_loss.item()
        gan_grads = None
        if np.isfinite(l_g):
            if cfg.loss.lambda_gan > 0:
                g_loss.backward()
                gan_grads = [p.grad_array().copy() for p in g.parameters()]
        else:
            self.incidents.append(f"step {self.step + 1}: non-finite GAN "
                                  f"generator loss {l_g}; term skipped")
            log.warning(self.incidents[-1])
        self.disc.set_requires_grad(True)

        # single plain-SGD application of the combined descent direction
        # lambda_gan * dL_G/dw - lambda_cl * dL_cl/dw
        params = self.opt_generator.params
        before = [p.data.copy() for p in params]
        for i, p in enumerate(params):
            d = np.zeros_like(p.data)
            if ascent is not None and cfg.loss.lambda_cl > 0:
                d -= cfg.loss.lambda_cl * ascent[i]
            if gan_grads is not None:
                d += cfg.loss.lambda_gan * gan_grads[i]
            p.grad = d
        self.opt_generator.step()
        self.last_w_update = [p.data - b for p, b in zip(params, before)]

        # discriminator hinge update on (real, freshly generated) images:
        # fresh latents z_gan, fakes shared with the generator term above
        self.disc.zero_grad()
        d_loss, _ = L.gan_losses(self.disc(ad.constant(batch.real_raws)),
                                 self.disc(ad.constant(fake)), variant)
        l_d = d_loss.item()
        if np.isfinite(l_d):
            d_loss.backward()
            self.opt_disc.step()
        else:
            self.incidents.append(f"step {self.step + 1}: non-finite GAN "
                                  f"discriminator loss {l_d}; update skipped")
            log.warning(self.incidents[-1])

        self.pair.momentum = cfg.ema_momentum
        self.pair.momentum_update()
        return l_g, l_d

    # -- full loop ---------------------------------------------------------

    def train_step(self) -> persist.LossReport:
        t0 = time.perf_counter()
        lr = self.encoder_lr()
        batch = self.form_batch()
        loss_cl = self.encoder_step(batch)
        l_g = l_d = 0.0
        self.step += 1
        if self.flags.use_generator and self.step % self.config.gen_period == 0:
            l_g, l_d = self.generator_step(batch)
        if np.isfinite(loss_cl) and loss_cl < self.best_loss:
            self.best_loss = loss_cl
        seconds = time.perf_counter() - t0 if self.config.log_timing else 0.0
        report = persist.LossReport(
            step=self.step, epoch=self.epoch,
            loss_ppcl=float(loss_cl) if np.isfinite(loss_cl) else 0.0,
            loss_gan_g=float(l_g) if np.isfinite(l_g) else 0.0,
            loss_gan_d=float(l_d) if np.isfinite(l_d) else 0.0,
            lr=float(lr), seconds=seconds)
        if self.metrics is not None:
            self.metrics.append(report)
        return report

    def train(self, on_epoch_end=None) -> list[persist.LossReport]:
        """Run the remaining epochs; checkpoints/grids via the callbacks."""
        reports = []
        while self.epoch < self.config.epochs:
            for _ in range(self.steps_per_epoch):
                reports.append(self.train_step())
                if self.grid_fn is not None and self.flags.use_generator \
                        and self.step % self.config.grid_every_steps == 0:
                    self.grid_fn(self)
            self.epoch += 1
            if on_epoch_end is not None:
                on_epoch_end(self)
        return reports

    # -- persistence --------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, module in self._modules():
            for name, p in module.named_parameters():
                out[f"{prefix}.{name}"] = p.data
            for name, b in module.named_buffers():
                out[f"{prefix}.{name}"] = b
        for prefix, opt in self._optimizers():
            for name, arr in opt.state_arrays().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def _modules(self):
        mods = [("encoder", self.encoder)]
        if self.pair is not None:
            mods += [("generator", self.pair.g), ("generator_ema", self.pair.g_ema)]
        if self.disc is not None:
            mods.append(("discriminator", self.disc))
        return mods

    def _optimizers(self):
        opts = [("opt_encoder", self.opt_encoder)]
        if self.opt_generator is not None:
            opts.append(("opt_generator", self.opt_generator))
        if self.opt_disc is not None:
            opts.append(("opt_disc", self.opt_disc))
        return opts

    def save_checkpoint(self, path: str, config_hash: str = "",
                        extra_meta: dict | None = None):
        meta = {
            "step": self.step, "epoch": self.epoch, "mode": self.config.mode,
            "best_loss": self.best_loss, "config_hash": config_hash,
            "rng": {"data": persist.rng_state_to_json(self.rng_data),
                    "latent": persist.rng_state_to_json(self.latents.rng),
                    "view": persist.rng_state_to_json(self.rng_view)},
        }
        if extra_meta:
            meta.update(extra_meta)
        persist.save_checkpoint(path, self.state_tensors(), meta)

    def load_checkpoint(self, path: str, expect_config_hash: str | None = None):
        tensors, meta = persist.load_checkpoint(path)
        if expect_config_hash is not None and meta.get("config_hash") \
                and meta["config_hash"] != expect_config_hash:
            raise persist.CheckpointError(
                f"config hash mismatch on resume: run has "
                f"{expect_config_hash}, checkpoint has {meta['config_hash']}")
        for prefix, module in self._modules():
            state = {name[len(prefix) + 1:]: arr for name, arr in tensors.items()
                     if name.startswith(prefix + ".")
                     and not name.startswith("opt_")}
            module.load_state_dict(state)
        for prefix, opt in self._optimizers():
            state = {name[len(prefix) + 1:]: arr for name, arr in tensors.items()
                     if name.startswith(prefix + ".")}
            if state:
                opt.load_state_arrays(state)
        self.step = int(meta["step"])
        self.epoch = int(meta["epoch"])
        self.best_loss = float(meta["best_loss"])
        self.rng_data = persist.rng_from_json(meta["rng"]["data"])
        self.latents.rng = persist.rng_from_json(meta["rng"]["latent"])
        self.rng_view = persist.rng_from_json(meta["rng"]["view"])
        self._epoch_perm = None
        self._cursor = 0
        return meta
