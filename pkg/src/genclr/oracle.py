"""Independent brute-force loss references and the 2-D synthetic harness.

The loss references here are deliberately naive: explicit nested Python
loops over anchors and candidates, `math.exp` at 64-bit, no vectorization
and no log-sum-exp stabilization. They share no similarity-matrix code with
the losses module, so agreement between the two is evidence, not tautology.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class OracleDomainError(ArithmeticError):
    """The naive computation overflowed; this is a domain limit of the
    unstabilized form, reported rather than silently stabilized."""


def _as_positive_sets(n: int, pair, latent_id, n_gen: int) -> list[list[int]]:
    """Derive P(i) for every anchor from the raw index arrays."""
    pair = [int(j) for j in pair]
    latent_id = [int(z) for z in latent_id]
    sets = []
    for i in range(n):
        if i < n_gen:
            p = [a for a in range(n) if a != i and latent_id[a] == latent_id[i]]
        else:
            p = [pair[i]]
        sets.append(p)
    return sets


def brute_force_loss(v: np.ndarray, tau: float, variant: str,
                     pair=None, latent_id=None, n_gen: int = 0,
                     reduction: str = "sum") -> float:
    """Reference contrastive loss at 64-bit by explicit enumeration.

    variant: "ntxent" | "genreal" (both use the two-view pairing j(i)) or
    "ppcl" (pseudo-label positives for the first n_gen anchors). Batches are
    limited to 64 views; the O(n^2) loops are the point.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    if n > 64:
        raise ValueError(f"brute-force oracle is limited to 64 views, got {n}")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if variant not in ("ntxent", "genreal", "ppcl"):
        raise ValueError(f"unknown variant {variant!r}")
    if pair is None:
        raise ValueError("pairing j(i) is required")

    if variant == "ppcl":
        positives = _as_positive_sets(n, pair, latent_id, n_gen)
    else:
        positives = [[int(pair[i])] for i in range(n)]

    total = 0.0
    for i in range(n):
        denom = 0.0
        try:
            for a in range(n):
                if a == i:
                    continue
                denom += math.exp(float(np.dot(v[i], v[a])) / tau)
        except OverflowError as exc:
            raise OracleDomainError(
                f"naive exp overflow at anchor {i} with tau={tau}") from exc
        acc = 0.0
        for p in positives[i]:
            try:
                num = math.exp(float(np.dot(v[i], v[p])) / tau)
                acc += math.log(num / denom)
            except OverflowError as exc:
                raise OracleDomainError(
                    f"naive exp overflow at anchor {i} with tau={tau}") from exc
            except (ValueError, ZeroDivisionError) as exc:
                raise OracleDomainError(
                    f"naive exp underflow to log(0) at anchor {i} with "
                    f"tau={tau}") from exc
        total += -acc / len(positives[i])
    if reduction == "mean":
        return total / n
    if reduction == "sum":
        return total
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# 2-D synthetic harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian mixture on a circle: the desk-scale stand-in for images."""
    components: int = 4
    radius: float = 4.0
    std: float = 0.5
    per_component: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.components < 2:
            raise ValueError("need at least 2 mixture components")
        if self.std <= 0:
            raise ValueError("component std must be positive")


def make_mixture(spec: SyntheticSpec, salt: int = 0):
    """-> (points (n, 2) float64, labels (n,)). `salt` separates train and
    held-out draws of the same mixture."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, salt]))
    angles = 2.0 * np.pi * np.arange(spec.components) / spec.components
    means = spec.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    points, labels = [], []
    for c in range(spec.components):
        points.append(means[c] + spec.std
                      * rng.standard_normal((spec.per_component, 2)))
        labels.append(np.full(spec.per_component, c, dtype=np.int64))
    points = np.concatenate(points).astype(np.float64)
    labels = np.concatenate(labels)
    perm = rng.permutation(len(points))
    return points[perm], labels[perm]


@dataclass(frozen=True)
class JitterRotateParams:
    angle: float
    dx: float
    dy: float


class JitterRotateFamily:
    """Differentiable 2-D views: rotate about the origin by a small sampled
    angle, then add Gaussian jitter. Both maps are linear in the input, so
    gradients pass through to the generator untouched."""

    def __init__(self, max_angle: float = np.pi / 16, jitter_std: float = 0.15):
        self.max_angle = max_angle
        self.jitter_std = jitter_std

    def sample(self, rng: np.random.Generator, n: int):
        return [JitterRotateParams(
            angle=float(rng.uniform(-self.max_angle, self.max_angle)),
            dx=float(rng.normal(0.0, self.jitter_std)),
            dy=float(rng.normal(0.0, self.jitter_std))) for _ in range(n)]

    def apply(self, x, params):
        from . import autodiff as ad
        b = x.shape[0]
        if len(params) != b:
            raise ValueError(f"{len(params)} view params for a batch of {b}")
        rot = np.empty((b, 2, 2), dtype=x.dtype)
        shift = np.empty((b, 2), dtype=x.dtype)
        for i, p in enumerate(params):
            c, s = np.cos(p.angle), np.sin(p.angle)
            # row-vector convention: y = x @ R^T + d
            rot[i] = [[c, s], [-s, c]]
            shift[i] = (p.dx, p.dy)
        xb = ad.reshape(x, (b, 1, 2))
        rotated = ad.reshape(ad.matmul(xb, ad.constant(rot)), (b, 2))
        return ad.add(rotated, ad.constant(shift))


def build_synthetic_trainer(spec: SyntheticSpec, mode: str, seed: int,
                            n_raw: int = 64, epochs: int = 20,
                            lr_encoder: float = 0.2,
                            metrics=None):
    """Wire the 2-D models, views and mixture data into a Trainer."""
    from . import losses as L
    from .nn import (AffineGenerator2d, GeneratorPair, MlpDiscriminator2d,
                     MlpEncoder2d)
    from .trainer import TrainConfig, Trainer, mode_flags

    # ascent rate 2e-2: large enough that the hardness trend is measurable
    # on the tiny affine generator within a short run
    config = TrainConfig(mode=mode, n_raw=n_raw, epochs=epochs,
                         lr_encoder=lr_encoder, lr_generator=2e-2,
                         lr_discriminator=1e-3, latent_dim=2,
                         ema_momentum=0.995, pretrain_steps=300,
                         seed=seed, log_timing=False,
                         loss=L.LossConfig(tau=0.5))
    points, labels = make_mixture(spec, salt=0)
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    encoder = MlpEncoder2d(init_rng, hidden=32, out_dim=8)
    pair = disc = None
    if mode_flags(mode).use_generator:
        g = AffineGenerator2d(init_rng, latent_dim=2)
        g_ema = AffineGenerator2d(init_rng, latent_dim=2)
        pair = GeneratorPair(g, g_ema, momentum=config.ema_momentum)
        pair.sync_ema()
        disc = MlpDiscriminator2d(init_rng, hidden=32)
    family = JitterRotateFamily()
    trainer = Trainer(config, encoder, pair, disc, family, points,
                      metrics=metrics)
    return trainer, labels


def synthetic_2d_run(spec: SyntheticSpec, mode: str, seed: int = 0,
                     n_raw: int = 64, epochs: int = 20,
                     probe_epochs: int = 120):
    """Full pipeline on 2-D points: (optional) GAN pretraining, joint
    training, then a linear probe on a held-out draw of the mixture.

    Returns (trainer, EvalReport, per-step LossReports).
    """
    from .data import LabelStore
    from .probe import ProbeConfig, linear_probe
    from .trainer import mode_flags

    trainer, labels = build_synthetic_trainer(spec, mode, seed,
                                              n_raw=n_raw, epochs=epochs)
    if mode_flags(mode).use_generator:
        trainer.pretrain_gan(trainer.config.pretrain_steps)
    reports = trainer.train()
    test_points, test_labels = make_mixture(spec, salt=1)
    report = linear_probe(
        trainer.encoder, trainer.data, LabelStore(labels, spec.components),
        test_points, LabelStore(test_labels, spec.components),
        ProbeConfig(epochs=probe_epochs, seed=seed))
    return trainer, report, reports


def build_toy_image_setup(seed: int = 0, image_size: int = 8, n_latents: int = 2,
                          n_real: int = 2, dtype=np.float64):
    """Miniature end-to-end pipeline (few hundred parameters) for
    finite-difference checks of the full loss-through-views gradient path.

    Returns (encoder, pair, views family, latents z, real raws, view params,
    batch index).
    """
    from . import losses as L
    from .nn import ConvDiscriminator, ConvEncoder, ConvGenerator, GeneratorPair
    from .views import ImageViewFamily, ViewPolicy

    rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
    encoder = ConvEncoder(rng, in_ch=1, image_size=image_size,
                          channels=(2, 3, 4), proj_hidden=8, out_dim=4,
                          dtype=dtype)
    g = ConvGenerator(rng, latent_dim=4, out_ch=1, base=image_size // 4,
                      channels=(4, 3), dtype=dtype)
    g_ema = ConvGenerator(rng, latent_dim=4, out_ch=1, base=image_size // 4,
                          channels=(4, 3), dtype=dtype)
    pair = GeneratorPair(g, g_ema, momentum=0.99)
    pair.sync_ema()
    disc = ConvDiscriminator(rng, in_ch=1, image_size=image_size,
                             channels=(2, 3, 4), dtype=dtype)
    family = ImageViewFamily(ViewPolicy(), (image_size, image_size))
    z = rng.standard_normal((n_latents, 4))
    real = np.clip(rng.standard_normal((n_real, 1, image_size, image_size)),
                   -1.0, 1.0)
    index = L.BatchIndex.paired_layout(n_latents, n_real)
    params = family.sample(rng, index.n_views)
    return encoder, pair, disc, family, z, real, params, index


def toy_batch_loss(encoder, pair, family, z, real, params, index, tau=0.5,
                   variant="ppcl", reduction="mean"):
    """Differentiable loss of the toy pipeline: generate -> pair -> view ->
    encode -> contrastive loss, with the trainer's slot layout."""
    from . import autodiff as ad
    from . import losses as L

    x_g = pair.g(ad.constant(z))
    x_e = pair.g_ema(ad.constant(z))
    n_lat = z.shape[0]
    raw_slots = []
    for k in range(n_lat):
        raw_slots += [("g", k), ("g", k), ("e", k), ("e", k)]
    gen_order = np.array([k for kind, k in raw_slots if kind == "g"])
    ema_order = np.array([k for kind, k in raw_slots if kind == "e"])
    real_dup = np.repeat(np.arange(len(real)), 2)
    stacked = ad.concat([ad.index_rows(x_g, gen_order),
                         ad.index_rows(x_e, ema_order),
                         ad.constant(real[real_dup])], axis=0)
    # interleave: slots 4k,4k+1 from G; 4k+2,4k+3 from G_ema; then real
    order = np.empty(index.n_views, dtype=np.intp)
    gslots = np.arange(index.n_gen).reshape(-1, 4)[:, :2].reshape(-1)
    eslots = np.arange(index.n_gen).reshape(-1, 4)[:, 2:].reshape(-1)
    order[gslots] = np.arange(len(gslots))
    order[eslots] = len(gslots) + np.arange(len(eslots))
    order[index.n_gen:] = 2 * len(gslots) + np.arange(2 * len(real))
    views = family.apply(ad.index_rows(stacked, order), params)
    v = encoder(views)
    if variant == "ppcl":
        return L.ppcl(v, index, tau, reduction)
    return L.nt_xent(v, index.pair, tau, reduction)


def brute_force_gan_losses(real_logits, fake_logits, variant="hinge"):
    """Direct 64-bit evaluation of the GAN objectives."""
    r = [float(x) for x in np.asarray(real_logits, dtype=np.float64)]
    f = [float(x) for x in np.asarray(fake_logits, dtype=np.float64)]
    if variant == "hinge":
        l_d = sum(max(0.0, 1.0 - x) for x in r) / len(r) \
            + sum(max(0.0, 1.0 + x) for x in f) / len(f)
        l_g = -sum(f) / len(f)
    elif variant == "logistic":
        l_d = sum(math.log(1.0 + math.exp(-x)) for x in r) / len(r) \
            + sum(math.log(1.0 + math.exp(x)) for x in f) / len(f)
        l_g = sum(math.log(1.0 + math.exp(-x)) for x in f) / len(f)
    else:
        raise ValueError(f"unknown GAN variant {variant!r}")
    return l_d, l_g
