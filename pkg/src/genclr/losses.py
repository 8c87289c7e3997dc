"""Contrastive and adversarial objectives.

All losses run through the autodiff graph so both players of the min-max
game can differentiate them. Anchors exclude themselves from the candidate
set explicitly (the off-diagonal entries are gathered, never masked with
-inf), and every log uses log-sum-exp stabilization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class BatchIndexError(ValueError):
    """Malformed view bookkeeping (pairing or pseudo-label structure)."""


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.5
    gan_variant: str = "hinge"            # "hinge" | "logistic"
    lambda_cl: float = 1.0
    lambda_gan: float = 1.0
    reduction: str = "mean"               # over anchors; "sum" also supported

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.gan_variant not in ("hinge", "logistic"):
            raise ValueError(f"unknown GAN variant {self.gan_variant!r}")
        if self.lambda_cl < 0 or self.lambda_gan < 0:
            raise ValueError("objective weights must be >= 0")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


class BatchIndex:
    """Origin bookkeeping for a multiviewed batch.

    Views [0, n_gen) are generated, the rest real. `pair[i]` is the other
    view of the same raw sample; `latent_id[i]` tags generated views with
    the latent they came from (-1 for real views). P(i) is the same-latent
    set for generated anchors and {pair[i]} for real anchors.
    """

    def __init__(self, pair, latent_id, n_gen: int, strict: bool = False):
        self.pair = np.asarray(pair, dtype=np.intp)
        self.latent_id = np.asarray(latent_id, dtype=np.intp)
        self.n_gen = int(n_gen)
        self.validate(strict=strict)

    @property
    def n_views(self) -> int:
        return len(self.pair)

    @property
    def n_real(self) -> int:
        return self.n_views - self.n_gen

    def validate(self, strict: bool = False):
        n = self.n_views
        if self.latent_id.shape != (n,):
            raise BatchIndexError("pair and latent_id lengths differ")
        if not 0 <= self.n_gen <= n:
            raise BatchIndexError(f"n_gen={self.n_gen} outside [0, {n}]")
        idx = np.arange(n)
        if np.any(self.pair < 0) or np.any(self.pair >= n):
            raise BatchIndexError("pair index out of range")
        if np.any(self.pair == idx):
            raise BatchIndexError("a view cannot be paired with itself")
        if np.any(self.pair[self.pair] != idx):
            raise BatchIndexError("pairing is not an involution (j(j(i)) != i)")
        if np.any(self.latent_id[:self.n_gen] < 0):
            raise BatchIndexError("generated views must carry a latent id")
        if np.any(self.latent_id[self.n_gen:] != -1):
            raise BatchIndexError("real views must not carry a latent id")
        gen_ids = self.latent_id[:self.n_gen]
        for z in np.unique(gen_ids):
            members = np.flatnonzero(gen_ids == z)
            if len(members) < 2:
                raise BatchIndexError(
                    f"latent {z} labels a single view; every P(i) would be "
                    f"empty for it")
            if strict and len(members) != 4:
                raise BatchIndexError(
                    f"latent {z} labels {len(members)} views, expected 4")
            if strict and np.any(np.diff(members) != 1):
                raise BatchIndexError(f"latent {z} views are not contiguous")
        # j(i) of a generated view must stay inside its latent group
        for i in range(self.n_gen):
            if self.latent_id[self.pair[i]] != self.latent_id[i]:
                raise BatchIndexError(
                    f"view {i} is paired across latent groups")

    def positive_sets(self) -> list[np.ndarray]:
        sets = []
        for i in range(self.n_views):
            if i < self.n_gen:
                same = np.flatnonzero(self.latent_id == self.latent_id[i])
                sets.append(same[same != i])
            else:
                sets.append(np.array([self.pair[i]], dtype=np.intp))
        return sets

    # -- constructors -------------------------------------------------

    @staticmethod
    def two_view(n_raws: int) -> "BatchIndex":
        """Plain two-view batch of real samples: views (2k, 2k+1) pair up."""
        n = 2 * n_raws
        pair = np.arange(n)
        pair[0::2] += 1
        pair[1::2] -= 1
        return BatchIndex(pair, -np.ones(n, dtype=np.intp), n_gen=0)

    @staticmethod
    def paired_layout(n_latents: int, n_real_raws: int) -> "BatchIndex":
        """Trainer layout: latent k owns views [4k, 4k+3] (two views of the
        G raw then two views of the G_ema raw), real raws follow."""
        n_gen = 4 * n_latents
        n = n_gen + 2 * n_real_raws
        pair = np.arange(n)
        pair[0::2] += 1
        pair[1::2] -= 1
        latent_id = -np.ones(n, dtype=np.intp)
        latent_id[:n_gen] = np.repeat(np.arange(n_latents), 4)
        return BatchIndex(pair, latent_id, n_gen=n_gen, strict=True)


# ---------------------------------------------------------------------------
# contrastive losses
# ---------------------------------------------------------------------------

def _offdiag_indices(n: int) -> np.ndarray:
    """Flat indices of the off-diagonal entries of an n x n matrix, row by
    row: the explicit A(i) = I \\ {i} candidate sets."""
    if n not in _OFFDIAG_CACHE:
        cols = np.tile(np.arange(n), (n, 1))
        mask = ~np.eye(n, dtype=bool)
        offd = cols[mask].reshape(n, n - 1)
        rows = np.repeat(np.arange(n), n - 1).reshape(n, n - 1)
        _OFFDIAG_CACHE[n] = (rows * n + offd).reshape(-1)
    return _OFFDIAG_CACHE[n]


_OFFDIAG_CACHE: dict[int, np.ndarray] = {}


def _scaled_similarities(v: Tensor, tau: float) -> Tensor:
    sims = ad.matmul(v, ad.transpose(v, (1, 0)))
    return ad.multiply(sims, 1.0 / tau)


def _reduce(terms: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return ad.tensor_mean(terms)
    if reduction == "sum":
        return ad.tensor_sum(terms)
    raise ValueError(f"unknown reduction {reduction!r}")


def _check_pairing(pair: np.ndarray, n: int):
    pair = np.asarray(pair, dtype=np.intp)
    idx = np.arange(n)
    if pair.shape != (n,) or np.any(pair == idx) or np.any(pair < 0) \
            or np.any(pair >= n) or np.any(pair[pair] != idx):
        raise BatchIndexError("invalid two-view pairing")
    return pair


def nt_xent_terms(v: Tensor, pair, tau: float) -> Tensor:
    """Per-anchor NT-Xent terms: logsumexp over A(i) minus the positive."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = v.shape[0]
    pair = _check_pairing(pair, n)
    scaled = _scaled_similarities(v, tau)
    candidates = ad.take_flat(scaled, _offdiag_indices(n), (n, n - 1))
    lse = ad.logsumexp(candidates, axis=1)
    pos = ad.take_flat(scaled, np.arange(n) * n + pair, (n,))
    return ad.subtract(lse, pos)


def nt_xent(v: Tensor, pair, tau: float, reduction: str = "mean") -> Tensor:
    """Normalized temperature-scaled cross-entropy over a two-view batch."""
    return _reduce(nt_xent_terms(v, pair, tau), reduction)


def ppcl_terms(v: Tensor, index: BatchIndex, tau: float) -> Tensor:
    """Per-anchor partially pseudo-labeled terms.

    Generated anchors average over all same-latent views; real anchors use
    their single paired view; the candidate set A(i) is shared.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = index.n_views
    if v.shape[0] != n:
        raise BatchIndexError(f"{v.shape[0]} representations for an index "
                              f"of {n} views")
    index.validate()
    scaled = _scaled_similarities(v, tau)
    candidates = ad.take_flat(scaled, _offdiag_indices(n), (n, n - 1))
    lse = ad.logsumexp(candidates, axis=1)
    weights = np.zeros((n, n), dtype=v.dtype)
    for i, pset in enumerate(index.positive_sets()):
        weights[i, pset] = 1.0 / len(pset)
    pos_mean = ad.tensor_sum(ad.multiply(scaled, ad.constant(weights)), axis=1)
    return ad.subtract(lse, pos_mean)


def ppcl(v: Tensor, index: BatchIndex, tau: float,
         reduction: str = "mean") -> Tensor:
    return _reduce(ppcl_terms(v, index, tau), reduction)


def gen_real_loss(v: Tensor, index: BatchIndex, tau: float,
                  reduction: str = "mean") -> Tensor:
    """Two-view contrastive loss over the union of generated and real views
    (ignores pseudo-labels; positives are same-raw views only)."""
    return nt_xent(v, index.pair, tau, reduction)


# ---------------------------------------------------------------------------
# adversarial losses
# ---------------------------------------------------------------------------

def gan_losses(real_logits: Tensor, fake_logits: Tensor,
               variant: str = "hinge") -> tuple[Tensor, Tensor]:
    """Discriminator and generator objectives, (L_D, L_G)."""
    if variant == "hinge":
        l_d = ad.add(ad.tensor_mean(ad.relu(ad.subtract(1.0, real_logits))),
                     ad.tensor_mean(ad.relu(ad.add(1.0, fake_logits))))
        l_g = ad.negate(ad.tensor_mean(fake_logits))
    elif variant == "logistic":
        l_d = ad.add(ad.tensor_mean(ad.softplus(ad.negate(real_logits))),
                     ad.tensor_mean(ad.softplus(fake_logits)))
        l_g = ad.tensor_mean(ad.softplus(ad.negate(fake_logits)))
    else:
        raise ValueError(f"unknown GAN variant {variant!r}")
    return l_d, l_g
