"""The `verify` command's check suite: loss-oracle equivalence, closed
forms, gradient checks of the full min-max gradient path, EMA arithmetic
and batch-layout invariants. Each check returns (name, passed, detail)."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import oracle
from .nn import AffineGenerator2d, GeneratorPair


def _random_unit_rows(rng, n, d):
    raw = rng.standard_normal((n, d))
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def check_loss_oracle(n_batches: int = 36, tol: float = 1e-6):
    rng = np.random.default_rng(20260810)
    worst = 0.0
    count = 0
    for n_pairs in (2, 4, 8):
        for tau in (0.1, 0.5, 1.0):
            for _ in range(n_batches // 9 + 1):
                idx = L.BatchIndex.paired_layout(n_pairs // 2, n_pairs)
                v = _random_unit_rows(rng, idx.n_views, 8)
                for variant in ("ntxent", "genreal", "ppcl"):
                    if variant == "ppcl":
                        got = L.ppcl(ad.constant(v), idx, tau, "sum").item()
                    else:
                        got = L.nt_xent(ad.constant(v), idx.pair, tau,
                                        "sum").item()
                    ref = oracle.brute_force_loss(
                        v, tau, variant, pair=idx.pair,
                        latent_id=idx.latent_id, n_gen=idx.n_gen,
                        reduction="sum")
                    worst = max(worst, abs(got - ref))
                count += 1
    return ("loss-oracle equivalence", worst <= tol,
            f"{count} batches x 3 variants, max |diff| = {worst:.2e}")


def check_closed_forms(tol: float = 1e-6):
    v = ad.constant(np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=np.float64))
    nt = L.nt_xent(v, [1, 0, 3, 2], 1.0, "sum").item()
    expect_nt = 4 * math.log(1 + 2 / math.e)
    idx = L.BatchIndex([1, 0, 3, 2, 5, 4], [0, 0, 0, 0, -1, -1], n_gen=4)
    v2 = ad.constant(np.array([[1, 0]] * 4 + [[0, 1]] * 2, dtype=np.float64))
    pp = L.ppcl(v2, idx, 1.0, "sum").item()
    expect_pp = 4 * math.log(3 + 2 / math.e) + 2 * math.log(1 + 4 / math.e)
    ok = abs(nt - expect_nt) <= tol and abs(pp - expect_pp) <= tol
    return ("closed-form reproductions", ok,
            f"ntxent {nt:.6f} vs {expect_nt:.6f}; ppcl {pp:.6f} vs "
            f"{expect_pp:.6f}")


def check_ppcl_reduction(trials: int = 20, tol: float = 1e-9):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(trials):
        n_raws = int(rng.integers(2, 7))
        idx = L.BatchIndex.two_view(n_raws)
        v = _random_unit_rows(rng, idx.n_views, 6)
        a = L.ppcl(ad.constant(v), idx, 0.5, "sum").item()
        b = L.nt_xent(ad.constant(v), idx.pair, 0.5, "sum").item()
        worst = max(worst, abs(a - b))
    return ("PPCL reduces to NT-Xent on all-real batches", worst <= tol,
            f"{trials} batches, max |diff| = {worst:.2e}")


def check_primitive_gradients(tol: float = 1e-4):
    rng = np.random.default_rng(3)
    w = ad.parameter(rng.normal(size=(4, 4)), name="W")
    x = ad.constant(rng.normal(size=(4, 3)))
    rep = ad.grad_check(lambda: ad.tensor_sum(ad.tanh(ad.matmul(w, x))), [w],
                        tol=tol)
    return ("primitive gradient check (sum tanh(Wx))", rep.passed,
            f"max rel err {rep.max_rel_err:.2e}")


def check_minmax_gradients(tol: float = 1e-4):
    encoder, pair, _, family, z, real, params, index = \
        oracle.build_toy_image_setup(seed=1)
    theta = encoder.parameters()

    def fn():
        encoder.train(True)
        return oracle.toy_batch_loss(encoder, pair, family, z, real, params,
                                     index)
    rep_theta = ad.grad_check(fn, theta, tol=tol)
    rep_w = ad.grad_check(fn, pair.g.parameters(), tol=tol)
    ok = rep_theta.passed and rep_w.passed
    return ("end-to-end gradient checks (dL/dtheta, dL/dw through views)", ok,
            f"theta max rel {rep_theta.max_rel_err:.2e}, "
            f"w max rel {rep_w.max_rel_err:.2e}")


def check_ema(tol: float = 1e-12):
    rng = np.random.default_rng(5)
    g = AffineGenerator2d(rng)
    e = AffineGenerator2d(rng)
    worst = 0.0
    for m in (0.0, 0.5, 0.999, 1.0):
        pair = GeneratorPair(g, e, momentum=m)
        before = {k: p.data.copy() for k, p in e.named_parameters()}
        ws = dict(g.named_parameters())
        pair.momentum_update()
        for k, p in e.named_parameters():
            expect = m * before[k] + (1.0 - m) * ws[k].data
            worst = max(worst, float(np.max(np.abs(p.data - expect))))
    return ("EMA update entrywise exactness", worst <= tol,
            f"max |diff| = {worst:.2e} over m in {{0, 0.5, 0.999, 1}}")


def check_batch_layout():
    idx = L.BatchIndex.paired_layout(4, 8)
    sets = idx.positive_sets()
    ok = all(len(s) == 3 for s in sets[:idx.n_gen]) and \
        all(len(s) == 1 for s in sets[idx.n_gen:])
    return ("positive-set cardinalities (|P|=3 gen, |P|=1 real)", ok,
            f"{idx.n_views} views checked")


def check_stability():
    rng = np.random.default_rng(9)
    idx = L.BatchIndex.two_view(4)
    v = _random_unit_rows(rng, 8, 5)
    val = L.nt_xent(ad.constant(v), idx.pair, 1e-3, "sum").item()
    finite = np.isfinite(val)
    overflowed = False
    try:
        oracle.brute_force_loss(v, 1e-3, "ntxent", pair=idx.pair)
    except oracle.OracleDomainError:
        overflowed = True
    return ("log-sum-exp stability at tau=1e-3", finite and overflowed,
            f"stabilized value {val:.3f} finite; naive form overflowed")


ALL_CHECKS = (check_loss_oracle, check_closed_forms, check_ppcl_reduction,
              check_primitive_gradients, check_minmax_gradients, check_ema,
              check_batch_layout, check_stability)


def run_all(checks=ALL_CHECKS):
    results = []
    for check in checks:
        try:
            results.append(check())
        except Exception as exc:  # a crashed check is a failed check
            results.append((check.__name__, False, f"raised {exc!r}"))
    return results
