"""Representation-quality protocols: linear classification on a frozen
encoder, and transfer of a frozen encoder to a different labeled dataset.

The probe trains one linear map from backbone features (pre-projector) to
class logits with cross-entropy; the encoder itself is asserted frozen via
parameter checksums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import LabelStore, subsample_indices, SplitSpec
from .optim import Adam


class ProbeError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 500
    optimizer: str = "adam"
    lr: float = 3e-4
    batch_size: int = 256
    label_fraction: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    probe_projector: bool = False    # probe projector output instead of backbone

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("probe epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("probe learning rate must be positive")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label fraction must lie in (0, 1]")


@dataclass
class EvalReport:
    top1: float
    per_class: list[float]
    n_train: int
    n_test: int
    encoder_id: str
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"top1": self.top1, "per_class": self.per_class,
                "n_train": self.n_train, "n_test": self.n_test,
                "encoder_id": self.encoder_id, "config": self.config}


def extract_features(encoder, inputs: np.ndarray, batch_size: int = 512,
                     projector: bool = False) -> np.ndarray:
    """Frozen forward passes in eval mode; no gradients recorded."""
    encoder.eval()
    chunks = []
    with ad.no_grad():
        for lo in range(0, len(inputs), batch_size):
            x = ad.constant(inputs[lo:lo + batch_size])
            out = encoder(x) if projector else encoder.features(x)
            chunks.append(out.numpy().astype(np.float64))
    encoder.train(True)
    return np.concatenate(chunks, axis=0)


def _train_linear_head(feats, labels, n_classes, config: ProbeConfig):
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([config.seed, 0x9e3779b9])))
    d = feats.shape[1]
    w = ad.parameter((rng.standard_normal((d, n_classes)) * 0.01), name="probe_w")
    b = ad.parameter(np.zeros(n_classes), name="probe_b")
    opt = Adam([w, b], config.lr)
    n = len(feats)
    bs = min(config.batch_size, n)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n - bs + 1, bs):
            sel = order[lo:lo + bs]
            x = ad.constant(feats[sel])
            logits = ad.bias_add(ad.matmul(x, w), b)
            lse = ad.logsumexp(logits, axis=1)
            picked = ad.take_flat(
                logits, np.arange(len(sel)) * n_classes + labels[sel], (len(sel),))
            loss = ad.tensor_mean(ad.subtract(lse, picked))
            if config.weight_decay:
                loss = ad.add(loss, ad.multiply(
                    ad.tensor_sum(ad.multiply(w, w)), config.weight_decay))
            w.zero_grad()
            b.zero_grad()
            loss.backward()
            opt.step()
    return w.data, b.data


def linear_probe(encoder, train_images: np.ndarray, train_labels: LabelStore,
                 test_images: np.ndarray, test_labels: LabelStore,
                 config: ProbeConfig = ProbeConfig()) -> EvalReport:
    """Train a linear classifier on frozen-encoder features, report test
    top-1 and per-class accuracy."""
    if train_labels.num_classes != test_labels.num_classes:
        raise ProbeError(f"class count mismatch: train has "
                         f"{train_labels.num_classes}, test has "
                         f"{test_labels.num_classes}")
    if len(train_images) != len(train_labels):
        raise ProbeError("train images and labels do not align")
    before = encoder.param_checksum()

    if config.label_fraction < 1.0:
        idx = subsample_indices(len(train_images),
                                SplitSpec(config.label_fraction, config.seed,
                                          "eval-train"))
        train_images = train_images[idx]
        train_labels = train_labels.take(idx)

    feats = extract_features(encoder, train_images,
                             projector=config.probe_projector)
    test_feats = extract_features(encoder, test_images,
                                  projector=config.probe_projector)
    n_classes = train_labels.num_classes
    w, b = _train_linear_head(feats, train_labels.labels, n_classes, config)

    pred = np.argmax(test_feats @ w + b, axis=1)
    truth = test_labels.labels
    top1 = float(np.mean(pred == truth))
    per_class = []
    for c in range(n_classes):
        mask = truth == c
        per_class.append(float(np.mean(pred[mask] == c)) if mask.any() else 0.0)

    after = encoder.param_checksum()
    if before != after:
        raise ProbeError("encoder parameters changed during probing")
    return EvalReport(top1=top1, per_class=per_class,
                      n_train=len(train_images), n_test=len(test_images),
                      encoder_id=before,
                      config={"epochs": config.epochs, "lr": config.lr,
                              "batch_size": config.batch_size,
                              "label_fraction": config.label_fraction,
                              "seed": config.seed,
                              "probe_projector": config.probe_projector})


def resize_images(images: np.ndarray, out_size: int) -> np.ndarray:
    """Bilinear full-image resize (target-geometry adaptation for transfer)."""
    n, c, h, w = images.shape
    if (h, w) == (out_size, out_size):
        return images
    boxes = np.tile(np.array([[0.0, 0.0, h, w]]), (n, 1))
    with ad.no_grad():
        out = ad.bilinear_resample(ad.constant(images), boxes,
                                   out_size, out_size)
    return out.numpy()


def transfer_probe(encoder, target_train: np.ndarray,
                   target_train_labels: LabelStore,
                   target_test: np.ndarray, target_test_labels: LabelStore,
                   config: ProbeConfig = ProbeConfig()) -> EvalReport:
    """linear_probe on a different labeled dataset; images are resized to
    the encoder's input geometry when they differ."""
    size = getattr(encoder, "image_size", None)
    if size is not None and target_train.ndim == 4:
        target_train = resize_images(target_train, size)
        target_test = resize_images(target_test, size)
    return linear_probe(encoder, target_train, target_train_labels,
                        target_test, target_test_labels, config)
