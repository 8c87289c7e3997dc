"""Model zoo: contrastive encoder, generator pair, discriminator.

Two families share the same training loop: small convolutional nets for
28x28 images and tiny MLP / affine nets for the 2-D point harness. All
parameters live in `Module` trees so checkpointing and the EMA update can
walk them by name.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ShapeError


class Module:
    """Minimal parameter container with named children and buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = ad.parameter(np.ascontiguousarray(value), name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        self._buffers[name] = np.ascontiguousarray(value)
        return self._buffers[name]

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def set_requires_grad(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        for name, value in state.items():
            if name in own:
                if own[name].data.shape != value.shape:
                    raise ShapeError(f"{name}: checkpoint shape {value.shape} "
                                     f"!= model shape {own[name].data.shape}")
                own[name].data = np.ascontiguousarray(value.astype(own[name].dtype))
            elif name in bufs:
                bufs[name][...] = value
            else:
                raise KeyError(f"unknown tensor in state dict: {name}")
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state dict missing tensors: {sorted(missing)}")

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def param_checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        for name, b in sorted(self.named_buffers()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _glorot(rng, shape, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, dtype=np.float32, init="he"):
        super().__init__()
        if init == "he":
            w = _he(rng, (in_dim, out_dim), in_dim, dtype)
        else:
            w = _glorot(rng, (in_dim, out_dim), in_dim, out_dim, dtype)
        self.weight = self.add_param("weight", w)
        self.bias = self.add_param("bias", np.zeros(out_dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.bias_add(ad.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride, padding, rng,
                 dtype=np.float32):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        self.weight = self.add_param(
            "weight", _he(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype))
        self.bias = self.add_param("bias", np.zeros(out_ch, dtype=dtype))
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.bias_add(ad.conv2d(x, self.weight, self.stride, self.padding),
                           self.bias)


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride, padding, rng,
                 dtype=np.float32):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        self.weight = self.add_param(
            "weight", _he(rng, (in_ch, out_ch, kernel, kernel), fan_in, dtype))
        self.bias = self.add_param("bias", np.zeros(out_ch, dtype=dtype))
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.bias_add(
            ad.conv2d_transpose(x, self.weight, self.stride, self.padding),
            self.bias)


class BatchNorm(Module):
    """Per-channel normalization: batch statistics while training, tracked
    running statistics in eval mode. Works on (B, C) and (B, C, H, W)."""

    def __init__(self, channels, dtype=np.float32, eps=1e-5, momentum=0.1):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = self.add_buffer("running_mean",
                                            np.zeros(channels, dtype=dtype))
        self.running_var = self.add_buffer("running_var",
                                           np.ones(channels, dtype=dtype))
        self.eps, self.momentum = eps, momentum

    def __call__(self, x: Tensor) -> Tensor:
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        if self.training:
            mu = x.data.mean(axis=axes)
            var = (x.data * x.data).mean(axis=axes) - mu * mu
            np.maximum(var, 0.0, out=var)
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean \
                + m * mu.astype(self.running_mean.dtype)
            self.running_var[...] = (1 - m) * self.running_var \
                + m * var.astype(self.running_var.dtype)
            return ad.batch_norm_train(x, self.gamma, self.beta, mu, var,
                                       self.eps)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        mu = ad.constant(self.running_mean.reshape(shape))
        inv = ad.constant(
            1.0 / np.sqrt(self.running_var.reshape(shape) + self.eps))
        xhat = ad.multiply(ad.subtract(x, mu), inv)
        return ad.channel_scale_shift(xhat, self.gamma, self.beta)


# ---------------------------------------------------------------------------
# image models
# ---------------------------------------------------------------------------

class ConvEncoder(Module):
    """3 stride-2 conv blocks + 2-layer projection head, unit-norm output.

    `features()` is the flattened backbone output (what linear probes see);
    `__call__()` appends the projector and L2-normalizes.
    """

    def __init__(self, rng, in_ch=1, image_size=28, channels=(12, 24, 48),
                 proj_hidden=96, out_dim=64, dtype=np.float32):
        super().__init__()
        self.in_ch, self.image_size, self.out_dim = in_ch, image_size, out_dim
        c1, c2, c3 = channels
        self.conv1 = self.add_child("conv1", Conv2d(in_ch, c1, 3, 2, 1, rng, dtype))
        self.bn1 = self.add_child("bn1", BatchNorm(c1, dtype))
        self.conv2 = self.add_child("conv2", Conv2d(c1, c2, 3, 2, 1, rng, dtype))
        self.bn2 = self.add_child("bn2", BatchNorm(c2, dtype))
        self.conv3 = self.add_child("conv3", Conv2d(c2, c3, 3, 2, 1, rng, dtype))
        self.bn3 = self.add_child("bn3", BatchNorm(c3, dtype))
        side = image_size
        for _ in range(3):
            side = (side + 1) // 2
        self.feature_dim = c3 * side * side
        self.proj1 = self.add_child("proj1",
                                    Linear(self.feature_dim, proj_hidden, rng, dtype))
        self.proj2 = self.add_child("proj2", Linear(proj_hidden, out_dim, rng, dtype))

    def _check_input(self, x: Tensor):
        if x.ndim != 4 or x.shape[1] != self.in_ch or \
                x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise ShapeError(
                f"encoder expects (B, {self.in_ch}, {self.image_size}, "
                f"{self.image_size}) input, got {x.shape}")

    def features(self, x: Tensor) -> Tensor:
        self._check_input(x)
        h = ad.relu(self.bn1(self.conv1(x)))
        h = ad.relu(self.bn2(self.conv2(h)))
        h = ad.relu(self.bn3(self.conv3(h)))
        return ad.reshape(h, (x.shape[0], self.feature_dim))

    def __call__(self, x: Tensor) -> Tensor:
        h = self.features(x)
        z = self.proj2(ad.relu(self.proj1(h)))
        return ad.l2_normalize(z, axis=1)


class ConvGenerator(Module):
    """Latent -> 7x7 feature map -> two stride-2 transposed convs -> 28x28,
    tanh head keeps pixels in [-1, 1]."""

    def __init__(self, rng, latent_dim=64, out_ch=1, base=7, channels=(32, 16),
                 dtype=np.float32):
        super().__init__()
        self.latent_dim, self.base = latent_dim, base
        c1, c2 = channels
        self.c1 = c1
        self.fc = self.add_child("fc", Linear(latent_dim, c1 * base * base, rng, dtype))
        self.bn0 = self.add_child("bn0", BatchNorm(c1, dtype))
        self.up1 = self.add_child("up1", ConvTranspose2d(c1, c2, 4, 2, 1, rng, dtype))
        self.bn1 = self.add_child("bn1", BatchNorm(c2, dtype))
        self.up2 = self.add_child("up2",
                                  ConvTranspose2d(c2, out_ch, 4, 2, 1, rng, dtype))

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"generator expects (B, {self.latent_dim}) latents, "
                             f"got {z.shape}")
        h = self.fc(z)
        h = ad.reshape(h, (z.shape[0], self.c1, self.base, self.base))
        h = ad.relu(self.bn0(h))
        h = ad.relu(self.bn1(self.up1(h)))
        return ad.tanh(self.up2(h))


class ConvDiscriminator(Module):
    """Mirrors the encoder's 3 stride-2 blocks (norm-free, leaky relu) and
    ends in one scalar logit per image."""

    def __init__(self, rng, in_ch=1, image_size=28, channels=(12, 24, 48),
                 dtype=np.float32):
        super().__init__()
        c1, c2, c3 = channels
        self.conv1 = self.add_child("conv1", Conv2d(in_ch, c1, 3, 2, 1, rng, dtype))
        self.conv2 = self.add_child("conv2", Conv2d(c1, c2, 3, 2, 1, rng, dtype))
        self.conv3 = self.add_child("conv3", Conv2d(c2, c3, 3, 2, 1, rng, dtype))
        side = image_size
        for _ in range(3):
            side = (side + 1) // 2
        self.head = self.add_child("head", Linear(c3 * side * side, 1, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.leaky_relu(self.conv1(x), 0.2)
        h = ad.leaky_relu(self.conv2(h), 0.2)
        h = ad.leaky_relu(self.conv3(h), 0.2)
        h = self.head(ad.reshape(h, (x.shape[0], -1)))
        return ad.reshape(h, (x.shape[0],))


# ---------------------------------------------------------------------------
# 2-D point models (synthetic harness)
# ---------------------------------------------------------------------------

class MlpEncoder2d(Module):
    """Two-layer encoder for 2-D points: hidden relu features + linear
    projector, unit-norm output."""

    def __init__(self, rng, in_dim=2, hidden=32, out_dim=8, dtype=np.float64):
        super().__init__()
        self.in_dim = in_dim
        self.feature_dim = hidden
        self.fc = self.add_child("fc", Linear(in_dim, hidden, rng, dtype))
        self.proj = self.add_child("proj", Linear(hidden, out_dim, rng, dtype))

    def features(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"encoder expects (B, {self.in_dim}) points, "
                             f"got {x.shape}")
        return ad.relu(self.fc(x))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.l2_normalize(self.proj(self.features(x)), axis=1)


class AffineGenerator2d(Module):
    """Affine map from latent space to the 2-D data plane."""

    def __init__(self, rng, latent_dim=2, out_dim=2, dtype=np.float64):
        super().__init__()
        self.latent_dim = latent_dim
        self.fc = self.add_child("fc", Linear(latent_dim, out_dim, rng, dtype,
                                              init="glorot"))

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"generator expects (B, {self.latent_dim}) latents, "
                             f"got {z.shape}")
        return self.fc(z)


class MlpDiscriminator2d(Module):
    def __init__(self, rng, in_dim=2, hidden=32, dtype=np.float64):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(in_dim, hidden, rng, dtype))
        self.fc2 = self.add_child("fc2", Linear(hidden, 1, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.leaky_relu(self.fc1(x), 0.2)
        return ad.reshape(self.fc2(h), (x.shape[0],))


# ---------------------------------------------------------------------------
# generator pair with EMA shadow
# ---------------------------------------------------------------------------

class GeneratorPair:
    """G and its momentum copy G_ema; only G ever receives gradients.

    The shadow is updated entrywise as w_ema <- m*w_ema + (1-m)*w, and its
    normalization-statistics buffers are copied from G at each update.
    """

    def __init__(self, g: Module, g_ema: Module, momentum: float = 0.999):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
        self.g = g
        self.g_ema = g_ema
        self.momentum = momentum
        self._check_congruent()
        self.g_ema.set_requires_grad(False)

    def _check_congruent(self):
        ws = dict(self.g.named_parameters())
        es = dict(self.g_ema.named_parameters())
        if ws.keys() != es.keys():
            raise ShapeError("generator pair parameter names differ")
        for name in ws:
            if ws[name].shape != es[name].shape:
                raise ShapeError(f"generator pair shapes differ at {name}: "
                                 f"{ws[name].shape} vs {es[name].shape}")

    def sync_ema(self):
        """w_ema <- w exactly (end of pretraining)."""
        ws = dict(self.g.named_parameters())
        for name, p in self.g_ema.named_parameters():
            p.data = ws[name].data.copy()
        self._copy_stats()

    def momentum_update(self):
        m = self.momentum
        ws = dict(self.g.named_parameters())
        for name, p in self.g_ema.named_parameters():
            p.data = m * p.data + (1.0 - m) * ws[name].data
        self._copy_stats()

    def _copy_stats(self):
        src = dict(self.g.named_buffers())
        for name, buf in self.g_ema.named_buffers():
            buf[...] = src[name]

    def max_param_distance(self) -> float:
        ws = dict(self.g.named_parameters())
        return max(float(np.max(np.abs(p.data - ws[name].data)))
                   for name, p in self.g_ema.named_parameters())


class LatentSampler:
    """i.i.d. standard-normal latent vectors from a dedicated RNG stream."""

    def __init__(self, latent_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.latent_dim = latent_dim
        self.rng = rng
        self.dtype = dtype

    def sample(self, n: int) -> np.ndarray:
        return self.rng.standard_normal((n, self.latent_dim)).astype(self.dtype)
