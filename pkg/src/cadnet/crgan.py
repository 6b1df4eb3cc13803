"""Cross-resolution GAN: encoder E, skip-connected HR decoder G, and the two discriminators."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor

EPS = 1e-7
LEAK = 0.2
RGB_INIT_SCALE = 0.1


class Encoder(Module):
    """Stack of stride-2 3x3 convs with leaky ReLU; returns every stage output.

    The last stage is the feature map ``f`` of shape (N, H/2^k, W/2^k, channels[-1]).
    """

    def __init__(self, channels: Sequence[int], rng: np.random.Generator, in_channels: int = 3):
        super().__init__()
        self.channels = tuple(channels)
        cin = in_channels
        self.convs = []
        for i, c in enumerate(self.channels):
            self.convs.append(self.add_module(f"conv{i}", Conv2d(cin, c, 3, rng, stride=2)))
            cin = c

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def __call__(self, x: Tensor, frozen: bool = False) -> list[Tensor]:
        stages = []
        for conv in self.convs:
            x = T.leaky_relu(conv(x, frozen), LEAK)
            stages.append(x)
        return stages


def feature_shape(image_size: tuple[int, int], channels: Sequence[int]) -> tuple[int, int, int]:
    h, w = image_size
    for _ in channels:
        h, w = math.ceil(h / 2), math.ceil(w / 2)
    return h, w, channels[-1]


class Decoder(Module):
    """Mirror of the encoder: upsample, concatenate the matching encoder stage, conv.

    The last stage predicts 3 * 2 * 2 channels at half resolution and
    rearranges them into a full-resolution residual (sub-pixel conv). The
    residual is added to the input image in logit space before the final
    sigmoid, so the decoder starts out close to the identity and learns the
    missing detail. The residual layer starts small but not at zero: with a
    zero head the exact HR reconstruction sits on the l1 kink and L_rec alone
    has no descent direction.
    """

    def __init__(self, channels: Sequence[int], rng: np.random.Generator, out_channels: int = 3):
        super().__init__()
        self.channels = tuple(channels)
        self.ups = []
        cin = self.channels[-1]
        for i, skip_c in reversed(list(enumerate(self.channels[:-1]))):
            self.ups.append(self.add_module(f"up{i}", Conv2d(cin + skip_c, skip_c, 3, rng)))
            cin = skip_c
        self.to_rgb = self.add_module("to_rgb", Conv2d(cin, out_channels * 4, 3, rng))
        self.to_rgb._params["weight"].data *= RGB_INIT_SCALE

    def __call__(self, f: Tensor, skips: Sequence[Tensor], image: Tensor, frozen: bool = False) -> Tensor:
        """``skips`` are the encoder stages before ``f``; ``image`` is the encoder input."""
        if len(skips) != len(self.ups):
            raise ShapeError(f"decoder expects {len(self.ups)} skip tensors, got {len(skips)}")
        image_size = tuple(image.shape[1:3])
        x = f
        for conv, skip in zip(self.ups, reversed(skips)):
            if skip.shape[0] != x.shape[0] or skip.shape[3] != conv.cin - x.shape[3]:
                raise ShapeError(f"decoder: skip {skip.shape} does not fit stage input {x.shape}")
            x = T.bilinear_resize(x, skip.shape[1:3])
            x = T.leaky_relu(conv(T.concat([x, skip], axis=-1), frozen), LEAK)
        half = (math.ceil(image_size[0] / 2), math.ceil(image_size[1] / 2))
        if tuple(x.shape[1:3]) != half:
            x = T.bilinear_resize(x, half)
        x = T.depth_to_space(self.to_rgb(x, frozen), 2)
        if tuple(x.shape[1:3]) != image_size:
            x = T.bilinear_resize(x, image_size)
        if image.shape[0] != x.shape[0]:
            raise ShapeError(f"decoder: image batch {image.shape} does not match features {f.shape}")
        return T.sigmoid(T.add(x, _logit(image)))


def _logit(image: Tensor, margin: float = 1e-3) -> Tensor:
    p = np.clip(image.data.astype(np.float64), margin, 1.0 - margin)
    return Tensor(np.log(p / (1.0 - p)), dtype=image.data.dtype)


class FeatureDiscriminator(Module):
    """Patch discriminator on feature maps: three stride-1 convs, sigmoid map."""

    def __init__(self, in_channels: int, rng: np.random.Generator, hidden: int = 32):
        super().__init__()
        self.c0 = self.add_module("conv0", Conv2d(in_channels, in_channels, 3, rng))
        self.c1 = self.add_module("conv1", Conv2d(in_channels, hidden, 3, rng))
        self.c2 = self.add_module("conv2", Conv2d(hidden, 1, 3, rng))

    def __call__(self, f: Tensor, frozen: bool = False) -> Tensor:
        x = T.leaky_relu(self.c0(f, frozen), LEAK)
        x = T.leaky_relu(self.c1(x, frozen), LEAK)
        return T.sigmoid(self.c2(x, frozen))


class ImageDiscriminator(Module):
    """Four stride-2 convs, global average pool, sigmoid score per image."""

    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = (16, 32, 64)):
        super().__init__()
        self.convs = []
        cin = 3
        for i, c in enumerate(list(channels) + [1]):
            self.convs.append(self.add_module(f"conv{i}", Conv2d(cin, c, 3, rng, stride=2)))
            cin = c

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        for conv in self.convs[:-1]:
            x = T.leaky_relu(conv(x, frozen), LEAK)
        return T.sigmoid(T.global_avg_pool(self.convs[-1](x, frozen)))


class Crgan(Module):
    def __init__(self, image_size: tuple[int, int], channels: Sequence[int], rng: np.random.Generator):
        super().__init__()
        self.image_size = tuple(image_size)
        self.channels = tuple(channels)
        self.encoder = self.add_module("E", Encoder(channels, rng))
        self.decoder = self.add_module("G", Decoder(channels, rng))
        self.d_feature = self.add_module("D_F", FeatureDiscriminator(channels[-1], rng))
        self.d_image = self.add_module("D_I", ImageDiscriminator(rng))

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != (*self.image_size, 3):
            raise ShapeError(f"encoder expects (N, {self.image_size[0]}, {self.image_size[1]}, 3) images, got {x.shape}")

    def encode(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Returns ``(f, skips)``; ``skips`` holds the input image then the earlier stages."""
        self.check_input(x)
        stages = self.encoder(x)
        return stages[-1], [x, *stages[:-1]]

    def decode(self, f: Tensor, skips: Sequence[Tensor]) -> Tensor:
        if not skips:
            raise ShapeError("decoder needs the skip tensors captured by encode()")
        return self.decoder(f, skips[1:], skips[0])


# ---------------------------------------------------------------------------
# losses


def _log_clamped(p: Tensor) -> Tensor:
    return T.log(T.clamp(p, EPS, 1.0 - EPS))


def _log_one_minus(p: Tensor) -> Tensor:
    return T.log(T.clamp(T.sub(1.0, p), EPS, 1.0 - EPS))


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def feature_d_loss(d_f: FeatureDiscriminator, f_h: Tensor, f_l: Tensor) -> Tensor:
    """Negated feature-level objective ``E log D(f_H) + E log(1 - D(f_L))``.

    The features are detached; only the discriminator receives gradients.
    """
    _same_shape("feature adversarial loss", f_h, f_l)
    real = T.mean(_log_clamped(d_f(T.detach(f_h))))
    fake = T.mean(_log_one_minus(d_f(T.detach(f_l))))
    return T.mul(T.add(real, fake), -1.0)


def feature_g_loss(d_f: FeatureDiscriminator, f_l: Tensor) -> Tensor:
    """Non-saturating encoder term ``-E log D(f_L)``; the discriminator is frozen."""
    return T.mul(T.mean(_log_clamped(d_f(f_l, frozen=True))), -1.0)


def loss_adv_feature(d_f: FeatureDiscriminator, f_h: Tensor, f_l: Tensor) -> tuple[Tensor, Tensor]:
    return feature_d_loss(d_f, f_h, f_l), feature_g_loss(d_f, f_l)


def image_d_loss(
    d_i: ImageDiscriminator, x_h: Tensor, rec_l: Tensor, rec_h: Tensor, real_weight: float = 2.0
) -> Tensor:
    """Negated image-level objective.

    With ``real_weight=2`` the real term ``E log D(x_H)`` appears twice,
    once beside each recovered-image term.
    """
    _same_shape("image adversarial loss", x_h, rec_l)
    _same_shape("image adversarial loss", x_h, rec_h)
    real = T.mean(_log_clamped(d_i(x_h)))
    fake_l = T.mean(_log_one_minus(d_i(T.detach(rec_l))))
    fake_h = T.mean(_log_one_minus(d_i(T.detach(rec_h))))
    total = T.add(T.add(T.mul(real, real_weight), fake_l), fake_h)
    return T.mul(total, -1.0)


def image_g_loss(d_i: ImageDiscriminator, rec_l: Tensor, rec_h: Tensor) -> Tensor:
    """``-E log D(G(f_L)) - E log D(G(f_H))`` against a frozen discriminator."""
    a = T.mean(_log_clamped(d_i(rec_l, frozen=True)))
    b = T.mean(_log_clamped(d_i(rec_h, frozen=True)))
    return T.mul(T.add(a, b), -1.0)


def loss_adv_image(
    d_i: ImageDiscriminator, x_h: Tensor, rec_l: Tensor, rec_h: Tensor, real_weight: float = 2.0
) -> tuple[Tensor, Tensor]:
    return image_d_loss(d_i, x_h, rec_l, rec_h, real_weight), image_g_loss(d_i, rec_l, rec_h)


def loss_rec(rec_h: Tensor, rec_l: Tensor, x_h: Tensor, x_h_for_l: Tensor | None = None) -> Tensor:
    """l1 reconstruction: ``mean|G(f_H) - x_H| + mean|G(f_L) - x_H'|``.

    ``x_h_for_l`` is the HR ground truth of each LR sample (defaults to ``x_h``
    when the two streams share an order).
    """
    target_l = x_h if x_h_for_l is None else x_h_for_l
    _same_shape("reconstruction loss", rec_h, x_h)
    _same_shape("reconstruction loss", rec_l, target_l)
    return T.add(T.l1_mean(T.sub(rec_h, x_h)), T.l1_mean(T.sub(rec_l, target_l)))


# Objective values straight from discriminator outputs (no modules involved).


def feature_objective(d_real: np.ndarray, d_fake: np.ndarray) -> float:
    real = np.log(np.clip(d_real, EPS, 1 - EPS)).mean()
    fake = np.log(np.clip(1 - np.asarray(d_fake), EPS, 1 - EPS)).mean()
    return float(real + fake)


def image_objective(d_real: np.ndarray, d_fake_l: np.ndarray, d_fake_h: np.ndarray, real_weight: float = 2.0) -> float:
    real = np.log(np.clip(d_real, EPS, 1 - EPS)).mean()
    fl = np.log(np.clip(1 - np.asarray(d_fake_l), EPS, 1 - EPS)).mean()
    fh = np.log(np.clip(1 - np.asarray(d_fake_h), EPS, 1 - EPS)).mean()
    return float(real_weight * real + fl + fh)
