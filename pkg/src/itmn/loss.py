"""Hybrid content loss and the generative adversarial regularizer.

The content loss combines plain mean squared error with the squared error
of horizontal/vertical forward differences (weighted by alpha); the
regularizer is mean(log(1 - d_real)) + mean(log(d_fake)), reading the
discriminator output as the probability that its input was generated. The
generator minimizes lambda * content + regularizer while the discriminator
maximizes the regularizer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_: float = 1e4
    alpha: float = 1e5
    clamp_eps: float = 1e-7

    def __post_init__(self):
        if self.lambda_ <= 0:
            raise ValueError(f"lambda must be positive, got {self.lambda_}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if not 0.0 < self.clamp_eps < 0.5:
            raise ValueError(f"clamp_eps must lie in (0, 0.5), got {self.clamp_eps}")


def diff_x(img: Tensor) -> Tensor:
    """Forward difference along width; output is one column narrower."""
    n, c, h, w = img.shape
    if w < 2:
        raise T.ShapeError(f"diff_x needs width >= 2, got {img.shape}")
    return T.sub(T.spatial_slice(img, 0, h, 1, w), T.spatial_slice(img, 0, h, 0, w - 1))


def diff_y(img: Tensor) -> Tensor:
    """Forward difference along height; output is one row shorter."""
    n, c, h, w = img.shape
    if h < 2:
        raise T.ShapeError(f"diff_y needs height >= 2, got {img.shape}")
    return T.sub(T.spatial_slice(img, 1, h, 0, w), T.spatial_slice(img, 0, h - 1, 0, w))


def mse(pred: Tensor, target: Tensor, reduction: str = "image_sum") -> Tensor:
    """Squared error, reduced to a scalar.

    "image_sum" (default): sum of squares per image, mean over the batch.
    "pixel_mean": mean over every element.
    """
    if pred.shape != target.shape:
        raise T.ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    d = T.sub(pred, target)
    total = T.sum_all(T.mul(d, d))
    if reduction == "image_sum":
        return T.scale(total, 1.0 / pred.shape[0])
    if reduction == "pixel_mean":
        return T.scale(total, 1.0 / pred.data.size)
    raise ValueError(f"mse: unknown reduction {reduction!r}")


def content_loss(pred: Tensor, target: Tensor, weights: LossWeights,
                 reduction: str = "image_sum") -> Tensor:
    """mse + alpha * (mse of horizontal diffs + mse of vertical diffs).

    alpha == 0 reduces exactly to mse (the no-dMSE ablation).
    """
    n, c, h, w = pred.shape
    if h < 2 or w < 2:
        raise T.ShapeError(f"content_loss needs h, w >= 2, got {pred.shape}")
    out = mse(pred, target, reduction)
    if weights.alpha != 0.0:
        dx = mse(diff_x(pred), diff_x(target), reduction)
        dy = mse(diff_y(pred), diff_y(target), reduction)
        out = T.add(out, T.scale(T.add(dx, dy), weights.alpha))
    return out


def adv_regularizer(d_real: Tensor, d_fake: Tensor, clamp_eps: float = 1e-7) -> Tensor:
    """mean(log(1 - d_real)) + mean(log(d_fake)), probabilities pre-clamped.

    d_real / d_fake are discriminator outputs of shape (n, 1, 1, 1); the
    discriminator is read as the probability its input was generated,
    so a perfect discriminator drives this toward 0 from below.
    """
    for name, t in (("d_real", d_real), ("d_fake", d_fake)):
        if t.shape[1:] != (1, 1, 1):
            raise T.ShapeError(f"{name} must have shape (n,1,1,1), got {t.shape}")
        if np.any(t.data < 0) or np.any(t.data > 1):
            raise ValueError(f"{name} holds values outside [0,1]; upstream sigmoid violated")
    if not 0.0 < clamp_eps < 0.5:
        raise ValueError(f"clamp_eps must lie in (0, 0.5), got {clamp_eps}")
    lo, hi = clamp_eps, 1.0 - clamp_eps
    real_term = T.mean_all(T.log(T.add_const(T.scale(T.clamp(d_real, lo, hi), -1.0), 1.0)))
    fake_term = T.mean_all(T.log(T.clamp(d_fake, lo, hi)))
    return T.add(real_term, fake_term)


def _generator_terms(gen, disc, batch, weights: LossWeights, include_adv: bool,
                     convention: str = "paper", reduction: str = "image_sum"):
    """Returns (objective, content, regularizer-or-None, fake)."""
    from .nn import discriminator_forward, generator_forward

    ldr, hdr = batch
    fake = generator_forward(gen, ldr, mode="train")
    content = content_loss(fake, hdr, weights, reduction)
    obj = T.scale(content, weights.lambda_)
    reg = None
    if include_adv:
        d_real = discriminator_forward(disc, hdr, mode="train")
        d_fake = discriminator_forward(disc, fake, mode="train")
        if convention == "classic":
            d_real, d_fake = d_fake, d_real
        reg = adv_regularizer(d_real, d_fake, weights.clamp_eps)
        obj = T.add(obj, reg)
    return obj, content, reg, fake


def generator_objective(gen, disc, batch, weights: LossWeights,
                        include_adv: bool = True, convention: str = "paper",
                        reduction: str = "image_sum") -> Tensor:
    """lambda * content_loss(G(L), H) + adv_regularizer(D(H), D(G(L)))."""
    return _generator_terms(gen, disc, batch, weights, include_adv, convention, reduction)[0]


def discriminator_objective(disc, gen, batch, clamp_eps: float = 1e-7,
                            convention: str = "paper") -> Tensor:
    """The regularizer with the generator frozen (ascent target for D)."""
    from .nn import discriminator_forward, generator_forward

    ldr, hdr = batch
    with T.pause_recording():
        fake = generator_forward(gen, ldr, mode="train")
    d_fake = discriminator_forward(disc, fake.detach(), mode="train")
    d_real = discriminator_forward(disc, hdr, mode="train")
    if convention == "classic":
        d_real, d_fake = d_fake, d_real
    return adv_regularizer(d_real, d_fake, clamp_eps)
