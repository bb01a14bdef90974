"""Adaptive discriminator augmentation.

:class:`AdaState` is the feedback controller for the augmentation probability ``p``.
:class:`AugmentPipe` applies the augmentations to discriminator inputs. Parameters are
sampled once per real/fake batch pair (:meth:`AugmentPipe.sample_params`) and then
applied to both batches, so real and generated images see identical transforms.
"""

import dataclasses
import math
from dataclasses import dataclass
from typing import Dict

import numpy as np
import torch
import torch.nn.functional as F

from latentaug.exception import ConfigError, ShapeError

ADA_CATEGORIES = ("blit", "geom", "color", "filter", "noise")
UNSUPPORTED_CATEGORIES = ("cutout",)
DEFAULT_CATEGORIES = ADA_CATEGORIES

# images needed for p to move by 1.0
ADA_SPEED_IMAGES = 10_000


@dataclass(frozen=True)
class AdaState:

    p: float = 0.0
    overfit_stat: float = 0.0
    target: float = 0.6
    adjustment_step: float = 0.01

    def __post_init__(self):

        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"augmentation probability must be in [0, 1], got {self.p}")
        if self.adjustment_step < 0:
            raise ConfigError("adjustment_step must be >= 0")


def adjustment_step(batch_size, interval, speed_images=ADA_SPEED_IMAGES):
    """Step per update so that ``p`` can traverse [0, 1] in ``speed_images`` real images."""

    return batch_size * interval / float(speed_images)


def ada_update(state, disc_sign_stats):
    """One controller update from the discriminator's outputs on recent real images.

    ``overfit_stat`` becomes the mean of ``sign(D(real))`` over ``disc_sign_stats``;
    ``p`` moves by ``adjustment_step`` towards more augmentation when the statistic is
    above ``target``, towards less when below, stays put at the target, and is
    clamped to [0, 1].
    """

    stats = np.asarray(disc_sign_stats, dtype=np.float64).ravel()
    if stats.size == 0:
        return state

    overfit_stat = float(np.mean(np.sign(stats)))
    p = state.p + float(np.sign(overfit_stat - state.target)) * state.adjustment_step

    return dataclasses.replace(state, p=float(np.clip(p, 0.0, 1.0)), overfit_stat=overfit_stat)


def parse_categories(spec):
    """``"blit,geom,color"`` -> tuple of categories; cutout is rejected."""

    names = tuple(c.strip() for c in (spec.split(",") if isinstance(spec, str) else spec) if c.strip())
    for name in names:
        if name in UNSUPPORTED_CATEGORIES:
            raise ConfigError(f"augmentation {name!r} is not supported (all categories except cutout are)")
        if name not in ADA_CATEGORIES:
            raise ConfigError(f"unknown augmentation {name!r}; choose from {', '.join(ADA_CATEGORIES)}")
    return names


def binomial_blur(images):
    """Per-channel 3x3 binomial blur of ``[batch, C, H, W]`` images with reflected borders."""

    taps = torch.tensor([1.0, 2.0, 1.0], dtype=images.dtype, device=images.device)
    kernel = torch.outer(taps, taps) / 16.0
    channels = images.shape[1]
    weight = kernel.expand(channels, 1, 3, 3).contiguous()
    padded = F.pad(images, (1, 1, 1, 1), mode="reflect")
    return F.conv2d(padded, weight, groups=channels)


@dataclass(frozen=True, eq=False)
class AugmentParams:

    batch_size: int
    values: Dict[str, torch.Tensor]


class AugmentPipe:
    """Differentiable augmentations on ``[batch, 3, H, W]`` images in ``[-1, 1]``.

    Every transform is applied to each sample independently with probability ``p``:

    * ``blit``: x-flip, 90 degree rotations, integer translation (1/8 of the size)
    * ``geom``: isotropic scaling, rotation, fractional translation
    * ``color``: brightness, contrast, saturation
    * ``filter``: blur or sharpen, blending each image with its 3x3 binomial blur
    * ``noise``: additive Gaussian noise
    """

    def __init__(self, categories=DEFAULT_CATEGORIES, p=0.0):

        self.categories = parse_categories(categories)
        self.p = float(p)

    def sample_params(self, batch_size, height, width, generator=None, device="cpu"):

        n = batch_size
        p = self.p

        def rand(*shape):
            return torch.rand(shape, generator=generator, device=device)

        def randn(*shape):
            return torch.randn(shape, generator=generator, device=device)

        def gate(values, identity):
            return torch.where(rand(n) < p, values, torch.full_like(values, identity))

        v = {}

        if "blit" in self.categories:
            v["xflip"] = gate(torch.floor(rand(n) * 2), 0.0)
            v["rot90"] = gate(torch.floor(rand(n) * 4), 0.0)
            v["tx"] = gate(torch.round((rand(n) * 2 - 1) * 0.125 * width), 0.0)
            v["ty"] = gate(torch.round((rand(n) * 2 - 1) * 0.125 * height), 0.0)

        if "geom" in self.categories:
            v["scale"] = gate(torch.exp2(randn(n) * 0.2), 1.0)
            v["rotate"] = gate((rand(n) * 2 - 1) * math.pi, 0.0)
            v["frac_tx"] = gate(randn(n) * 0.125, 0.0)
            v["frac_ty"] = gate(randn(n) * 0.125, 0.0)

        if "color" in self.categories:
            v["brightness"] = gate(randn(n) * 0.2, 0.0)
            v["contrast"] = gate(torch.exp2(randn(n) * 0.5), 1.0)
            v["saturation"] = gate(torch.exp2(randn(n)), 1.0)

        if "filter" in self.categories:
            # < 1 blurs, > 1 sharpens
            v["sharpness"] = gate(torch.exp2(randn(n)), 1.0)

        if "noise" in self.categories:
            v["noise_std"] = gate(randn(n).abs() * 0.1, 0.0)
            v["noise"] = randn(n, 3, height, width)

        return AugmentParams(n, v)

    def apply(self, images, params):

        if images.shape[0] != params.batch_size:
            raise ShapeError(f"augment params were sampled for {params.batch_size} images, got {images.shape[0]}")

        v = params.values
        x = images

        if "xflip" in v:
            x = torch.where((v["xflip"] > 0)[:, None, None, None], x.flip(3), x)

            rotated = [torch.rot90(x, k, dims=(2, 3)) for k in range(4)] if x.shape[2] == x.shape[3] else [x] * 4
            k = v["rot90"].long()[:, None, None, None]
            x = sum(torch.where(k == i, rotated[i], torch.zeros_like(x)) for i in range(4))

            x = torch.stack(
                [torch.roll(xi, shifts=(int(ty), int(tx)), dims=(1, 2)) for xi, tx, ty in zip(x, v["tx"], v["ty"])]
            )

        if "scale" in v:
            active = (v["scale"] != 1.0) | (v["rotate"] != 0.0) | (v["frac_tx"] != 0.0) | (v["frac_ty"] != 0.0)
            if bool(active.any()):
                cos = torch.cos(v["rotate"]) / v["scale"]
                sin = torch.sin(v["rotate"]) / v["scale"]
                theta = torch.stack(
                    [
                        torch.stack([cos, -sin, v["frac_tx"] * 2], dim=1),
                        torch.stack([sin, cos, v["frac_ty"] * 2], dim=1),
                    ],
                    dim=1,
                ).to(x.dtype)
                grid = F.affine_grid(theta, list(x.shape), align_corners=False)
                warped = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
                x = torch.where(active[:, None, None, None], warped, x)

        if "brightness" in v and bool(
            ((v["brightness"] != 0.0) | (v["contrast"] != 1.0) | (v["saturation"] != 1.0)).any()
        ):
            x = x + v["brightness"][:, None, None, None]
            mean = x.mean(dim=(1, 2, 3), keepdim=True)
            x = (x - mean) * v["contrast"][:, None, None, None] + mean
            luma = x.mean(dim=1, keepdim=True)
            x = (x - luma) * v["saturation"][:, None, None, None] + luma

        if "sharpness" in v and bool((v["sharpness"] != 1.0).any()):
            blurred = binomial_blur(x)
            x = blurred + (x - blurred) * v["sharpness"][:, None, None, None].to(x.dtype)

        if "noise_std" in v:
            x = x + v["noise"] * v["noise_std"][:, None, None, None]

        return x

    def __call__(self, images, generator=None):
        """Sample fresh parameters and apply them (for a single batch)."""

        params = self.sample_params(images.shape[0], images.shape[2], images.shape[3], generator, images.device)
        return self.apply(images, params)
