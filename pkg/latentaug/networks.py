"""Network definitions: style-based generator and discriminator, inversion encoder,
latent-code discriminator and the small residual classifier.

The generator follows the StyleGAN2 design: a mapping network ``z -> w``, a learned
constant, weight-modulated convolutions and skip RGB outputs. The synthesis network
takes one style vector per layer (``num_ws = 2 * log2(image_size) - 2``):

* the 4x4 convolution reads ``w[0]`` and the first RGB layer ``w[1]``;
* block ``i`` reads ``w[2i - 1]`` and ``w[2i]`` for its two convolutions and
  ``w[2i + 1]`` for its RGB layer.

Images are tensors of shape ``[batch, 3, height, width]`` in ``[-1, 1]``.
"""

import math
from typing import List

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from latentaug.exception import ShapeError


def num_style_layers(image_size):

    log_res = int(math.log2(image_size))
    if 2**log_res != image_size or log_res < 3:
        raise ShapeError(f"image_size must be a power of two >= 8, got {image_size}")
    return 2 * log_res - 2


class EqualizedWeight(nn.Module):
    """Weights stored as N(0, 1) and scaled by ``1/sqrt(fan_in)`` at use (equalized learning rate)."""

    def __init__(self, shape: List[int]):

        super().__init__()
        self.c = 1 / math.sqrt(np.prod(shape[1:]))
        self.weight = nn.Parameter(torch.randn(shape))

    def forward(self):
        return self.weight * self.c


class EqualizedLinear(nn.Module):

    def __init__(self, in_features: int, out_features: int, bias: float = 0.0):

        super().__init__()
        self.weight = EqualizedWeight([out_features, in_features])
        self.bias = nn.Parameter(torch.ones(out_features) * bias)

    def forward(self, x: torch.Tensor):
        return F.linear(x, self.weight(), bias=self.bias)


class EqualizedConv2d(nn.Module):

    def __init__(self, in_features: int, out_features: int, kernel_size: int, padding: int = 0):

        super().__init__()
        self.padding = padding
        self.weight = EqualizedWeight([out_features, in_features, kernel_size, kernel_size])
        self.bias = nn.Parameter(torch.zeros(out_features))

    def forward(self, x: torch.Tensor):
        return F.conv2d(x, self.weight(), bias=self.bias, padding=self.padding)


class Smooth(nn.Module):
    """[1 2 1] binomial blur applied to every channel."""

    def __init__(self):

        super().__init__()
        kernel = torch.tensor([[[[1, 2, 1], [2, 4, 2], [1, 2, 1]]]], dtype=torch.float)
        self.register_buffer("kernel", kernel / kernel.sum(), persistent=False)
        self.pad = nn.ReplicationPad2d(1)

    def forward(self, x: torch.Tensor):

        b, c, h, w = x.shape
        x = self.pad(x.reshape(-1, 1, h, w))
        return F.conv2d(x, self.kernel).reshape(b, c, h, w)


class UpSample(nn.Module):

    def __init__(self):

        super().__init__()
        self.smooth = Smooth()

    def forward(self, x: torch.Tensor):
        return self.smooth(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))


class DownSample(nn.Module):

    def __init__(self):

        super().__init__()
        self.smooth = Smooth()

    def forward(self, x: torch.Tensor):

        x = self.smooth(x)
        return F.interpolate(x, (x.shape[2] // 2, x.shape[3] // 2), mode="bilinear", align_corners=False)


class MappingNetwork(nn.Module):
    """MLP ``z -> w``; also tracks ``w_avg``, the moving average of mapped codes."""

    def __init__(self, z_dim: int, w_dim: int, n_layers: int):

        super().__init__()
        layers = []
        for i in range(n_layers):
            layers.append(EqualizedLinear(z_dim if i == 0 else w_dim, w_dim))
            layers.append(nn.LeakyReLU(negative_slope=0.2))
        self.net = nn.Sequential(*layers)
        self.register_buffer("w_avg", torch.zeros(w_dim))

    def forward(self, z: torch.Tensor):
        return self.net(F.normalize(z, dim=1))

    @torch.no_grad()
    def update_w_avg(self, w: torch.Tensor, beta: float):
        self.w_avg.copy_(w.detach().mean(dim=0).lerp(self.w_avg, beta))


class Conv2dWeightModulate(nn.Module):
    """Convolution whose weights are scaled per input channel by the style and then demodulated."""

    def __init__(self, in_features: int, out_features: int, kernel_size: int, demodulate: bool = True, eps: float = 1e-8):

        super().__init__()
        self.out_features = out_features
        self.demodulate = demodulate
        self.padding = (kernel_size - 1) // 2
        self.weight = EqualizedWeight([out_features, in_features, kernel_size, kernel_size])
        self.eps = eps

    def forward(self, x: torch.Tensor, s: torch.Tensor):

        b, _, h, w = x.shape

        weights = self.weight()[None, :, :, :, :] * s[:, None, :, None, None]
        if self.demodulate:
            sigma_inv = torch.rsqrt((weights**2).sum(dim=(2, 3, 4), keepdim=True) + self.eps)
            weights = weights * sigma_inv

        # grouped convolution: one group per sample
        x = x.reshape(1, -1, h, w)
        _, _, *ws = weights.shape
        weights = weights.reshape(b * self.out_features, *ws)
        x = F.conv2d(x, weights, padding=self.padding, groups=b)

        return x.reshape(-1, self.out_features, h, w)


class StyleBlock(nn.Module):

    def __init__(self, w_dim: int, in_features: int, out_features: int):

        super().__init__()
        self.to_style = EqualizedLinear(w_dim, in_features, bias=1.0)
        self.conv = Conv2dWeightModulate(in_features, out_features, kernel_size=3)
        self.scale_noise = nn.Parameter(torch.zeros(1))
        self.bias = nn.Parameter(torch.zeros(out_features))
        self.activation = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor, w: torch.Tensor, noise=None):

        x = self.conv(x, self.to_style(w))
        if noise is not None:
            x = x + self.scale_noise[None, :, None, None] * noise
        return self.activation(x + self.bias[None, :, None, None])


class ToRGB(nn.Module):

    def __init__(self, w_dim: int, features: int):

        super().__init__()
        self.to_style = EqualizedLinear(w_dim, features, bias=1.0)
        self.conv = Conv2dWeightModulate(features, 3, kernel_size=1, demodulate=False)
        self.bias = nn.Parameter(torch.zeros(3))

    def forward(self, x: torch.Tensor, w: torch.Tensor):
        return self.conv(x, self.to_style(w)) + self.bias[None, :, None, None]


class GeneratorBlock(nn.Module):

    def __init__(self, w_dim: int, in_features: int, out_features: int):

        super().__init__()
        self.style_block1 = StyleBlock(w_dim, in_features, out_features)
        self.style_block2 = StyleBlock(w_dim, out_features, out_features)
        self.to_rgb = ToRGB(w_dim, out_features)

    def forward(self, x, w1, w2, w_rgb, noise):

        x = self.style_block1(x, w1, noise[0])
        x = self.style_block2(x, w2, noise[1])
        return x, self.to_rgb(x, w_rgb)


class SynthesisNetwork(nn.Module):

    def __init__(self, image_size: int, w_dim: int, n_features: int = 32, max_features: int = 256):

        super().__init__()
        log_res = int(math.log2(image_size))
        features = [min(max_features, n_features * (2**i)) for i in range(log_res - 2, -1, -1)]

        self.image_size = image_size
        self.n_blocks = len(features)
        self.num_ws = num_style_layers(image_size)

        self.initial_constant = nn.Parameter(torch.randn((1, features[0], 4, 4)))
        self.style_block = StyleBlock(w_dim, features[0], features[0])
        self.to_rgb = ToRGB(w_dim, features[0])
        self.blocks = nn.ModuleList([GeneratorBlock(w_dim, features[i - 1], features[i]) for i in range(1, self.n_blocks)])
        self.up_sample = UpSample()

        # one fixed noise map per convolution layer
        self.noise_resolutions = [4] + [r for i in range(1, self.n_blocks) for r in (4 * 2**i,) * 2]
        for i, r in enumerate(self.noise_resolutions):
            self.register_buffer(f"noise_const_{i}", torch.randn(1, 1, r, r))

    def make_noise(self, batch_size, mode="const", generator=None):
        """Per-layer noise: ``"const"`` (stored maps), ``"random"`` (drawn from ``generator``) or ``"none"``."""

        if mode == "none":
            return [None] * len(self.noise_resolutions)

        if mode == "const":
            return [getattr(self, f"noise_const_{i}").expand(batch_size, -1, -1, -1) for i in range(len(self.noise_resolutions))]

        if mode == "random":
            device = self.initial_constant.device
            return [
                torch.randn((batch_size, 1, r, r), generator=generator, device=device)
                for r in self.noise_resolutions
            ]

        raise ValueError(f"unknown noise mode {mode!r}")

    def forward(self, ws: torch.Tensor, noise=None):
        """``ws`` has shape ``[batch, num_ws, w_dim]``."""

        batch_size = ws.shape[0]
        if noise is None:
            noise = self.make_noise(batch_size)

        x = self.initial_constant.expand(batch_size, -1, -1, -1)
        x = self.style_block(x, ws[:, 0], noise[0])
        rgb = self.to_rgb(x, ws[:, 1])

        for i in range(1, self.n_blocks):
            x = self.up_sample(x)
            x, rgb_new = self.blocks[i - 1](
                x, ws[:, 2 * i - 1], ws[:, 2 * i], ws[:, 2 * i + 1], noise[2 * i - 1 : 2 * i + 1]
            )
            rgb = self.up_sample(rgb) + rgb_new

        return rgb


class StyleGenerator(nn.Module):

    def __init__(
        self,
        image_size: int = 64,
        z_dim: int = 128,
        w_dim: int = 128,
        mapping_layers: int = 4,
        n_features: int = 32,
        max_features: int = 256,
    ):

        super().__init__()
        self.image_size = image_size
        self.z_dim = z_dim
        self.w_dim = w_dim
        self.mapping = MappingNetwork(z_dim, w_dim, mapping_layers)
        self.synthesis = SynthesisNetwork(image_size, w_dim, n_features, max_features)
        self.num_ws = self.synthesis.num_ws

    @property
    def w_avg(self):
        return self.mapping.w_avg

    def map(self, z: torch.Tensor, psi: float = 1.0):
        """``[batch, z_dim] -> [batch, num_ws, w_dim]``, the same code broadcast to every layer."""

        w = self.mapping(z)
        if psi != 1.0:
            w = self.w_avg.lerp(w, psi)
        return w[:, None, :].repeat(1, self.num_ws, 1)

    def forward(self, z: torch.Tensor, psi: float = 1.0, noise=None):
        return self.synthesis(self.map(z, psi), noise)


class DiscriminatorBlock(nn.Module):
    """Two 3x3 convolutions and a down-sampling residual connection."""

    def __init__(self, in_features, out_features):

        super().__init__()
        self.residual = nn.Sequential(DownSample(), EqualizedConv2d(in_features, out_features, kernel_size=1))
        self.block = nn.Sequential(
            EqualizedConv2d(in_features, in_features, kernel_size=3, padding=1),
            nn.LeakyReLU(0.2),
            EqualizedConv2d(in_features, out_features, kernel_size=3, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.down_sample = DownSample()
        self.scale = 1 / math.sqrt(2)

    def forward(self, x):
        return (self.down_sample(self.block(x)) + self.residual(x)) * self.scale


class MiniBatchStdDev(nn.Module):
    """Appends the mean feature standard deviation over sample groups as one extra channel."""

    def __init__(self, group_size: int = 4):

        super().__init__()
        self.group_size = group_size

    def forward(self, x: torch.Tensor):

        b, _, h, w = x.shape
        group = min(self.group_size, b)
        while b % group:
            group -= 1

        if group < 2:
            std = x.new_zeros((b, 1, h, w))
        else:
            grouped = x.reshape(group, -1, *x.shape[1:])
            std = torch.sqrt(grouped.var(dim=0, unbiased=False) + 1e-8)
            std = std.mean(dim=(1, 2, 3)).reshape(1, -1, 1, 1, 1)
            std = std.expand(group, -1, 1, h, w).reshape(b, 1, h, w)

        return torch.cat([x, std], dim=1)


class Discriminator(nn.Module):

    def __init__(self, image_size: int = 64, n_features: int = 32, max_features: int = 256):

        super().__init__()
        log_res = int(math.log2(image_size))
        self.from_rgb = nn.Sequential(EqualizedConv2d(3, n_features, 1), nn.LeakyReLU(0.2))

        features = [min(max_features, n_features * (2**i)) for i in range(log_res - 1)]
        self.blocks = nn.Sequential(*[DiscriminatorBlock(features[i], features[i + 1]) for i in range(len(features) - 1)])
        self.std_dev = MiniBatchStdDev()

        final_features = features[-1] + 1
        self.conv = EqualizedConv2d(final_features, final_features, 3)
        self.final = EqualizedLinear(2 * 2 * final_features, 1)

    def forward(self, x: torch.Tensor):

        x = self.blocks(self.from_rgb(x))
        x = self.conv(self.std_dev(x))
        return self.final(x.reshape(x.shape[0], -1))


class StyleHead(nn.Module):
    """Feature map -> one ``w_dim`` code, down-sampling to 1x1 with 3x3 convolutions."""

    def __init__(self, in_features: int, spatial: int, w_dim: int):

        super().__init__()
        layers = []
        for _ in range(int(math.log2(spatial))):
            layers += [EqualizedConv2d(in_features, in_features, 3, padding=1), nn.LeakyReLU(0.2), DownSample()]
        self.convs = nn.Sequential(*layers)
        self.linear = EqualizedLinear(in_features, w_dim)

    def forward(self, x):
        return self.linear(self.convs(x).flatten(1))


class StyleEncoder(nn.Module):
    """Image -> per-layer style codes as a base code plus progressive per-layer deltas.

    A residual down-sampling trunk feeds a three-level feature pyramid (with top-down
    additions). The base code comes from the deepest level; the delta for layer ``i``
    comes from the deep, middle or shallow level depending on whether the layer is
    coarse, middle or fine. Outputs are offsets around ``w_avg``.
    """

    def __init__(self, image_size: int, num_ws: int, w_dim: int, n_features: int = 32, max_features: int = 256):

        super().__init__()
        log_res = int(math.log2(image_size))
        if log_res < 5:
            raise ShapeError(f"encoder needs image_size >= 32, got {image_size}")

        self.num_ws = num_ws
        self.w_dim = w_dim

        features = [min(max_features, n_features * (2**i)) for i in range(log_res - 1)]
        self.from_rgb = nn.Sequential(EqualizedConv2d(3, n_features, 1), nn.LeakyReLU(0.2))
        self.blocks = nn.ModuleList([DiscriminatorBlock(features[i], features[i + 1]) for i in range(len(features) - 1)])

        # trunk outputs at 16x, 8x and 4x down-sampling relative to the deepest 4x4 map
        n = len(self.blocks)
        self.levels = (n - 3, n - 2, n - 1)
        width = features[-1]
        self.lateral = nn.ModuleList([EqualizedConv2d(features[i + 1], width, 1) for i in self.levels])
        self.up_sample = UpSample()

        self.coarse_end = max(1, num_ws // 4)
        self.middle_end = max(self.coarse_end + 1, num_ws // 2)

        self.base_head = StyleHead(width, 4, w_dim)
        self.delta_heads = nn.ModuleList([StyleHead(width, 4 * 2 ** self.level_of(i), w_dim) for i in range(1, num_ws)])
        self.register_buffer("w_avg", torch.zeros(w_dim))

    def level_of(self, layer):
        """0 for coarse layers (deep features), 1 middle, 2 fine (shallow features)."""

        if layer < self.coarse_end:
            return 0
        if layer < self.middle_end:
            return 1
        return 2

    def forward(self, x: torch.Tensor, n_active: int = None):
        """Return ``(ws, deltas)``; only the first ``n_active`` deltas are used (all by default)."""

        n_active = self.num_ws - 1 if n_active is None else min(int(n_active), self.num_ws - 1)

        x = self.from_rgb(x)
        taps = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in self.levels:
                taps.append(x)

        shallow, middle, deep = [lat(t) for lat, t in zip(self.lateral, taps)]
        p_deep = deep
        p_middle = middle + self.up_sample(p_deep)
        p_shallow = shallow + self.up_sample(p_middle)
        pyramid = (p_deep, p_middle, p_shallow)

        w0 = self.base_head(p_deep)
        zeros = torch.zeros_like(w0)
        deltas = torch.stack(
            [zeros] + [
                self.delta_heads[i - 1](pyramid[self.level_of(i)]) if i <= n_active else zeros
                for i in range(1, self.num_ws)
            ],
            dim=1,
        )

        ws = self.w_avg + w0[:, None, :] + deltas
        return ws, deltas


class LatentDiscriminator(nn.Module):
    """Tells mapped codes ``w`` from encoder codes; keeps encoder outputs near the W space."""

    def __init__(self, w_dim: int, hidden: int = 256, n_layers: int = 4):

        super().__init__()
        layers = []
        for i in range(n_layers - 1):
            layers += [nn.Linear(w_dim if i == 0 else hidden, hidden), nn.LeakyReLU(0.2)]
        layers.append(nn.Linear(hidden, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, w):
        return self.net(w)


class ResidualBlock(nn.Module):

    def __init__(self, in_features, out_features, stride=1):

        super().__init__()
        self.conv1 = nn.Conv2d(in_features, out_features, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_features)
        self.conv2 = nn.Conv2d(out_features, out_features, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_features)

        self.shortcut = nn.Identity()
        if stride != 1 or in_features != out_features:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_features, out_features, 1, stride=stride, bias=False), nn.BatchNorm2d(out_features)
            )

    def forward(self, x):

        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResidualClassifier(nn.Module):
    """Small residual CNN. ``features`` gives the penultimate embedding (FID / perceptual space)."""

    def __init__(self, n_classes: int = 2, width: int = 16, feature_dim: int = 64, dropout: float = 0.0):

        super().__init__()
        self.feature_dim = feature_dim
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, padding=1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        self.layers = nn.Sequential(
            ResidualBlock(width, width),
            ResidualBlock(width, 2 * width, stride=2),
            ResidualBlock(2 * width, 4 * width, stride=2),
            ResidualBlock(4 * width, 8 * width, stride=2),
        )
        self.embed = nn.Linear(8 * width, feature_dim)
        self.dropout = nn.Dropout(dropout)
        self.head = nn.Linear(feature_dim, n_classes)

    def features(self, x):

        x = self.layers(self.stem(x))
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return F.relu(self.embed(x))

    def forward(self, x):
        return self.head(self.dropout(self.features(x)))


def r1_penalty(real: torch.Tensor, scores: torch.Tensor):
    """Mean squared gradient norm of the discriminator scores w.r.t. its real inputs."""

    gradients, *_ = torch.autograd.grad(
        outputs=scores.sum(), inputs=real, create_graph=True
    )
    return gradients.reshape(real.shape[0], -1).pow(2).sum(dim=1).mean()
