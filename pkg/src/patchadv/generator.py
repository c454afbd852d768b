"""Perturbation generator network and the budget projection.

The generator is an image-to-image residual network operating in the
surrogate's normalized input space. Its bounded output is denormalized back
to [0, 1] pixels and projected onto the intersection of the l-inf budget
ball and the valid pixel box.
"""

import math

import torch
import torch.nn as nn

from .data import IMAGENET_MEAN, IMAGENET_STD, ImageBatch, Normalization

LEAKY_SLOPE = 0.2
ACT_SCALE = math.sqrt(2.0)


class ScaledLeakyReLU(nn.Module):
    """Leaky rectifier with negative slope 0.2, output scaled by sqrt(2)."""

    def forward(self, x):
        return nn.functional.leaky_relu(x, LEAKY_SLOPE) * ACT_SCALE


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=3, stride=1, padding=1),
            nn.InstanceNorm2d(channels),
            ScaledLeakyReLU(),
            nn.Conv2d(channels, channels, kernel_size=3, stride=1, padding=1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class PerturbationGenerator(nn.Module):
    """Encoder / residual-stack / decoder image network.

    Input and output live in normalized space: the final tanh is mapped to
    [0, 1] pixels and then renormalized with the mean/std registered at
    construction, so forward() is space-preserving. Spatial size must be a
    multiple of 4 (two stride-2 stages each way).
    """

    def __init__(self, width=64, residual_blocks=6, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        super().__init__()
        w = width
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w, kernel_size=7, stride=1, padding=3),
            nn.InstanceNorm2d(w),
            ScaledLeakyReLU(),
            nn.Conv2d(w, 2 * w, kernel_size=3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w),
            ScaledLeakyReLU(),
            nn.Conv2d(2 * w, 4 * w, kernel_size=3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w),
            ScaledLeakyReLU(),
        )
        self.residuals = nn.Sequential(*[ResidualBlock(4 * w) for _ in range(residual_blocks)])
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(4 * w, 2 * w, kernel_size=3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * w),
            ScaledLeakyReLU(),
            nn.ConvTranspose2d(2 * w, w, kernel_size=3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(w),
            ScaledLeakyReLU(),
            nn.Conv2d(w, 3, kernel_size=7, stride=1, padding=3),
            nn.Tanh(),
        )
        self.width = width
        self.residual_blocks = residual_blocks
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got shape {tuple(x.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(
                f"spatial size must be a multiple of 4, got {x.shape[2]}x{x.shape[3]}"
            )
        t = self.decoder(self.residuals(self.encoder(x)))
        pixels = (t + 1.0) / 2.0
        return (pixels - self.mean) / self.std


def generator_forward(net, batch):
    """Map a normalized image batch through the generator (same shape out)."""
    return net(batch)


def project(x_hat, x, epsilon):
    """Clamp x_hat into the l-inf ball of radius epsilon/255 around x, then into [0, 1].

    epsilon is expressed on the 0-255 intensity scale. Both constraints are
    axis-aligned boxes, so the nested clamps realize exact projection onto
    their intersection.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    radius = epsilon / 255.0
    bounded = torch.clamp(x_hat, x - radius, x + radius)
    return torch.clamp(bounded, 0.0, 1.0)


def perturb(net, images, epsilon, normalization=None):
    """Full attack map: normalize, run the generator, denormalize, project.

    images: [0, 1] pixel tensor (B, 3, H, W) or ImageBatch. Returns the
    projected perturbed batch in [0, 1], differentiable w.r.t. the
    generator's parameters.
    """
    if isinstance(images, ImageBatch):
        images = images.tensor()
    if normalization is None:
        normalization = Normalization(
            tuple(net.mean.flatten().tolist()), tuple(net.std.flatten().tolist())
        )
    x_hat = normalization.invert(generator_forward(net, normalization.apply(images)))
    return project(x_hat, images, epsilon)
