"""Plan-driven plain 3D U-Net emitting per-class logits.

The sigmoid head lives at the loss/inference boundary, not in the network, so
training consumes raw logits. Channel widths double per stage from
base_channels and are capped at max_channels; per-axis pooling follows the
plan (axis a is downsampled in the first num_pool_per_axis[a] transitions).
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError
from .planning import Plan

MIN_BOTTLENECK_AXIS = 4


@dataclass
class NetworkSpec:
    input_channels: int
    output_channels: int
    stage_widths: tuple
    pool_strides: tuple  # one 3-tuple per encoder transition
    kernel_size: int = 3
    norm: str = "instance"
    nonlinearity: str = "leaky_relu"
    final_activation: str = "sigmoid"


def derive_network_spec(plan: Plan, class_count: int) -> NetworkSpec:
    pools = plan.num_pool_per_axis
    stages = max(pools) + 1
    widths = tuple(min(plan.base_channels * 2 ** i, plan.max_channels) for i in range(stages))
    strides = tuple(
        tuple(2 if t < pools[a] else 1 for a in range(3)) for t in range(stages - 1)
    )
    bottleneck = [p // 2 ** pools[a] for a, p in enumerate(plan.patch_size)]
    if min(bottleneck) < MIN_BOTTLENECK_AXIS:
        raise ConfigError(
            f"patch {plan.patch_size} pooled {pools} times leaves bottleneck "
            f"{tuple(bottleneck)}; need >= {MIN_BOTTLENECK_AXIS} per axis"
        )
    return NetworkSpec(1, class_count, widths, strides)


class ConvBlock(nn.Module):
    def __init__(self, in_channels, out_channels, stride=(1, 1, 1)):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv3d(in_channels, out_channels, 3, stride=stride, padding=1),
            nn.InstanceNorm3d(out_channels, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv3d(out_channels, out_channels, 3, padding=1),
            nn.InstanceNorm3d(out_channels, affine=True),
            nn.LeakyReLU(0.01, inplace=True),
        )

    def forward(self, x):
        return self.layers(x)


class UNet3D(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        widths = spec.stage_widths

        self.encoders = nn.ModuleList()
        self.encoders.append(ConvBlock(spec.input_channels, widths[0]))
        for t, stride in enumerate(spec.pool_strides):
            self.encoders.append(ConvBlock(widths[t], widths[t + 1], stride=stride))

        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for t in reversed(range(len(spec.pool_strides))):
            stride = spec.pool_strides[t]
            self.upsamplers.append(
                nn.ConvTranspose3d(widths[t + 1], widths[t], kernel_size=stride, stride=stride)
            )
            self.decoders.append(ConvBlock(2 * widths[t], widths[t]))

        self.head = nn.Conv3d(widths[0], spec.output_channels, kernel_size=1)

    def forward(self, x):
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
        for upsample, decoder, skip in zip(self.upsamplers, self.decoders, reversed(skips[:-1])):
            x = upsample(x)
            x = decoder(torch.cat([x, skip], dim=1))
        return self.head(x)


def build_network(plan: Plan, class_count: int, seed: int = 0) -> UNet3D:
    """Construct and initialize the network; same seed, same parameters."""
    spec = derive_network_spec(plan, class_count)
    torch.manual_seed(seed)
    return UNet3D(spec)
