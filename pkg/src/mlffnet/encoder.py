"""Four-stage hierarchical encoder producing a stride {4, 8, 16, 32} pyramid.

Stands in for a transformer backbone with the same stride/shape contract:
stacks of stride-2 conv-bn-relu blocks. Downstream fusion modules depend only
on the pyramid shapes.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigurationError, ContractViolation
from .layers import ConvBNReLU, Module

STRIDES = (4, 8, 16, 32)


@dataclass
class EncoderConfig:
    channels: tuple = (8, 16, 24, 32)
    blocks_per_stage: int = 1
    norm: str = "batch"

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ConfigurationError("encoder needs 4 channel widths")
        if self.channels[0] < 2:
            raise ConfigurationError("c1 must be >= 2")
        if list(self.channels) != sorted(self.channels):
            raise ConfigurationError("channel widths must be non-decreasing")
        if self.blocks_per_stage < 1:
            raise ConfigurationError("blocks_per_stage must be >= 1")


@dataclass
class FeaturePyramid:
    x1: object
    x2: object
    x3: object
    x4: object
    strides: tuple = STRIDES

    def levels(self):
        return [self.x1, self.x2, self.x3, self.x4]


class Encoder(Module):
    def __init__(self, rng, cfg: EncoderConfig):
        c1, c2, c3, c4 = cfg.channels
        norm = cfg.norm
        bps = cfg.blocks_per_stage
        # stage 1 downsamples by 4 (two stride-2 blocks), stages 2-4 by 2 each
        self.stage1 = [
            ConvBNReLU(rng, 3, c1, stride=2, norm=norm),
            ConvBNReLU(rng, c1, c1, stride=2, norm=norm),
        ] + [ConvBNReLU(rng, c1, c1, norm=norm) for _ in range(bps - 1)]
        self.stage2 = self._stage(rng, c1, c2, bps, norm)
        self.stage3 = self._stage(rng, c2, c3, bps, norm)
        self.stage4 = self._stage(rng, c3, c4, bps, norm)
        self.cfg = cfg

    @staticmethod
    def _stage(rng, in_c, out_c, bps, norm):
        blocks = [ConvBNReLU(rng, in_c, out_c, stride=2, norm=norm)]
        blocks += [ConvBNReLU(rng, out_c, out_c, norm=norm) for _ in range(bps - 1)]
        return blocks

    def forward(self, image) -> FeaturePyramid:
        n, c, h, w = image.shape
        if c != 3:
            raise ContractViolation(f"encoder expects 3-channel input, got {c}")
        if h % 32 or w % 32:
            raise ContractViolation(
                f"input extents must be divisible by 32, got {h}x{w}"
            )
        x = image
        outs = []
        for stage in (self.stage1, self.stage2, self.stage3, self.stage4):
            for block in stage:
                x = block.forward(x)
            outs.append(x)
        return FeaturePyramid(*outs)
