"""Fusion modules (multi-scale, deep-feature enhancement, global attention)
and full model assembly with the four ablation variants.

Variant ladder: ``bas`` is a plain skip-concat U-Net-style decoder over the
encoder pyramid; ``mam`` adds the multi-scale attention module on the shallow
level; ``mam_hfem`` additionally routes the three deep levels through the
enhancement module; ``full`` swaps the decoder's skip-concat for global
attention. Every variant emits three sigmoid maps (p1, p2, p3) at input
resolution; ``bas`` duplicates its single head for loss compatibility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import Encoder, EncoderConfig
from .errors import ConfigurationError, ContractViolation
from .layers import Conv2d, ConvBNReLU, Module
from .tensor import Tensor

PRED_EPS = 1e-7
VARIANTS = ("bas", "mam", "mam_hfem", "full")


@dataclass
class PredictionSet:
    """The three prediction maps, clamped to [PRED_EPS, 1 - PRED_EPS]."""

    p1: Tensor
    p2: Tensor
    p3: Tensor

    def maps(self):
        return [self.p1, self.p2, self.p3]


class MultiScaleAttention(Module):
    """Shallow-feature module: four factorized/dilated branches with kernel
    sizes {1, 3, 5, 7}, channel concat, residual sum, then a sigmoid-gated
    spatial attention that suppresses background noise."""

    KERNELS = (1, 3, 5, 7)

    def __init__(self, rng, channels):
        if channels % 4:
            raise ConfigurationError(
                f"multi-scale module needs channels divisible by 4, got {channels}"
            )
        quarter = channels // 4
        self.branches = []
        for k in self.KERNELS:
            rate = max(1, (k + 1) // 2)  # {1, 2, 3, 4}
            self.branches.append([
                Conv2d(rng, channels, quarter, 1),
                Conv2d(rng, quarter, quarter, (k, 1), padding=(k // 2, 0)),
                Conv2d(rng, quarter, quarter, (1, k), padding=(0, k // 2)),
                Conv2d(rng, quarter, quarter, 3, padding=rate, dilation=rate),
            ])
        self.fuse = Conv2d(rng, channels, channels, 1)
        self.att = Conv2d(rng, channels, 1, 1)

    def forward(self, x1):
        outs = []
        for branch in self.branches:
            b = x1
            for conv in branch:
                b = T.activation(conv.forward(b), "relu")
            outs.append(b)
        fused = self.fuse.forward(T.concat_channels(outs))
        pre = fused + x1
        gate = T.activation(self.att.forward(pre), "sigmoid")
        return pre * T.broadcast_to(gate, pre.shape)


class ChannelAttention(Module):
    """Squeeze-excite gate: global average pool -> bottleneck -> sigmoid."""

    def __init__(self, rng, channels, reduction=4):
        hidden = max(channels // reduction, 1)
        self.fc1 = Conv2d(rng, channels, hidden, 1)
        self.fc2 = Conv2d(rng, hidden, channels, 1)

    def forward(self, x):
        pooled = T.reduce(x, "mean", "spatial")
        gate = T.activation(
            self.fc2.forward(T.activation(self.fc1.forward(pooled), "relu")),
            "sigmoid",
        )
        return x * T.broadcast_to(gate, x.shape)


class SpatialAttention(Module):
    def __init__(self, rng, channels):
        self.att = Conv2d(rng, channels, 1, 1)

    def forward(self, x):
        gate = T.activation(self.att.forward(x), "sigmoid")
        return x * T.broadcast_to(gate, x.shape)


class DeepFeatureEnhancement(Module):
    """Aggregates the three deep pyramid levels deep-to-shallow, then
    re-weights each aggregate with channel and spatial attention."""

    def __init__(self, rng, in_channels, width):
        c2, c3, c4 = in_channels
        self.align2 = Conv2d(rng, c2, width, 1)
        self.align3 = Conv2d(rng, c3, width, 1)
        self.align4 = Conv2d(rng, c4, width, 1)
        self.agg3 = Conv2d(rng, 2 * width, width, 3, padding=1)
        self.agg2 = Conv2d(rng, 2 * width, width, 3, padding=1)
        self.channel_att = [ChannelAttention(rng, width) for _ in range(3)]
        self.spatial_att = [SpatialAttention(rng, width) for _ in range(3)]
        self.width = width

    def forward(self, x2, x3, x4):
        for hi, lo, name in ((x2, x3, "x2/x3"), (x3, x4, "x3/x4")):
            if (hi.shape[2] != 2 * lo.shape[2]
                    or hi.shape[3] != 2 * lo.shape[3]):
                raise ContractViolation(
                    f"pyramid ratio broken at {name}: {hi.shape} vs {lo.shape}"
                )
        a4 = self.align4.forward(x4)
        x3p = self.agg3.forward(T.concat_channels([
            self.align3.forward(x3),
            T.upsample_bilinear(a4, x3.shape[2], x3.shape[3]),
        ]))
        x2p = self.agg2.forward(T.concat_channels([
            self.align2.forward(x2),
            T.upsample_bilinear(x3p, x2.shape[2], x2.shape[3]),
        ]))
        outs = []
        for i, feat in enumerate((x2p, x3p, a4)):
            outs.append(
                self.spatial_att[i].forward(self.channel_att[i].forward(feat))
            )
        return tuple(outs)  # (t2, t3, t4)


class GlobalAttention(Module):
    """Non-local decoder attention. Keys/values come from a fusion of the
    decoder map with the same-level encoder map; queries from the decoder map.
    Output is a residual re-alignment of the decoder map."""

    def __init__(self, rng, dec_channels, enc_channels, attn_width):
        fused = dec_channels
        self.fuse = Conv2d(rng, dec_channels + enc_channels, fused, 3, padding=1)
        self.query = Conv2d(rng, dec_channels, attn_width, 1)
        self.key = Conv2d(rng, fused, attn_width, 1)
        self.value = Conv2d(rng, fused, attn_width, 1)
        self.out = Conv2d(rng, attn_width, dec_channels, 1)
        self.attn_width = attn_width

    def forward(self, decoder_feat, encoder_feat, return_attention=False):
        dn, dc, dh, dw = decoder_feat.shape
        en, ec, eh, ew = encoder_feat.shape
        if (dn, dh, dw) != (en, eh, ew):
            raise ContractViolation(
                f"global attention needs matching batch/spatial extents: "
                f"{decoder_feat.shape} vs {encoder_feat.shape} "
                f"(upsample before calling)"
            )
        fused = self.fuse.forward(
            T.concat_channels([decoder_feat, encoder_feat])
        )
        ca = self.attn_width
        hw = dh * dw
        q = T.reshape(self.query.forward(decoder_feat), (dn, ca, hw))
        k = T.reshape(self.key.forward(fused), (dn, ca, hw))
        v = T.reshape(self.value.forward(fused), (dn, ca, hw))
        logits = T.matmul_batched(T.transpose_last2(q), k) * (1.0 / math.sqrt(ca))
        attn = T.activation(logits, "softmax_lastdim")  # rows over key positions
        agg = T.matmul_batched(attn, T.transpose_last2(v))  # [n, hw, ca]
        agg = T.reshape(T.transpose_last2(agg), (dn, ca, dh, dw))
        out = decoder_feat + self.out.forward(agg)
        if return_attention:
            return out, attn
        return out


class Head(Module):
    def __init__(self, rng, channels):
        self.conv = Conv2d(rng, channels, 1, 1)

    def forward(self, feat, out_h, out_w):
        # upsample logits, then squash: keeps mask boundaries sharp at full
        # resolution, which upsampled probabilities cannot represent
        logits = T.upsample_bilinear(self.conv.forward(feat), out_h, out_w)
        p = T.activation(logits, "sigmoid")
        return T.clamp(p, PRED_EPS, 1.0 - PRED_EPS)


class MlffNet(Module):
    """Encoder + optional fusion modules + decoder with three heads."""

    def __init__(self, variant="full", encoder_cfg=None, decoder_width=16,
                 attn_width=8, seed=0):
        if variant not in VARIANTS:
            raise ConfigurationError(
                f"unknown variant {variant!r}, expected one of {VARIANTS}"
            )
        cfg = encoder_cfg or EncoderConfig()
        rng = np.random.RandomState(seed)
        self.variant = variant
        self.encoder_cfg = cfg
        self.decoder_width = decoder_width
        self.attn_width = attn_width
        c1, c2, c3, c4 = cfg.channels
        cd = decoder_width

        self.encoder = Encoder(rng, cfg)
        self.mam = (
            MultiScaleAttention(rng, c1) if variant != "bas" else None
        )
        self.hfem = (
            DeepFeatureEnhancement(rng, (c2, c3, c4), cd)
            if variant in ("mam_hfem", "full") else None
        )
        skip = (cd, cd, cd) if self.hfem is not None else (c2, c3, c4)
        self.d4_channels = skip[2]
        if variant == "full":
            # 3x3 conv-bn-relu aligner: a plain 1x1 leaves the decoder path
            # fully linear, which cannot fit fine mask detail
            self.align3 = ConvBNReLU(rng, self.d4_channels, cd)
            self.align2 = ConvBNReLU(rng, cd, cd)
            self.align1 = ConvBNReLU(rng, cd, cd)
            self.gam3 = GlobalAttention(rng, cd, skip[1], attn_width)
            self.gam2 = GlobalAttention(rng, cd, skip[0], attn_width)
            self.gam1 = GlobalAttention(rng, cd, c1, attn_width)
            d1c = d2c = d3c = cd
        else:
            self.dec3 = ConvBNReLU(rng, self.d4_channels + skip[1], cd)
            self.dec2 = ConvBNReLU(rng, cd + skip[0], cd)
            self.dec1 = ConvBNReLU(rng, cd + c1, cd)
            d1c = d2c = d3c = cd
        if variant == "bas":
            self.head = Head(rng, d1c)
        else:
            self.head1 = Head(rng, d1c)
            self.head2 = Head(rng, d2c)
            self.head3 = Head(rng, d3c)

    # ---- forward ---------------------------------------------------------

    def forward(self, image) -> PredictionSet:
        n, c, h, w = image.shape
        pyr = self.encoder.forward(image)
        t1 = self.mam.forward(pyr.x1) if self.mam is not None else pyr.x1
        if self.hfem is not None:
            t2, t3, t4 = self.hfem.forward(pyr.x2, pyr.x3, pyr.x4)
        else:
            t2, t3, t4 = pyr.x2, pyr.x3, pyr.x4

        def up2(t, ref):
            return T.upsample_bilinear(t, ref.shape[2], ref.shape[3])

        d4 = t4
        if self.variant == "full":
            d3 = self.gam3.forward(self.align3.forward(up2(d4, t3)), t3)
            d2 = self.gam2.forward(self.align2.forward(up2(d3, t2)), t2)
            d1 = self.gam1.forward(self.align1.forward(up2(d2, t1)), t1)
        else:
            d3 = self.dec3.forward(T.concat_channels([up2(d4, t3), t3]))
            d2 = self.dec2.forward(T.concat_channels([up2(d3, t2), t2]))
            d1 = self.dec1.forward(T.concat_channels([up2(d2, t1), t1]))

        if self.variant == "bas":
            p = self.head.forward(d1, h, w)
            return PredictionSet(p, p, p)
        return PredictionSet(
            self.head1.forward(d1, h, w),
            self.head2.forward(d2, h, w),
            self.head3.forward(d3, h, w),
        )


def build_model(variant, encoder_cfg=None, decoder_width=16, attn_width=8,
                seed=0) -> MlffNet:
    return MlffNet(variant, encoder_cfg, decoder_width, attn_width, seed)
