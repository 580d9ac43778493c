"""Proximal mapping network with deformation-aware non-local attention.

The refinement half of each phase: the gradient-step output is fused with
the previous phase's features, passed through two densely connected
residual blocks, and (optionally) a non-local module sits between them.

The non-local module comes in two flavours.  The vanilla one embeds every
position with ordinary small convolutions and mixes values by a
row-normalized exp(theta_i . phi_j) affinity.  The deformation-aware one
first predicts per-tap fractional offsets and reads the key/value patches
through bilinear resampling (a deformable convolution), so similarity is
measured up to a learned local warp.  With zero offsets the two coincide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

NL_KINDS = ("dinlm", "nlm", "none")

# below this spatial extent the key/value subsampling trick is disabled
MIN_SUBSAMPLE_HW = 8


@dataclass
class AffinityMatrix:
    """Row-normalized attention weights: queries x (possibly pooled) keys."""

    entries: np.ndarray
    queries: int
    keys: int


@dataclass
class DinlmParams:
    """Weights of one non-local module (shared layout for both flavours).

    The offset head and the deformable kernels are only exercised by the
    deformation-aware path; phi/g kernels carry no bias by construction.
    """

    offset_w: ad.Tensor
    offset_b: ad.Tensor
    theta_w: ad.Tensor
    theta_b: ad.Tensor
    phi_w: ad.Tensor
    g_w: ad.Tensor
    proj_w: ad.Tensor
    proj_b: ad.Tensor
    embed_channels: int

    def named_parameters(self, prefix):
        return [
            (f"{prefix}.offset_w", self.offset_w),
            (f"{prefix}.offset_b", self.offset_b),
            (f"{prefix}.theta_w", self.theta_w),
            (f"{prefix}.theta_b", self.theta_b),
            (f"{prefix}.phi_w", self.phi_w),
            (f"{prefix}.g_w", self.g_w),
            (f"{prefix}.proj_w", self.proj_w),
            (f"{prefix}.proj_b", self.proj_b),
        ]


@dataclass
class DenseLayerParams:
    proj_w: ad.Tensor | None  # 1x1 projection of the concatenated inputs; None on layer 0
    proj_b: ad.Tensor | None
    conv_w: ad.Tensor
    conv_b: ad.Tensor

    def named_parameters(self, prefix):
        out = []
        if self.proj_w is not None:
            out += [(f"{prefix}.proj_w", self.proj_w), (f"{prefix}.proj_b", self.proj_b)]
        out += [(f"{prefix}.conv_w", self.conv_w), (f"{prefix}.conv_b", self.conv_b)]
        return out


@dataclass
class ProxParams:
    """All weights of one phase's proximal mapping network."""

    fusion_w: ad.Tensor
    fusion_b: ad.Tensor
    block1: list[DenseLayerParams]
    nl: DinlmParams | None
    block2: list[DenseLayerParams]
    head_w: ad.Tensor
    head_b: ad.Tensor

    def named_parameters(self, prefix):
        out = [(f"{prefix}.fusion_w", self.fusion_w), (f"{prefix}.fusion_b", self.fusion_b)]
        for i, layer in enumerate(self.block1):
            out += layer.named_parameters(f"{prefix}.block1.l{i}")
        if self.nl is not None:
            out += self.nl.named_parameters(f"{prefix}.nl")
        for i, layer in enumerate(self.block2):
            out += layer.named_parameters(f"{prefix}.block2.l{i}")
        out += [(f"{prefix}.head_w", self.head_w), (f"{prefix}.head_b", self.head_b)]
        return out


def _flatten_positions(t):
    """[1, C, H, W] -> [H*W, C]."""
    _, c, h, w = t.shape
    return ad.transpose2d(ad.reshape(t, (c, h * w)))


def _attend_one(theta, phi, g, embed_channels):
    """Single-image affinity and value mixing: [1,ce,H,W] inputs."""
    _, _, h, w = theta.shape
    tq = _flatten_positions(theta)
    pk = _flatten_positions(phi)
    gk = _flatten_positions(g)
    aff = ad.softmax_rows(ad.matmul(tq, ad.transpose2d(pk)))
    mixed = ad.matmul(aff, gk)  # [HW, c_e]
    return ad.reshape(ad.transpose2d(mixed), (1, embed_channels, h, w)), aff


def _attend(features, theta, phi, g, params):
    """Shared tail: affinity, value mixing, projection, residual add.

    Attention itself runs per batch item (each image mixes only its own
    positions); everything else stays batched.
    """
    n = features.shape[0]
    if n == 1:
        mixed, aff = _attend_one(theta, phi, g, params.embed_channels)
    else:
        parts = []
        aff = None
        for i in range(n):
            part, aff = _attend_one(
                ad.take_batch(theta, i), ad.take_batch(phi, i), ad.take_batch(g, i),
                params.embed_channels,
            )
            parts.append(part)
        mixed = ad.concat_leading(parts)
    out = ad.add(features, ad.conv2d(mixed, params.proj_w, params.proj_b))
    return out, AffinityMatrix(aff.data, aff.shape[0], aff.shape[1])


def _maybe_pool(t, subsample):
    _, _, h, w = t.shape
    if subsample > 1 and h >= MIN_SUBSAMPLE_HW and w >= MIN_SUBSAMPLE_HW:
        return ad.maxpool2d(t, subsample)
    return t


def nlm_forward(features, params, subsample=1):
    """Plain non-local mixing: embeddings read an undeformed patch grid.

    Runs the deformation-aware kernel path with offsets pinned at zero,
    which is numerically the ordinary convolution (the taps sit exactly on
    the integer grid) and keeps this module bit-identical to the
    deformation-aware one at its no-warp degeneration.
    """
    d = params.theta_w.shape[2]
    n, _, h, w = features.shape
    zero_offsets = ad.Tensor(np.zeros((n, 2 * d * d, h, w), dtype=features.data.dtype))
    return _attend_deformed(features, params, zero_offsets, subsample)


def dinlm_forward(features, params, subsample=1, offset_stats=None):
    """Deformation-aware non-local mixing.

    Per-position offsets come from a 3x3 conv head; the key and value
    embeddings read through those offsets via deformable convolution
    (sharing the same offsets), while the query embedding stays an
    ordinary convolution.
    """
    offsets = ad.conv2d(features, params.offset_w, params.offset_b, padding=1)
    if offset_stats is not None:
        offset_stats.append((float(offsets.data.min()), float(offsets.data.max())))
    return _attend_deformed(features, params, offsets, subsample)


def _attend_deformed(features, params, offsets, subsample):
    theta = ad.conv2d(features, params.theta_w, params.theta_b, padding=params.theta_w.shape[2] // 2)
    # phi and g share the offsets, so one stacked deformable pass reads the
    # resampled taps once for both embeddings
    ce = params.embed_channels
    stacked = ad.deformable_conv2d(features, ad.concat_leading([params.phi_w, params.g_w]), offsets)
    phi = ad.slice_channels(stacked, 0, ce)
    g = ad.slice_channels(stacked, ce, 2 * ce)
    phi = _maybe_pool(phi, subsample)
    g = _maybe_pool(g, subsample)
    return _attend(features, theta, phi, g, params)


def _dense_block(x, layers):
    """Densely connected conv+relu stack with a residual skip.

    Layer j sees the concatenation of the block input and every previous
    layer output, projected back to the working width by a 1x1 conv
    (layer 0 sees the input directly).  The block output adds the last
    layer back onto the input.
    """
    outs = []
    for j, layer in enumerate(layers):
        if j == 0:
            inp = x
        else:
            cat = ad.concat_channels([x] + outs)
            inp = ad.conv2d(cat, layer.proj_w, layer.proj_b)
        outs.append(ad.relu(ad.conv2d(inp, layer.conv_w, layer.conv_b, padding=1)))
    return ad.add(x, outs[-1])


def prox_forward(params, r, h_prev, nl_kind="dinlm", subsample=1, offset_stats=None):
    """Refine a gradient-step output into (x, h) for the next phase.

    Fuses r with the carried features, runs residual block / non-local /
    residual block, then emits the image as r plus a 1-channel head and
    exports the second block's features.
    """
    if nl_kind not in NL_KINDS:
        raise ValueError(f"unknown non-local kind {nl_kind!r}")
    f0 = ad.conv2d(ad.concat_channels([r, h_prev]), params.fusion_w, params.fusion_b, padding=1)
    f1 = _dense_block(f0, params.block1)
    affinity = None
    if nl_kind == "dinlm":
        f2, affinity = dinlm_forward(f1, params.nl, subsample, offset_stats)
    elif nl_kind == "nlm":
        f2, affinity = nlm_forward(f1, params.nl, subsample)
    else:
        f2 = f1
    h = _dense_block(f2, params.block2)
    x = ad.add(r, ad.conv2d(h, params.head_w, params.head_b, padding=1))
    return x, h, affinity
