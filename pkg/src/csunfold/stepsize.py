"""Content-adaptive gradient descent: a small network turns the previous
phase's features into a per-pixel step-size map, which modulates the
fidelity gradient update.

Variants: "full" emits one step size per pixel, "block" one per BxB block
(tiled back to pixels), "global" a single value per image, and "fixed" a
learned per-phase scalar that ignores the input.  All variants squash
through tanh and add 1, so every step size lies in (0, 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .sampling import apply_fidelity_gradient

SSG_VARIANTS = ("full", "block", "global", "fixed")


@dataclass
class FebParams:
    """One feature extraction block: conv, batch norm, relu."""

    conv_w: ad.Tensor
    conv_b: ad.Tensor
    gamma: ad.Tensor
    beta: ad.Tensor
    bn_state: ad.BatchNormState

    def named_parameters(self, prefix):
        return [
            (f"{prefix}.conv_w", self.conv_w),
            (f"{prefix}.conv_b", self.conv_b),
            (f"{prefix}.gamma", self.gamma),
            (f"{prefix}.beta", self.beta),
        ]

    def named_buffers(self, prefix):
        return [
            (f"{prefix}.running_mean", self.bn_state.running_mean),
            (f"{prefix}.running_var", self.bn_state.running_var),
        ]


@dataclass
class SsgNetParams:
    """Step-size generator weights for one phase.

    The feature-extraction trunk (head conv, Q FEBs, skip, tail conv) is
    shared by the full/block/global variants; the normalization stage
    differs per variant.  The fixed variant keeps only ``rho_raw`` and
    returns tanh(rho_raw) + 1.
    """

    variant: str
    head_w: ad.Tensor | None = None
    head_b: ad.Tensor | None = None
    febs: list[FebParams] = field(default_factory=list)
    tail_w: ad.Tensor | None = None
    tail_b: ad.Tensor | None = None
    norm_w: ad.Tensor | None = None
    norm_b: ad.Tensor | None = None
    rho_raw: ad.Tensor | None = None
    block_size: int = 0

    def named_parameters(self, prefix):
        if self.variant == "fixed":
            return [(f"{prefix}.rho_raw", self.rho_raw)]
        out = [(f"{prefix}.head_w", self.head_w), (f"{prefix}.head_b", self.head_b)]
        for i, feb in enumerate(self.febs):
            out += feb.named_parameters(f"{prefix}.feb{i}")
        out += [(f"{prefix}.tail_w", self.tail_w), (f"{prefix}.tail_b", self.tail_b)]
        if self.variant in ("full", "block"):
            out += [(f"{prefix}.norm_w", self.norm_w), (f"{prefix}.norm_b", self.norm_b)]
        return out

    def named_buffers(self, prefix):
        out = []
        for i, feb in enumerate(self.febs):
            out += feb.named_buffers(f"{prefix}.feb{i}")
        return out


@dataclass
class StepSizeMap:
    """Nonnegative per-pixel (or per-block / global) step sizes in [0, 2]."""

    values: ad.Tensor
    variant: str


def ssg_forward(params, h_prev, training=False):
    """Generate the step-size map for one phase from the previous features.

    full:   trunk -> 3x3 conv -> tanh + 1            (one value per pixel)
    block:  trunk -> BxB stride-B conv -> tanh + 1 -> tile to pixels
    global: trunk -> global average pool -> tanh + 1 (a single scalar)
    fixed:  tanh(rho_raw) + 1, ignoring the input entirely
    """
    if params.variant == "fixed":
        rho = ad.add_scalar(ad.tanh(ad.reshape(params.rho_raw, (1, 1, 1, 1))), 1.0)
        return StepSizeMap(rho, "fixed")

    if h_prev.shape[1] != params.head_w.shape[1]:
        raise ValueError(
            f"feature channel mismatch: input has {h_prev.shape[1]}, generator expects {params.head_w.shape[1]}"
        )
    head = ad.conv2d(h_prev, params.head_w, params.head_b, stride=1, padding=1)
    z = head
    for feb in params.febs:
        z = ad.conv2d(z, feb.conv_w, feb.conv_b, stride=1, padding=1)
        z = ad.batchnorm(z, feb.gamma, feb.beta, feb.bn_state, training)
        z = ad.relu(z)
    z = ad.add(z, head)
    z = ad.conv2d(z, params.tail_w, params.tail_b, stride=1, padding=1)

    if params.variant == "full":
        m = ad.conv2d(z, params.norm_w, params.norm_b, stride=1, padding=1)
        return StepSizeMap(ad.add_scalar(ad.tanh(m), 1.0), "full")
    if params.variant == "block":
        b = params.block_size
        m = ad.conv2d(z, params.norm_w, params.norm_b, stride=b, padding=0)
        m = ad.add_scalar(ad.tanh(m), 1.0)
        return StepSizeMap(ad.tile_upsample(m, b), "block")
    if params.variant == "global":
        m = ad.global_avg_pool(z)
        return StepSizeMap(ad.add_scalar(ad.tanh(m), 1.0), "global")
    raise ValueError(f"unknown step-size variant {params.variant!r}")


def gradient_step(op, x_prev, measurements, step_map):
    """One modulated gradient update on the data-fit term.

    r = x_prev - map * transpose_apply(measure(x_prev) - y).  The map may
    be a StepSizeMap or a bare tensor broadcastable onto the image.
    """
    values = step_map.values if isinstance(step_map, StepSizeMap) else step_map
    grad = apply_fidelity_gradient(op, x_prev, measurements)
    if values.size != 1 and values.shape != grad.shape:
        if values.shape == (grad.shape[0], 1, 1, 1):
            # per-item scalar (global variant on a batch): tile to pixels
            values = ad.tile_upsample(values, grad.shape[2], grad.shape[3])
        else:
            raise ValueError(f"step map shape {values.shape} does not match image {grad.shape}")
    return ad.sub(x_prev, ad.mul(values, grad))
