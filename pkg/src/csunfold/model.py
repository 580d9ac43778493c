"""The unfolded reconstruction network: K cascaded phases, each a
content-adaptive gradient step followed by a non-local proximal mapping,
plus the multi-phase training loss, parameter initialization and the
checkpoint format.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import sampling
from .nonlocal_prox import (
    NL_KINDS,
    DenseLayerParams,
    DinlmParams,
    ProxParams,
    prox_forward,
)
from .stepsize import SSG_VARIANTS, FebParams, SsgNetParams, gradient_step, ssg_forward

RESBLOCK_LAYERS = 3


@dataclass
class ModelConfig:
    """Hyperparameters of the unfolded network.

    Defaults follow the reference full-scale setting (15 phases, 33-pixel
    blocks, 32 feature channels, 3 feature-extraction blocks, 3x3
    non-local patches); desk-scale runs override them.
    """

    phases: int = 15
    block_size: int = 33
    rate: float = 0.25
    channels: int = 32
    feb_blocks: int = 3
    patch_size: int = 3
    ssg_variant: str = "full"
    nl_kind: str = "dinlm"
    nl_subsample: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.ssg_variant not in SSG_VARIANTS:
            raise ValueError(f"ssg_variant must be one of {SSG_VARIANTS}, got {self.ssg_variant!r}")
        if self.nl_kind not in NL_KINDS:
            raise ValueError(f"nl_kind must be one of {NL_KINDS}, got {self.nl_kind!r}")
        if self.nl_subsample not in (1, 2):
            raise ValueError(f"nl_subsample must be 1 or 2, got {self.nl_subsample}")

    @property
    def embed_channels(self):
        return max(1, self.channels // 2)


def desk_config(**overrides):
    """Small configuration that trains in minutes on one core."""
    cfg = ModelConfig(phases=3, channels=8, feb_blocks=1)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class PhaseParams:
    ssg: SsgNetParams
    prox: ProxParams

    def named_parameters(self, prefix):
        return self.ssg.named_parameters(f"{prefix}.ssg") + self.prox.named_parameters(f"{prefix}.prox")

    def named_buffers(self, prefix):
        return self.ssg.named_buffers(f"{prefix}.ssg")


@dataclass
class ModelParams:
    """Full parameter registry: per-phase weights plus the feature seed."""

    init_w: ad.Tensor
    init_b: ad.Tensor
    phases: list[PhaseParams] = field(default_factory=list)

    def named_parameters(self):
        out = [("init.w", self.init_w), ("init.b", self.init_b)]
        for k, phase in enumerate(self.phases):
            out += phase.named_parameters(f"phase{k:02d}")
        return out

    def named_buffers(self):
        out = []
        for k, phase in enumerate(self.phases):
            out += phase.named_buffers(f"phase{k:02d}")
        return out

    def tensors(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.tensors():
            t.zero_grad()

    def astype(self, dtype):
        """Deep copy in another precision (verification runs)."""
        by_name = {n: ad.Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                   for n, t in self.named_parameters()}
        clone = _clone_structure(self, by_name, dtype)
        return clone


def _clone_structure(params, by_name, dtype):
    def grab(name):
        return by_name[name]

    phases = []
    for k, phase in enumerate(params.phases):
        p = f"phase{k:02d}"
        ssg = phase.ssg
        if ssg.variant == "fixed":
            new_ssg = SsgNetParams(variant="fixed", rho_raw=grab(f"{p}.ssg.rho_raw"))
        else:
            febs = [
                FebParams(
                    grab(f"{p}.ssg.feb{i}.conv_w"),
                    grab(f"{p}.ssg.feb{i}.conv_b"),
                    grab(f"{p}.ssg.feb{i}.gamma"),
                    grab(f"{p}.ssg.feb{i}.beta"),
                    feb.bn_state.astype(dtype),
                )
                for i, feb in enumerate(ssg.febs)
            ]
            new_ssg = SsgNetParams(
                variant=ssg.variant,
                head_w=grab(f"{p}.ssg.head_w"),
                head_b=grab(f"{p}.ssg.head_b"),
                febs=febs,
                tail_w=grab(f"{p}.ssg.tail_w"),
                tail_b=grab(f"{p}.ssg.tail_b"),
                norm_w=grab(f"{p}.ssg.norm_w") if ssg.norm_w is not None else None,
                norm_b=grab(f"{p}.ssg.norm_b") if ssg.norm_b is not None else None,
                block_size=ssg.block_size,
            )
        prox = phase.prox

        def clone_block(block, tag):
            return [
                DenseLayerParams(
                    grab(f"{p}.prox.{tag}.l{j}.proj_w") if layer.proj_w is not None else None,
                    grab(f"{p}.prox.{tag}.l{j}.proj_b") if layer.proj_b is not None else None,
                    grab(f"{p}.prox.{tag}.l{j}.conv_w"),
                    grab(f"{p}.prox.{tag}.l{j}.conv_b"),
                )
                for j, layer in enumerate(block)
            ]

        nl = None
        if prox.nl is not None:
            nl = DinlmParams(
                grab(f"{p}.prox.nl.offset_w"),
                grab(f"{p}.prox.nl.offset_b"),
                grab(f"{p}.prox.nl.theta_w"),
                grab(f"{p}.prox.nl.theta_b"),
                grab(f"{p}.prox.nl.phi_w"),
                grab(f"{p}.prox.nl.g_w"),
                grab(f"{p}.prox.nl.proj_w"),
                grab(f"{p}.prox.nl.proj_b"),
                prox.nl.embed_channels,
            )
        new_prox = ProxParams(
            fusion_w=grab(f"{p}.prox.fusion_w"),
            fusion_b=grab(f"{p}.prox.fusion_b"),
            block1=clone_block(prox.block1, "block1"),
            nl=nl,
            block2=clone_block(prox.block2, "block2"),
            head_w=grab(f"{p}.prox.head_w"),
            head_b=grab(f"{p}.prox.head_b"),
        )
        phases.append(PhaseParams(new_ssg, new_prox))
    return ModelParams(by_name["init.w"], by_name["init.b"], phases)


# ---------------------------------------------------------------------------
# initialization


def _tensor_rng(seed, name):
    # per-tensor stream keyed by (seed, name): a component that exists in
    # two model variants draws bit-identical weights under the same seed,
    # so ablation comparisons differ only where the variants differ
    return np.random.default_rng(np.random.SeedSequence((seed, zlib.crc32(name.encode()))))


def init_parameters(config, seed=None, dtype=np.float32):
    """Deterministic parameter registry for a configuration.

    Conv weights are fan-in uniform on (-sqrt(6/fan_in), +sqrt(6/fan_in)),
    biases zero, batch-norm scale one / shift zero.  Each tensor draws from
    its own (seed, name)-keyed stream.  The offset head of every
    deformable module starts at exactly zero (weights and bias), so
    training begins at the plain non-local degeneration; the fixed-variant
    step scalar starts at an effective value of 1.0.
    """
    seed = config.seed if seed is None else seed
    c = config.channels
    d = config.patch_size
    ce = config.embed_channels

    def conv(name, cout, cin, kh, kw):
        fan_in = cin * kh * kw
        a = np.sqrt(6.0 / fan_in)
        draw = _tensor_rng(seed, name).uniform(-a, a, size=(cout, cin, kh, kw))
        return ad.Tensor(draw.astype(dtype), requires_grad=True)

    def zeros(shape):
        return ad.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return ad.Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    init_w = conv("init.w", c, 1, 3, 3)
    init_b = zeros(c)

    phases = []
    for k in range(config.phases):
        p = f"phase{k:02d}"
        if config.ssg_variant == "fixed":
            ssg = SsgNetParams(variant="fixed", rho_raw=zeros((1,)))
        else:
            febs = [
                FebParams(
                    conv(f"{p}.ssg.feb{i}.conv_w", c, c, 3, 3),
                    zeros(c),
                    ones(c),
                    zeros(c),
                    ad.BatchNormState(c, dtype),
                )
                for i in range(config.feb_blocks)
            ]
            norm_w = norm_b = None
            if config.ssg_variant == "full":
                norm_w = conv(f"{p}.ssg.norm_w", 1, 1, 3, 3)
                norm_b = zeros(1)
            elif config.ssg_variant == "block":
                norm_w = conv(f"{p}.ssg.norm_w", 1, 1, config.block_size, config.block_size)
                norm_b = zeros(1)
            ssg = SsgNetParams(
                variant=config.ssg_variant,
                head_w=conv(f"{p}.ssg.head_w", c, c, 3, 3),
                head_b=zeros(c),
                febs=febs,
                tail_w=conv(f"{p}.ssg.tail_w", 1, c, 3, 3),
                tail_b=zeros(1),
                norm_w=norm_w,
                norm_b=norm_b,
                block_size=config.block_size,
            )

        def dense_block(tag):
            layers = []
            for j in range(RESBLOCK_LAYERS):
                proj_w = proj_b = None
                if j > 0:
                    proj_w = conv(f"{p}.prox.{tag}.l{j}.proj_w", c, (j + 1) * c, 1, 1)
                    proj_b = zeros(c)
                layers.append(
                    DenseLayerParams(proj_w, proj_b, conv(f"{p}.prox.{tag}.l{j}.conv_w", c, c, 3, 3), zeros(c))
                )
            return layers

        nl = None
        if config.nl_kind != "none":
            nl = DinlmParams(
                offset_w=zeros((2 * d * d, c, 3, 3)),
                offset_b=zeros(2 * d * d),
                theta_w=conv(f"{p}.prox.nl.theta_w", ce, c, d, d),
                theta_b=zeros(ce),
                phi_w=conv(f"{p}.prox.nl.phi_w", ce, c, d, d),
                g_w=conv(f"{p}.prox.nl.g_w", ce, c, d, d),
                proj_w=conv(f"{p}.prox.nl.proj_w", c, ce, 1, 1),
                proj_b=zeros(c),
                embed_channels=ce,
            )
        prox = ProxParams(
            fusion_w=conv(f"{p}.prox.fusion_w", c, c + 1, 3, 3),
            fusion_b=zeros(c),
            block1=dense_block("block1"),
            nl=nl,
            block2=dense_block("block2"),
            head_w=conv(f"{p}.prox.head_w", 1, c, 3, 3),
            head_b=zeros(1),
        )
        phases.append(PhaseParams(ssg, prox))
    return ModelParams(init_w, init_b, phases)


def parameter_count(config):
    """Closed-form number of trainable scalars for a configuration."""
    c = config.channels
    d = config.patch_size
    ce = config.embed_channels
    q = config.feb_blocks
    b = config.block_size

    conv = lambda cout, cin, k: cout * cin * k * k + cout  # weight + bias

    total = conv(c, 1, 3)  # feature seed
    if config.ssg_variant == "fixed":
        ssg = 1
    else:
        ssg = conv(c, c, 3)                    # head
        ssg += q * (conv(c, c, 3) + 2 * c)     # FEBs: conv + gamma + beta
        ssg += conv(1, c, 3)                   # tail
        if config.ssg_variant == "full":
            ssg += conv(1, 1, 3)
        elif config.ssg_variant == "block":
            ssg += conv(1, 1, b)

    prox = conv(c, c + 1, 3)  # fusion
    block = RESBLOCK_LAYERS * conv(c, c, 3)
    block += sum(conv(c, (j + 1) * c, 1) for j in range(1, RESBLOCK_LAYERS))
    prox += 2 * block
    if config.nl_kind != "none":
        nl = conv(2 * d * d, c, 3)             # offset head
        nl += conv(ce, c, d)                   # theta (with bias)
        nl += 2 * (ce * c * d * d)             # phi and g, no bias
        nl += conv(c, ce, 1)                   # projection
        prox += nl
    prox += conv(1, c, 3)  # output head

    return total + config.phases * (ssg + prox)


# ---------------------------------------------------------------------------
# forward and loss


def forward(params, config, op, measurements, training=False, collect_diag=False):
    """Run all phases; returns (list of per-phase images, final features, diag).

    ``measurements`` is a MeasurementSet (inference) or an in-graph tensor
    of shape [1, n_B, by, bx] (training with a learnable matrix).
    """
    if isinstance(measurements, sampling.MeasurementSet):
        by, bx = measurements.blocks_y, measurements.blocks_x
        meas = measurements.as_tensor(params.init_w.dtype)
    else:
        meas = measurements
        by, bx = meas.shape[2], meas.shape[3]

    offset_stats = [] if collect_diag else None
    x = sampling.upsample_tensor(op, meas, by, bx)
    h = ad.conv2d(x, params.init_w, params.init_b, padding=1)
    xs = []
    for phase in params.phases:
        step_map = ssg_forward(phase.ssg, h, training)
        r = gradient_step(op, x, meas, step_map)
        x, h, _ = prox_forward(
            phase.prox, r, h, config.nl_kind, config.nl_subsample, offset_stats
        )
        xs.append(x)
    diag = {"offset_ranges": offset_stats} if collect_diag else {}
    return xs, h, diag


def loss(outputs, target):
    """Summed squared pixel error averaged over phases and batch items.

    ``target`` is [N, 1, H, W]; each phase output must match.  The scale
    is 1 / (phase count * N).
    """
    if not outputs:
        raise ValueError("loss needs at least one phase output")
    total = None
    for x in outputs:
        if x.shape != target.shape:
            raise ValueError(f"output shape {x.shape} does not match target {target.shape}")
        diff = ad.sub(x, target)
        term = ad.sum_all(ad.mul(diff, diff))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / (len(outputs) * target.shape[0]))


def batch_loss(per_image_outputs, targets):
    """Average of per-image losses: 1/(K*N) sum over images and phases."""
    terms = [loss(outs, t) for outs, t in zip(per_image_outputs, targets)]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# checkpoint format (binary, little-endian)

DCSW_MAGIC = b"DCSW"
DCSW_VERSION = 1
_SSG_CODES = {"full": 0, "block": 1, "global": 2, "fixed": 3}
_NL_CODES = {"dinlm": 0, "nlm": 1, "none": 2}
_SSG_NAMES = {v: k for k, v in _SSG_CODES.items()}
_NL_NAMES = {v: k for k, v in _NL_CODES.items()}
_CONFIG_BLOCK = "<HHHHBBBBBf"

PHI_TENSOR_NAME = "sampling.phi"


def save_checkpoint(path, config, params, op):
    """Serialize config + sampling matrix + every parameter and buffer."""
    tensors = [(PHI_TENSOR_NAME, op.phi.data)]
    tensors += [(n, t.data) for n, t in params.named_parameters()]
    tensors += [(n, arr) for n, arr in params.named_buffers()]

    with open(path, "wb") as fh:
        fh.write(DCSW_MAGIC)
        fh.write(struct.pack("<B", DCSW_VERSION))
        fh.write(
            struct.pack(
                _CONFIG_BLOCK,
                config.phases,
                config.block_size,
                op.n_meas,
                config.channels,
                config.feb_blocks,
                config.patch_size,
                _SSG_CODES[config.ssg_variant],
                _NL_CODES[config.nl_kind],
                config.nl_subsample,
                config.rate,
            )
        )
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (config, params, op).

    The sampling matrix is restored frozen (checkpoints do not record the
    trainable flag; resume learning by marking it trainable explicitly).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 5 or raw[:4] != DCSW_MAGIC:
        raise ValueError(f"not a checkpoint file: {path!r}")
    if raw[4] != DCSW_VERSION:
        raise ValueError(f"unsupported checkpoint version {raw[4]}")
    off = 5
    k, b, n_meas, c, q, d, ssg_code, nl_code, sub, rate = struct.unpack_from(_CONFIG_BLOCK, raw, off)
    off += struct.calcsize(_CONFIG_BLOCK)
    if ssg_code not in _SSG_NAMES or nl_code not in _NL_NAMES:
        raise ValueError(f"checkpoint carries unknown variant codes ({ssg_code}, {nl_code})")
    config = ModelConfig(
        phases=k,
        block_size=b,
        rate=float(rate),
        channels=c,
        feb_blocks=q,
        patch_size=d,
        ssg_variant=_SSG_NAMES[ssg_code],
        nl_kind=_NL_NAMES[nl_code],
        nl_subsample=sub,
    )

    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    loaded = {}
    for _ in range(count):
        if off + 2 > len(raw):
            raise ValueError("truncated checkpoint (tensor name)")
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        if off + 1 > len(raw):
            raise ValueError("truncated checkpoint (tensor rank)")
        ndim = raw[off]
        off += 1
        dims = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims.append(dim)
        nbytes = int(np.prod(dims, dtype=np.int64)) * 4 if dims else 4
        if off + nbytes > len(raw):
            raise ValueError(f"truncated checkpoint (payload of {name!r})")
        data = np.frombuffer(raw[off:off + nbytes], dtype="<f4").reshape(dims)
        off += nbytes
        loaded[name] = data.copy()
    if off != len(raw):
        raise ValueError(f"checkpoint has {len(raw) - off} trailing bytes")

    if PHI_TENSOR_NAME not in loaded:
        raise ValueError("checkpoint is missing the sampling matrix")
    phi = loaded.pop(PHI_TENSOR_NAME)
    op = sampling.SamplingOperator(
        block_size=b,
        rate=float(rate),
        n_meas=n_meas,
        phi=ad.Tensor(phi),
        learnable=False,
        phi64=phi.astype(np.float64),
    )

    params = init_parameters(config, seed=0)
    for name, tensor in params.named_parameters():
        if name not in loaded:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        src = loaded.pop(name)
        if tuple(src.shape) != tensor.data.shape:
            raise ValueError(f"parameter {name!r} shape {src.shape} != expected {tensor.data.shape}")
        tensor.data = src.astype(tensor.data.dtype)
    for name, arr in params.named_buffers():
        if name not in loaded:
            raise ValueError(f"checkpoint is missing buffer {name!r}")
        src = loaded.pop(name)
        arr[...] = src
    if loaded:
        raise ValueError(f"checkpoint carries unknown tensors: {sorted(loaded)}")
    return config, params, op
