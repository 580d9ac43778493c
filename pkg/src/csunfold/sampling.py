"""Block-based compressed sensing: sampling operator, measurement sets,
initial reconstruction and the fidelity gradient.

An image is cut into non-overlapping BxB blocks; each block is measured by
a matrix of shape [n_B, B*B] acting on the flattened block.  The same
operation is realized as a strided convolution whose kernels are the
reshaped matrix rows, so both the matrix and the measurements live inside
the differentiation graph when the matrix is learnable.

A SamplingOperator is immutable during inference and safe to share across
threads; training-time updates to a learnable matrix happen only inside
the (serialized) optimizer step.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


def measurements_per_block(block_size, rate):
    """floor(rate * B^2): integer measurement allocation per block."""
    return int(math.floor(rate * block_size * block_size))


@dataclass
class SamplingOperator:
    """Sampling matrix with block geometry.

    phi rows act on row-major flattened BxB blocks.  ``phi64`` keeps the
    float64 construction for verification; ``phi`` is the working tensor
    (float32 for training unless another dtype is requested).
    """

    block_size: int
    rate: float
    n_meas: int
    phi: ad.Tensor
    learnable: bool
    phi64: np.ndarray

    def kernel(self):
        """phi reshaped to a [n_B, 1, B, B] convolution kernel (graph op)."""
        b = self.block_size
        return ad.reshape(self.phi, (self.n_meas, 1, b, b))


def make_operator(block_size, rate, kind="orthogonalized-random", seed=0, dtype=np.float32):
    """Build a sampling operator.

    kind "orthogonalized-random" draws i.i.d. Gaussians and orthonormalizes
    the rows (frozen); "learned-init" uses the same construction but marks
    the matrix trainable.  Rejects rates too small to give one measurement.
    """
    if not 0 < rate <= 1:
        raise ValueError(f"rate must be in (0, 1], got {rate}")
    if block_size < 1:
        raise ValueError(f"block size must be >= 1, got {block_size}")
    if kind not in ("orthogonalized-random", "learned-init"):
        raise ValueError(f"unknown sampling matrix kind {kind!r}")
    n_meas = measurements_per_block(block_size, rate)
    if n_meas < 1:
        raise ValueError(f"rate {rate} too small for block size {block_size}: floor(rate*B^2) = 0")

    rng = np.random.default_rng(seed)
    n = block_size * block_size
    gauss = rng.normal(size=(n_meas, n))
    # QR on the transpose gives orthonormal rows
    q, _ = np.linalg.qr(gauss.T)
    phi64 = np.ascontiguousarray(q[:, :n_meas].T)
    learnable = kind == "learned-init"
    phi = ad.Tensor(phi64.astype(dtype), requires_grad=learnable)
    return SamplingOperator(block_size, float(rate), n_meas, phi, learnable, phi64)


@dataclass
class MeasurementSet:
    """All per-block measurement vectors of one image, plus geometry."""

    block_size: int
    rate: float
    blocks_y: int
    blocks_x: int
    orig_h: int
    orig_w: int
    data: np.ndarray  # [blocks_y, blocks_x, n_B]

    @property
    def n_meas(self):
        return self.data.shape[2]

    def as_tensor(self, dtype=None):
        """Constant [1, n_B, by, bx] tensor (conv layout)."""
        arr = self.data.transpose(2, 0, 1)[None]
        return ad.Tensor(arr if dtype is None else arr.astype(dtype))


def pad_to_blocks(image, block_size):
    """Reflect-pad bottom/right to block multiples; returns (padded, (H, W)).

    ``image`` is [1, 1, H, W] (Tensor or ndarray); padding happens outside
    the graph (the pad is a fixed data-preparation step).
    """
    arr = image.data if isinstance(image, ad.Tensor) else np.asarray(image)
    if arr.ndim == 2:
        arr = arr[None, None]
    _, _, h, w = arr.shape
    ph = (-h) % block_size
    pw = (-w) % block_size
    if ph or pw:
        arr = _reflect_pad_2d(arr, ph, pw)
    out = ad.Tensor(arr) if not isinstance(image, ad.Tensor) else ad.Tensor(arr.astype(image.dtype))
    return out, (h, w)


def _reflect_pad_2d(arr, pad_bottom, pad_right):
    return np.pad(arr, ((0, 0), (0, 0), (0, pad_bottom), (0, pad_right)), mode="reflect")


def crop_to(image, orig_hw):
    """Undo pad_to_blocks on a [1, 1, H, W] array or tensor."""
    h, w = orig_hw
    arr = image.data if isinstance(image, ad.Tensor) else image
    return arr[..., :h, :w]


def _check_dims(op, shape):
    h, w = shape[-2], shape[-1]
    b = op.block_size
    if h % b or w % b:
        raise ValueError(f"image dims {h}x{w} are not multiples of block size {b}; pad first")
    return h // b, w // b


def sample_tensor(op, image):
    """Measure an image inside the graph: conv with the reshaped matrix,
    stride B.  Returns [1, n_B, by, bx]."""
    _check_dims(op, image.shape)
    kernel = op.kernel() if op.phi.dtype == image.dtype else ad.reshape(
        op.phi.astype(image.dtype), (op.n_meas, 1, op.block_size, op.block_size))
    return ad.conv2d(image, kernel, bias=None, stride=op.block_size, padding=0)


def sample(op, image):
    """Measure a block-aligned image; returns a MeasurementSet (plain data)."""
    img = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
    by, bx = _check_dims(op, img.shape)
    with ad.no_grad():
        y = sample_tensor(op, img)
    data = np.ascontiguousarray(y.data[0].transpose(1, 2, 0))  # [by, bx, n_B]
    return MeasurementSet(op.block_size, op.rate, by, bx, img.shape[-2], img.shape[-1], data)


def measure_image(op, image2d):
    """Pad a raw 2-D image to block multiples and measure it; the returned
    MeasurementSet remembers the pre-padding dims for cropping."""
    padded, (h, w) = pad_to_blocks(np.asarray(image2d)[None, None], op.block_size)
    m = sample(op, padded)
    m.orig_h, m.orig_w = h, w
    return m


def _phi_t(op, dtype):
    phi = op.phi if op.phi.dtype == dtype else op.phi.astype(dtype)
    return ad.transpose2d(phi)


def upsample_tensor(op, measurements, blocks_y, blocks_x):
    """Per-block transpose-apply: [N, n_B, by, bx] -> [N, 1, H, W]."""
    batch = measurements.shape[0]
    y2 = ad.channels_to_cols(measurements)  # [n_B, N*nblocks]
    x2 = ad.matmul(_phi_t(op, measurements.dtype), y2)  # [B^2, N*nblocks]
    return ad.blocks_to_image(x2, op.block_size, blocks_y, blocks_x, batch)


def initial_reconstruction(op, m, dtype=None):
    """x0: transpose-apply each block's measurements and re-tile the grid."""
    if isinstance(m, MeasurementSet):
        if m.n_meas != op.n_meas:
            raise ValueError(f"operator expects n_B={op.n_meas}, measurements carry {m.n_meas}")
        meas = m.as_tensor(dtype or op.phi.dtype)
        return upsample_tensor(op, meas, m.blocks_y, m.blocks_x)
    raise TypeError("initial_reconstruction expects a MeasurementSet; use upsample_tensor inside graphs")


def apply_fidelity_gradient(op, x, measurements, blocks_y=None, blocks_x=None):
    """Gradient of the data-fit term at x: transpose-apply(measure(x) - y).

    ``measurements`` may be a MeasurementSet or an in-graph tensor of shape
    [1, n_B, by, bx].  Differentiable w.r.t. x and (when learnable) phi.
    """
    by, bx = _check_dims(op, x.shape)
    if isinstance(measurements, MeasurementSet):
        if (by, bx) != (measurements.blocks_y, measurements.blocks_x):
            raise ValueError("image block grid does not match measurement grid")
        y = measurements.as_tensor(x.dtype)
    else:
        y = measurements
    resid = ad.sub(sample_tensor(op, x), y)
    return upsample_tensor(op, resid, by, bx)


# ---------------------------------------------------------------------------
# measurement file format (binary, little-endian)

DCSM_MAGIC = b"DCSM"
DCSM_VERSION = 1
_DCSM_HEAD = "<4sBHHIIHH"


def write_measurements(path, m):
    head = struct.pack(
        _DCSM_HEAD,
        DCSM_MAGIC,
        DCSM_VERSION,
        m.block_size,
        m.n_meas,
        m.orig_h,
        m.orig_w,
        m.blocks_y,
        m.blocks_x,
    )
    payload = np.ascontiguousarray(m.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(payload)


def read_measurements(path):
    # the file stores geometry only; the nominal rate is recovered as n_B/B^2
    with open(path, "rb") as fh:
        raw = fh.read()
    head_size = struct.calcsize(_DCSM_HEAD)
    if len(raw) < head_size:
        raise ValueError(f"truncated measurement file {path!r}")
    magic, version, b, n_meas, oh, ow, by, bx = struct.unpack_from(_DCSM_HEAD, raw)
    if magic != DCSM_MAGIC:
        raise ValueError(f"not a measurement file (bad magic {magic!r})")
    if version != DCSM_VERSION:
        raise ValueError(f"unsupported measurement file version {version}")
    body = raw[head_size:]
    expected = by * bx * n_meas * 4
    if len(body) != expected:
        raise ValueError(f"measurement payload has {len(body)} bytes, expected {expected}")
    data = np.frombuffer(body, dtype="<f4").reshape(by, bx, n_meas).copy()
    return MeasurementSet(b, n_meas / (b * b), by, bx, oh, ow, data)
