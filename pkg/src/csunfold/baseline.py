"""Non-learned iterative reconstruction: plain proximal-gradient descent
with a scalar step and soft thresholding in an orthonormal blockwise DCT
domain.  Serves both as a reported baseline and as the correctness oracle
for the unfolded network's gradient-step skeleton.

Everything here is plain float64 numpy; nothing is trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampling import MeasurementSet


def soft_threshold(values, threshold):
    """sign(v) * max(|v| - t, 0), the proximal map of t * L1."""
    t = float(threshold)
    if t < 0:
        raise ValueError(f"threshold must be nonnegative, got {t}")
    v = np.asarray(values)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def dct_matrix(n, dtype=np.float64):
    """Orthonormal DCT-II basis as an n x n matrix (rows are basis vectors)."""
    k = np.arange(n, dtype=dtype)[:, None]
    m = np.arange(n, dtype=dtype)[None, :]
    d = np.cos(np.pi * (2 * m + 1) * k / (2 * n))
    d[0] *= np.sqrt(1.0 / n)
    d[1:] *= np.sqrt(2.0 / n)
    return d


def blockwise_dct2(image, block, inverse=False):
    """Orthonormal 2-D DCT (or its inverse) applied to each BxB tile."""
    h, w = image.shape
    if h % block or w % block:
        raise ValueError(f"image dims {h}x{w} not multiples of transform block {block}")
    d = dct_matrix(block, image.dtype.type)
    if inverse:
        d = d.T
    by, bx = h // block, w // block
    tiles = image.reshape(by, block, bx, block).transpose(0, 2, 1, 3)
    out = d @ tiles @ d.T
    return out.transpose(0, 2, 1, 3).reshape(h, w)


def operator_norm_sq(op, iterations=50, seed=0):
    """Largest singular value squared of the sampling matrix (power method)."""
    phi = op.phi64
    gram = phi @ phi.T  # [n_B, n_B], small
    rng = np.random.default_rng(seed)
    v = rng.normal(size=gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(iterations):
        v = gram @ v
        lam = np.linalg.norm(v)
        v /= lam
    return float(lam)


@dataclass
class IstaConfig:
    rho: float
    lam: float
    iterations: int
    transform_block: int

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"step size must be positive, got {self.rho}")
        if self.lam < 0:
            raise ValueError(f"L1 weight must be nonnegative, got {self.lam}")
        if self.iterations < 1:
            raise ValueError(f"need at least one iteration, got {self.iterations}")


def default_config(op, iterations=200, lam=1e-4):
    """Step size 0.9 / sigma_max^2 from power iteration; caller-tuned lam."""
    rho = 0.9 / operator_norm_sq(op)
    return IstaConfig(rho=rho, lam=lam, iterations=iterations, transform_block=op.block_size)


def _measure(phi, image, block):
    h, w = image.shape
    by, bx = h // block, w // block
    blocks = image.reshape(by, block, bx, block).transpose(0, 2, 1, 3).reshape(by * bx, block * block)
    return blocks @ phi.T  # [nblocks, n_B]


def _transpose_apply(phi, meas, block, by, bx):
    blocks = meas @ phi  # [nblocks, B^2]
    return blocks.reshape(by, bx, block, block).transpose(0, 2, 1, 3).reshape(by * block, bx * block)


def ista_reconstruct(op, m, cfg):
    """Iterative soft-thresholding reconstruction.

    Starts from the transpose-apply image, alternates a scalar-step
    gradient update with DCT-domain soft thresholding (threshold rho*lam),
    and records the fidelity 0.5 * ||measure(x) - y||^2 before the first
    update and after every iteration.  Returns (image cropped to the
    original dims, fidelity trace).
    """
    if not isinstance(m, MeasurementSet):
        raise TypeError("ista_reconstruct expects a MeasurementSet")
    if m.n_meas != op.n_meas:
        raise ValueError(f"operator n_B={op.n_meas} does not match measurements n_B={m.n_meas}")
    phi = op.phi64
    b = op.block_size
    by, bx = m.blocks_y, m.blocks_x
    y = m.data.reshape(by * bx, m.n_meas).astype(np.float64)

    x = _transpose_apply(phi, y, b, by, bx)
    trace = [0.5 * float(((_measure(phi, x, b) - y) ** 2).sum())]
    for _ in range(cfg.iterations):
        resid = _measure(phi, x, b) - y
        r = x - cfg.rho * _transpose_apply(phi, resid, b, by, bx)
        if cfg.lam > 0:
            coef = soft_threshold(blockwise_dct2(r, cfg.transform_block), cfg.rho * cfg.lam)
            x = blockwise_dct2(coef, cfg.transform_block, inverse=True)
        else:
            x = r
        trace.append(0.5 * float(((_measure(phi, x, b) - y) ** 2).sum()))
    return x[: m.orig_h, : m.orig_w], trace


def write_trace(path, trace):
    with open(path, "w") as fh:
        fh.write("iteration,fidelity\n")
        for i, v in enumerate(trace):
            fh.write(f"{i},{v:.10e}\n")
