"""Image quality metrics and reconstruction reports.

PSNR uses peak 1.0 and is capped at 100 dB when the error is exactly zero
(the cap doubles as the "identical" flag so report CSVs stay numeric).
SSIM is single-scale with the canonical constants: an 11x11 Gaussian
window with sigma 1.5, C1 = 0.01^2, C2 = 0.03^2, averaged over all valid
window positions.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr(a, b):
    """10*log10(1 / MSE) for images in [0, 1]; 100 dB when MSE is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img, window):
    """Correlate with the window, valid mode, via shifted accumulation."""
    k = window.shape[0]
    h, w = img.shape
    oh, ow = h - k + 1, w - k + 1
    out = np.zeros((oh, ow), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out += window[i, j] * img[i:i + oh, j:j + ow]
    return out


def ssim(a, b):
    """Mean local structural similarity over all full 11x11 windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    aa = _filter_valid(a * a, w) - mu_a**2
    bb = _filter_valid(b * b, w) - mu_b**2
    ab = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * ab + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (aa + bb + SSIM_C2)
    return float(np.mean(num / den))


@dataclass
class ReportRow:
    image: str
    rate: float
    ssg: str
    nl: str
    psnr_db: float
    ssim: float
    psnr_capped: bool = False


@dataclass
class ReconstructionReport:
    rows: list[ReportRow] = field(default_factory=list)
    checkpoint_hash: str = ""
    config_echo: str = ""
    offset_range: tuple | None = None

    def add(self, image, rate, ssg, nl, psnr_db, ssim_score):
        self.rows.append(
            ReportRow(image, rate, ssg, nl, psnr_db, ssim_score, psnr_capped=psnr_db >= PSNR_CAP_DB)
        )

    @property
    def mean_psnr(self):
        return float(np.mean([r.psnr_db for r in self.rows]))

    @property
    def mean_ssim(self):
        return float(np.mean([r.ssim for r in self.rows]))

    def write_csv(self, path):
        with open(path, "w") as fh:
            if self.checkpoint_hash:
                fh.write(f"# checkpoint_sha256: {self.checkpoint_hash}\n")
            if self.config_echo:
                fh.write(f"# config: {self.config_echo}\n")
            if self.offset_range is not None:
                fh.write(f"# offset_range: [{self.offset_range[0]:.6g}, {self.offset_range[1]:.6g}]\n")
            fh.write("image,rate,ssg,nl,psnr_db,ssim\n")
            for r in self.rows:
                fh.write(f"{r.image},{r.rate:.6g},{r.ssg},{r.nl},{r.psnr_db:.6f},{r.ssim:.6f}\n")
            fh.write(f"mean,,,,{self.mean_psnr:.6f},{self.mean_ssim:.6f}\n")


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()
