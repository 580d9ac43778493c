"""8-bit binary PGM (P5) image I/O, with P6 color inputs collapsed to luma.

Reads map [0, 255] to [0, 1] by dividing by 255; writes clamp to [0, 1]
and round half-up, so 0.5 becomes byte 128.
"""

from __future__ import annotations

import numpy as np

LUMA = (0.299, 0.587, 0.114)


def _read_header(raw, path):
    # header tokens may be separated by whitespace and '#' comments
    pos = 2  # past the magic
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"malformed header in {path!r}")
        fields.append(raw[start:pos])
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ValueError(f"malformed header in {path!r}")
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise ValueError(f"malformed header in {path!r}") from exc
    return width, height, maxval, pos


def read_image(path):
    """Read a binary PGM/PPM file as a float image in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path!r}: expected binary PGM (P5) or PPM (P6), got magic {magic!r}")
    width, height, maxval, pos = _read_header(raw, path)
    if maxval != 255:
        raise ValueError(f"{path!r}: only 8-bit images supported (maxval 255), got {maxval}")
    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    body = raw[pos:pos + expected]
    if len(body) != expected:
        raise ValueError(f"{path!r}: truncated pixel data ({len(body)} of {expected} bytes)")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    if channels == 3:
        luma = pixels[..., 0] * LUMA[0] + pixels[..., 1] * LUMA[1] + pixels[..., 2] * LUMA[2]
        gray = np.floor(luma + 0.5).astype(np.uint8)
    else:
        gray = pixels[..., 0]
    return gray.astype(np.float64) / 255.0


def write_image(path, image):
    """Write a float image in [0, 1] as binary PGM, rounding half-up."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    clamped = np.clip(arr, 0.0, 1.0)
    bytes_ = np.floor(clamped * 255.0 + 0.5).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(bytes_.tobytes())
