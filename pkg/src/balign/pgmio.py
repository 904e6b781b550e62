"""Binary PGM (P5) I/O for single-channel images.

8-bit gray levels map linearly onto the training intensity range [-1, 1]:
level k <-> 2*k/255 - 1.  Quantization is idempotent, so write(read(f))
reproduces f byte for byte.
"""

from __future__ import annotations

import numpy as np

from .sampler import Image


def write_pgm(path, image) -> None:
    """Write a single-channel image (Image or (H, W) array in [-1, 1])."""
    data = image.data if isinstance(image, Image) else np.asarray(image, dtype=float)
    if data.ndim == 3:
        if data.shape[2] != 1:
            raise ValueError("PGM supports single-channel images only")
        data = data[:, :, 0]
    levels = np.clip(np.rint((data + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)
    h, w = levels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())


def read_pgm(path) -> Image:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # Header: magic, width, height, maxval; '#' comments allowed between tokens.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    payload = raw[pos:pos + w * h]
    if len(payload) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    levels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return Image(levels.astype(float) * (2.0 / 255.0) - 1.0)
