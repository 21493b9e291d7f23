"""Binary PGM (P5, 8-bit) image files with an id-bearing comment line."""

import numpy as np


def write_pgm(path, pixels: np.ndarray, comment: str = "") -> None:
    """Quantize float pixels in [0, 1] to 8 bits and write a P5 file."""
    if pixels.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {pixels.shape}")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError("pixels must lie in [0, 1]")
    if "\n" in comment:
        raise ValueError("comment must be a single line")
    quantized = np.round(pixels * 255.0).astype(np.uint8)
    header = f"P5\n# {comment}\n{pixels.shape[1]} {pixels.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(quantized.tobytes())


def read_pgm(path):
    """Read a P5 file back to float pixels in [0, 1]; returns (pixels, comment)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    comment = ""
    pos = 0
    while len(fields) < 4:
        nl = raw.index(b"\n", pos)
        line = raw[pos:pos + (nl - pos)].decode("ascii")
        pos = nl + 1
        if line.startswith("#"):
            comment = line[1:].strip()
        else:
            fields.extend(line.split())
    if fields[0] != "P5" or fields[3] != "255":
        raise ValueError(f"not an 8-bit P5 file: {path}")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"truncated PGM payload in {path}")
    return data.reshape(h, w).astype(np.float64) / 255.0, comment
