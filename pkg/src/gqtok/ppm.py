"""Binary PPM (P6) / PGM (P5) image files, maxval 255.

Arrays are (H, W, C) uint8 with C=3 for P6 and C=1 for P5.
"""

from __future__ import annotations

import numpy as np


class PpmError(ValueError):
    pass


def write_image(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise PpmError(f"expected (H, W, 1|3) image, got {img.shape}")
    if img.dtype != np.uint8:
        raise PpmError(f"expected uint8 pixels, got {img.dtype}")
    h, w, c = img.shape
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def _read_token(f) -> bytes:
    """Next whitespace-delimited header token, skipping '#' comments."""
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise PpmError("unexpected end of header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise PpmError(f"not a binary PGM/PPM file: magic {magic!r}")
        c = 3 if magic == b"P6" else 1
        w = int(_read_token(f))
        h = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise PpmError(f"only maxval 255 supported, got {maxval}")
        data = f.read(h * w * c)
        if len(data) != h * w * c:
            raise PpmError(f"truncated pixel data: {len(data)} of {h * w * c} bytes")
        return np.frombuffer(data, dtype=np.uint8).reshape(h, w, c)


def to_unit_range(img: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float [-1,1]."""
    return img.astype(np.float64) / 127.5 - 1.0


def from_unit_range(x: np.ndarray) -> np.ndarray:
    """float [-1,1] -> uint8 [0,255], clipped and rounded."""
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
