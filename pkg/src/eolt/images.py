"""Image records, P6 PPM I/O, and the synthetic face-like image generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DEFAULT_DTYPE
from .errors import ConfigError
from .seeding import rng_from


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # (3,H,W) in [0,1]
    origin: str


def save_ppm(path, pixels: np.ndarray):
    """Binary P6, maxval 255; bytes round half away from zero."""
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) pixels, got {pixels.shape}")
    h, w = pixels.shape[1], pixels.shape[2]
    data = np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        if buf[pos : pos + 1].isspace():
            pos += 1
        elif buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ConfigError("truncated PPM header")
    return buf[start:pos], pos


def load_ppm(path, dtype=DEFAULT_DTYPE) -> ImageRecord:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise ConfigError(f"{path}: not a binary P6 PPM (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ConfigError(f"{path}: malformed PPM header token {tok!r}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ConfigError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    payload = buf[pos : pos + 3 * h * w]
    if len(payload) != 3 * h * w:
        raise ConfigError(f"{path}: truncated payload ({len(payload)} of {3 * h * w} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return ImageRecord(id=str(path), pixels=(arr / 255.0).astype(dtype), origin=str(path))


def synth_image(seed: int, index: int, h: int, w: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """One deterministic face-like composite: smooth background gradient,
    2-4 Gaussian blobs, mild texture noise."""
    rng = rng_from(seed, "images", index)
    yy = (np.arange(h, dtype=dtype)[:, None] / h - 0.5) * np.ones((1, w), dtype=dtype)
    xx = (np.arange(w, dtype=dtype)[None, :] / w - 0.5) * np.ones((h, 1), dtype=dtype)
    base = rng.uniform(0.25, 0.7, 3).astype(dtype)[:, None, None]
    img = base + 0.35 * (rng.uniform(-1, 1) * yy + rng.uniform(-1, 1) * xx)[None]
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        sig = rng.uniform(0.1, 0.25) * min(h, w)
        blob = np.exp(-(((np.arange(h) - cy)[:, None]) ** 2 + ((np.arange(w) - cx)[None]) ** 2) / (2 * sig * sig))
        img += rng.uniform(-0.5, 0.5, 3).astype(dtype)[:, None, None] * blob.astype(dtype)[None]
    img += 0.015 * rng.standard_normal((3, h, w)).astype(dtype)
    return np.clip(img, 0.0, 1.0).astype(dtype)


def synth_images(n: int, h: int, w: int, seed: int, dtype=DEFAULT_DTYPE) -> list[ImageRecord]:
    if n < 1:
        raise ValueError("need n >= 1 images")
    return [
        ImageRecord(id=f"synth-{i:04d}", pixels=synth_image(seed, i, h, w, dtype),
                    origin=f"synthetic seed={seed} index={i}")
        for i in range(n)
    ]
