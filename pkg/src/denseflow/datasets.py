"""Dataset containers, the DFIM binary image format and the synthetic
texture generator used for desk-scale experiments.

DFIM layout (little-endian):

    magic "DFIM" | version u32 | count u32 | h u16 | w u16 | c u16
    | count*c*h*w bytes, pixels as (count, c, h, w) in C order

The texture generator draws, per image, a per-channel base level in
[112, 144], linear gradients with slope in [-48, 48] over the unit square
(so +-24 around the mean) and 1..3 Gaussian bumps of bounded amplitude,
then quantizes. Per-channel means land in [64, 192] by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError

MAGIC = b"DFIM"
VERSION = 1
HEADER = struct.Struct("<4sIIHHH")


@dataclass
class ImageDataset:
    pixels: np.ndarray  # (count, c, h, w) uint8
    split: str = "train"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 4 or self.pixels.dtype != np.uint8:
            raise DataFormatError(
                f"pixels must be a uint8 (count, c, h, w) array, got "
                f"{self.pixels.dtype} {self.pixels.shape}"
            )

    @property
    def count(self):
        return self.pixels.shape[0]

    @property
    def channels(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[2]

    @property
    def width(self):
        return self.pixels.shape[3]


def write_dataset(path, dataset):
    n, c, h, w = dataset.pixels.shape
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, n, h, w, c))
        f.write(np.ascontiguousarray(dataset.pixels).tobytes())


def read_dataset(path, split="train"):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < HEADER.size:
        raise DataFormatError("truncated header", offset=len(blob))
    magic, version, n, h, w, c = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise DataFormatError(f"unsupported version {version}", offset=4)
    expected = n * c * h * w
    payload = blob[HEADER.size :]
    if len(payload) != expected:
        raise DataFormatError(
            f"payload has {len(payload)} bytes, expected {expected}",
            offset=HEADER.size + min(len(payload), expected),
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, c, h, w).copy()
    return ImageDataset(pixels, split=split)


def load_raw(path, count, channels, height, width, split="train"):
    """Import raw u8 planar pixels (count, c, h, w in C order) into a
    dataset; sizes must match the file exactly."""
    with open(path, "rb") as f:
        blob = f.read()
    expected = count * channels * height * width
    if len(blob) != expected:
        raise DataFormatError(
            f"raw file has {len(blob)} bytes, expected {expected}",
            offset=min(len(blob), expected),
        )
    pixels = np.frombuffer(blob, dtype=np.uint8).reshape(
        count, channels, height, width
    ).copy()
    return ImageDataset(pixels, split=split)


def synth_textures(n, h=8, w=8, c=3, seed=0, split="train"):
    """Procedural images with learnable structure: smooth gradients plus
    Gaussian bumps, quantized to u8. Deterministic per seed."""
    if n < 1:
        raise ConfigError("need n >= 1 images")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    out = np.empty((n, c, h, w), dtype=np.uint8)
    for i in range(n):
        base = rng.uniform(112, 144, size=(c, 1, 1))
        gx = rng.uniform(-48, 48, size=(c, 1, 1))
        gy = rng.uniform(-48, 48, size=(c, 1, 1))
        img = base + gx * (xx - 0.5) + gy * (yy - 0.5)
        for _ in range(rng.integers(1, 4)):
            cu, cv = rng.uniform(0.2, 0.8, size=2)
            radius = rng.uniform(0.15, 0.35) * min(h, w) / max(h, w)
            amp = rng.uniform(-36, 36)
            tint = rng.uniform(0.5, 1.0, size=(c, 1, 1))
            bump = np.exp(-(((xx - cu) ** 2 + (yy - cv) ** 2) / (2 * radius**2)))
            img = img + amp * tint * bump
        out[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return ImageDataset(out, split=split)


def write_ppm(path, image):
    """One image (c, h, w) uint8 to binary PPM (P6) or PGM (P5)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.dtype != np.uint8:
        raise DataFormatError(f"expected uint8 (c, h, w) image, got {image.shape}")
    c, h, w = image.shape
    if c == 3:
        header = f"P6 {w} {h} 255\n".encode()
        body = image.transpose(1, 2, 0).tobytes()
    elif c == 1:
        header = f"P5 {w} {h} 255\n".encode()
        body = image[0].tobytes()
    else:
        raise DataFormatError(f"PPM output needs 1 or 3 channels, got {c}")
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)
