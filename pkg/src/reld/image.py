"""Image containers, noise corruption, PSNR, and lossless raster I/O.

Conventions used throughout the package:

* An image is a float64 numpy array, either 2-D ``(H, W)`` for grayscale or
  3-D ``(H, W, 3)`` for interleaved RGB.
* Pixel values live nominally in ``[0, 1]`` with peak 1.0; intermediate
  iterates of the solvers may leave that range and are clipped only when
  written to disk.
* Randomness is always drawn from ``numpy.random.default_rng`` (PCG64), so a
  fixed seed reproduces results bit-for-bit on one build.
"""

from __future__ import annotations

import math
from pathlib import Path

import cv2
import numpy as np

__all__ = [
    "num_channels",
    "require_same_shape",
    "psnr",
    "awgn_corrupt",
    "clip01",
    "load_image",
    "save_image",
    "make_phantom",
]


def num_channels(image: np.ndarray) -> int:
    """Channel count of an image array (2-D arrays count as one channel)."""
    if image.ndim == 2:
        return 1
    if image.ndim == 3 and image.shape[2] in (1, 3):
        return image.shape[2]
    raise ValueError(f"not an image array: shape {image.shape}")


def require_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB, with peak value 1.0.

    The mean squared error is taken over all pixels and channels (no
    luminance conversion).  Identical inputs give ``math.inf``.
    """
    require_same_shape(reference, test)
    mse = float(np.mean((np.asarray(reference, dtype=np.float64) - test) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def awgn_corrupt(x: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. Gaussian noise of standard deviation ``sigma`` (pixel units).

    Deterministic per ``(seed, shape)``; the output is not clipped.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0.0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return x + sigma * rng.standard_normal(x.shape)


def clip01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


_MAX_SAMPLE = {8: 255, 16: 65535}


def load_image(path: str | Path) -> np.ndarray:
    """Load an 8- or 16-bit PNG/PGM/PPM file as a float64 image in [0, 1].

    Integer samples are mapped by division with the maximum sample value of
    the stored bit depth.  Color files come back as ``(H, W, 3)`` RGB,
    grayscale as ``(H, W)``.
    """
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"cannot read image file: {path}")
    if raw.dtype == np.uint8:
        max_sample = _MAX_SAMPLE[8]
    elif raw.dtype == np.uint16:
        max_sample = _MAX_SAMPLE[16]
    else:
        raise IOError(f"unsupported sample type {raw.dtype} in {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:  # drop alpha
            raw = raw[:, :, :3]
        if raw.shape[2] != 3:
            raise IOError(f"unsupported channel count {raw.shape[2]} in {path}")
        raw = raw[:, :, ::-1]  # OpenCV stores BGR
    return raw.astype(np.float64) / max_sample


def save_image(image: np.ndarray, path: str | Path, bit_depth: int = 8) -> None:
    """Write an image as PNG/PGM/PPM at the given bit depth.

    Values are clipped to [0, 1] and quantized with round-half-up, so a
    constant 0.5 image stores as 128/255 at 8 bits.
    """
    if bit_depth not in _MAX_SAMPLE:
        raise IOError(f"unsupported bit depth {bit_depth} (use 8 or 16)")
    channels = num_channels(image)
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm" and channels != 1:
        raise IOError(f"PGM stores grayscale only, got {channels} channels: {path}")
    if suffix == ".ppm" and channels != 3:
        raise IOError(f"PPM stores 3-channel color only, got {channels} channels: {path}")
    max_sample = _MAX_SAMPLE[bit_depth]
    q = np.floor(clip01(np.asarray(image, dtype=np.float64)) * max_sample + 0.5)
    q = q.astype(np.uint8 if bit_depth == 8 else np.uint16)
    if q.ndim == 3:
        if q.shape[2] == 1:
            q = q[:, :, 0]
        else:
            q = q[:, :, ::-1]  # back to BGR for OpenCV
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise IOError(f"output directory does not exist: {path.parent}")
    if not cv2.imwrite(str(path), q):
        raise IOError(f"cannot write image file: {path}")


def make_phantom(height: int, width: int, channels: int = 1, seed: int = 0) -> np.ndarray:
    """Synthetic piecewise-smooth test image: random ellipses over a smooth ramp.

    Deterministic per seed.  Values lie in [0, 1].
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)

    def one_channel() -> np.ndarray:
        # smooth low-frequency background
        img = 0.25 + 0.2 * np.sin(math.pi * (xx * rng.uniform(0.5, 1.5) + rng.uniform(0, 1)))
        img += 0.15 * yy
        for _ in range(rng.integers(4, 8)):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            ry, rx = rng.uniform(0.08, 0.3, size=2)
            theta = rng.uniform(0, math.pi)
            ct, st = math.cos(theta), math.sin(theta)
            u = (yy - cy) * ct + (xx - cx) * st
            v = -(yy - cy) * st + (xx - cx) * ct
            mask = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
            img[mask] = rng.uniform(0.1, 0.9)
        return img

    if channels == 1:
        return clip01(one_channel())
    if channels == 3:
        return clip01(np.stack([one_channel() for _ in range(3)], axis=2))
    raise ValueError(f"channels must be 1 or 3, got {channels}")
