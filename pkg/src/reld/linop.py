"""Linear degradation operators: periodic convolution, decimation, composition.

Operators act on the two spatial axes of an image; extra channels are
processed independently.  Every operator provides an exact adjoint, i.e.
``<A x, y> == <x, A^T y>`` holds to floating-point accuracy, which the
conjugate-gradient and proximal solvers rely on.

Boundary handling is periodic throughout, so circular convolution is
diagonalized by the 2-D DFT (see :func:`transfer_function`).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "gaussian_psf",
    "default_psf_size",
    "transfer_function",
    "save_kernel",
    "load_kernel",
    "LinearOperator",
    "Identity",
    "PeriodicConv",
    "Decimate",
    "Compose",
]


def _check_kernel(weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
        raise ValueError(f"kernel must be square 2-D, got shape {weights.shape}")
    if weights.shape[0] % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {weights.shape[0]}")
    if not np.all(np.isfinite(weights)):
        raise ValueError("kernel weights must be finite")
    return weights


def gaussian_psf(sigma: float, size: int) -> np.ndarray:
    """Normalized isotropic Gaussian point spread function on a size x size grid.

    ``weights[i, j] ~ exp(-((i-c)^2 + (j-c)^2) / (2 sigma^2))`` with
    ``c = (size-1)/2``, rescaled to sum to one.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if size < 1 or size % 2 == 0:
        raise ValueError(f"size must be a positive odd integer, got {size}")
    c = (size - 1) / 2.0
    grid = np.arange(size, dtype=np.float64) - c
    r2 = grid[:, None] ** 2 + grid[None, :] ** 2
    w = np.exp(-r2 / (2.0 * sigma * sigma))
    return w / w.sum()


def default_psf_size(sigma: float, image_shape: tuple[int, ...] | None = None) -> int:
    """Smallest odd integer >= 6*sigma + 1, capped at the image side length."""
    size = int(np.ceil(6.0 * sigma + 1.0))
    if size % 2 == 0:
        size += 1
    if image_shape is not None:
        cap = min(image_shape[0], image_shape[1])
        if cap % 2 == 0:
            cap -= 1
        size = min(size, cap)
    return max(size, 1)


def transfer_function(kernel: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """2-D DFT of the kernel zero-padded to ``shape``, center moved to (0, 0).

    Satisfies ``fft2(conv(x)) == that * fft2(x)`` for the circular convolution
    implemented by :class:`PeriodicConv`.
    """
    kernel = _check_kernel(kernel)
    h, w = int(shape[0]), int(shape[1])
    k = kernel.shape[0]
    if k > min(h, w):
        raise ValueError(f"kernel size {k} exceeds image shape {(h, w)}")
    padded = np.zeros((h, w), dtype=np.float64)
    padded[:k, :k] = kernel
    c = (k - 1) // 2
    padded = np.roll(padded, (-c, -c), axis=(0, 1))
    return np.fft.fft2(padded)


def save_kernel(kernel: np.ndarray, path: str | Path) -> None:
    """Plain-text kernel format: first line the size, then one row per line."""
    kernel = _check_kernel(kernel)
    lines = [str(kernel.shape[0])]
    for row in kernel:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_kernel(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    try:
        size = int(lines[0])
        rows = [[float(v) for v in line.split()] for line in lines[1 : size + 1]]
        kernel = np.array(rows, dtype=np.float64)
    except (IndexError, ValueError) as exc:
        raise IOError(f"malformed kernel file {path}: {exc}") from exc
    if kernel.shape != (size, size):
        raise IOError(f"kernel file {path} declares size {size} but has shape {kernel.shape}")
    return _check_kernel(kernel)


def _spatial(shape: tuple[int, ...]) -> tuple[int, int]:
    return int(shape[0]), int(shape[1])


class LinearOperator:
    """Base class; subclasses define spatial input/output shapes and the action."""

    input_shape: tuple[int, int]
    output_shape: tuple[int, int]

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check_in(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if _spatial(x.shape) != self.input_shape:
            raise ValueError(
                f"operator expects spatial shape {self.input_shape}, got {x.shape}"
            )
        return x

    def _check_out(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if _spatial(y.shape) != self.output_shape:
            raise ValueError(
                f"operator adjoint expects spatial shape {self.output_shape}, got {y.shape}"
            )
        return y


class Identity(LinearOperator):
    def __init__(self, shape: tuple[int, int]):
        self.input_shape = self.output_shape = _spatial(shape)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._check_in(x).copy()

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self._check_out(y).copy()

    def __repr__(self) -> str:
        return f"Identity({self.input_shape})"


def _conv_per_channel(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return ndimage.convolve(x, kernel, mode="wrap")
    out = np.empty_like(x)
    for c in range(x.shape[2]):
        out[:, :, c] = ndimage.convolve(x[:, :, c], kernel, mode="wrap")
    return out


class PeriodicConv(LinearOperator):
    """Circular convolution with a square odd-sized kernel, center-aligned.

    Applying to a one-hot image reproduces the kernel pattern circularly
    centered at the hot pixel.  The adjoint convolves with the flipped kernel.
    """

    def __init__(self, kernel: np.ndarray, shape: tuple[int, int]):
        self.kernel = _check_kernel(kernel)
        self.input_shape = self.output_shape = _spatial(shape)
        if self.kernel.shape[0] > min(self.input_shape):
            raise ValueError(
                f"kernel size {self.kernel.shape[0]} exceeds image shape {self.input_shape}"
            )

    def apply(self, x: np.ndarray) -> np.ndarray:
        return _conv_per_channel(self._check_in(x), self.kernel)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return _conv_per_channel(self._check_out(y), self.kernel[::-1, ::-1])

    def transfer_function(self) -> np.ndarray:
        return transfer_function(self.kernel, self.input_shape)

    def __repr__(self) -> str:
        return f"PeriodicConv(k={self.kernel.shape[0]}, shape={self.input_shape})"


class Decimate(LinearOperator):
    """Keep samples at row/column indices divisible by the factor (top-left phase)."""

    def __init__(self, factor: int, input_shape: tuple[int, int]):
        factor = int(factor)
        if factor < 1:
            raise ValueError(f"decimation factor must be >= 1, got {factor}")
        self.factor = factor
        self.input_shape = _spatial(input_shape)
        h, w = self.input_shape
        if h % factor or w % factor:
            raise ValueError(f"image shape {self.input_shape} not divisible by factor {factor}")
        self.output_shape = (h // factor, w // factor)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self._check_in(x)[:: self.factor, :: self.factor].copy()

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        y = self._check_out(y)
        full = self.input_shape + y.shape[2:]
        out = np.zeros(full, dtype=np.float64)
        out[:: self.factor, :: self.factor] = y
        return out

    def __repr__(self) -> str:
        return f"Decimate(d={self.factor}, in={self.input_shape})"


class Compose(LinearOperator):
    """Composition outer(inner(x)); shapes must chain."""

    def __init__(self, outer: LinearOperator, inner: LinearOperator):
        if inner.output_shape != outer.input_shape:
            raise ValueError(
                f"cannot compose: inner output {inner.output_shape} != outer input {outer.input_shape}"
            )
        self.outer = outer
        self.inner = inner
        self.input_shape = inner.input_shape
        self.output_shape = outer.output_shape

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.outer.apply(self.inner.apply(x))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self.inner.adjoint(self.outer.adjoint(y))

    def __repr__(self) -> str:
        return f"Compose({self.outer!r}, {self.inner!r})"
