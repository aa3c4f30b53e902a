"""Fundamental value types: patches, images, masks, and patch extraction/reassembly.

Patches are 8x8 tiles stored as flat 64-vectors in row-major order.  The
patch side is a project-wide constant: model covariances, serialized
containers and the derivative operators all assume it, so it is validated
at construction rather than exposed as a knob.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DimensionError, UncoveredPixelError

PATCH_SIDE = 8
PATCH_SIZE = PATCH_SIDE * PATCH_SIDE


class Channel(Enum):
    DISPARITY = "disparity"
    INTENSITY = "intensity"


def as_vector(x) -> np.ndarray:
    """Return a float64 1-D view of a Patch or array-like."""
    values = getattr(x, "values", x)
    return np.asarray(values, dtype=np.float64).reshape(-1)


def as_matrix(xs) -> np.ndarray:
    """Stack patches / vectors into an (n, d) float64 matrix."""
    if isinstance(xs, np.ndarray) and xs.ndim == 2:
        return np.asarray(xs, dtype=np.float64)
    return np.stack([as_vector(x) for x in xs])


@dataclass(frozen=True)
class Patch:
    """A flat 64-vector holding one 8x8 tile of disparity or intensity."""

    values: np.ndarray
    kind: Channel = Channel.DISPARITY

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.size != PATCH_SIZE:
            raise DimensionError(
                f"patch must hold exactly {PATCH_SIZE} values, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("patch contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def tile(self) -> np.ndarray:
        """The patch as an 8x8 array (row-major)."""
        return self.values.reshape(PATCH_SIDE, PATCH_SIDE)

    def mean(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class ImageGrid:
    """A single-channel image; disparity values live in normalized [0, 1] units."""

    values: np.ndarray
    channel: Channel = Channel.DISPARITY

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DimensionError(f"image must be 2-D, got shape {values.shape}")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PixelMask:
    """Per-pixel observation flags paired with an ImageGrid (True = observed)."""

    flags: np.ndarray

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool)
        if flags.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {flags.shape}")
        flags = flags.copy()
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    @property
    def height(self) -> int:
        return self.flags.shape[0]

    @property
    def width(self) -> int:
        return self.flags.shape[1]

    @classmethod
    def fully_observed(cls, height: int, width: int) -> "PixelMask":
        return cls(np.ones((height, width), dtype=bool))


@dataclass(frozen=True)
class DcDecomposition:
    """A patch split into its mean (DC) and a zero-mean residual."""

    dc: float
    residual: Patch = field(repr=False)


def patch_grid(image, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized patch extraction from an ImageGrid or plain 2-D array.

    Returns (patches, coords): an (n, 64) matrix of flattened patches and an
    (n, 2) array of (row, col) top-left coordinates, scanning rows first.
    """
    if not 1 <= stride <= PATCH_SIDE:
        raise ValueError(f"stride must be in 1..{PATCH_SIDE}, got {stride}")
    if not isinstance(image, ImageGrid):
        image = ImageGrid(np.asarray(image, dtype=np.float64))
    h, w = image.values.shape
    if h < PATCH_SIDE or w < PATCH_SIDE:
        raise DimensionError(
            f"image {w}x{h} is smaller than the {PATCH_SIDE}x{PATCH_SIDE} patch size"
        )
    windows = np.lib.stride_tricks.sliding_window_view(
        image.values, (PATCH_SIDE, PATCH_SIDE)
    )[::stride, ::stride]
    n_rows, n_cols = windows.shape[:2]
    patches = windows.reshape(n_rows * n_cols, PATCH_SIZE).copy()
    rows = np.repeat(np.arange(n_rows) * stride, n_cols)
    cols = np.tile(np.arange(n_cols) * stride, n_rows)
    return patches, np.stack([rows, cols], axis=1)


def extract_patches(image: ImageGrid, stride: int = 1) -> list[tuple[Patch, tuple[int, int]]]:
    """All fully-contained patches on the stride lattice, with top-left coords."""
    patches, coords = patch_grid(image, stride)
    kind = image.channel
    return [
        (Patch(values, kind), (int(r), int(c)))
        for values, (r, c) in zip(patches, coords)
    ]


def reassemble_average(patches, height: int, width: int,
                       channel: Channel = Channel.DISPARITY) -> ImageGrid:
    """Average a set of (patch, coord) pairs back into an image.

    Every output pixel is the arithmetic mean of all patch values covering
    it; accumulation runs in the given patch order so results are
    bit-reproducible.
    """
    total = np.zeros((height, width))
    count = np.zeros((height, width))
    for patch, (row, col) in patches:
        tile = as_vector(patch).reshape(PATCH_SIDE, PATCH_SIDE)
        if row < 0 or col < 0 or row + PATCH_SIDE > height or col + PATCH_SIDE > width:
            raise DimensionError(
                f"patch at ({row}, {col}) does not fit inside {width}x{height}"
            )
        total[row:row + PATCH_SIDE, col:col + PATCH_SIDE] += tile
        count[row:row + PATCH_SIDE, col:col + PATCH_SIDE] += 1.0
    uncovered = np.argwhere(count == 0)
    if uncovered.size:
        raise UncoveredPixelError([tuple(int(v) for v in rc) for rc in uncovered])
    return ImageGrid(total / count, channel)


def remove_dc(patch) -> DcDecomposition:
    """Split a patch into its mean and a zero-mean residual (lossless)."""
    values = as_vector(patch)
    dc = float(values.mean())
    kind = getattr(patch, "kind", Channel.DISPARITY)
    return DcDecomposition(dc=dc, residual=Patch(values - dc, kind))


def remove_dc_rows(x: np.ndarray) -> np.ndarray:
    """Subtract each row's mean from an (n, d) matrix of patches."""
    x = np.asarray(x, dtype=np.float64)
    return x - x.mean(axis=1, keepdims=True)
