"""Emitter detection in confocal fluorescence scans.

Pixels are selected when their smoothed brightness exceeds ``a`` times the
brightness of each of the four pixels ``n`` steps away along the x and y
axes. Selected pixels that touch (including diagonally) form one candidate;
the brightest member is its seed.

Pixel ``(row, col)`` sits at ``x = col * pixel_size_um``,
``y = row * pixel_size_um``.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError

BINOMIAL_KERNEL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0
BOX_KERNEL = np.full((3, 3), 1.0 / 9.0)
KERNELS = {"binomial": BINOMIAL_KERNEL, "box": BOX_KERNEL}


@dataclass(frozen=True)
class ScanImage:
    counts: np.ndarray
    pixel_size_um: float = 0.2

    def __post_init__(self):
        counts = np.array(self.counts, dtype=float)
        if counts.ndim != 2:
            raise InvalidInputError("scan counts must be a 2-D grid")
        if counts.size and (not np.all(np.isfinite(counts)) or counts.min() < 0):
            raise InvalidInputError("scan counts must be finite and non-negative")
        if not self.pixel_size_um > 0:
            raise InvalidInputError("pixel_size_um must be positive")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def height_px(self):
        return self.counts.shape[0]

    @property
    def width_px(self):
        return self.counts.shape[1]


def _check_kernel(kernel):
    if isinstance(kernel, str):
        try:
            kernel = KERNELS[kernel]
        except KeyError:
            raise InvalidInputError(f"unknown kernel {kernel!r}") from None
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape != (3, 3) or kernel.min() < 0 or abs(kernel.sum() - 1.0) > 1e-12:
        raise InvalidInputError("kernel must be 3x3, non-negative and sum to 1")
    return kernel


@dataclass(frozen=True)
class DetectionParams:
    neighbor_distance_n: int = 10
    brightness_factor_a: float = 2.5
    kernel: np.ndarray = field(default_factory=lambda: BINOMIAL_KERNEL.copy())

    def __post_init__(self):
        if int(self.neighbor_distance_n) != self.neighbor_distance_n or self.neighbor_distance_n < 1:
            raise InvalidInputError("neighbor_distance_n must be a positive integer")
        if not self.brightness_factor_a > 1:
            raise InvalidInputError("brightness_factor_a must be > 1")
        object.__setattr__(self, "neighbor_distance_n", int(self.neighbor_distance_n))
        object.__setattr__(self, "kernel", _check_kernel(self.kernel))


@dataclass(frozen=True)
class EmitterCandidate:
    member_pixels: frozenset
    seed_pixel: tuple
    seed_brightness: float
    centroid_um: tuple

    def to_dict(self):
        return {
            "seed_pixel": list(self.seed_pixel),
            "seed_brightness": self.seed_brightness,
            "centroid_um": list(self.centroid_um),
            "member_pixels": sorted(list(p) for p in self.member_pixels),
        }


def smooth(image, kernel=BINOMIAL_KERNEL):
    """Convolve with a 3x3 kernel; borders use edge replication."""
    kernel = _check_kernel(kernel)
    if image.counts.size == 0:
        raise InvalidInputError("cannot smooth an empty image")
    out = ndimage.correlate(image.counts, kernel, mode="nearest")
    return ScanImage(out, image.pixel_size_um)


def select_bright_pixels(image, params):
    """Boolean mask of pixels brighter than ``a`` x each of their n-th neighbours.

    The outer band of width ``n`` has no complete set of neighbours and is
    never selected.
    """
    b = image.counts
    n, a = params.neighbor_distance_n, params.brightness_factor_a
    h, w = b.shape
    if 2 * n >= min(h, w):
        raise InvalidInputError(f"n={n} too large for a {w}x{h} image")
    mask = np.zeros(b.shape, dtype=bool)
    core = b[n:h - n, n:w - n]
    ok = core > a * b[0:h - 2 * n, n:w - n]
    ok &= core > a * b[2 * n:h, n:w - n]
    ok &= core > a * b[n:h - n, 0:w - 2 * n]
    ok &= core > a * b[n:h - n, 2 * n:w]
    mask[n:h - n, n:w - n] = ok
    return mask


def group_pixels(mask, brightness=None, pixel_size_um=1.0):
    """Group 8-connected marked pixels into candidates.

    ``brightness`` (normally the smoothed image) picks each group's seed; on
    ties, or when no brightness is given, the smallest ``(row, col)`` wins.
    Candidates are ordered by seed ``(row, col)``.
    """
    mask = np.asarray(mask, dtype=bool)
    if brightness is None:
        brightness = np.zeros(mask.shape)
    else:
        brightness = np.asarray(brightness, dtype=float)
        if brightness.shape != mask.shape:
            raise InvalidInputError("mask and brightness shapes differ")
    labels, n_labels = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    candidates = []
    for objslice, lab in zip(ndimage.find_objects(labels), range(1, n_labels + 1)):
        rows, cols = np.nonzero(labels[objslice] == lab)
        rows = rows + objslice[0].start
        cols = cols + objslice[1].start
        values = brightness[rows, cols]
        # nonzero() yields row-major order, so argmax picks the smallest (row, col) on ties
        best = int(np.argmax(values))
        seed = (int(rows[best]), int(cols[best]))
        centroid = (float(cols.mean() * pixel_size_um), float(rows.mean() * pixel_size_um))
        candidates.append(EmitterCandidate(
            member_pixels=frozenset(zip(rows.tolist(), cols.tolist())),
            seed_pixel=seed,
            seed_brightness=float(values[best]),
            centroid_um=centroid,
        ))
    candidates.sort(key=lambda c: c.seed_pixel)
    return candidates


def detect(image, params=None):
    """Run smoothing, bright-pixel selection and grouping on a raw scan."""
    params = params or DetectionParams()
    smoothed = smooth(image, params.kernel)
    mask = select_bright_pixels(smoothed, params)
    return group_pixels(mask, smoothed.counts, image.pixel_size_um)
