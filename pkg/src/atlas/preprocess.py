"""Image-side preprocessing: channel normalization and patch extraction.

Channels are 16-bit planes normalized independently: a provisional
intensity range comes from the background median and a scaled foreground
percentile, an adaptive histogram step refines it, and the result is
quantized to 8 bits.  Patch windows come from a strided grid with optional
per-window jitter; only windows with tissue coverage above 0.9 survive.
All routines are pure and deterministic given their seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DegenerateMaskError, RegistrationError
from .ingest import PatchCoord

MAX_U16 = 65535
PATCH_SIZE_DEFAULT = 256
STRIDE_FACTOR = 0.7
COVERAGE_MIN = 0.9
FOREGROUND_PERCENTILE = 99.0
UPPER_SCALE = 1.1
# non-paper defaults, exposed as parameters
BACKGROUND_MARGIN_DEFAULT = 500.0
HIST_MIN_COUNT_DEFAULT = 8
HIST_MAX_FRACTION_DEFAULT = 0.02
JITTER_FACTOR_DEFAULT = 0.15
HIST_BINS = 256


@dataclass(frozen=True)
class MultiplexImage:
    """16-bit multi-channel raster with a binary tissue mask.

    channels has shape (C, H, W); mask has shape (H, W) with 1 = tissue.
    """

    channels: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        channels = np.asarray(self.channels)
        mask = np.asarray(self.mask).astype(bool)
        if channels.ndim != 3 or channels.shape[0] < 1:
            raise ArgumentError("channels must have shape (C, H, W) with C >= 1")
        if mask.shape != channels.shape[1:]:
            raise ArgumentError("mask dimensions must equal image dimensions")
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self):
        return self.channels.shape[1]

    @property
    def width(self):
        return self.channels.shape[2]

    @property
    def n_channels(self):
        return self.channels.shape[0]


@dataclass(frozen=True)
class NormalizedImage:
    """8-bit multi-channel raster, shape (C, H, W), values in [0, 255]."""

    channels: np.ndarray

    def __post_init__(self):
        channels = np.asarray(self.channels, dtype=np.uint8)
        if channels.ndim != 3:
            raise ArgumentError("channels must have shape (C, H, W)")
        object.__setattr__(self, "channels", channels)

    @property
    def height(self):
        return self.channels.shape[1]

    @property
    def width(self):
        return self.channels.shape[2]


def estimate_bounds(channel, mask, margin=BACKGROUND_MARGIN_DEFAULT):
    """Provisional clipping range from background median and foreground p99.

    The upper bound is 1.1x the 99th foreground percentile, at least
    ``margin`` above the background level and clamped to the 16-bit
    maximum.
    """
    channel = np.asarray(channel, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    fg = channel[mask]
    bg = channel[~mask]
    if fg.size == 0 or bg.size == 0:
        raise DegenerateMaskError("mask must contain both foreground and background pixels")
    lo = float(np.median(bg))
    hi = min(float(MAX_U16), max(UPPER_SCALE * float(np.percentile(fg, FOREGROUND_PERCENTILE)),
                                 lo + margin))
    hi = max(hi, lo)
    return lo, hi


def refine_bounds(channel, lo, hi,
                  min_count=HIST_MIN_COUNT_DEFAULT,
                  max_fraction=HIST_MAX_FRACTION_DEFAULT):
    """Histogram-refined clipping range.

    In-range pixels are binned into 256 equal bins over [lo, hi]; bins
    whose count falls inside [min_count, max_fraction * n_in_range] are
    retained and the refined range spans the lowest retained bin's lower
    edge to the highest retained bin's upper edge.  Falls back to (lo, hi)
    when no bin qualifies.
    """
    if lo > hi:
        raise ArgumentError("lo must not exceed hi")
    if lo == hi:
        return lo, hi
    channel = np.asarray(channel, dtype=np.float64)
    values = channel[(channel >= lo) & (channel <= hi)]
    if values.size == 0:
        return lo, hi
    counts, edges = np.histogram(values, bins=HIST_BINS, range=(lo, hi))
    f_max = max_fraction * values.size
    keep = np.flatnonzero((counts >= min_count) & (counts <= f_max))
    if keep.size == 0:
        return lo, hi
    return float(edges[keep[0]]), float(edges[keep[-1] + 1])


def normalize_channel(channel, mask,
                      margin=BACKGROUND_MARGIN_DEFAULT,
                      min_count=HIST_MIN_COUNT_DEFAULT,
                      max_fraction=HIST_MAX_FRACTION_DEFAULT):
    """Full per-channel normalization to an 8-bit plane.

    Clips to the refined range, rescales to [0, 1] and quantizes with
    round-half-up so golden outputs are stable.  A degenerate refined
    range yields an all-zero plane.
    """
    lo, hi = estimate_bounds(channel, mask, margin=margin)
    lo2, hi2 = refine_bounds(channel, lo, hi, min_count=min_count, max_fraction=max_fraction)
    return quantize_plane(channel, lo2, hi2)


def quantize_plane(channel, lo, hi):
    """Clip to [lo, hi], scale to [0, 1], quantize to uint8 (half-up)."""
    channel = np.asarray(channel, dtype=np.float64)
    if hi <= lo:
        return np.zeros(channel.shape, dtype=np.uint8)
    scaled = (np.clip(channel, lo, hi) - lo) / (hi - lo)
    return np.floor(255.0 * scaled + 0.5).astype(np.uint8)


def normalize_image(image, **kwargs):
    """Normalize every channel of a MultiplexImage independently.

    Channels whose mask is degenerate for normalization purposes are not
    possible here (the mask is shared), so this is a plain per-channel map.
    """
    planes = [normalize_channel(image.channels[c], image.mask, **kwargs)
              for c in range(image.n_channels)]
    return NormalizedImage(np.stack(planes, axis=0))


def generate_patches(height, width, mask, patch_size=PATCH_SIZE_DEFAULT, seed=0,
                     jitter=None, coverage_min=COVERAGE_MIN):
    """Strided, jittered patch windows with tissue-coverage filtering.

    The base grid uses stride floor(0.7 * patch_size).  Each window gets an
    independent integer jitter drawn uniformly from [0, jitter] per axis
    (default floor(0.15 * patch_size); pass 0 to disable) and is clipped to
    the image bounds.  Windows whose mask coverage is not greater than
    ``coverage_min`` are dropped.  Returns ([], "image smaller than patch")
    when the image cannot hold a single window, else (coords, "ok").
    """
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (height, width):
        raise ArgumentError("mask shape must equal (height, width)")
    p = int(patch_size)
    if height < p or width < p:
        return [], "image smaller than patch"
    if jitter is None:
        jitter = int(np.floor(JITTER_FACTOR_DEFAULT * p))
    stride = int(np.floor(STRIDE_FACTOR * p))
    ys = np.arange(0, height - p + 1, stride)
    xs = np.arange(0, width - p + 1, stride)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))

    # summed-area table makes each window's coverage O(1)
    integral = np.zeros((height + 1, width + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(mask, axis=0), axis=1)

    coords = []
    for y0 in ys:
        for x0 in xs:
            if jitter > 0:
                jy, jx = rng.integers(0, jitter + 1, size=2)
            else:
                jy = jx = 0
            y = min(int(y0 + jy), height - p)
            x = min(int(x0 + jx), width - p)
            covered = (integral[y + p, x + p] - integral[y, x + p]
                       - integral[y + p, x] + integral[y, x])
            if covered / (p * p) > coverage_min:
                coords.append(PatchCoord(x, x + p, y, y + p))
    return coords, "ok"


def crop_pair(he_image, mif, coord):
    """Extract the H&E and mIF crops at one shared coordinate.

    No resampling: both crops slice the same pixel index ranges.  Raises
    RegistrationError when the coordinate does not fit either raster.
    """
    he_image = np.asarray(he_image)
    if he_image.ndim != 3 or he_image.shape[2] != 3:
        raise ArgumentError("he_image must have shape (H, W, 3)")
    he_h, he_w = he_image.shape[:2]
    if coord.y_top > he_h or coord.x_right > he_w:
        raise RegistrationError(
            f"coordinate {coord} exceeds H&E bounds ({he_h}, {he_w})")
    if coord.y_top > mif.height or coord.x_right > mif.width:
        raise RegistrationError(
            f"coordinate {coord} exceeds mIF bounds ({mif.height}, {mif.width})")
    he_patch = he_image[coord.y_bottom:coord.y_top, coord.x_left:coord.x_right]
    mif_patch = mif.channels[:, coord.y_bottom:coord.y_top, coord.x_left:coord.x_right]
    return he_patch, np.moveaxis(mif_patch, 0, -1)
