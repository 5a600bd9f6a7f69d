"""Gray-level discretization and texture-matrix construction.

All matrices operate on a :class:`DiscretizedRoi`: levels 1..G inside the
mask, 0 outside.  Level 0 acts as a natural barrier for runs, zones,
dependences, and neighbourhoods, so off-mask pixels never pair with ROI
pixels.  Directional matrices use the four 2-D directions at distance 1
(horizontal, vertical, and both diagonals) and are averaged with equal
weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import ContractError

#: (row, col) steps for the four distance-1 directions.
DIRECTIONS = ((0, 1), (1, 0), (1, 1), (1, -1))

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class DiscretizedRoi:
    """Gray-level labels for one ROI: 1..bins inside the mask, 0 outside."""

    levels: np.ndarray
    mask: np.ndarray
    bins: int

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.levels.shape != self.mask.shape:
            raise ContractError("levels and mask shapes differ")

    @property
    def n_levels(self) -> int:
        """Highest level present in the ROI."""
        return int(self.levels.max())

    @property
    def n_pixels(self) -> int:
        return int(self.mask.sum())


def discretize(image, mask, bins: int = 32) -> DiscretizedRoi:
    """Equal-width binning of ROI intensities over the ROI min-max range.

    Integer arithmetic keeps bin assignment exact, so any positive affine
    rescaling of the intensities yields the identical level map.  A
    constant ROI maps every pixel to level 1.
    """
    pixels = np.asarray(getattr(image, "pixels", image))
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if bins < 2:
        raise ContractError(f"bins must be >= 2, got {bins}")
    if pixels.shape != bits.shape:
        raise ContractError(
            f"image shape {pixels.shape} != mask shape {bits.shape}")
    if not bits.any():
        raise ContractError("mask selects no pixels")
    values = pixels.astype(np.int64)
    roi = values[bits]
    vmin, vmax = int(roi.min()), int(roi.max())
    levels = np.zeros(pixels.shape, dtype=np.int64)
    if vmin == vmax:
        levels[bits] = 1
    else:
        scaled = (values[bits] - vmin) * bins // (vmax - vmin)
        levels[bits] = np.minimum(scaled, bins - 1) + 1
    return DiscretizedRoi(levels=levels, mask=bits, bins=bins)


# ---------------------------------------------------------------------------
# GLCM
# ---------------------------------------------------------------------------


def glcm_matrix(disc: DiscretizedRoi, direction) -> np.ndarray | None:
    """Symmetric, normalized co-occurrence matrix for one offset.

    Returns None when the direction yields no valid pixel pair.
    """
    dr, dc = direction
    lev = disc.levels
    h, w = lev.shape
    ng = disc.n_levels
    r0, r1 = max(0, -dr), min(h, h - dr)
    c0, c1 = max(0, -dc), min(w, w - dc)
    if r0 >= r1 or c0 >= c1:
        return None
    a = lev[r0:r1, c0:c1]
    b = lev[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    valid = (a > 0) & (b > 0)
    if not valid.any():
        return None
    joint = (a[valid] - 1) * ng + (b[valid] - 1)
    counts = np.bincount(joint, minlength=ng * ng).reshape(ng, ng).astype(np.float64)
    counts += counts.T
    return counts / counts.sum()


def glcm_average(disc: DiscretizedRoi) -> np.ndarray:
    """Equal-weight mean of the per-direction normalized matrices.

    Directions without pairs are skipped; a pairless ROI (single pixel)
    degenerates to the single-level matrix [[1.0]].
    """
    mats = [m for m in (glcm_matrix(disc, d) for d in DIRECTIONS) if m is not None]
    if not mats:
        return np.ones((1, 1), dtype=np.float64)
    return np.mean(mats, axis=0)


# ---------------------------------------------------------------------------
# GLRLM
# ---------------------------------------------------------------------------


def _lines(arr: np.ndarray, direction):
    dr, dc = direction
    if (dr, dc) == (0, 1):
        return list(arr)
    if (dr, dc) == (1, 0):
        return list(arr.T)
    if (dr, dc) == (1, 1):
        src = arr
    else:  # (1, -1): anti-diagonals
        src = arr[:, ::-1]
    h, w = src.shape
    return [np.diagonal(src, offset=k) for k in range(-(h - 1), w)]


def glrlm_matrix(disc: DiscretizedRoi, direction) -> np.ndarray:
    """Run-length counts (level x run length) along one direction."""
    lev = disc.levels
    ng = disc.n_levels
    max_len = max(lev.shape)
    # join all scan lines with a level-0 separator; zero runs are discarded
    joined = np.concatenate(
        [np.concatenate((line, [0])) for line in _lines(lev, direction)])
    change = np.flatnonzero(joined[1:] != joined[:-1])
    starts = np.concatenate(([0], change + 1))
    ends = np.concatenate((change + 1, [joined.size]))
    values = joined[starts]
    keep = values > 0
    lengths = (ends - starts)[keep]
    values = values[keep]
    mat = np.zeros((ng, max_len), dtype=np.float64)
    np.add.at(mat, (values - 1, lengths - 1), 1.0)
    return mat


def glrlm_average(disc: DiscretizedRoi) -> np.ndarray:
    return np.mean([glrlm_matrix(disc, d) for d in DIRECTIONS], axis=0)


# ---------------------------------------------------------------------------
# GLSZM
# ---------------------------------------------------------------------------


def glszm_matrix(disc: DiscretizedRoi) -> np.ndarray:
    """Zone counts (level x zone size) using 8-connected zones."""
    lev = disc.levels
    ng = disc.n_levels
    n_pix = disc.n_pixels
    mat = np.zeros((ng, n_pix), dtype=np.float64)
    for g in np.unique(lev[disc.mask]):
        labeled, n_zones = ndimage.label(lev == g, structure=_EIGHT_CONNECTED)
        if n_zones == 0:
            continue
        sizes = np.bincount(labeled.ravel())[1:]
        np.add.at(mat, (g - 1, sizes - 1), 1.0)
    return mat


# ---------------------------------------------------------------------------
# GLDM
# ---------------------------------------------------------------------------


def gldm_matrix(disc: DiscretizedRoi) -> np.ndarray:
    """Dependence counts (level x dependence size), 8-neighbourhood, alpha=0.

    The dependence size of a pixel is 1 (itself) plus the number of in-ROI
    neighbours sharing its gray level.
    """
    lev = disc.levels
    ng = disc.n_levels
    h, w = lev.shape
    padded = np.zeros((h + 2, w + 2), dtype=np.int64)
    padded[1:-1, 1:-1] = lev
    agree = np.zeros((h, w), dtype=np.int64)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            neighbour = padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
            agree += (neighbour == lev) & (neighbour > 0)
    dep = agree[disc.mask] + 1
    levels = lev[disc.mask]
    mat = np.zeros((ng, 9), dtype=np.float64)
    np.add.at(mat, (levels - 1, dep - 1), 1.0)
    return mat


# ---------------------------------------------------------------------------
# NGTDM
# ---------------------------------------------------------------------------


def ngtdm_table(disc: DiscretizedRoi):
    """Neighbourhood gray-tone difference table.

    Returns ``(n, p, s, n_valid)`` indexed by level-1, where a pixel is
    valid if it has at least one in-ROI 8-neighbour, ``n`` counts valid
    pixels per level, ``p = n / n_valid``, and ``s`` sums |level - mean of
    neighbours| over valid pixels of that level.
    """
    lev = disc.levels
    ng = disc.n_levels
    h, w = lev.shape
    padded = np.zeros((h + 2, w + 2), dtype=np.int64)
    padded[1:-1, 1:-1] = lev
    total = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            neighbour = padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
            total += neighbour
            count += neighbour > 0
    valid = disc.mask & (count > 0)
    n = np.zeros(ng, dtype=np.float64)
    s = np.zeros(ng, dtype=np.float64)
    n_valid = int(valid.sum())
    if n_valid:
        levels = lev[valid]
        mean_neighbour = total[valid] / count[valid]
        np.add.at(n, levels - 1, 1.0)
        np.add.at(s, levels - 1, np.abs(levels - mean_neighbour))
    p = n / n_valid if n_valid else n.copy()
    return n, p, s, n_valid
