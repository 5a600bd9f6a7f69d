"""2-D shape features of a pixel mask.

The mask is treated as a union of unit squares: area is the pixel count,
the perimeter counts exposed pixel edges, and the maximum diameter is the
largest distance between pixel centres.  Axis lengths come from the
eigenvalues of the (population) covariance of pixel-centre coordinates.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError

SHAPE2D_NAMES = (
    "PixelSurface", "Perimeter", "PerimeterSurfaceRatio", "Sphericity",
    "MaximumDiameter", "MajorAxisLength", "MinorAxisLength", "Elongation",
    "MeshSurface",
)


def _perimeter(bits: np.ndarray) -> float:
    area = int(bits.sum())
    horiz = int((bits[:, 1:] & bits[:, :-1]).sum())
    vert = int((bits[1:, :] & bits[:-1, :]).sum())
    return float(4 * area - 2 * (horiz + vert))


def _boundary_coords(bits: np.ndarray) -> np.ndarray:
    """Centres of pixels with at least one exposed edge."""
    padded = np.zeros((bits.shape[0] + 2, bits.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = bits
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:]) & bits
    ys, xs = np.nonzero(bits & ~interior)
    return np.stack([ys, xs], axis=1).astype(np.float64)


def _max_diameter(bits: np.ndarray) -> float:
    coords = _boundary_coords(bits)
    if coords.shape[0] == 1:
        return 0.0
    # the farthest pair always lies on the boundary; O(b^2) on those points
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.max()))


def shape2d_features(mask) -> np.ndarray:
    """The 9 mask-geometry features, in schema order."""
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if not bits.any():
        raise ContractError("mask selects no pixels")
    area = float(bits.sum())
    perimeter = _perimeter(bits)
    ys, xs = np.nonzero(bits)
    coords = np.stack([ys, xs], axis=1).astype(np.float64)
    centred = coords - coords.mean(axis=0)
    cov = centred.T @ centred / coords.shape[0]
    lam_minor, lam_major = np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    elongation = float(np.sqrt(lam_minor / lam_major)) if lam_major > 0 else 1.0
    return np.array([
        area,
        perimeter,
        perimeter / area,
        2.0 * np.sqrt(np.pi * area) / perimeter,
        _max_diameter(bits),
        4.0 * np.sqrt(lam_major),
        4.0 * np.sqrt(lam_minor),
        elongation,
        area,
    ])
