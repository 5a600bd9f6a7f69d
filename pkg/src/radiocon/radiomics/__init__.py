"""The 102-feature radiomics vector: schema, extraction, and building blocks.

Blocks and their sizes, in vector order: shape2D (9), first-order (18),
GLCM (24), GLRLM (16), GLSZM (16), NGTDM (5), GLDM (14).  The ordering is
versioned by :data:`SCHEMA_ID`; any change to the feature set or its
conventions must bump it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..data import BoundingBox, GrayImage, roi_mask_from_bbox
from ..errors import ContractError
from .features import (
    FIRSTORDER_NAMES,
    GLCM_NAMES,
    GLDM_NAMES,
    GLRLM_NAMES,
    GLSZM_NAMES,
    NGTDM_NAMES,
    first_order_features,
    glcm_features,
    gldm_features,
    glrlm_features,
    glszm_features,
    ngtdm_features,
    run_zone_features,
)
from .matrices import DiscretizedRoi, discretize
from .shape2d import SHAPE2D_NAMES, shape2d_features

SCHEMA_ID = "radiomics102-v1"

FEATURE_NAMES: tuple = (
    tuple(f"shape2d_{n}" for n in SHAPE2D_NAMES)
    + tuple(f"firstorder_{n}" for n in FIRSTORDER_NAMES)
    + tuple(f"glcm_{n}" for n in GLCM_NAMES)
    + tuple(f"glrlm_{n}" for n in GLRLM_NAMES)
    + tuple(f"glszm_{n}" for n in GLSZM_NAMES)
    + tuple(f"ngtdm_{n}" for n in NGTDM_NAMES)
    + tuple(f"gldm_{n}" for n in GLDM_NAMES)
)

N_FEATURES = len(FEATURE_NAMES)
assert N_FEATURES == 102


@dataclass(frozen=True)
class RadiomicsVector:
    """Ordered feature values under a fixed, versioned schema."""

    values: np.ndarray
    schema_id: str = SCHEMA_ID

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.shape != (N_FEATURES,):
            raise ContractError(
                f"expected {N_FEATURES} features, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            bad = [FEATURE_NAMES[i] for i in np.nonzero(~np.isfinite(arr))[0]]
            raise ContractError(f"non-finite features: {bad}")
        object.__setattr__(self, "values", arr)


def extract_radiomics(image, bbox: Optional[BoundingBox] = None,
                      bins: int = 32) -> RadiomicsVector:
    """Compute the full 102-feature vector over the (optional) box ROI.

    Without a box the whole image is the ROI, which is also the convention
    for normal studies.
    """
    if not isinstance(image, GrayImage):
        image = GrayImage(np.asarray(image))
    if bbox is not None and not isinstance(bbox, BoundingBox):
        bbox = BoundingBox(*bbox)
    mask = roi_mask_from_bbox(image, bbox)
    disc = discretize(image.pixels, mask.bits, bins)
    values = np.concatenate([
        shape2d_features(mask.bits),
        first_order_features(image.pixels, mask.bits, bins),
        glcm_features(disc),
        glrlm_features(disc),
        glszm_features(disc),
        ngtdm_features(disc),
        gldm_features(disc),
    ])
    return RadiomicsVector(values=values)


__all__ = [
    "SCHEMA_ID", "FEATURE_NAMES", "N_FEATURES", "RadiomicsVector",
    "DiscretizedRoi", "discretize", "extract_radiomics",
    "first_order_features", "glcm_features", "glrlm_features",
    "glszm_features", "gldm_features", "ngtdm_features", "run_zone_features",
    "shape2d_features",
]
