"""First-order and texture feature computation.

Conventions for degenerate inputs (never emit NaN):

* sigma = 0 inside the ROI => GLCM Correlation = 1 and MCC = 1; first-order
  Skewness and Kurtosis = 0.
* Empty sum/difference sub-distributions contribute zero entropy
  (0 * log 0 = 0); entropies use base-2 logarithms.
* The NGTDM coarseness denominator is floored at 1e-12, capping the
  feature at 1e12.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .matrices import (
    DiscretizedRoi,
    discretize,
    glcm_average,
    gldm_matrix,
    glrlm_average,
    glszm_matrix,
    ngtdm_table,
)

NGTDM_COARSENESS_EPS = 1e-12

FIRSTORDER_NAMES = (
    "Energy", "Entropy", "Minimum", "Percentile10", "Percentile90", "Maximum",
    "Mean", "Median", "InterquartileRange", "Range", "MeanAbsoluteDeviation",
    "RobustMeanAbsoluteDeviation", "RootMeanSquared", "Skewness", "Kurtosis",
    "Variance", "Uniformity", "TotalEnergy",
)

GLCM_NAMES = (
    "Autocorrelation", "JointAverage", "ClusterProminence", "ClusterShade",
    "ClusterTendency", "Contrast", "Correlation", "DifferenceAverage",
    "DifferenceEntropy", "DifferenceVariance", "JointEnergy", "JointEntropy",
    "Imc1", "Imc2", "Idm", "Idmn", "Id", "Idn", "InverseVariance",
    "MaximumProbability", "SumAverage", "SumEntropy", "SumSquares", "Mcc",
)

GLRLM_NAMES = (
    "ShortRunEmphasis", "LongRunEmphasis", "GrayLevelNonUniformity",
    "GrayLevelNonUniformityNormalized", "RunLengthNonUniformity",
    "RunLengthNonUniformityNormalized", "RunPercentage", "GrayLevelVariance",
    "RunVariance", "RunEntropy", "LowGrayLevelRunEmphasis",
    "HighGrayLevelRunEmphasis", "ShortRunLowGrayLevelEmphasis",
    "ShortRunHighGrayLevelEmphasis", "LongRunLowGrayLevelEmphasis",
    "LongRunHighGrayLevelEmphasis",
)

GLSZM_NAMES = (
    "SmallAreaEmphasis", "LargeAreaEmphasis", "GrayLevelNonUniformity",
    "GrayLevelNonUniformityNormalized", "SizeZoneNonUniformity",
    "SizeZoneNonUniformityNormalized", "ZonePercentage", "GrayLevelVariance",
    "ZoneVariance", "ZoneEntropy", "LowGrayLevelZoneEmphasis",
    "HighGrayLevelZoneEmphasis", "SmallAreaLowGrayLevelEmphasis",
    "SmallAreaHighGrayLevelEmphasis", "LargeAreaLowGrayLevelEmphasis",
    "LargeAreaHighGrayLevelEmphasis",
)

NGTDM_NAMES = ("Coarseness", "Contrast", "Busyness", "Complexity", "Strength")

GLDM_NAMES = (
    "SmallDependenceEmphasis", "LargeDependenceEmphasis",
    "GrayLevelNonUniformity", "DependenceNonUniformity",
    "DependenceNonUniformityNormalized", "GrayLevelVariance",
    "DependenceVariance", "DependenceEntropy", "LowGrayLevelEmphasis",
    "HighGrayLevelEmphasis", "SmallDependenceLowGrayLevelEmphasis",
    "SmallDependenceHighGrayLevelEmphasis",
    "LargeDependenceLowGrayLevelEmphasis",
    "LargeDependenceHighGrayLevelEmphasis",
)


def _entropy(p: np.ndarray) -> float:
    """Base-2 entropy with the 0 * log 0 = 0 convention."""
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


# ---------------------------------------------------------------------------
# first order
# ---------------------------------------------------------------------------


def first_order_features(image, mask, bins: int = 32) -> np.ndarray:
    """The 18 intensity statistics over the ROI.

    Entropy and Uniformity are computed on the equal-width discretized
    histogram; everything else uses raw intensities.  Variance is the
    population variance and Kurtosis carries no Fisher correction.  With
    unit pixel spacing TotalEnergy equals Energy.
    """
    pixels = np.asarray(getattr(image, "pixels", image))
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if not bits.any():
        raise ContractError("mask selects no pixels")
    x = pixels[bits].astype(np.float64)
    n = x.size
    mean = float(x.mean())
    var = float(((x - mean) ** 2).mean())
    sd = np.sqrt(var)
    p10, p25, p50, p75, p90 = np.percentile(x, [10, 25, 50, 75, 90])
    robust = x[(x >= p10) & (x <= p90)]
    rmad = float(np.abs(robust - robust.mean()).mean()) if robust.size else 0.0
    if sd > 0:
        skewness = float(((x - mean) ** 3).mean() / sd ** 3)
        kurtosis = float(((x - mean) ** 4).mean() / var ** 2)
    else:
        skewness = 0.0
        kurtosis = 0.0
    disc = discretize(pixels, bits, bins)
    hist = np.bincount(disc.levels[bits])[1:].astype(np.float64)
    p_hist = hist / n
    energy = float((x ** 2).sum())
    return np.array([
        energy,
        _entropy(p_hist),
        float(x.min()),
        float(p10),
        float(p90),
        float(x.max()),
        mean,
        float(p50),
        float(p75 - p25),
        float(x.max() - x.min()),
        float(np.abs(x - mean).mean()),
        rmad,
        float(np.sqrt((x ** 2).mean())),
        skewness,
        kurtosis,
        var,
        float((p_hist ** 2).sum()),
        energy,
    ])


# ---------------------------------------------------------------------------
# GLCM
# ---------------------------------------------------------------------------


def glcm_features_from_matrix(p: np.ndarray) -> np.ndarray:
    """The 24 co-occurrence features of a normalized symmetric GLCM."""
    ng = p.shape[0]
    i = np.arange(1, ng + 1, dtype=np.float64)[:, None]
    j = np.arange(1, ng + 1, dtype=np.float64)[None, :]
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    mu_x = float((p * i).sum())
    mu_y = float((p * j).sum())
    sig_x = np.sqrt(float((p * (i - mu_x) ** 2).sum()))
    sig_y = np.sqrt(float((p * (j - mu_y) ** 2).sum()))

    k_sum = np.arange(2, 2 * ng + 1, dtype=np.float64)
    p_sum = np.zeros(k_sum.size)
    k_diff = np.arange(0, ng, dtype=np.float64)
    p_diff = np.zeros(k_diff.size)
    ii, jj = np.indices((ng, ng))
    np.add.at(p_sum, ii.ravel() + jj.ravel(), p.ravel())
    np.add.at(p_diff, np.abs(ii - jj).ravel(), p.ravel())

    hx = _entropy(px)
    hy = _entropy(py)
    hxy = _entropy(p)
    outer = px[:, None] * py[None, :]
    nz = p > 0
    hxy1 = float(-(p[nz] * np.log2(outer[nz])).sum())
    hxy2 = _entropy(outer)

    contrast = float((p * (i - j) ** 2).sum())
    if sig_x > 0 and sig_y > 0:
        correlation = float((p * (i - mu_x) * (j - mu_y)).sum() / (sig_x * sig_y))
    else:
        correlation = 1.0
    diff_avg = float((k_diff * p_diff).sum())
    denom_h = max(hx, hy)
    imc1 = float((hxy - hxy1) / denom_h) if denom_h > 0 else 0.0
    imc2 = float(np.sqrt(max(0.0, 1.0 - np.exp(-2.0 * (hxy2 - hxy)))))
    off = np.abs(i - j) > 0
    inverse_variance = float((p[off] / ((i - j) ** 2)[off]).sum())

    present = px > 0
    if present.sum() < 2:
        mcc = 1.0
    else:
        ps = p[np.ix_(present, present)]
        pxs = px[present]
        pys = py[present]
        q = (ps[:, None, :, ] / pxs[:, None, None] / pys[None, None, :]
             * ps[None, :, :]).sum(axis=2)
        eig = np.sort(np.real(np.linalg.eigvals(q)))
        mcc = float(np.sqrt(np.clip(eig[-2], 0.0, 1.0)))

    return np.array([
        float((p * i * j).sum()),
        mu_x,
        float((p * (i + j - mu_x - mu_y) ** 4).sum()),
        float((p * (i + j - mu_x - mu_y) ** 3).sum()),
        float((p * (i + j - mu_x - mu_y) ** 2).sum()),
        contrast,
        correlation,
        diff_avg,
        _entropy(p_diff),
        float((p_diff * (k_diff - diff_avg) ** 2).sum()),
        float((p ** 2).sum()),
        hxy,
        imc1,
        imc2,
        float((p / (1.0 + (i - j) ** 2)).sum()),
        float((p / (1.0 + (i - j) ** 2 / ng ** 2)).sum()),
        float((p / (1.0 + np.abs(i - j))).sum()),
        float((p / (1.0 + np.abs(i - j) / ng)).sum()),
        inverse_variance,
        float(p.max()),
        float((k_sum * p_sum).sum()),
        _entropy(p_sum),
        float((p * (i - mu_x) ** 2).sum()),
        mcc,
    ])


def glcm_features(disc: DiscretizedRoi) -> np.ndarray:
    return glcm_features_from_matrix(glcm_average(disc))


# ---------------------------------------------------------------------------
# run / zone / dependence families
# ---------------------------------------------------------------------------


def _rz_statistics(mat: np.ndarray, n_pixels: float) -> dict:
    """Shared statistics for count matrices indexed (level, size)."""
    total = mat.sum()
    i = np.arange(1, mat.shape[0] + 1, dtype=np.float64)[:, None]
    s = np.arange(1, mat.shape[1] + 1, dtype=np.float64)[None, :]
    p = mat / total
    mu_i = float((p * i).sum())
    mu_s = float((p * s).sum())
    return {
        "small": float((mat / s ** 2).sum() / total),
        "large": float((mat * s ** 2).sum() / total),
        "gln": float((mat.sum(axis=1) ** 2).sum() / total),
        "glnn": float((mat.sum(axis=1) ** 2).sum() / total ** 2),
        "szn": float((mat.sum(axis=0) ** 2).sum() / total),
        "sznn": float((mat.sum(axis=0) ** 2).sum() / total ** 2),
        "percentage": float(total / n_pixels),
        "gl_var": float((p * (i - mu_i) ** 2).sum()),
        "sz_var": float((p * (s - mu_s) ** 2).sum()),
        "entropy": _entropy(p),
        "low": float((mat / i ** 2).sum() / total),
        "high": float((mat * i ** 2).sum() / total),
        "small_low": float((mat / (i ** 2 * s ** 2)).sum() / total),
        "small_high": float((mat * i ** 2 / s ** 2).sum() / total),
        "large_low": float((mat * s ** 2 / i ** 2).sum() / total),
        "large_high": float((mat * i ** 2 * s ** 2).sum() / total),
    }


_RZ_ORDER = ("small", "large", "gln", "glnn", "szn", "sznn", "percentage",
             "gl_var", "sz_var", "entropy", "low", "high", "small_low",
             "small_high", "large_low", "large_high")


def glrlm_features(disc: DiscretizedRoi) -> np.ndarray:
    stats = _rz_statistics(glrlm_average(disc), disc.n_pixels)
    return np.array([stats[k] for k in _RZ_ORDER])


def glszm_features(disc: DiscretizedRoi) -> np.ndarray:
    stats = _rz_statistics(glszm_matrix(disc), disc.n_pixels)
    return np.array([stats[k] for k in _RZ_ORDER])


def gldm_features(disc: DiscretizedRoi) -> np.ndarray:
    """The 14 dependence features (no zone-percentage/normalized-GLN pair)."""
    stats = _rz_statistics(gldm_matrix(disc), disc.n_pixels)
    order = ("small", "large", "gln", "szn", "sznn", "gl_var", "sz_var",
             "entropy", "low", "high", "small_low", "small_high",
             "large_low", "large_high")
    return np.array([stats[k] for k in order])


def run_zone_features(disc: DiscretizedRoi) -> np.ndarray:
    """GLRLM(16) + GLSZM(16) + GLDM(14) in schema order."""
    return np.concatenate([
        glrlm_features(disc), glszm_features(disc), gldm_features(disc)])


# ---------------------------------------------------------------------------
# NGTDM
# ---------------------------------------------------------------------------


def ngtdm_features(disc: DiscretizedRoi) -> np.ndarray:
    n, p, s, n_valid = ngtdm_table(disc)
    present = p > 0
    n_gp = int(present.sum())
    i = np.arange(1, p.size + 1, dtype=np.float64)

    ps = float((p * s).sum())
    coarseness = 1.0 / max(ps, NGTDM_COARSENESS_EPS)

    if n_gp > 1 and n_valid > 0:
        pi = p[present]
        ii = i[present]
        si = s[present]
        diff2 = (ii[:, None] - ii[None, :]) ** 2
        contrast = float((pi[:, None] * pi[None, :] * diff2).sum()
                         / (n_gp * (n_gp - 1)) * s.sum() / n_valid)
        busy_denom = float(np.abs(ii[:, None] * pi[:, None]
                                  - ii[None, :] * pi[None, :]).sum())
        busyness = ps / busy_denom if busy_denom > 0 else 0.0
        complexity = float((np.abs(ii[:, None] - ii[None, :])
                            * (pi[:, None] * si[:, None] + pi[None, :] * si[None, :])
                            / (pi[:, None] + pi[None, :])).sum() / n_valid)
        s_total = float(s.sum())
        strength = (float(((pi[:, None] + pi[None, :]) * diff2).sum()) / s_total
                    if s_total > 0 else 0.0)
    else:
        contrast = 0.0
        busyness = 0.0
        complexity = 0.0
        strength = 0.0

    return np.array([coarseness, contrast, busyness, complexity, strength])
