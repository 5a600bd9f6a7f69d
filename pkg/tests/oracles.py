"""Independent reference implementations used as test oracles.

Everything here is written with plain loops (or dtype-float64 numpy) and no
shared code with the package internals, so agreement is meaningful.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def central_diff(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


# ---------------------------------------------------------------------------
# naive conv / pool forward references (channels-last)
# ---------------------------------------------------------------------------


def conv2d_naive(x: np.ndarray, w: np.ndarray, bias=None, stride: int = 1,
                 padding: int = 0) -> np.ndarray:
    """Loop cross-correlation; x (H, W, Ci), w (kh, kw, Ci, Co)."""
    h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    xp = np.zeros((h + 2 * padding, wd + 2 * padding, ci), dtype=np.float64)
    xp[padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((oh, ow, co), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            patch = xp[i * stride:i * stride + kh, j * stride:j * stride + kw, :]
            for o in range(co):
                out[i, j, o] = (patch * w[:, :, :, o]).sum()
    if bias is not None:
        out += bias
    return out


def max_pool_naive(x: np.ndarray, k: int) -> np.ndarray:
    h, w, c = x.shape
    out = np.zeros((h // k, w // k, c), dtype=np.float64)
    for i in range(h // k):
        for j in range(w // k):
            out[i, j] = x[i * k:(i + 1) * k, j * k:(j + 1) * k].max(axis=(0, 1))
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def pairwise_distance_naive(u: np.ndarray, v: np.ndarray, p: float) -> np.ndarray:
    n, m = u.shape[0], v.shape[0]
    d = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for k in range(m):
            d[i, k] = (np.abs(u[i] - v[k]) ** p).sum() ** (1.0 / p)
    return d


def contrastive_losses_naive(u: np.ndarray, v: np.ndarray, tau: float, p: float,
                             kernel: str = "neg_distance"):
    """(loss_uv, loss_vu) per-sample arrays by direct double-loop softmax."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n = u.shape[0]

    def score(a, b):
        if kernel == "dot_product":
            return float(a @ b)
        d = float((np.abs(a - b) ** p).sum() ** (1.0 / p))
        return -d if kernel == "neg_distance" else d

    loss_uv = np.zeros(n)
    loss_vu = np.zeros(n)
    for i in range(n):
        row_uv = np.array([score(u[i], v[k]) / tau for k in range(n)])
        row_vu = np.array([score(v[i], u[k]) / tau for k in range(n)])
        m = row_uv.max()
        loss_uv[i] = -(row_uv[i] - m - math.log(np.exp(row_uv - m).sum()))
        m = row_vu.max()
        loss_vu[i] = -(row_vu[i] - m - math.log(np.exp(row_vu - m).sum()))
    return loss_uv, loss_vu


def bce_naive(y_pred, y_true, eps: float = 1e-7) -> float:
    total = 0.0
    for p, t in zip(y_pred, y_true):
        p = min(max(float(p), eps), 1.0 - eps)
        total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
    return total / len(y_pred)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def auc_pair_count(scored) -> float:
    """O(n^2) concordant/tied pair counting."""
    pos = [s for s, l in scored if l == 1]
    neg = [s for s, l in scored if l == 0]
    total = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                total += 1.0
            elif sp == sn:
                total += 0.5
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# radiomics texture oracles (plain loops everywhere)
# ---------------------------------------------------------------------------

_DIRS4 = ((0, 1), (1, 0), (1, 1), (1, -1))
_NEIGH8 = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


def _inside(lev, r, c):
    return 0 <= r < lev.shape[0] and 0 <= c < lev.shape[1] and lev[r, c] > 0


def glcm_oracle_matrix(levels: np.ndarray, direction) -> np.ndarray | None:
    """Symmetric normalized co-occurrence counts for one offset."""
    ng = int(levels.max())
    dr, dc = direction
    counts = np.zeros((ng, ng), dtype=np.float64)
    h, w = levels.shape
    for r in range(h):
        for c in range(w):
            if levels[r, c] <= 0:
                continue
            rr, cc = r + dr, c + dc
            if _inside(levels, rr, cc):
                counts[levels[r, c] - 1, levels[rr, cc] - 1] += 1
                counts[levels[rr, cc] - 1, levels[r, c] - 1] += 1
    total = counts.sum()
    return counts / total if total else None


def glcm_oracle_average(levels: np.ndarray) -> np.ndarray:
    mats = [m for m in (glcm_oracle_matrix(levels, d) for d in _DIRS4)
            if m is not None]
    if not mats:
        return np.ones((1, 1))
    return sum(mats) / len(mats)


def glcm_features_oracle(p: np.ndarray, names) -> dict:
    """The 24 co-occurrence features from a normalized matrix, by loops."""
    ng = p.shape[0]
    idx = range(1, ng + 1)
    px = [sum(p[i - 1, j - 1] for j in idx) for i in idx]
    py = [sum(p[i - 1, j - 1] for i in idx) for j in idx]
    mu_x = sum(i * p[i - 1, j - 1] for i in idx for j in idx)
    mu_y = sum(j * p[i - 1, j - 1] for i in idx for j in idx)
    sig_x = math.sqrt(sum((i - mu_x) ** 2 * p[i - 1, j - 1] for i in idx for j in idx))
    sig_y = math.sqrt(sum((j - mu_y) ** 2 * p[i - 1, j - 1] for i in idx for j in idx))

    p_sum = {k: 0.0 for k in range(2, 2 * ng + 1)}
    p_diff = {k: 0.0 for k in range(0, ng)}
    for i in idx:
        for j in idx:
            p_sum[i + j] += p[i - 1, j - 1]
            p_diff[abs(i - j)] += p[i - 1, j - 1]

    def ent(values):
        return -sum(v * math.log2(v) for v in values if v > 0)

    hx, hy = ent(px), ent(py)
    hxy = ent(p.ravel())
    hxy1 = -sum(p[i - 1, j - 1] * math.log2(px[i - 1] * py[j - 1])
                for i in idx for j in idx if p[i - 1, j - 1] > 0)
    hxy2 = ent([px[i - 1] * py[j - 1] for i in idx for j in idx])

    if sig_x > 0 and sig_y > 0:
        corr = sum((i - mu_x) * (j - mu_y) * p[i - 1, j - 1]
                   for i in idx for j in idx) / (sig_x * sig_y)
    else:
        corr = 1.0
    da = sum(k * v for k, v in p_diff.items())

    present = [i for i in idx if px[i - 1] > 0]
    if len(present) < 2:
        mcc = 1.0
    else:
        q = np.zeros((len(present), len(present)))
        for a, i in enumerate(present):
            for b, j in enumerate(present):
                q[a, b] = sum(
                    p[i - 1, k - 1] * p[j - 1, k - 1] / (px[i - 1] * py[k - 1])
                    for k in idx if py[k - 1] > 0)
        eig = sorted(np.real(np.linalg.eigvals(q)))
        mcc = math.sqrt(min(max(eig[-2], 0.0), 1.0))

    out = {
        "Autocorrelation": sum(i * j * p[i - 1, j - 1] for i in idx for j in idx),
        "JointAverage": mu_x,
        "ClusterProminence": sum((i + j - mu_x - mu_y) ** 4 * p[i - 1, j - 1]
                                 for i in idx for j in idx),
        "ClusterShade": sum((i + j - mu_x - mu_y) ** 3 * p[i - 1, j - 1]
                            for i in idx for j in idx),
        "ClusterTendency": sum((i + j - mu_x - mu_y) ** 2 * p[i - 1, j - 1]
                               for i in idx for j in idx),
        "Contrast": sum((i - j) ** 2 * p[i - 1, j - 1] for i in idx for j in idx),
        "Correlation": corr,
        "DifferenceAverage": da,
        "DifferenceEntropy": ent(p_diff.values()),
        "DifferenceVariance": sum((k - da) ** 2 * v for k, v in p_diff.items()),
        "JointEnergy": sum(v * v for v in p.ravel()),
        "JointEntropy": hxy,
        "Imc1": (hxy - hxy1) / max(hx, hy) if max(hx, hy) > 0 else 0.0,
        "Imc2": math.sqrt(max(0.0, 1.0 - math.exp(-2.0 * (hxy2 - hxy)))),
        "Idm": sum(p[i - 1, j - 1] / (1 + (i - j) ** 2) for i in idx for j in idx),
        "Idmn": sum(p[i - 1, j - 1] / (1 + (i - j) ** 2 / ng ** 2)
                    for i in idx for j in idx),
        "Id": sum(p[i - 1, j - 1] / (1 + abs(i - j)) for i in idx for j in idx),
        "Idn": sum(p[i - 1, j - 1] / (1 + abs(i - j) / ng) for i in idx for j in idx),
        "InverseVariance": sum(p[i - 1, j - 1] / (i - j) ** 2
                               for i in idx for j in idx if i != j),
        "MaximumProbability": p.max(),
        "SumAverage": sum(k * v for k, v in p_sum.items()),
        "SumEntropy": ent(p_sum.values()),
        "SumSquares": sum((i - mu_x) ** 2 * p[i - 1, j - 1] for i in idx for j in idx),
        "Mcc": mcc,
    }
    return {name: out[name] for name in names}


def runs_oracle(levels: np.ndarray, direction) -> np.ndarray:
    """Run-length counts by walking each scan line."""
    ng = int(levels.max())
    h, w = levels.shape
    mat = np.zeros((ng, max(h, w)), dtype=np.float64)
    dr, dc = direction
    if (dr, dc) == (0, 1):
        starts = [(r, 0) for r in range(h)]
    elif (dr, dc) == (1, 0):
        starts = [(0, c) for c in range(w)]
    elif (dr, dc) == (1, 1):
        starts = [(0, c) for c in range(w)] + [(r, 0) for r in range(1, h)]
    else:
        starts = [(0, c) for c in range(w)] + [(r, w - 1) for r in range(1, h)]
    for r0, c0 in starts:
        line = []
        r, c = r0, c0
        while 0 <= r < h and 0 <= c < w:
            line.append(int(levels[r, c]))
            r, c = r + dr, c + dc
        i = 0
        while i < len(line):
            if line[i] == 0:
                i += 1
                continue
            j = i
            while j + 1 < len(line) and line[j + 1] == line[i]:
                j += 1
            mat[line[i] - 1, j - i] += 1
            i = j + 1
    return mat


def zones_oracle(levels: np.ndarray) -> np.ndarray:
    """8-connected same-level zones by BFS flood fill."""
    ng = int(levels.max())
    n_pix = int((levels > 0).sum())
    h, w = levels.shape
    seen = np.zeros_like(levels, dtype=bool)
    mat = np.zeros((ng, n_pix), dtype=np.float64)
    for r in range(h):
        for c in range(w):
            if levels[r, c] <= 0 or seen[r, c]:
                continue
            g = levels[r, c]
            stack = [(r, c)]
            seen[r, c] = True
            size = 0
            while stack:
                rr, cc = stack.pop()
                size += 1
                for dr, dc in _NEIGH8:
                    r2, c2 = rr + dr, cc + dc
                    if (0 <= r2 < h and 0 <= c2 < w and not seen[r2, c2]
                            and levels[r2, c2] == g):
                        seen[r2, c2] = True
                        stack.append((r2, c2))
            mat[g - 1, size - 1] += 1
    return mat


def dependence_oracle(levels: np.ndarray) -> np.ndarray:
    """Dependence counts: size = 1 + equal-level in-ROI 8-neighbours."""
    ng = int(levels.max())
    h, w = levels.shape
    mat = np.zeros((ng, 9), dtype=np.float64)
    for r in range(h):
        for c in range(w):
            if levels[r, c] <= 0:
                continue
            dep = 1
            for dr, dc in _NEIGH8:
                if _inside(levels, r + dr, c + dc) and levels[r + dr, c + dc] == levels[r, c]:
                    dep += 1
            mat[levels[r, c] - 1, dep - 1] += 1
    return mat


def rz_features_oracle(mat: np.ndarray, n_pixels: int, kind: str) -> dict:
    """Run/zone/dependence statistics from a count matrix, by loops."""
    ng, smax = mat.shape
    total = mat.sum()
    stats = {}
    stats["small"] = sum(mat[i, s] / (s + 1) ** 2 for i in range(ng)
                         for s in range(smax)) / total
    stats["large"] = sum(mat[i, s] * (s + 1) ** 2 for i in range(ng)
                         for s in range(smax)) / total
    stats["gln"] = sum(mat[i, :].sum() ** 2 for i in range(ng)) / total
    stats["glnn"] = stats["gln"] / total
    stats["szn"] = sum(mat[:, s].sum() ** 2 for s in range(smax)) / total
    stats["sznn"] = stats["szn"] / total
    stats["percentage"] = total / n_pixels
    mu_i = sum((i + 1) * mat[i, s] / total for i in range(ng) for s in range(smax))
    mu_s = sum((s + 1) * mat[i, s] / total for i in range(ng) for s in range(smax))
    stats["gl_var"] = sum(((i + 1) - mu_i) ** 2 * mat[i, s] / total
                          for i in range(ng) for s in range(smax))
    stats["sz_var"] = sum(((s + 1) - mu_s) ** 2 * mat[i, s] / total
                          for i in range(ng) for s in range(smax))
    stats["entropy"] = -sum(
        (mat[i, s] / total) * math.log2(mat[i, s] / total)
        for i in range(ng) for s in range(smax) if mat[i, s] > 0)
    stats["low"] = sum(mat[i, s] / (i + 1) ** 2 for i in range(ng)
                       for s in range(smax)) / total
    stats["high"] = sum(mat[i, s] * (i + 1) ** 2 for i in range(ng)
                        for s in range(smax)) / total
    stats["small_low"] = sum(mat[i, s] / ((i + 1) ** 2 * (s + 1) ** 2)
                             for i in range(ng) for s in range(smax)) / total
    stats["small_high"] = sum(mat[i, s] * (i + 1) ** 2 / (s + 1) ** 2
                              for i in range(ng) for s in range(smax)) / total
    stats["large_low"] = sum(mat[i, s] * (s + 1) ** 2 / (i + 1) ** 2
                             for i in range(ng) for s in range(smax)) / total
    stats["large_high"] = sum(mat[i, s] * (i + 1) ** 2 * (s + 1) ** 2
                              for i in range(ng) for s in range(smax)) / total
    assert kind in ("rl", "sz", "dep")
    return stats


def ngtdm_oracle(levels: np.ndarray):
    """(n, p, s, n_valid) by looping over pixels and their neighbourhoods."""
    ng = int(levels.max())
    h, w = levels.shape
    n = np.zeros(ng)
    s = np.zeros(ng)
    n_valid = 0
    for r in range(h):
        for c in range(w):
            if levels[r, c] <= 0:
                continue
            neigh = [levels[r + dr, c + dc] for dr, dc in _NEIGH8
                     if _inside(levels, r + dr, c + dc)]
            if not neigh:
                continue
            n_valid += 1
            g = levels[r, c]
            n[g - 1] += 1
            s[g - 1] += abs(g - sum(neigh) / len(neigh))
    p = n / n_valid if n_valid else n.copy()
    return n, p, s, n_valid


def ngtdm_features_oracle(levels: np.ndarray) -> dict:
    n, p, s, n_valid = ngtdm_oracle(levels)
    ng = len(p)
    present = [i for i in range(ng) if p[i] > 0]
    ngp = len(present)
    ps = sum(p[i] * s[i] for i in range(ng))
    coarseness = 1.0 / max(ps, 1e-12)
    if ngp > 1 and n_valid > 0:
        contrast = (sum(p[i] * p[j] * (i - j) ** 2 for i in present for j in present)
                    / (ngp * (ngp - 1))) * (s.sum() / n_valid)
        busy_den = sum(abs((i + 1) * p[i] - (j + 1) * p[j])
                       for i in present for j in present)
        busyness = ps / busy_den if busy_den > 0 else 0.0
        complexity = sum(abs(i - j) * (p[i] * s[i] + p[j] * s[j]) / (p[i] + p[j])
                         for i in present for j in present) / n_valid
        strength = (sum((p[i] + p[j]) * (i - j) ** 2 for i in present for j in present)
                    / s.sum()) if s.sum() > 0 else 0.0
    else:
        contrast = busyness = complexity = strength = 0.0
    return {"Coarseness": coarseness, "Contrast": contrast, "Busyness": busyness,
            "Complexity": complexity, "Strength": strength}


def first_order_oracle(values: np.ndarray, hist_probs: np.ndarray) -> dict:
    """The 18 first-order statistics by straightforward summation."""
    x = sorted(float(v) for v in values)
    n = len(x)

    def percentile(q):
        # numpy 'linear' convention
        pos = (n - 1) * q / 100.0
        lo = math.floor(pos)
        hi = math.ceil(pos)
        if lo == hi:
            return x[int(pos)]
        return x[lo] + (x[hi] - x[lo]) * (pos - lo)

    mean = sum(x) / n
    var = sum((v - mean) ** 2 for v in x) / n
    sd = math.sqrt(var)
    p10, p25, p50, p75, p90 = (percentile(q) for q in (10, 25, 50, 75, 90))
    robust = [v for v in x if p10 <= v <= p90]
    rmean = sum(robust) / len(robust) if robust else 0.0
    energy = sum(v * v for v in x)
    ent = -sum(p * math.log2(p) for p in hist_probs if p > 0)
    return {
        "Energy": energy,
        "Entropy": ent,
        "Minimum": x[0],
        "Percentile10": p10,
        "Percentile90": p90,
        "Maximum": x[-1],
        "Mean": mean,
        "Median": p50,
        "InterquartileRange": p75 - p25,
        "Range": x[-1] - x[0],
        "MeanAbsoluteDeviation": sum(abs(v - mean) for v in x) / n,
        "RobustMeanAbsoluteDeviation":
            (sum(abs(v - rmean) for v in robust) / len(robust)) if robust else 0.0,
        "RootMeanSquared": math.sqrt(energy / n),
        "Skewness": (sum((v - mean) ** 3 for v in x) / n) / sd ** 3 if sd > 0 else 0.0,
        "Kurtosis": (sum((v - mean) ** 4 for v in x) / n) / var ** 2 if var > 0 else 0.0,
        "Variance": var,
        "Uniformity": sum(p * p for p in hist_probs),
        "TotalEnergy": energy,
    }


def max_diameter_oracle(bits: np.ndarray) -> float:
    coords = np.argwhere(bits)
    best = 0.0
    for i in range(len(coords)):
        for j in range(i + 1, len(coords)):
            d = math.dist(coords[i], coords[j])
            best = max(best, d)
    return best
