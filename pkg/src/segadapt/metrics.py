"""Segmentation overlap metrics and a proxy for domain discrepancy."""

import numpy as np
from scipy.spatial import cKDTree
from sklearn.linear_model import LogisticRegression
from sklearn.preprocessing import StandardScaler

from .errors import ContractError, ShapeError
from .seeding import CODE_SPLIT, derive_rng


def dice(pred, truth, label):
    """Dice overlap of one label between two integer maps. Two empty masks
    agree perfectly, so that case scores 1.0."""
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {t.shape}")
    a = p == label
    b = t == label
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def hausdorff(pred, truth, label):
    """Symmetric Hausdorff distance (Euclidean, pixel centres) between the
    masks of one label. Both empty: 0. Exactly one empty: the image diagonal,
    a finite worst-case sentinel."""
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch {p.shape} vs {t.shape}")
    if p.ndim != 2:
        raise ShapeError(f"expected 2-d label maps, got {p.ndim}-d")
    pa = np.argwhere(p == label)
    pb = np.argwhere(t == label)
    if pa.size == 0 and pb.size == 0:
        return 0.0
    if pa.size == 0 or pb.size == 0:
        return float(np.sqrt(p.shape[0] ** 2 + p.shape[1] ** 2))
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


def proxy_a_distance(feats_a, feats_b, seed=0):
    """Estimate feature-space domain discrepancy by training a linear probe.

    Each feature set is shuffled and split in half; a standardised logistic
    regression separates domain A from B on the training halves and the
    held-out error eps gives A-hat = max(0, 2 (1 - 2 eps)). Near 0 means the
    domains are indistinguishable to a linear probe; 2 means fully separable.
    """
    fa = np.asarray(feats_a, dtype=np.float64)
    fb = np.asarray(feats_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ShapeError(f"feature matrices must be (n, d) with matching d, "
                         f"got {fa.shape} and {fb.shape}")
    if len(fa) < 20 or len(fb) < 20:
        raise ContractError(f"need at least 20 samples per domain, got "
                            f"{len(fa)} and {len(fb)}")
    rng = derive_rng(seed, CODE_SPLIT)
    fa = fa[rng.permutation(len(fa))]
    fb = fb[rng.permutation(len(fb))]
    ha, hb = len(fa) // 2, len(fb) // 2
    x_tr = np.concatenate([fa[:ha], fb[:hb]])
    y_tr = np.concatenate([np.zeros(ha), np.ones(hb)])
    x_te = np.concatenate([fa[ha:], fb[hb:]])
    y_te = np.concatenate([np.zeros(len(fa) - ha), np.ones(len(fb) - hb)])
    scaler = StandardScaler().fit(x_tr)
    probe = LogisticRegression(max_iter=1000).fit(scaler.transform(x_tr), y_tr)
    err = 1.0 - probe.score(scaler.transform(x_te), y_te)
    return float(max(0.0, 2.0 * (1.0 - 2.0 * err)))
