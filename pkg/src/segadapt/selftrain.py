"""Pseudo-label self-training weighted by agreement with past predictions.

Pseudo-labels come from class-wise confidence thresholds: for class n, the
threshold is the k-th largest confidence among the pixels currently argmaxed
to n, with k covering the keep-ratio percentage of those pixels. A pixel is
labelled n when n maximises p(n)/lambda_n and p(n) clears lambda_n; pixels
clearing no threshold stay unlabelled and drop out of the loss.

Each image keeps a FIFO queue of its past full-resolution predictions, one
entry per epoch. The cross-entropy against the pseudo-label is damped per
pixel by psi = 1 - sigmoid(mean L1 distance to the queued predictions), so
pixels whose prediction churns between epochs contribute little. With no
history yet, psi is 0 and the term is inert.
"""

import math
from collections import deque

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError


def class_thresholds(p, keep_ratio):
    """Per-class confidence thresholds over a batch of probability maps.

    ``p`` is (B, N, H, W); ``keep_ratio`` is a percentage in [0, 100].
    For each class the pool is the max-confidence values of pixels argmaxed
    to it; the threshold is the k-th largest with k = max(1,
    floor(keep_ratio/100 * pool size)). Classes with an empty pool get +inf,
    which marks them unassignable this batch. Returns float64 (N,).
    """
    if p.ndim != 4:
        raise ShapeError(f"expected (B,N,H,W) probabilities, got {p.shape}")
    if not 0.0 <= keep_ratio <= 100.0:
        raise ContractError(f"keep_ratio must lie in [0, 100], got {keep_ratio}")
    n_classes = p.shape[1]
    conf = p.max(axis=1).ravel()
    arg = p.argmax(axis=1).ravel()
    lam = np.full(n_classes, np.inf)
    for n in range(n_classes):
        pool = conf[arg == n]
        if pool.size == 0:
            continue
        k = max(1, int(math.floor(keep_ratio / 100.0 * pool.size)))
        lam[n] = np.partition(pool, pool.size - k)[pool.size - k]
    return lam


def pseudo_labels(p, thresholds):
    """One-hot pseudo-labels under threshold-relative selection.

    Pixel gets class n* = argmax_n p(n)/lambda_n (first index on ties,
    infinite thresholds give ratio 0) provided p(n*) >= lambda_{n*};
    otherwise the pixel stays all-zero. Returns uint8 (B, N, H, W).
    """
    lam = np.asarray(thresholds, dtype=np.float64).reshape(-1)
    if p.ndim != 4 or p.shape[1] != lam.size:
        raise ShapeError(f"probabilities {p.shape} do not match "
                         f"{lam.size} thresholds")
    if not ((lam > 0) | np.isposinf(lam)).all():
        raise ContractError("thresholds must be positive or +inf")
    ratio = np.where(np.isinf(lam)[None, :, None, None], 0.0,
                     p / np.where(np.isinf(lam), 1.0, lam)[None, :, None, None])
    star = ratio.argmax(axis=1)
    p_star = np.take_along_axis(p, star[:, None], axis=1)[:, 0]
    lam_star = lam[star]
    keep = p_star >= lam_star
    out = np.zeros(p.shape, dtype=np.uint8)
    np.put_along_axis(out, star[:, None], keep[:, None].astype(np.uint8), axis=1)
    return out


class PredictionHistory:
    """Bounded per-image queues of past softmax maps.

    One push per image per epoch; the queue holds the ``capacity`` most
    recent epochs and evicts the oldest. Maps are stored as float32 (N, H, W)
    and must be channel-normalised.
    """

    def __init__(self, capacity=5):
        if capacity < 1:
            raise ContractError(f"history capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self._queues = {}
        self._last_epoch = {}

    def push(self, image_id, p_map, epoch):
        m = np.asarray(p_map, dtype=np.float32)
        if m.ndim != 3:
            raise ShapeError(f"history entries are (N,H,W) maps, got {m.shape}")
        sums = m.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-4:
            raise ContractError("history entries must be channel-normalised")
        prev = self._last_epoch.get(image_id)
        if prev is not None and epoch <= prev:
            raise ContractError(f"image {image_id!r} already has an entry "
                                f"for epoch {prev}; pushes must advance")
        q = self._queues.setdefault(image_id, deque(maxlen=self.capacity))
        q.append(m.copy())
        self._last_epoch[image_id] = epoch

    def get(self, image_id):
        """Past maps for an image, oldest first. Empty list when unseen."""
        return list(self._queues.get(image_id, ()))

    def depth(self, image_id):
        return len(self._queues.get(image_id, ()))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def consistency_weight(p_now, history):
    """Reference scalar form: psi for one pixel's class-probability vector
    against its queued vectors. psi = 1 - sigmoid(mean L1 distance); empty
    history yields 0 so the pixel is ignored."""
    now = np.asarray(p_now, dtype=np.float64).reshape(-1)
    if len(history) == 0:
        return 0.0
    dists = [np.abs(now - np.asarray(h, dtype=np.float64).reshape(-1)).sum()
             for h in history]
    return float(1.0 - _sigmoid(np.mean(dists)))


def consistency_weight_map(p_now, history):
    """Vectorised psi over a full (N, H, W) prediction against queued maps
    of the same shape. Returns float32 (H, W); zeros when history is empty."""
    now = np.asarray(p_now, dtype=np.float64)
    if now.ndim != 3:
        raise ShapeError(f"expected an (N,H,W) map, got {now.shape}")
    if len(history) == 0:
        return np.zeros(now.shape[1:], dtype=np.float32)
    acc = np.zeros(now.shape[1:], dtype=np.float64)
    for h in history:
        past = np.asarray(h, dtype=np.float64)
        if past.shape != now.shape:
            raise ShapeError(f"history map {past.shape} does not match "
                             f"current {now.shape}")
        acc += np.abs(now - past).sum(axis=0)
    return (1.0 - _sigmoid(acc / len(history))).astype(np.float32)


def mcst_loss(p, labels, psi, clamp=1e-12, stats=None):
    """Memory-weighted pseudo-label cross entropy.

    -(1/BHW) sum_pixels psi * sum_n y_n log p_n, with ``labels`` a one-hot
    uint8 (B, N, H, W) array and ``psi`` a (B, H, W) weight map; both are
    constants. Probabilities below ``clamp`` are clamped inside the log and
    receive zero gradient there; pass a dict as ``stats`` to learn how many
    selected pixels were clamped.
    """
    b, n, h, w = p.dims
    lab = np.asarray(labels)
    if lab.shape != (b, n, h, w):
        raise ShapeError(f"labels {lab.shape} do not match predictions "
                         f"{p.dims}")
    if lab.dtype != np.uint8 or (lab > 1).any():
        raise ContractError("labels must be one-hot uint8")
    if (lab.sum(axis=1) > 1).any():
        raise ContractError("labels must have at most one class per pixel")
    psi_arr = np.asarray(psi, dtype=np.float64)
    if psi_arr.shape != (b, h, w):
        raise ShapeError(f"psi {psi_arr.shape} does not match batch "
                         f"({b}, {h}, {w})")
    if (psi_arr < 0).any() or (psi_arr > 1).any():
        raise ContractError("psi must lie in [0, 1]")

    weight = lab.astype(np.float64) * psi_arr[:, None]
    if stats is not None:
        stats["clamped"] = int(((lab == 1) & (p.data < clamp)).sum())
        stats["selected"] = int(lab.sum())
    wt = T.Tensor(weight.astype(p.data.dtype))
    return T.scale(T.sum_all(T.mul(wt, T.log_t(p, floor=clamp))),
                   -1.0 / (b * h * w))
