"""Segmentation quality and feature-distribution distances."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist, pdist

from wisernet.autodiff.functional import global_avg_pool
from wisernet.autodiff.tensor import Tensor, no_grad
from wisernet.exceptions import NumericalError, UsageError

logger = logging.getLogger(__name__)

CLASS_NAMES = ("od", "oc")
_CROSS = ndimage.generate_binary_structure(2, 1)


# -- overlap and boundary metrics -------------------------------------------


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(probs) >= threshold


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice similarity in percent; two empty masks score 100."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise UsageError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def hd95_flagged(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, bool]:
    """HD95 in pixels plus a flag set when the diagonal sentinel was used.

    Both directed nearest-boundary distance lists are reduced to their 95th
    percentile (linear interpolation) and the larger one is returned. If
    exactly one mask is empty the image diagonal is returned, flagged.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise UsageError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    bp, bg = boundary(pred), boundary(gt)
    has_p, has_g = bool(bp.any()), bool(bg.any())
    if not has_p and not has_g:
        return 0.0, False
    if not has_p or not has_g:
        return float(math.hypot(*pred.shape)), True
    to_gt = ndimage.distance_transform_edt(~bg)[bp]
    to_pred = ndimage.distance_transform_edt(~bp)[bg]
    return float(max(np.percentile(to_gt, 95), np.percentile(to_pred, 95))), False


def hd95(pred: np.ndarray, gt: np.ndarray) -> float:
    return hd95_flagged(pred, gt)[0]


def segmentation_rows(probs: np.ndarray, masks: np.ndarray, ids: Sequence[str], domain: str, threshold: float = 0.5):
    """Per-image DSC/HD95 rows for a ``(N, 2, H, W)`` prediction batch."""
    pred = binarize(probs, threshold)
    gt = np.asarray(masks) > 0.5
    rows = []
    for i, image_id in enumerate(ids):
        row = {"image_id": image_id, "domain": domain}
        flags = []
        for c, name in enumerate(CLASS_NAMES):
            row[f"dsc_{name}"] = dsc(pred[i, c], gt[i, c])
            value, flagged = hd95_flagged(pred[i, c], gt[i, c])
            row[f"hd95_{name}"] = value
            if flagged:
                flags.append(f"hd95_{name}_empty")
        row["flags"] = ";".join(flags)
        rows.append(row)
    return rows


# -- distribution distances ---------------------------------------------------


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    space: str = "bottleneck"
    domain_label: str = ""

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if not np.all(np.isfinite(self.vectors)):
            raise UsageError("embedding contains non-finite values")

    def __len__(self) -> int:
        return self.vectors.shape[0]


EmbeddingLike = Union[EmbeddingSet, np.ndarray]


def _vectors(x: EmbeddingLike) -> np.ndarray:
    arr = x.vectors if isinstance(x, EmbeddingSet) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def median_bandwidth(pooled: np.ndarray, eps: float = 1e-6) -> Tuple[float, bool]:
    """Median pairwise Euclidean distance; ``(eps, True)`` if all points coincide."""
    med = float(np.median(pdist(pooled)))
    if med <= 0.0:
        return eps, True
    return med, False


def mmd(x: EmbeddingLike, y: EmbeddingLike, bandwidth: Optional[float] = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel, clamped at zero.

    The kernel is ``exp(-|a - b|^2 / (2 * bandwidth^2))``; by default the
    bandwidth is the median pairwise distance of the pooled sample.
    """
    xv, yv = _vectors(x), _vectors(y)
    m, n = len(xv), len(yv)
    if m < 2 or n < 2:
        raise UsageError("mmd needs at least two vectors per set")
    if bandwidth is None:
        bandwidth, degenerate = median_bandwidth(np.vstack([xv, yv]))
        if degenerate:
            logger.warning("mmd: pooled set is degenerate, bandwidth fallback %g", bandwidth)
    scale = -0.5 / bandwidth**2
    kxx = np.exp(scale * cdist(xv, xv, "sqeuclidean"))
    kyy = np.exp(scale * cdist(yv, yv, "sqeuclidean"))
    kxy = np.exp(scale * cdist(xv, yv, "sqeuclidean"))
    est = (
        (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
        - 2.0 * kxy.mean()
    )
    return max(0.0, float(est))


def jsd(x: EmbeddingLike, y: EmbeddingLike, bins: int = 32, eps: float = 1e-12) -> float:
    """Mean over dimensions of the histogram Jensen-Shannon divergence (nats)."""
    if bins < 2:
        raise UsageError(f"jsd needs at least 2 bins, got {bins}")
    xv, yv = _vectors(x), _vectors(y)
    if xv.shape[1] != yv.shape[1]:
        raise UsageError("embedding dimensions differ")
    total = 0.0
    for d in range(xv.shape[1]):
        lo = min(xv[:, d].min(), yv[:, d].min())
        hi = max(xv[:, d].max(), yv[:, d].max())
        if hi <= lo:
            continue
        p = np.histogram(xv[:, d], bins=bins, range=(lo, hi))[0] + eps
        q = np.histogram(yv[:, d], bins=bins, range=(lo, hi))[0] + eps
        p = p / p.sum()
        q = q / q.sum()
        mid = 0.5 * (p + q)
        total += 0.5 * float(np.sum(p * np.log(p / mid))) + 0.5 * float(np.sum(q * np.log(q / mid)))
    return total / xv.shape[1]


def _sym_sqrt(mat: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) * 0.5)
    if vals.min() < -tol * max(1.0, abs(vals.max())):
        raise NumericalError(
            "matrix is not positive semi-definite",
            {"min_eigenvalue": float(vals.min()), "max_eigenvalue": float(vals.max())},
        )
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet(x: EmbeddingLike, y: EmbeddingLike, eps: float = 1e-6) -> float:
    """Squared Frechet distance between Gaussian fits of two samples.

    ``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`` with both covariances
    shifted by ``eps * I``; the trace of the cross term is evaluated as
    ``Tr((A S2 A)^(1/2))`` with ``A = S1^(1/2)`` so every root is symmetric.
    """
    xv, yv = _vectors(x), _vectors(y)
    if xv.shape[1] != yv.shape[1]:
        raise UsageError("embedding dimensions differ")
    dim = xv.shape[1]
    mu1, mu2 = xv.mean(axis=0), yv.mean(axis=0)
    s1 = np.atleast_2d(np.cov(xv, rowvar=False)) + eps * np.eye(dim)
    s2 = np.atleast_2d(np.cov(yv, rowvar=False)) + eps * np.eye(dim)
    root1 = _sym_sqrt(s1)
    cross = _sym_sqrt(root1 @ s2 @ root1)
    diff = mu1 - mu2
    return max(0.0, float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross)))


def distance_row(x: EmbeddingLike, y: EmbeddingLike, bins: int = 32) -> dict:
    return {"mmd": mmd(x, y), "jsd": jsd(x, y, bins=bins), "frechet": frechet(x, y)}


# -- embeddings and retrieval -------------------------------------------------


SPACES = ("content", "style", "bottleneck")


def embed(model, images: np.ndarray, space: str = "bottleneck", level: int = 1, batch_size: int = 16,
          domain_label: str = "") -> EmbeddingSet:
    """Pool content, style or bottleneck features of ``images`` into vectors."""
    from wisernet.segnet import model_forward

    if space not in SPACES:
        raise UsageError(f"unknown embedding space {space!r}; expected one of {SPACES}")
    cfg = model.config
    if space != "bottleneck":
        if not cfg.wiser_enabled:
            raise UsageError(f"{space} embeddings need a model with WISER enabled")
        if not 1 <= level <= cfg.depth:
            raise UsageError(f"level must be in 1..{cfg.depth}, got {level}")
    images = np.asarray(images)
    rows = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out = model_forward(Tensor(images[start : start + batch_size]), model, retain_features=True)
            if space == "bottleneck":
                feat = out.bottleneck
            elif space == "content":
                feat = out.wiser_outputs[level - 1].f_c
            else:
                feat = out.wiser_outputs[level - 1].f_s
            rows.append(global_avg_pool(feat).data.astype(np.float64))
    return EmbeddingSet(np.concatenate(rows, axis=0), space=space, domain_label=domain_label)


def nearest_neighbors(query: np.ndarray, corpus: EmbeddingLike, k: int) -> List[int]:
    """Indices of the ``k`` closest corpus rows; ties go to the lower index."""
    vecs = _vectors(corpus)
    if not 1 <= k <= len(vecs):
        raise UsageError(f"k must be in 1..{len(vecs)}, got {k}")
    dist = np.sqrt(((vecs - np.asarray(query, dtype=np.float64)[None, :]) ** 2).sum(axis=1))
    return [int(i) for i in np.argsort(dist, kind="stable")[:k]]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / denom) if denom > 0 else 0.0


def brightness_invariance(model, images: np.ndarray, offset: float = 0.1, level: int = 1) -> np.ndarray:
    """Paired cosine similarities between embeddings of ``x`` and ``x + offset``.

    Returns an ``(N, 2)`` array: column 0 for the content space, column 1 for
    the style space. The offset is added without clipping, so it is a pure
    global shift that instance normalization in the content path can absorb.
    """
    images = np.asarray(images, dtype=np.float32)
    shifted = images + np.float32(offset)
    out = np.empty((len(images), 2))
    for col, space in enumerate(("content", "style")):
        a = embed(model, images, space, level).vectors
        b = embed(model, shifted, space, level).vectors
        out[:, col] = [cosine(u, v) for u, v in zip(a, b)]
    return out
