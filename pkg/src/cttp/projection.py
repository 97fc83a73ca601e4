"""2-d projections of backbone features: PCA and exact t-SNE."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M

MAX_TSNE_POINTS = 2000


class BandwidthError(RuntimeError):
    def __init__(self, index, entropy, target):
        super().__init__(f"bandwidth search failed at point {index}: entropy {entropy:.8f} vs target {target:.8f}")
        self.index = index


def pca_2d(x) -> np.ndarray:
    """Scores on the top two principal components of mean-centred ``x``."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    # fix the sign so the result does not depend on the LAPACK build
    signs = np.sign(comps[np.arange(len(comps)), np.argmax(np.abs(comps), axis=1)])
    comps = comps * signs[:, None]
    out = xc @ comps.T
    if out.shape[1] < 2:
        out = np.hstack([out, np.zeros((len(out), 2 - out.shape[1]))])
    return out


def squared_distances(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_entropy(d_row, beta):
    # entropy (nats) of p_j ~ exp(-beta * d_j), computed stably
    shifted = d_row - d_row.min()
    p = np.exp(-beta * shifted)
    s = p.sum()
    h = math.log(s) + beta * float((shifted * p).sum()) / s
    return h, p / s


@dataclass
class Affinities:
    conditional: np.ndarray
    joint: np.ndarray
    betas: np.ndarray
    entropies: np.ndarray


def conditional_affinities(sqdist, perplexity=30.0, tol=1e-5, max_iter=200) -> Affinities:
    """Per-point Gaussian bandwidths whose conditional entropy equals ``ln(perplexity)``."""
    d = np.asarray(sqdist, dtype=np.float64)
    n = len(d)
    if n - 1 <= perplexity:
        raise ValueError(f"perplexity {perplexity} needs more than {int(perplexity) + 1} points")
    target = math.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    ents = np.zeros(n)
    for i in range(n):
        row = np.delete(d[i], i)
        lo, hi = 0.0, math.inf
        beta = 1.0 / max(np.median(row), 1e-12)
        for _ in range(max_iter):
            h, p = _row_entropy(row, beta)
            if abs(h - target) <= tol:
                break
            if h > target:  # too flat: sharpen
                lo = beta
                beta = beta * 2.0 if hi == math.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        if abs(h - target) > tol:
            raise BandwidthError(i, h, target)
        P[i, np.arange(n) != i] = p
        betas[i] = beta
        ents[i] = h
    joint = (P + P.T) / (2.0 * n)
    return Affinities(P, joint, betas, ents)


def tsne_2d(x, perplexity=30.0, n_iter=1000, exaggeration=12.0, exaggeration_iters=250,
            learning_rate=200.0, seed=0) -> np.ndarray:
    """Exact t-SNE with early exaggeration, momentum switch and per-coordinate gains."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n > MAX_TSNE_POINTS:
        raise ValueError(f"exact t-SNE limited to {MAX_TSNE_POINTS} points, got {n}; subsample first")
    aff = conditional_affinities(squared_distances(x), perplexity)
    P = np.maximum(aff.joint, 1e-12)

    init = pca_2d(x)
    init = init / max(init[:, 0].std(), 1e-12) * 1e-4
    init += ad.rng_stream(seed, "tsne-init").normal(0.0, 1e-8, size=init.shape)
    y = init
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(n_iter):
        exag = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        num = 1.0 / (1.0 + squared_distances(y))
        np.fill_diagonal(num, 0.0)
        Q = np.maximum(num / num.sum(), 1e-12)
        W = (exag * P - Q) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * y - W @ y)
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - learning_rate * gains * grad
        y = y + update
    return y


def project_features(feats, method: str, seed: int = 0) -> np.ndarray:
    if method == "pca":
        return pca_2d(feats)
    if method == "tsne":
        return tsne_2d(feats, seed=seed)
    raise ValueError(f"unknown projection method {method!r}")


def project_2d(towers: dict, splits: dict, method: str = "pca", seed: int = 0,
               unseen_splits=("unseen-tools-test",)) -> list[tuple]:
    """Co-embed both sensors' backbone features for every given split.

    Returns rows ``(x, y, tool_id, sensor, unseen)``.
    """
    feats, meta = [], []
    for name, split in splits.items():
        for sensor in ("gel", "membrane"):
            emb = M.encode(split.frames(sensor), sensor, towers[sensor])
            feats.append(emb.backbone)
            flag = int(name in unseen_splits)
            meta += [(int(t), sensor, flag) for t in split.tool_ids]
    x = np.concatenate(feats)
    if method == "tsne" and len(x) > MAX_TSNE_POINTS:
        raise ValueError(f"{len(x)} points exceed the exact t-SNE limit of {MAX_TSNE_POINTS}; subsample the splits")
    xy = project_features(x, method, seed)
    return [(float(a), float(b), *m) for (a, b), m in zip(xy, meta)]


def write_projection_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "tool_id", "sensor", "unseen"])
        for x, y, tool, sensor, unseen in rows:
            w.writerow([repr(x), repr(y), tool, sensor, unseen])
