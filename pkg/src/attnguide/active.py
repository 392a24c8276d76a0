"""Candidate selection strategies for the annotation loop.

The attention strategy fits a 2-component diagonal-covariance Gaussian
mixture to flattened Grad-CAM maps of the unlabeled pool and picks the
highest log-likelihood (most typical) images. Baselines: seeded random,
softmax entropy, and k-center-greedy over penultimate embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .model import AttentionMap, grad_cam_batch

STRATEGIES = ("attention", "random", "entropy", "diversity")

GMM_COMPONENTS = 2
GMM_ITERATIONS = 100
VARIANCE_FLOOR = 1e-6
FEATURE_SIDE = 8


@dataclass
class GmmModel:
    weights: np.ndarray    # (K,) simplex
    means: np.ndarray      # (K, D)
    variances: np.ndarray  # (K, D), diagonal covariance, floored
    log_likelihoods: list  # per-EM-iteration totals

    @property
    def num_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]


@dataclass
class SelectionScore:
    image_id: str
    score: float


def _area_weights(src, dst):
    """(dst, src) matrix averaging src cells into dst cells by exact overlap."""
    w = np.zeros((dst, src))
    scale = src / dst
    for o in range(dst):
        lo, hi = o * scale, (o + 1) * scale
        for i in range(int(np.floor(lo)), int(np.ceil(hi))):
            w[o, i] = min(hi, i + 1) - max(lo, i)
    return w / scale


def flatten_attention(amap, d_side=FEATURE_SIDE):
    """Area-average an attention map to d_side x d_side, row-major flattened."""
    values = amap.values if isinstance(amap, AttentionMap) else np.asarray(amap)
    h, w = values.shape
    wy = _area_weights(h, d_side)
    wx = _area_weights(w, d_side)
    return (wy @ values.astype(np.float64) @ wx.T).reshape(-1)


def _log_gauss_diag(x, means, variances):
    """(N, K) log densities of diagonal Gaussians."""
    d = x.shape[1]
    diff = x[:, None, :] - means[None, :, :]
    quad = (diff * diff / variances[None, :, :]).sum(axis=2)
    logdet = np.log(variances).sum(axis=1)
    return -0.5 * (d * np.log(2 * np.pi) + logdet[None, :] + quad)


def _kmeanspp_means(x, k, rng):
    means = [x[rng.integers(len(x))]]
    for _ in range(k - 1):
        d2 = np.min([((x - m) ** 2).sum(axis=1) for m in means], axis=0)
        total = d2.sum()
        if total <= 0:
            means.append(x[rng.integers(len(x))])
            continue
        means.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(means)


def fit_gmm(features, k=GMM_COMPONENTS, iterations=GMM_ITERATIONS, seed=0,
            tol=1e-8):
    """EM for a diagonal-covariance GMM; deterministic for a fixed seed."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        x = x.reshape(len(features), -1)
    n, d = x.shape
    if len(np.unique(x, axis=0)) < k:
        raise ContractError(f"need at least {k} distinct points, got fewer")
    rng = np.random.default_rng(seed)
    means = _kmeanspp_means(x, k, rng)
    weights = np.full(k, 1.0 / k)
    variances = np.maximum(x.var(axis=0), VARIANCE_FLOOR)[None, :].repeat(k, 0)

    lls = []
    for _ in range(iterations):
        # E-step via log-sum-exp
        logp = _log_gauss_diag(x, means, variances) + np.log(weights)[None, :]
        m = logp.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logp - m).sum(axis=1))
        resp = np.exp(logp - lse[:, None])
        ll = float(lse.sum())
        lls.append(ll)
        if len(lls) > 1 and ll - lls[-2] < tol:
            break
        # M-step, closed-form diagonal updates
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        sq = resp.T @ (x * x) / nk[:, None]
        variances = np.maximum(sq - means * means, VARIANCE_FLOOR)
    return GmmModel(weights=weights, means=means, variances=variances,
                    log_likelihoods=lls)


def log_density(gmm, features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != gmm.dim:
        raise ContractError(f"feature dim {x.shape[1]} != gmm dim {gmm.dim}")
    logp = _log_gauss_diag(x, gmm.means, gmm.variances) \
        + np.log(gmm.weights)[None, :]
    m = logp.max(axis=1, keepdims=True)
    return m[:, 0] + np.log(np.exp(logp - m).sum(axis=1))


def score_samples(gmm, features, ids=None):
    """Log-likelihood SelectionScores under the fitted mixture."""
    scores = log_density(gmm, features)
    if ids is None:
        ids = [str(i) for i in range(len(scores))]
    return [SelectionScore(image_id=i, score=float(s))
            for i, s in zip(ids, scores)]


def entropy_scores(probs):
    p = np.clip(probs, 1e-12, 1.0)
    return -(p * np.log(p)).sum(axis=1)


def k_center_greedy(embeddings, batch_size, first=None):
    """Max-min facility selection; first center defaults to the point
    nearest the embedding mean."""
    x = np.asarray(embeddings, dtype=np.float64)
    n = len(x)
    if first is None:
        first = int(np.argmin(((x - x.mean(axis=0)) ** 2).sum(axis=1)))
    chosen = [first]
    mind = ((x - x[first]) ** 2).sum(axis=1)
    while len(chosen) < batch_size:
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, ((x - x[nxt]) ** 2).sum(axis=1))
    return chosen


def _stable_desc_order(scores, ids):
    """Indices sorted by score descending, ties broken by image-id order."""
    return sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))


DEGENERATE_SCORE = -1e30


def select_candidates(pool_ids, images, strategy, batch_size, model,
                      seed=0, cam_class=1, eval_batch=128):
    """Pick ``batch_size`` image ids from the pool under a named strategy.

    ``images`` is the (N, C, H, W) array aligned with ``pool_ids``;
    ``cam_class`` is the class of interest whose Grad-CAM maps feed the
    attention strategy. All-zero maps are excluded from the GMM fit and
    ranked last (sentinel score): they show nothing to annotate.
    Returns the ordered id list.
    """
    n = len(pool_ids)
    if n == 0:
        raise ContractError("select_candidates on an empty pool")
    if batch_size > n:
        raise ContractError(f"batch_size {batch_size} exceeds pool size {n}")
    if strategy not in STRATEGIES:
        raise ContractError(
            f"unknown strategy {strategy!r}; valid: {', '.join(STRATEGIES)}")

    pool_ids = list(pool_ids)
    if strategy == "random":
        rng = np.random.default_rng(seed)
        picked = rng.choice(n, size=batch_size, replace=False)
        return [pool_ids[i] for i in picked]

    if strategy == "attention":
        feats = []
        for s in range(0, n, eval_batch):
            chunk = images[s:s + eval_batch]
            cams = grad_cam_batch(model, chunk,
                                  np.full(len(chunk), cam_class))
            feats.extend(flatten_attention(c) for c in cams)
        feats = np.array(feats)
        alive = feats.max(axis=1) > 0
        scores = np.full(n, DEGENERATE_SCORE)
        if alive.sum() >= GMM_COMPONENTS and \
                len(np.unique(feats[alive], axis=0)) >= GMM_COMPONENTS:
            gmm = fit_gmm(feats[alive], seed=seed)
            scores[alive] = log_density(gmm, feats[alive])
        order = _stable_desc_order(scores, pool_ids)
        return [pool_ids[i] for i in order[:batch_size]]

    if strategy == "entropy":
        from .model import predict
        ent = []
        for s in range(0, n, eval_batch):
            ent.extend(entropy_scores(predict(model, images[s:s + eval_batch])))
        order = _stable_desc_order(np.array(ent), pool_ids)
        return [pool_ids[i] for i in order[:batch_size]]

    # diversity: k-center-greedy on penultimate embeddings
    embs = []
    for s in range(0, n, eval_batch):
        _, _, pooled = model.forward(images[s:s + eval_batch])
        embs.append(pooled.data)
    chosen = k_center_greedy(np.concatenate(embs), batch_size)
    return [pool_ids[i] for i in chosen]
