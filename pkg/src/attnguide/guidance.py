"""Click-derived fine-tuning objective.

The positive term pulls the attention barycenter toward the mean of the
user's positive clicks; the negative term sums attention mass inside the
clicked superpixel regions. Both are differentiable w.r.t. the attention
map values, and the total training loss is
``w_g * (loss_pos + loss_neg) + w_c * loss_c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DegenerateMapError, TrainingError
from .model import AttentionMap
from .tensor import Tensor


@dataclass
class Annotation:
    """Per-image user directive in attention-grid coordinates."""
    image_id: str
    positive_points: list = field(default_factory=list)  # [(x, y), ...]
    negative_regions: list = field(default_factory=list)  # superpixel ids
    cleared: bool = False
    display_size: tuple = (0, 0)
    timestamp: float = 0.0

    def to_json_dict(self):
        return {"image_id": self.image_id,
                "positive_points": [[float(x), float(y)]
                                    for x, y in self.positive_points],
                "negative_regions": [int(r) for r in self.negative_regions],
                "cleared": bool(self.cleared),
                "display_size": list(self.display_size),
                "timestamp": self.timestamp}

    @classmethod
    def from_json_dict(cls, d):
        return cls(image_id=d["image_id"],
                   positive_points=[tuple(p) for p in d["positive_points"]],
                   negative_regions=list(d["negative_regions"]),
                   cleared=bool(d.get("cleared", False)),
                   display_size=tuple(d.get("display_size", (0, 0))),
                   timestamp=d.get("timestamp", 0.0))


@dataclass
class SuperpixelLabeling:
    labels: np.ndarray  # (height, width) int region ids, 0..region_count-1
    region_count: int

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def region_mask(self, region_ids):
        ids = set(int(r) for r in region_ids)
        unknown = ids - set(range(self.region_count))
        if unknown:
            raise ContractError(f"unknown superpixel region ids {sorted(unknown)}")
        return np.isin(self.labels, list(ids))


@dataclass
class GuidanceConfig:
    w_g: float = 0.75
    w_c: float = 0.25
    superpixel_k: float = 0.05
    superpixel_min_size: int = 2

    def validate(self):
        if self.w_g < 0 or self.w_c < 0 or self.w_g + self.w_c <= 0:
            raise ConfigError(f"invalid loss weights w_g={self.w_g} w_c={self.w_c}")
        return self


def display_to_grid(point, display_size, grid_w, grid_h):
    """Proportional display-pixel -> attention-grid mapping (floor rounding)."""
    dx, dy = display_size
    gx = min(int(point[0] * grid_w / dx), grid_w - 1)
    gy = min(int(point[1] * grid_h / dy), grid_h - 1)
    return (max(gx, 0), max(gy, 0))


# -- superpixels --------------------------------------------------------------

class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n  # largest edge weight absorbed so far

    def find(self, a):
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b, w):
        a, b = self.find(a), self.find(b)
        if a == b:
            return a
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = max(self.internal[a], self.internal[b], w)
        return a


def segment_superpixels(amap, k=0.05, min_size=2):
    """Graph-based (Felzenszwalb-style) segmentation of an attention grid.

    Edges connect 4-neighbors with weight |value difference|; a component's
    merge threshold is its internal maximum edge weight plus k/|component|.
    A final pass merges regions below min_size. Deterministic: edges sort by
    (weight, cell index).
    """
    values = amap.values if isinstance(amap, AttentionMap) else np.asarray(amap)
    h, w = values.shape
    n = h * w
    flat = values.reshape(-1).astype(np.float64)

    idx = np.arange(n).reshape(h, w)
    edges = []
    if w > 1:
        a = idx[:, :-1].reshape(-1)
        b = idx[:, 1:].reshape(-1)
        edges.append((a, b))
    if h > 1:
        a = idx[:-1, :].reshape(-1)
        b = idx[1:, :].reshape(-1)
        edges.append((a, b))
    ea = np.concatenate([e[0] for e in edges])
    eb = np.concatenate([e[1] for e in edges])
    ew = np.abs(flat[ea] - flat[eb])
    order = np.lexsort((eb, ea, ew))

    uf = _UnionFind(n)
    for e in order:
        a, b, wt = int(ea[e]), int(eb[e]), float(ew[e])
        ra, rb = uf.find(a), uf.find(b)
        if ra == rb:
            continue
        ta = uf.internal[ra] + k / uf.size[ra]
        tb = uf.internal[rb] + k / uf.size[rb]
        if wt <= min(ta, tb):
            uf.union(ra, rb, wt)
    if min_size > 1:
        for e in order:
            ra, rb = uf.find(int(ea[e])), uf.find(int(eb[e]))
            if ra != rb and (uf.size[ra] < min_size or uf.size[rb] < min_size):
                uf.union(ra, rb, float(ew[e]))

    roots = np.array([uf.find(i) for i in range(n)])
    labels = np.empty(n, dtype=np.int32)
    next_id = 0
    seen = {}
    for i in range(n):  # row-major relabeling keeps ids deterministic
        r = roots[i]
        if r not in seen:
            seen[r] = next_id
            next_id += 1
        labels[i] = seen[r]
    return SuperpixelLabeling(labels=labels.reshape(h, w), region_count=next_id)


# -- losses -------------------------------------------------------------------

def _coord_grids(h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
    return xs, ys


def barycenter_t(map_t):
    """Barycenter of a (H, W) map Tensor; returns (x, y) scalar Tensors."""
    h, w = map_t.data.shape
    xs, ys = _coord_grids(h, w)
    total = T.tensor_sum(map_t)
    bx = T.div(T.tensor_sum(T.mul(map_t, xs)), total)
    by = T.div(T.tensor_sum(T.mul(map_t, ys)), total)
    return bx, by


def attention_barycenter(amap):
    """Activation-weighted mean (x, y) coordinate of an attention map."""
    values = amap.values if isinstance(amap, AttentionMap) else np.asarray(amap)
    total = float(values.sum())
    if total <= 0:
        raise DegenerateMapError("all-zero attention map has no barycenter")
    h, w = values.shape
    xs, ys = _coord_grids(h, w)
    return (float((values * xs).sum() / total),
            float((values * ys).sum() / total))


def positive_loss_t(map_t, positive_points, eps=1e-8):
    """Distance between map barycenter and the mean click, as a Tensor."""
    if not positive_points:
        return Tensor(np.float32(0.0))
    pts = np.asarray(positive_points, dtype=np.float32)
    cx, cy = float(pts[:, 0].mean()), float(pts[:, 1].mean())
    bx, by = barycenter_t(map_t)
    dx = T.sub(bx, cx)
    dy = T.sub(by, cy)
    return T.sqrt(T.add(T.add(T.mul(dx, dx), T.mul(dy, dy)), eps))


def positive_loss(amap, positive_points):
    """Scalar positive guidance loss; 0 with a flag if there are no clicks."""
    if not positive_points:
        return 0.0, False
    values = amap.values if isinstance(amap, AttentionMap) else np.asarray(amap)
    if values.sum() <= 0:
        raise DegenerateMapError("positive_loss on an all-zero map")
    loss = positive_loss_t(Tensor(values), positive_points, eps=0.0)
    return float(loss.data), True


def negative_loss_t(map_t, labeling, negative_regions):
    """Sum of map values inside the selected superpixel regions, as a Tensor."""
    if not negative_regions:
        return Tensor(np.float32(0.0))
    mask = labeling.region_mask(negative_regions).astype(np.float32)
    return T.tensor_sum(T.mul(map_t, mask))


def negative_loss(amap, labeling, negative_regions):
    values = amap.values if isinstance(amap, AttentionMap) else np.asarray(amap)
    return float(negative_loss_t(Tensor(values), labeling, negative_regions).data)


def combined_loss(class_loss, positive, negative, config):
    return config.w_g * (positive + negative) + config.w_c * class_loss


@dataclass
class LossBreakdown:
    total: float
    loss_c: float
    loss_pos: float
    loss_neg: float


@dataclass
class GuidanceTarget:
    """Resolved per-image guidance inputs used during fine-tuning.

    ``negative_mask`` is the boolean grid of cells in the clicked regions,
    frozen at annotation time so later epochs reuse what the annotator saw.
    """
    positive_points: list = field(default_factory=list)
    negative_mask: np.ndarray | None = None
    cleared: bool = False

    @property
    def has_guidance(self):
        return not self.cleared and (bool(self.positive_points)
                                     or (self.negative_mask is not None
                                         and self.negative_mask.any()))


def fine_tune_step(model, images, labels, targets, config, lr=0.01,
                   cam_class=None, max_grad_norm=3.0):
    """One SGD step on the combined guidance + classification loss.

    ``targets`` is a list of GuidanceTarget aligned with the batch; cleared
    or empty targets contribute classification loss only. Guidance operates
    on the Grad-CAM map of ``cam_class`` (per-image label when None), the
    same map the annotator clicked on. Grad-CAM channel weights are held
    constant, so the guidance gradient flows through the feature-map
    activations only. The per-image peak normalisation can make the guidance
    gradient orders of magnitude larger than the classification gradient, so
    the global gradient norm is clipped to ``max_grad_norm`` before the
    update (0 disables clipping).
    """
    from .model import classification_loss  # local import, avoids cycle

    batch = len(labels)
    num_classes = model.config.num_classes
    logits, features, _ = model.forward(images)

    any_guidance = any(t.has_guidance for t in targets)
    pos_terms, neg_terms = [], []
    pos_val = neg_val = 0.0
    if any_guidance:
        cls = np.asarray(labels) if cam_class is None \
            else np.full(batch, cam_class)
        onehot = np.eye(num_classes, dtype=np.float32)[cls]
        picked = T.tensor_sum(T.mul(logits, onehot))
        picked.backward()
        channel_w = features.grad.mean(axis=(2, 3))  # constants from here on
        picked.zero_grad()
        model.zero_grad()

        weighted = T.mul(features, channel_w[:, :, None, None])
        cam = T.relu(T.tensor_sum(weighted, axis=1))  # (N, h, w)
        peaks = cam.data.max(axis=(1, 2))
        for i, tgt in enumerate(targets):
            if not tgt.has_guidance:
                continue
            if peaks[i] <= 0:
                continue  # degenerate map: skip guidance for this image
            map_i = T.mul(cam[i], 1.0 / float(peaks[i]))  # peak held constant
            if tgt.positive_points:
                pos_terms.append(positive_loss_t(map_i, tgt.positive_points))
            if tgt.negative_mask is not None and tgt.negative_mask.any():
                neg_terms.append(
                    T.tensor_sum(T.mul(map_i,
                                       tgt.negative_mask.astype(np.float32))))

    loss_c = classification_loss(logits, labels, num_classes)
    total = T.mul(loss_c, float(config.w_c))
    guidance_sum = None
    for term in pos_terms + neg_terms:
        guidance_sum = term if guidance_sum is None else T.add(guidance_sum, term)
    if guidance_sum is not None:
        total = T.add(total, T.mul(guidance_sum,
                                   float(config.w_g) / float(batch)))
        pos_val = sum(float(t.data) for t in pos_terms) / batch
        neg_val = sum(float(t.data) for t in neg_terms) / batch

    if not np.isfinite(total.data):
        bad = [getattr(t, "image_id", i) for i, t in enumerate(targets)]
        raise TrainingError(f"non-finite fine-tune loss on batch {bad}")
    model.zero_grad()
    total.backward()
    if max_grad_norm:
        T.clip_grad_norm(model.parameters(), max_grad_norm)
    T.sgd_step(model.parameters(), lr)
    return LossBreakdown(total=float(total.data), loss_c=float(loss_c.data),
                         loss_pos=pos_val, loss_neg=neg_val)
