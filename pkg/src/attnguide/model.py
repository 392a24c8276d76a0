"""Desk-scale convolutional classifier with Grad-CAM attention extraction.

Architecture: a stack of conv(3x3, same padding) -> relu -> max-pool blocks,
then global average pooling and a dense softmax head. The Grad-CAM target
layer is the post-ReLU activation of a designated block, read before that
block's pooling stage.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, ShapeError, TrainingError
from .tensor import Tensor


@dataclass
class ClassifierConfig:
    input_size: int = 64
    channels: int = 3
    blocks: list = field(default_factory=lambda: [(16, 2), (32, 2), (64, 2), (64, 2)])
    num_classes: int = 2
    target_layer: int = -1

    def validate(self):
        if not self.blocks:
            raise ConfigError("classifier needs at least one conv block")
        if self.input_size < 4 or self.channels < 1 or self.num_classes < 1:
            raise ConfigError(f"invalid classifier config: {self}")
        size = self.input_size
        for filters, pool in self.blocks:
            if filters < 1 or pool < 1:
                raise ConfigError(f"invalid block ({filters}, {pool})")
            if size % pool:
                raise ConfigError(
                    f"spatial size {size} not divisible by pool stride {pool}")
            size //= pool
        if size < 4:
            raise ConfigError(
                f"final feature grid {size}x{size} is below the 4x4 minimum")
        n = len(self.blocks)
        if not (-n <= self.target_layer < n):
            raise ConfigError(
                f"target_layer {self.target_layer} outside {n} blocks")
        return self

    @property
    def resolved_target_layer(self):
        return self.target_layer % len(self.blocks)

    def grid_size(self, layer=None):
        """Spatial resolution of a block's conv output (pre-pool)."""
        layer = self.resolved_target_layer if layer is None else layer
        size = self.input_size
        for _, pool in self.blocks[:layer]:
            size //= pool
        return size

    def to_dict(self):
        return {"input_size": self.input_size, "channels": self.channels,
                "blocks": [list(b) for b in self.blocks],
                "num_classes": self.num_classes,
                "target_layer": self.target_layer}

    @classmethod
    def from_dict(cls, d):
        return cls(input_size=d["input_size"], channels=d["channels"],
                   blocks=[tuple(b) for b in d["blocks"]],
                   num_classes=d["num_classes"],
                   target_layer=d["target_layer"]).validate()


@dataclass
class AttentionMap:
    """Max-normalized nonnegative Grad-CAM grid for one (image, class) pair."""
    values: np.ndarray  # (height, width), values[y][x]
    source_image_id: str = ""
    class_index: int = 0

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


class Model:
    def __init__(self, config, params):
        self.config = config
        self.params = params  # name -> Tensor(requires_grad=True)

    def parameters(self):
        return list(self.params.values())

    def param_arrays(self):
        return {k: v.data for k, v in self.params.items()}

    def clone(self):
        return Model(self.config, {k: Tensor(v.data.copy(), requires_grad=True)
                                   for k, v in self.params.items()})

    def load_arrays(self, arrays):
        for k, v in self.params.items():
            v.data = arrays[k].astype(np.float32).copy()
            v.grad = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def forward(self, images):
        """Run the network on a (N, C, H, W) float32 batch.

        Returns (logits, target-layer features, penultimate embedding),
        all graph-attached Tensors.
        """
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (cfg.channels,
                                                    cfg.input_size,
                                                    cfg.input_size):
            raise ShapeError(
                f"input {images.shape} does not match configured "
                f"(N, {cfg.channels}, {cfg.input_size}, {cfg.input_size})")
        x = Tensor(images)
        target = cfg.resolved_target_layer
        features = None
        for i, (filters, pool) in enumerate(cfg.blocks):
            x = T.conv2d(x, self.params[f"conv{i}_w"], stride=1, padding=1)
            x = _bias_add(x, self.params[f"conv{i}_b"])
            x = T.relu(x)
            if i == target:
                features = x
            x = T.max_pool2d(x, pool)
        pooled = T.global_avg_pool(x)
        logits = T.dense(pooled, self.params["fc_w"], self.params["fc_b"])
        return logits, features, pooled


def _bias_add(x, b):
    """Per-channel bias broadcast over an NCHW tensor."""
    c = b.data.shape[0]

    def bw(g, x=x, b=b):
        T._accum(x, g)
        T._accum(b, g.sum(axis=(0, 2, 3)))

    return T._result(x.data + b.data.reshape(1, c, 1, 1), (x, b), bw)


def build_classifier(config, seed=0):
    """He-initialized model; identical (config, seed) gives identical params."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    in_ch = config.channels
    for i, (filters, _pool) in enumerate(config.blocks):
        fan_in = in_ch * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       size=(filters, in_ch, 3, 3)).astype(np.float32)
        params[f"conv{i}_w"] = Tensor(w, requires_grad=True)
        params[f"conv{i}_b"] = Tensor(np.zeros(filters, np.float32),
                                      requires_grad=True)
        in_ch = filters
    w = rng.normal(0.0, np.sqrt(2.0 / in_ch),
                   size=(in_ch, config.num_classes)).astype(np.float32)
    params["fc_w"] = Tensor(w, requires_grad=True)
    params["fc_b"] = Tensor(np.zeros(config.num_classes, np.float32),
                            requires_grad=True)
    return Model(config, params)


def predict(model, images):
    """Softmax class probabilities, (N, num_classes); rows sum to 1."""
    single = images.ndim == 3
    if single:
        images = images[None]
    logits, _, _ = model.forward(images.astype(np.float32))
    probs = T.softmax(logits, axis=-1).data
    return probs[0] if single else probs


def classification_loss(logits, labels, num_classes):
    """Mean cross-entropy from softmax probabilities against integer labels."""
    onehot = np.eye(num_classes, dtype=np.float32)[np.asarray(labels)]
    probs = T.softmax(logits, axis=-1)
    return T.mul(T.tensor_sum(T.mul(T.log(probs), onehot)),
                 -1.0 / float(len(labels)))


@dataclass
class TrainHyper:
    lr: float = 0.1
    weight_decay: float = 5e-4
    epochs: int = 40
    batch_size: int = 64
    patience: int = 5
    seed: int = 0


def pretrain(model, train, val, hyper):
    """SGD with early stopping on validation accuracy.

    ``train``/``val`` expose ``images`` (N,C,H,W) and ``labels`` arrays.
    Returns (model restored to the best checkpoint, history list of
    per-epoch dicts).
    """
    if len(train.labels) == 0 or len(val.labels) == 0:
        raise ContractError("pretrain needs nonempty train and val sets")
    num_classes = model.config.num_classes
    if int(np.max(train.labels)) >= num_classes:
        raise ContractError("label outside configured class range")
    rng = np.random.default_rng(hyper.seed)
    n = len(train.labels)
    best = {"acc": -1.0, "params": copy.deepcopy(model.param_arrays()),
            "epoch": -1}
    history = []
    bad_epochs = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            logits, _, _ = model.forward(train.images[idx])
            loss = classification_loss(logits, train.labels[idx], num_classes)
            if not np.isfinite(loss.data):
                raise TrainingError(f"loss diverged (NaN) at epoch {epoch}")
            model.zero_grad()
            loss.backward()
            T.sgd_step(model.parameters(), hyper.lr, hyper.weight_decay)
            losses.append(float(loss.data))
        val_acc = accuracy(model, val)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_accuracy": val_acc})
        if val_acc > best["acc"]:
            best = {"acc": val_acc, "params": copy.deepcopy(model.param_arrays()),
                    "epoch": epoch}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > hyper.patience:
                break
    model.load_arrays(best["params"])
    return model, history


def accuracy(model, dataset, batch_size=128):
    correct = 0
    for start in range(0, len(dataset.labels), batch_size):
        probs = predict(model, dataset.images[start:start + batch_size])
        correct += int((probs.argmax(axis=1)
                        == dataset.labels[start:start + batch_size]).sum())
    return correct / len(dataset.labels)


def grad_cam_batch(model, images, class_indices):
    """Grad-CAM maps for a batch; returns (N, h, w) max-normalized array."""
    num_classes = model.config.num_classes
    class_indices = np.asarray(class_indices)
    if class_indices.min() < 0 or class_indices.max() >= num_classes:
        raise ContractError(
            f"class index out of range [0, {num_classes})")
    logits, features, _ = model.forward(images.astype(np.float32))
    onehot = np.eye(num_classes, dtype=np.float32)[class_indices]
    picked = T.tensor_sum(T.mul(logits, onehot))
    picked.backward()
    fgrad = features.grad  # (N, C, h, w)
    weights = fgrad.mean(axis=(2, 3))  # per-channel spatial average
    cam = np.einsum("nc,nchw->nhw", weights, features.data)
    picked.zero_grad()
    model.zero_grad()
    cam = np.maximum(cam, 0.0)
    peak = cam.max(axis=(1, 2), keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    return (cam / safe).astype(np.float32)


def grad_cam(model, image, class_index, image_id=""):
    """Attention map for one image and class (max-normalized, all-zero safe)."""
    maps = grad_cam_batch(model, image[None], [class_index])
    return AttentionMap(values=maps[0], source_image_id=image_id,
                        class_index=int(class_index))


def upsample_attention(amap, target_w, target_h):
    """Bilinear upsample; the source maximum is preserved within 1e-6."""
    src = amap.values
    h, w = src.shape
    if target_h < h or target_w < w:
        raise ContractError("upsample target must be >= source dims")
    if (target_h, target_w) == (h, w):
        return AttentionMap(src.copy(), amap.source_image_id, amap.class_index)
    out = _bilinear(src, target_h, target_w)
    src_max = float(src.max())
    out_max = float(out.max())
    if out_max > 0 and src_max > 0:
        # interpolation can miss the source peak; rescale so max survives
        out *= src_max / out_max
    return AttentionMap(out.astype(np.float32), amap.source_image_id,
                        amap.class_index)


def _bilinear(src, th, tw):
    h, w = src.shape
    ys = np.linspace(0, h - 1, th) if h > 1 else np.zeros(th)
    xs = np.linspace(0, w - 1, tw) if w > 1 else np.zeros(tw)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = src[np.ix_(y0, x0)]
    b = src[np.ix_(y0, x1)]
    c = src[np.ix_(y1, x0)]
    d = src[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def save_model(path, model, epoch=None, val_accuracy=None):
    meta = {"config": model.config.to_dict()}
    if epoch is not None:
        meta["epoch"] = epoch
    if val_accuracy is not None:
        meta["val_accuracy"] = val_accuracy
    save_checkpoint(path, model.param_arrays(), metadata=meta)


def load_model(path):
    params, meta = load_checkpoint(path)
    if meta is None or "config" not in meta:
        raise ContractError(f"checkpoint {path} carries no model metadata")
    config = ClassifierConfig.from_dict(meta["config"])
    model = build_classifier(config, seed=0)
    model.load_arrays(params)
    return model, meta
