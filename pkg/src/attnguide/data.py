"""Synthetic co-occurrence-biased datasets, ingestion, and persistence.

Positive images contain a target glyph; with probability ``train_bias``
they also contain a distractor glyph, so a lazy classifier can latch onto
the distractor. The decorrelated test split draws the distractor
independently of the label, exposing that shortcut. Every sample carries
exact pixel masks for both glyphs (the rasterizer paints mask and image
together).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IngestionError


@dataclass
class BiasedDatasetSpec:
    image_size: int = 64
    target_shape: str = "triangle"
    distractor_shape: str = "striped_square"
    train_bias: float = 1.0
    test_bias: float = 1.0
    train_count: int = 800
    val_count: int = 100
    test_count: int = 400
    noise_level: float = 0.05
    neg_distractor_prob: float = 0.5
    targets_per_image: int = 1
    glyph_min: int = 12
    glyph_max: int = 20
    target_contrast: float = 0.3
    seed: int = 0

    def validate(self):
        if not (0 <= self.train_bias <= 1 and 0 <= self.test_bias <= 1):
            raise ConfigError("bias probabilities must lie in [0, 1]")
        if self.image_size < 32 or self.glyph_max >= self.image_size // 2:
            raise ConfigError("glyphs too large for the image size")
        if self.targets_per_image < 1:
            raise ConfigError("targets_per_image must be >= 1")
        return self

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


@dataclass
class Dataset:
    ids: list
    images: np.ndarray          # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray          # (N,) int
    target_masks: np.ndarray | None = None      # (N, H, W) bool
    distractor_masks: np.ndarray | None = None  # (N, H, W) bool
    class_names: list = field(default_factory=lambda: ["absent", "present"])

    def __len__(self):
        return len(self.ids)

    def index_of(self, image_id):
        return self.ids.index(image_id)

    def subset(self, indices):
        idx = np.asarray(indices)
        return Dataset(
            ids=[self.ids[i] for i in idx],
            images=self.images[idx],
            labels=self.labels[idx],
            target_masks=None if self.target_masks is None
            else self.target_masks[idx],
            distractor_masks=None if self.distractor_masks is None
            else self.distractor_masks[idx],
            class_names=self.class_names)


# -- rasterizer ----------------------------------------------------------------

def _triangle_mask(size):
    """Filled upward triangle on a size x size local grid."""
    y, x = np.mgrid[0:size, 0:size]
    cx = (size - 1) / 2.0
    # width of the triangle at row y grows linearly from apex to base
    half = (y + 1) * cx / size
    return np.abs(x - cx) <= half


def _striped_square_mask(size):
    return np.ones((size, size), dtype=bool)


def _place_glyph(rng, occupied, img_size, glyph_size, margin=1):
    """Random top-left corner whose padded box avoids occupied pixels."""
    for _ in range(200):
        top = int(rng.integers(0, img_size - glyph_size))
        left = int(rng.integers(0, img_size - glyph_size))
        t0, l0 = max(top - margin, 0), max(left - margin, 0)
        box = occupied[t0:top + glyph_size + margin, l0:left + glyph_size + margin]
        if not box.any():
            occupied[top:top + glyph_size, left:left + glyph_size] = True
            return top, left
    raise ConfigError("could not place a glyph without overlap")


def _paint_target(rng, image, mask_out, occupied, spec):
    size = int(rng.integers(spec.glyph_min, spec.glyph_max + 1))
    top, left = _place_glyph(rng, occupied, spec.image_size, size)
    local = _triangle_mask(size)
    region = (slice(top, top + size), slice(left, left + size))
    c = spec.target_contrast
    # greenish filled triangle over the gray background
    image[0][region][local] -= c * 0.5
    image[1][region][local] += c
    image[2][region][local] -= c * 0.5
    mask_out[region] |= local


def _paint_distractor(rng, image, mask_out, occupied, spec):
    size = int(rng.integers(spec.glyph_min, spec.glyph_max + 1))
    top, left = _place_glyph(rng, occupied, spec.image_size, size)
    local = _striped_square_mask(size)
    ys = np.arange(size)
    stripe = (ys // 2) % 2  # horizontal stripes, 2 px period
    vals = np.where(stripe[:, None], 0.95, 0.05).astype(np.float32)
    region = (slice(top, top + size), slice(left, left + size))
    for ch in range(3):
        sub = image[ch][region]
        sub[local] = np.broadcast_to(vals, (size, size))[local]
    mask_out[region] |= local


def _render_sample(rng, spec, has_target, has_distractor):
    s = spec.image_size
    image = np.full((3, s, s), 0.5, dtype=np.float32)
    image += rng.normal(0.0, spec.noise_level, size=image.shape).astype(np.float32)
    tmask = np.zeros((s, s), dtype=bool)
    dmask = np.zeros((s, s), dtype=bool)
    occupied = np.zeros((s, s), dtype=bool)
    if has_distractor:
        _paint_distractor(rng, image, dmask, occupied, spec)
    if has_target:
        for _ in range(spec.targets_per_image):
            _paint_target(rng, image, tmask, occupied, spec)
    return np.clip(image, 0.0, 1.0), tmask, dmask


def _make_split(spec, count, bias, decorrelated, seed, prefix):
    rng = np.random.default_rng(seed)
    images = np.empty((count, 3, spec.image_size, spec.image_size), np.float32)
    labels = np.empty(count, dtype=np.int64)
    tmasks = np.zeros((count, spec.image_size, spec.image_size), bool)
    dmasks = np.zeros_like(tmasks)
    ids = []
    for i in range(count):
        label = int(i % 2)  # balanced classes
        if decorrelated:
            has_distractor = bool(rng.random() < 0.5)
        elif label == 1:
            has_distractor = bool(rng.random() < bias)
        else:
            has_distractor = bool(rng.random() < spec.neg_distractor_prob)
        img, tm, dm = _render_sample(rng, spec, label == 1, has_distractor)
        images[i], tmasks[i], dmasks[i] = img, tm, dm
        labels[i] = label
        ids.append(f"{prefix}_{i:05d}")
    return Dataset(ids=ids, images=images, labels=labels,
                   target_masks=tmasks, distractor_masks=dmasks)


def generate_biased_dataset(spec):
    """Deterministic {train, val, test_biased, test_decorrelated} splits."""
    spec.validate()
    return {
        "train": _make_split(spec, spec.train_count, spec.train_bias,
                             False, (spec.seed, 0), "train"),
        "val": _make_split(spec, spec.val_count, spec.train_bias,
                           False, (spec.seed, 1), "val"),
        "test_biased": _make_split(spec, spec.test_count, spec.test_bias,
                                   False, (spec.seed, 2), "testb"),
        "test_decorrelated": _make_split(spec, spec.test_count, 0.5,
                                         True, (spec.seed, 3), "testd"),
    }


# -- image-folder ingestion ----------------------------------------------------

def load_image_folder(path, manifest, input_size=64):
    """Load a {images: [{id, file, label}], classes: [...]} manifest."""
    from PIL import Image

    if isinstance(manifest, (str, os.PathLike)):
        with open(manifest) as fh:
            manifest = json.load(fh)
    entries = manifest.get("images", [])
    images = np.empty((len(entries), 3, input_size, input_size), np.float32)
    labels = np.empty(len(entries), dtype=np.int64)
    ids = []
    for i, entry in enumerate(entries):
        fpath = os.path.join(path, entry["file"])
        try:
            with Image.open(fpath) as im:
                im = im.convert("RGB").resize((input_size, input_size),
                                              Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except (OSError, ValueError) as exc:
            raise IngestionError(f"cannot read image {fpath}: {exc}") from exc
        images[i] = arr.transpose(2, 0, 1)
        labels[i] = int(entry["label"])
        ids.append(str(entry["id"]))
    return Dataset(ids=ids, images=images, labels=labels,
                   class_names=manifest.get("classes",
                                            ["absent", "present"]))


def export_dataset(dataset, out_dir, spec=None):
    """PNG per image, one masks sidecar .npz per split, and a manifest."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, image_id in enumerate(dataset.ids):
        arr = (dataset.images[i].transpose(1, 2, 0) * 255).round().astype(np.uint8)
        fname = f"{image_id}.png"
        Image.fromarray(arr).save(os.path.join(out_dir, fname))
        entries.append({"id": image_id, "file": fname,
                        "label": int(dataset.labels[i])})
    if dataset.target_masks is not None:
        np.savez_compressed(os.path.join(out_dir, "masks.npz"),
                            target=dataset.target_masks,
                            distractor=dataset.distractor_masks)
    manifest = {"images": entries, "classes": dataset.class_names}
    if spec is not None:
        manifest["spec"] = spec.to_dict()
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_exported_dataset(out_dir, input_size=64):
    ds = load_image_folder(out_dir, os.path.join(out_dir, "manifest.json"),
                           input_size=input_size)
    masks_path = os.path.join(out_dir, "masks.npz")
    if os.path.exists(masks_path):
        with np.load(masks_path) as mz:
            ds.target_masks = mz["target"]
            ds.distractor_masks = mz["distractor"]
    return ds


# -- persistence ----------------------------------------------------------------

ANNOTATION_LOG_VERSION = 1
SESSION_SNAPSHOT_VERSION = 1


def append_annotations(path, annotations):
    """Append annotation records to a JSON-lines log (single writer)."""
    with open(path, "a") as fh:
        for ann in annotations:
            fh.write(json.dumps(ann.to_json_dict(), sort_keys=True) + "\n")


def read_annotation_log(path):
    from .guidance import Annotation

    out = []
    if not os.path.exists(path):
        return out
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Annotation.from_json_dict(json.loads(line)))
    return out


def save_session_snapshot(path, state_dict):
    snapshot = {"schema_version": SESSION_SNAPSHOT_VERSION, **state_dict}
    with open(path, "w") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)


def load_session_snapshot(path):
    with open(path) as fh:
        snapshot = json.load(fh)
    version = snapshot.pop("schema_version", None)
    if version != SESSION_SNAPSHOT_VERSION:
        raise IngestionError(
            f"session snapshot version {version} is incompatible "
            f"(expected {SESSION_SNAPSHOT_VERSION})")
    return snapshot
