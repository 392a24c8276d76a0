"""Annotation-round orchestration: select, annotate, fine-tune, evaluate.

A Session owns the dataset splits, the model, and the round state. The
simulated annotator turns ground-truth masks into click annotations so the
whole loop runs headlessly; the HTTP service drives the same Session with
human clicks instead.
"""

from __future__ import annotations

import copy
import csv
import os
import uuid
from dataclasses import dataclass, field

import numpy as np

from . import active, guidance
from .data import append_annotations, save_session_snapshot
from .errors import ConfigError, ContractError, TrainingError
from .guidance import (Annotation, GuidanceConfig, GuidanceTarget,
                       SuperpixelLabeling, display_to_grid,
                       segment_superpixels)
from .model import (AttentionMap, accuracy, grad_cam_batch, save_model,
                    upsample_attention)


@dataclass
class SimulatedAnnotatorPolicy:
    overlap_threshold: float = 0.25
    jitter: float = 0.0       # click noise, in grid cells
    skip_prob: float = 0.0    # probability of a cleared annotation

    def validate(self):
        if not (0.0 < self.overlap_threshold <= 1.0):
            raise ConfigError("overlap_threshold must lie in (0, 1]")
        return self


@dataclass
class LoopConfig:
    strategy: str = "attention"
    batch_size: int = 32
    candidates_shown: int = 16
    epochs: int = 10
    lr: float = 0.05
    max_grad_norm: float = 3.0
    seed: int = 0
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    policy: SimulatedAnnotatorPolicy = field(
        default_factory=SimulatedAnnotatorPolicy)
    target_class: int = 1  # class of interest whose attention is guided
    eval_attention: bool = True
    eval_limit: int = 0  # cap on images used for attention metrics; 0 = all

    def validate(self):
        if self.strategy not in active.STRATEGIES:
            raise ConfigError(
                f"unknown strategy {self.strategy!r}; valid: "
                f"{', '.join(active.STRATEGIES)}")
        if self.batch_size < 1 or self.candidates_shown < 1:
            raise ConfigError("batch_size and candidates_shown must be >= 1")
        self.guidance.validate()
        self.policy.validate()
        return self


@dataclass
class Candidate:
    image_id: str
    attention: AttentionMap
    labeling: SuperpixelLabeling
    annotated: bool = False


class Session:
    """One active-learning session over a fixed train pool."""

    def __init__(self, datasets, model, config, workdir=None):
        config.validate()
        self.datasets = datasets
        self.model = model
        self.config = config
        self.workdir = workdir
        if workdir:
            os.makedirs(workdir, exist_ok=True)
        self.session_id = uuid.uuid4().hex[:12]
        self.round = 0
        train = datasets["train"]
        self.labeled_ids: list = []
        self.unlabeled_ids: list = list(train.ids)
        self.candidates: list[Candidate] = []
        self.pending: dict[str, tuple[Annotation, GuidanceTarget]] = {}
        self.metric_history: list[dict] = []
        self._grid = model.config.grid_size()
        self._pre_round_params = None

    # -- candidate proposal ------------------------------------------------

    def grid_size(self):
        return self._grid

    def propose_candidates(self):
        """Select the next annotation batch and attach attention overlays."""
        if not self.unlabeled_ids:
            return []
        train = self.datasets["train"]
        batch = min(self.config.batch_size, len(self.unlabeled_ids))
        idx = [train.index_of(i) for i in self.unlabeled_ids]
        picked = active.select_candidates(
            self.unlabeled_ids, train.images[idx], self.config.strategy,
            batch, self.model, seed=[self.config.seed, self.round],
            cam_class=self.config.target_class)
        self.candidates = []
        self.pending = {}
        for image_id in picked:
            i = train.index_of(image_id)
            cam = grad_cam_batch(self.model, train.images[i:i + 1],
                                 [self.config.target_class])[0]
            amap = AttentionMap(cam, source_image_id=image_id,
                                class_index=self.config.target_class)
            labeling = segment_superpixels(
                amap, k=self.config.guidance.superpixel_k,
                min_size=self.config.guidance.superpixel_min_size)
            self.candidates.append(Candidate(image_id, amap, labeling))
        return self.candidates

    def candidate(self, image_id):
        for c in self.candidates:
            if c.image_id == image_id:
                return c
        return None

    # -- annotation --------------------------------------------------------

    def submit_annotations(self, annotations):
        """CONFIRM semantics: store pending annotations, append to the log.

        Returns (accepted ids, rejected ids). A duplicate submission
        overwrites the previous one.
        """
        accepted, rejected = [], []
        to_log = []
        for ann in annotations:
            cand = self.candidate(ann.image_id)
            if cand is None:
                rejected.append(ann.image_id)
                continue
            target = self._resolve_target(ann, cand)
            self.pending[ann.image_id] = (ann, target)
            cand.annotated = True
            accepted.append(ann.image_id)
            to_log.append(ann)
        if self.workdir and to_log:
            append_annotations(os.path.join(self.workdir, "annotations.jsonl"),
                               to_log)
        return accepted, rejected

    def _resolve_target(self, ann, cand):
        if ann.cleared:
            return GuidanceTarget(cleared=True)
        grid = self._grid
        points = []
        for p in ann.positive_points:
            if ann.display_size and ann.display_size[0] and \
                    tuple(ann.display_size) != (grid, grid):
                points.append(display_to_grid(p, ann.display_size, grid, grid))
            else:
                points.append((float(p[0]), float(p[1])))
        mask = None
        if ann.negative_regions:
            mask = cand.labeling.region_mask(ann.negative_regions)
        return GuidanceTarget(positive_points=points, negative_mask=mask)

    # -- fine-tuning -------------------------------------------------------

    def run_fine_tune(self, epochs=None):
        """Advance one round: absorb pending annotations, train, evaluate."""
        unannotated = [c.image_id for c in self.candidates if not c.annotated]
        if unannotated:
            raise ContractError(
                f"{len(unannotated)} candidates still unannotated "
                f"(e.g. {unannotated[0]})")
        epochs = self.config.epochs if epochs is None else epochs
        train = self.datasets["train"]

        for c in self.candidates:
            self.unlabeled_ids.remove(c.image_id)
            self.labeled_ids.append(c.image_id)
        targets = {iid: tgt for iid, (_, tgt) in self.pending.items()}
        if not hasattr(self, "_targets"):
            self._targets = {}
        self._targets.update(targets)
        self.candidates = []
        self.pending = {}

        self._pre_round_params = copy.deepcopy(self.model.param_arrays())
        breakdown = guidance.LossBreakdown(0.0, 0.0, 0.0, 0.0)
        try:
            for epoch in range(epochs):
                rng = np.random.default_rng(
                    [self.config.seed, 7001, self.round, epoch])
                order = rng.permutation(len(self.labeled_ids))
                sums = np.zeros(4)
                nb = 0
                for s in range(0, len(order), self.config.batch_size):
                    ids = [self.labeled_ids[i]
                           for i in order[s:s + self.config.batch_size]]
                    idx = [train.index_of(i) for i in ids]
                    batch_targets = [self._targets.get(i, GuidanceTarget())
                                     for i in ids]
                    breakdown = guidance.fine_tune_step(
                        self.model, train.images[idx], train.labels[idx],
                        batch_targets, self.config.guidance,
                        lr=self.config.lr,
                        cam_class=self.config.target_class,
                        max_grad_norm=self.config.max_grad_norm)
                    sums += [breakdown.total, breakdown.loss_c,
                             breakdown.loss_pos, breakdown.loss_neg]
                    nb += 1
                if nb:
                    breakdown = guidance.LossBreakdown(*(sums / nb))
        except TrainingError:
            self.model.load_arrays(self._pre_round_params)
            raise

        self.round += 1
        metrics = self.evaluate()
        metrics.update({"round": self.round,
                        "loss_total": breakdown.total,
                        "loss_c": breakdown.loss_c,
                        "loss_pos": breakdown.loss_pos,
                        "loss_neg": breakdown.loss_neg})
        self.metric_history.append(metrics)
        if self.workdir:
            path = os.path.join(self.workdir,
                                f"checkpoint_round{self.round}.atth")
            save_model(path, self.model, epoch=self.round)
        return metrics

    def evaluate(self):
        metrics = {
            "accuracy_biased": accuracy(self.model,
                                        self.datasets["test_biased"]),
            "accuracy_decorrelated": accuracy(
                self.model, self.datasets["test_decorrelated"]),
        }
        if self.config.eval_attention:
            eval_set = self.datasets["test_decorrelated"]
            att = compute_attention_metrics(
                self.model, eval_set, limit=self.config.eval_limit,
                cam_class=self.config.target_class)
            metrics.update(att)
        return metrics

    def record_baseline_metrics(self):
        """Round-0 metrics of the pretrained checkpoint."""
        metrics = self.evaluate()
        metrics.update({"round": 0, "loss_total": 0.0, "loss_c": 0.0,
                        "loss_pos": 0.0, "loss_neg": 0.0})
        self.metric_history.append(metrics)
        return metrics

    # -- persistence ---------------------------------------------------------

    def snapshot_dict(self):
        return {
            "session_id": self.session_id,
            "round": self.round,
            "strategy": self.config.strategy,
            "batch_size": self.config.batch_size,
            "candidates_shown": self.config.candidates_shown,
            "labeled_ids": list(self.labeled_ids),
            "unlabeled_ids": list(self.unlabeled_ids),
            "metric_history": self.metric_history,
        }

    def save_snapshot(self, path=None):
        path = path or os.path.join(self.workdir, "session.json")
        save_session_snapshot(path, self.snapshot_dict())
        return path


# -- simulated annotator ---------------------------------------------------------

def mask_components(mask):
    """Split a boolean mask into 4-connected components (list of masks)."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    parts = []
    for sy, sx in zip(*np.nonzero(mask)):
        if seen[sy, sx]:
            continue
        comp = np.zeros_like(mask)
        stack = [(sy, sx)]
        seen[sy, sx] = comp[sy, sx] = True
        while stack:
            y, x = stack.pop()
            for ny, nx in ((y-1, x), (y+1, x), (y, x-1), (y, x+1)):
                if 0 <= ny < mask.shape[0] and 0 <= nx < mask.shape[1] \
                        and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = comp[ny, nx] = True
                    stack.append((ny, nx))
        parts.append(comp)
    return parts


def simulate_annotations(candidates, policy, dataset, grid_size, rng=None):
    """Oracle annotations from ground-truth masks.

    Positive clicks: one per connected component of the target mask, at the
    component centroid scaled to grid coordinates (plus jitter, clamped).
    Negative regions: superpixels whose mean distractor coverage exceeds the
    overlap threshold. With probability skip_prob the annotation is emitted
    cleared.
    """
    if dataset.target_masks is None or dataset.distractor_masks is None:
        raise ContractError("simulated annotator needs ground-truth masks")
    rng = rng or np.random.default_rng(0)
    img_size = dataset.images.shape[-1]
    scale = grid_size / img_size
    out = []
    for cand in candidates:
        i = dataset.index_of(cand.image_id)
        if policy.skip_prob and rng.random() < policy.skip_prob:
            out.append(Annotation(image_id=cand.image_id, cleared=True,
                                  display_size=(grid_size, grid_size)))
            continue
        points = []
        for comp in mask_components(dataset.target_masks[i]):
            ys, xs = np.nonzero(comp)
            gx = xs.mean() * scale
            gy = ys.mean() * scale
            if policy.jitter:
                gx += rng.normal(0, policy.jitter)
                gy += rng.normal(0, policy.jitter)
            points.append((float(np.clip(gx, 0, grid_size - 1)),
                           float(np.clip(gy, 0, grid_size - 1))))
        regions = _overlapping_regions(cand.labeling,
                                       dataset.distractor_masks[i],
                                       policy.overlap_threshold)
        out.append(Annotation(image_id=cand.image_id, positive_points=points,
                              negative_regions=regions,
                              display_size=(grid_size, grid_size)))
    return out


def _overlapping_regions(labeling, pixel_mask, threshold):
    """Superpixel ids whose mean coverage by pixel_mask exceeds threshold."""
    gh, gw = labeling.labels.shape
    h, w = pixel_mask.shape
    by, bx = h // gh, w // gw
    coverage = pixel_mask.astype(np.float64).reshape(gh, by, gw, bx)\
        .mean(axis=(1, 3))
    regions = []
    for r in range(labeling.region_count):
        cells = labeling.labels == r
        if coverage[cells].mean() > threshold:
            regions.append(r)
    return regions


# -- metrics ------------------------------------------------------------------

def compute_attention_metrics(model, dataset, batch=64, limit=0,
                              cam_class=None):
    """Fraction of attention mass inside the target / distractor masks.

    Attention is read for ``cam_class`` (per-image label when None). Each
    mean runs over the images where the respective mask is nonempty;
    all-zero attention maps are skipped and counted separately.
    """
    if dataset.target_masks is None:
        raise ContractError("attention metrics need ground-truth masks")
    n = len(dataset) if not limit else min(limit, len(dataset))
    img = dataset.images.shape[-1]
    in_target, in_distractor = [], []
    skipped = 0
    for s in range(0, n, batch):
        ids = range(s, min(s + batch, n))
        chunk = dataset.images[s:s + batch][:len(ids)]
        chunk_labels = dataset.labels[list(ids)] if cam_class is None \
            else np.full(len(ids), cam_class)
        cams = grad_cam_batch(model, chunk, chunk_labels)
        for j, i in enumerate(ids):
            total = float(cams[j].sum())
            if total <= 0:
                skipped += 1
                continue
            up = upsample_attention(AttentionMap(cams[j]), img, img).values
            up_total = float(up.sum())
            if up_total <= 0:
                skipped += 1
                continue
            if dataset.target_masks[i].any():
                in_target.append(float(up[dataset.target_masks[i]].sum())
                                 / up_total)
            if dataset.distractor_masks[i].any():
                in_distractor.append(
                    float(up[dataset.distractor_masks[i]].sum()) / up_total)
    return {
        "attention_in_target": float(np.mean(in_target)) if in_target else 0.0,
        "attention_in_distractor": float(np.mean(in_distractor))
        if in_distractor else 0.0,
        "attention_skipped": skipped,
    }


# -- headless loop -----------------------------------------------------------------

REPORT_COLUMNS = ["round", "strategy", "accuracy_biased",
                  "accuracy_decorrelated", "attention_in_target",
                  "attention_in_distractor", "loss_pos", "loss_neg", "loss_c"]


def autoloop(datasets, model, config, rounds, workdir=None):
    """Run the full simulated human-in-the-loop for ``rounds`` rounds."""
    session = Session(datasets, model, config, workdir=workdir)
    session.record_baseline_metrics()
    train = datasets["train"]
    for r in range(rounds):
        candidates = session.propose_candidates()
        if not candidates:
            break
        rng = np.random.default_rng([config.seed, 9001, session.round])
        annotations = simulate_annotations(candidates, config.policy, train,
                                           session.grid_size(), rng=rng)
        session.submit_annotations(annotations)
        session.run_fine_tune()
    return session


def write_report(path, metric_history, strategy):
    """CSV report; float formatting is repr-stable for reproducibility."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in metric_history:
            writer.writerow([
                row["round"], strategy,
                repr(float(row["accuracy_biased"])),
                repr(float(row["accuracy_decorrelated"])),
                repr(float(row.get("attention_in_target", 0.0))),
                repr(float(row.get("attention_in_distractor", 0.0))),
                repr(float(row["loss_pos"])),
                repr(float(row["loss_neg"])),
                repr(float(row["loss_c"])),
            ])
