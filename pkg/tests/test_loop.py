"""Session round-keeping, the simulated annotator, and attention metrics."""

import numpy as np
import pytest

from attnguide.data import BiasedDatasetSpec, Dataset, generate_biased_dataset
from attnguide.errors import ConfigError, ContractError
from attnguide.guidance import Annotation
from attnguide.loop import (LoopConfig, REPORT_COLUMNS, Session,
                            SimulatedAnnotatorPolicy, autoloop,
                            compute_attention_metrics, mask_components,
                            simulate_annotations, write_report)
from attnguide.model import ClassifierConfig, build_classifier


def tiny_datasets(seed=0):
    spec = BiasedDatasetSpec(image_size=32, glyph_min=6, glyph_max=10,
                             train_count=16, val_count=4, test_count=8,
                             seed=seed)
    return generate_biased_dataset(spec)


def tiny_model(seed=0):
    config = ClassifierConfig(input_size=32, channels=3,
                              blocks=[(4, 2), (8, 2)], num_classes=2)
    return build_classifier(config, seed=seed)


def tiny_config(**kw):
    base = dict(batch_size=4, candidates_shown=4, epochs=1, lr=0.01,
                eval_attention=False, strategy="random")
    base.update(kw)
    return LoopConfig(**base)


def annotate_all(session):
    anns = simulate_annotations(session.candidates, session.config.policy,
                                session.datasets["train"],
                                session.grid_size())
    session.submit_annotations(anns)


# -- config ------------------------------------------------------------------


def test_loop_config_validation():
    with pytest.raises(ConfigError):
        LoopConfig(strategy="nope").validate()
    with pytest.raises(ConfigError):
        LoopConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        SimulatedAnnotatorPolicy(overlap_threshold=0.0).validate()


# -- mask components -----------------------------------------------------------


def test_mask_components_splits_islands():
    mask = np.zeros((6, 6), bool)
    mask[0:2, 0:2] = True
    mask[4:6, 4:6] = True
    mask[0, 5] = True
    parts = mask_components(mask)
    assert len(parts) == 3
    combined = np.zeros((6, 6), bool)
    for p in parts:
        assert not (combined & p).any()
        combined |= p
    np.testing.assert_array_equal(combined, mask)


def test_mask_components_diagonal_not_connected():
    mask = np.zeros((3, 3), bool)
    mask[0, 0] = mask[1, 1] = True
    assert len(mask_components(mask)) == 2


def test_mask_components_empty():
    assert mask_components(np.zeros((4, 4), bool)) == []


# -- session partition invariants ------------------------------------------------


def test_session_partition_invariants():
    datasets = tiny_datasets()
    session = Session(datasets, tiny_model(), tiny_config())
    all_ids = set(datasets["train"].ids)
    assert set(session.unlabeled_ids) == all_ids
    assert session.labeled_ids == []

    for expected_round in (1, 2):
        cands = session.propose_candidates()
        assert len(cands) == 4
        annotate_all(session)
        session.run_fine_tune()
        assert session.round == expected_round
        assert len(session.labeled_ids) == 4 * expected_round
        assert set(session.labeled_ids) | set(session.unlabeled_ids) == all_ids
        assert not set(session.labeled_ids) & set(session.unlabeled_ids)
        assert session.candidates == [] and session.pending == {}


def test_fine_tune_requires_all_annotated():
    session = Session(tiny_datasets(), tiny_model(), tiny_config())
    cands = session.propose_candidates()
    anns = simulate_annotations(cands[:-1], session.config.policy,
                                session.datasets["train"],
                                session.grid_size())
    session.submit_annotations(anns)
    with pytest.raises(ContractError, match="unannotated"):
        session.run_fine_tune()


def test_submit_rejects_unknown_ids():
    session = Session(tiny_datasets(), tiny_model(), tiny_config())
    session.propose_candidates()
    known = session.candidates[0].image_id
    accepted, rejected = session.submit_annotations(
        [Annotation(image_id=known), Annotation(image_id="ghost")])
    assert accepted == [known]
    assert rejected == ["ghost"]


def test_run_fine_tune_zero_epochs_keeps_model():
    session = Session(tiny_datasets(), tiny_model(), tiny_config())
    session.propose_candidates()
    annotate_all(session)
    before = {k: v.data.copy() for k, v in session.model.params.items()}
    metrics = session.run_fine_tune(epochs=0)
    for k, v in session.model.params.items():
        assert v.data.tobytes() == before[k].tobytes()
    assert metrics["round"] == 1


def test_snapshot_round_trip(tmp_path):
    session = Session(tiny_datasets(), tiny_model(), tiny_config(),
                      workdir=str(tmp_path))
    session.propose_candidates()
    annotate_all(session)
    session.run_fine_tune()
    path = session.save_snapshot()
    from attnguide.data import load_session_snapshot
    snap = load_session_snapshot(path)
    assert snap["round"] == 1
    assert snap["labeled_ids"] == session.labeled_ids
    assert snap["session_id"] == session.session_id
    assert len(snap["metric_history"]) == 1


# -- simulated annotator ----------------------------------------------------------


def grid_dataset():
    """Hand-built 4-image dataset with known masks (8x8 images)."""
    images = np.full((2, 3, 8, 8), 0.5, np.float32)
    tmask = np.zeros((2, 8, 8), bool)
    dmask = np.zeros((2, 8, 8), bool)
    # image 0: one target block at rows 0-1, cols 0-1; distractor rows 6-7
    tmask[0, 0:2, 0:2] = True
    dmask[0, 6:8, 6:8] = True
    # image 1: two separated targets
    tmask[1, 0:2, 0:2] = True
    tmask[1, 6:8, 6:8] = True
    return Dataset(ids=["g0", "g1"], images=images,
                   labels=np.array([1, 1]), target_masks=tmask,
                   distractor_masks=dmask)


class FakeCandidate:
    def __init__(self, image_id, labeling):
        self.image_id = image_id
        self.labeling = labeling


def uniform_labeling(grid):
    """2x2-block superpixels on a grid x grid attention map."""
    from attnguide.guidance import SuperpixelLabeling
    labels = np.repeat(np.repeat(
        np.arange((grid // 2) ** 2).reshape(grid // 2, grid // 2), 2, 0), 2, 1)
    return SuperpixelLabeling(labels=labels,
                              region_count=int(labels.max()) + 1)


def test_annotator_clicks_component_centroids():
    ds = grid_dataset()
    lab = uniform_labeling(8)
    cands = [FakeCandidate("g0", lab), FakeCandidate("g1", lab)]
    policy = SimulatedAnnotatorPolicy(overlap_threshold=0.25)
    anns = simulate_annotations(cands, policy, ds, grid_size=8)

    # image 0: target centroid at pixel (0.5, 0.5), scale 1 -> click (0.5, 0.5)
    assert anns[0].positive_points == [(0.5, 0.5)]
    # image 1: one click per component
    assert sorted(anns[1].positive_points) == [(0.5, 0.5), (6.5, 6.5)]


def test_annotator_marks_overlapping_regions():
    ds = grid_dataset()
    lab = uniform_labeling(8)
    cands = [FakeCandidate("g0", lab)]
    policy = SimulatedAnnotatorPolicy(overlap_threshold=0.25)
    anns = simulate_annotations(cands, policy, ds, grid_size=8)
    # distractor block covers exactly one 2x2 superpixel (bottom-right)
    expected = int(lab.labels[7, 7])
    assert anns[0].negative_regions == [expected]
    assert anns[0].display_size == (8, 8)


def test_annotator_skip_prob_one_clears_everything():
    ds = grid_dataset()
    lab = uniform_labeling(8)
    cands = [FakeCandidate("g0", lab), FakeCandidate("g1", lab)]
    policy = SimulatedAnnotatorPolicy(skip_prob=1.0)
    anns = simulate_annotations(cands, policy, ds, grid_size=8)
    assert all(a.cleared for a in anns)
    assert all(not a.positive_points for a in anns)


def test_annotator_jitter_stays_in_grid():
    ds = grid_dataset()
    lab = uniform_labeling(8)
    cands = [FakeCandidate("g0", lab)]
    policy = SimulatedAnnotatorPolicy(jitter=50.0)
    anns = simulate_annotations(cands, policy, ds, grid_size=8,
                                rng=np.random.default_rng(0))
    for x, y in anns[0].positive_points:
        assert 0 <= x <= 7 and 0 <= y <= 7


def test_annotator_requires_masks():
    ds = grid_dataset()
    ds.target_masks = None
    with pytest.raises(ContractError):
        simulate_annotations([], SimulatedAnnotatorPolicy(), ds, 8)


# -- attention metrics ------------------------------------------------------------


class ConstantCamModel:
    """Stand-in whose Grad-CAM is a fixed map regardless of the image."""

    def __init__(self, cam):
        self.cam = np.asarray(cam, np.float32)


def test_attention_metrics_hand_computed(monkeypatch):
    ds = grid_dataset()
    cam = np.zeros((8, 8), np.float32)
    cam[0, 0] = 1.0  # all mass at the top-left cell

    import attnguide.loop as loop_mod
    monkeypatch.setattr(loop_mod, "grad_cam_batch",
                        lambda model, images, labels:
                        [cam.copy() for _ in range(len(images))])
    monkeypatch.setattr(loop_mod, "upsample_attention",
                        lambda amap, w, h: amap)

    out = compute_attention_metrics(object(), ds, cam_class=1)
    # both images: the whole unit of mass sits inside the target mask
    assert out["attention_in_target"] == pytest.approx(1.0)
    # image 0 is the only one with a distractor mask; no mass lands in it
    assert out["attention_in_distractor"] == pytest.approx(0.0)
    assert out["attention_skipped"] == 0


def test_attention_metrics_skips_degenerate(monkeypatch):
    ds = grid_dataset()
    import attnguide.loop as loop_mod
    monkeypatch.setattr(loop_mod, "grad_cam_batch",
                        lambda model, images, labels:
                        [np.zeros((8, 8), np.float32)
                         for _ in range(len(images))])
    out = compute_attention_metrics(object(), ds, cam_class=1)
    assert out["attention_skipped"] == 2
    assert out["attention_in_target"] == 0.0


def test_attention_metrics_limit(monkeypatch):
    ds = grid_dataset()
    calls = []
    import attnguide.loop as loop_mod

    def fake_cam(model, images, labels):
        calls.append(len(images))
        cam = np.zeros((8, 8), np.float32)
        cam[0, 0] = 1.0
        return [cam for _ in range(len(images))]

    monkeypatch.setattr(loop_mod, "grad_cam_batch", fake_cam)
    monkeypatch.setattr(loop_mod, "upsample_attention",
                        lambda amap, w, h: amap)
    compute_attention_metrics(object(), ds, limit=1, cam_class=1)
    assert sum(calls) == 1


def test_attention_metrics_need_masks():
    ds = grid_dataset()
    ds.target_masks = None
    with pytest.raises(ContractError):
        compute_attention_metrics(object(), ds)


# -- autoloop and report ------------------------------------------------------------


def test_autoloop_records_rounds(tmp_path):
    datasets = tiny_datasets()
    session = autoloop(datasets, tiny_model(), tiny_config(), rounds=2,
                       workdir=str(tmp_path))
    rounds = [m["round"] for m in session.metric_history]
    assert rounds == [0, 1, 2]
    for m in session.metric_history:
        assert 0.0 <= m["accuracy_biased"] <= 1.0
        assert 0.0 <= m["accuracy_decorrelated"] <= 1.0
    assert (tmp_path / "checkpoint_round1.atth").exists()
    assert (tmp_path / "annotations.jsonl").exists()


def test_autoloop_stops_when_pool_exhausted():
    datasets = tiny_datasets()
    config = tiny_config(batch_size=16)
    session = autoloop(datasets, tiny_model(), config, rounds=5)
    assert session.round == 1
    assert session.unlabeled_ids == []


def test_write_report_round_trip(tmp_path):
    history = [{"round": 0, "accuracy_biased": 0.5,
                "accuracy_decorrelated": 0.25, "attention_in_target": 0.1,
                "attention_in_distractor": 0.2, "loss_pos": 0.0,
                "loss_neg": 0.0, "loss_c": 0.0},
               {"round": 1, "accuracy_biased": 0.75,
                "accuracy_decorrelated": 0.5, "loss_pos": 1.5,
                "loss_neg": 0.25, "loss_c": 0.125}]
    path = tmp_path / "report.csv"
    write_report(path, history, "attention")

    import csv
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == REPORT_COLUMNS
    assert rows[1][:3] == ["0", "attention", "0.5"]
    # missing attention columns default to 0.0
    assert rows[2][4] == "0.0"
    assert float(rows[2][6]) == 1.5
    # repr floats make the file byte-stable across runs
    write_report(tmp_path / "again.csv", history, "attention")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()
