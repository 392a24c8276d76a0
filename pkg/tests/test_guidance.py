"""Click-loss semantics, superpixel segmentation, and fine-tune step tests.

The segmentation oracle is an independent straight-line Felzenszwalb
implementation (sorted edges, per-component threshold k/|C|, then min-size
merging) compared up to label renaming.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnguide import tensor as T
from attnguide.errors import ContractError, DegenerateMapError
from attnguide.guidance import (Annotation, GuidanceConfig, GuidanceTarget,
                                attention_barycenter, combined_loss,
                                display_to_grid, fine_tune_step,
                                negative_loss, positive_loss,
                                segment_superpixels)
from attnguide.model import AttentionMap, ClassifierConfig, build_classifier, \
    grad_cam_batch


def amap(values):
    return AttentionMap(np.asarray(values, dtype=np.float32))


# -- barycenter ------------------------------------------------------------


def test_barycenter_symmetric_map():
    values = np.zeros((7, 7), np.float32)
    values[3, 3] = 1.0
    values[[0, 6], [0, 6]] = 0.5
    assert attention_barycenter(amap(values)) == (3.0, 3.0)


def test_barycenter_single_cell():
    values = np.zeros((8, 8), np.float32)
    values[5, 2] = 0.7  # row y=5, column x=2
    assert attention_barycenter(amap(values)) == (2.0, 5.0)


def test_barycenter_two_spikes_midpoint():
    values = np.zeros((7, 7), np.float32)
    values[0, 0] = values[6, 6] = 1.0
    assert attention_barycenter(amap(values)) == (3.0, 3.0)


def test_barycenter_all_zero_raises():
    with pytest.raises(DegenerateMapError):
        attention_barycenter(amap(np.zeros((4, 4))))


# -- positive loss ---------------------------------------------------------


def test_positive_loss_zero_on_coincidence():
    values = np.zeros((7, 7), np.float32)
    values[3, 3] = 1.0
    loss, flagged = positive_loss(amap(values), [(3.0, 3.0)])
    assert flagged and loss <= 1e-6


def test_positive_loss_zero_for_click_mean():
    values = np.zeros((7, 7), np.float32)
    values[3, 3] = 1.0
    loss, _ = positive_loss(amap(values), [(1.0, 3.0), (5.0, 3.0)])
    assert loss <= 1e-6


def test_positive_loss_3_4_5_triangle():
    values = np.zeros((8, 8), np.float32)
    values[0, 0] = 1.0  # barycenter (0, 0)
    loss, _ = positive_loss(amap(values), [(3.0, 4.0)])
    assert loss == pytest.approx(5.0, abs=1e-6)


def test_positive_loss_no_clicks_is_flagged_zero():
    loss, flagged = positive_loss(amap(np.ones((4, 4))), [])
    assert (loss, flagged) == (0.0, False)


def test_positive_loss_nonzero_iff_mismatch():
    values = np.zeros((5, 5), np.float32)
    values[2, 2] = 1.0
    loss, _ = positive_loss(amap(values), [(2.0, 1.0)])
    assert loss > 1e-6


def test_positive_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    base = rng.uniform(0.1, 1.0, size=(5, 5)).astype(np.float32)
    from attnguide.guidance import positive_loss_t
    x = T.Tensor(base, requires_grad=True)
    err = T.grad_check(lambda t: positive_loss_t(t, [(1.0, 3.0)]), x, eps=5e-3)
    assert err < 1e-4


# -- segmentation ----------------------------------------------------------


def reference_felzenszwalb(values, k, min_size):
    """Independent FH segmentation oracle (union-find over sorted edges)."""
    h, w = values.shape
    n = h * w
    parent = list(range(n))
    size = [1] * n
    thresh = [k] * n

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            size[rb] += size[ra]
        return rb

    edges = []
    flat = values.reshape(-1).astype(np.float64)
    for y in range(h):
        for x in range(w):
            i = y * w + x
            if x + 1 < w:
                edges.append((abs(flat[i] - flat[i + 1]), i, i + 1))
            if y + 1 < h:
                edges.append((abs(flat[i] - flat[i + w]), i, i + w))
    edges.sort()
    for wgt, a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb and wgt <= min(thresh[ra], thresh[rb]):
            r = union(a, b)
            thresh[r] = wgt + k / size[r]
    for wgt, a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            union(a, b)
    roots = [find(i) for i in range(n)]
    remap = {}
    return np.array([remap.setdefault(r, len(remap)) for r in roots]
                    ).reshape(h, w)


def same_partition(a, b):
    """True when two label grids induce identical partitions."""
    a, b = np.asarray(a).reshape(-1), np.asarray(b).reshape(-1)
    fwd, bwd = {}, {}
    for x, y in zip(a.tolist(), b.tolist()):
        if fwd.setdefault(x, y) != y or bwd.setdefault(y, x) != x:
            return False
    return True


def test_constant_map_single_region():
    lab = segment_superpixels(amap(np.full((6, 6), 0.4)), k=0.05, min_size=2)
    assert lab.region_count == 1
    assert (lab.labels == 0).all()


def test_half_split_two_regions():
    values = np.zeros((6, 6), np.float32)
    values[:, 3:] = 1.0
    lab = segment_superpixels(amap(values), k=0.01, min_size=2)
    assert lab.region_count == 2
    assert same_partition(lab.labels, values > 0.5)


def test_min_size_total_merges_everything():
    rng = np.random.default_rng(1)
    values = rng.random((5, 5)).astype(np.float32)
    lab = segment_superpixels(amap(values), k=0.01, min_size=25)
    assert lab.region_count == 1


@pytest.mark.parametrize("seed", range(6))
def test_segmentation_matches_reference(seed):
    rng = np.random.default_rng([seed, 9])
    # quantized values create plateaus and exercise tie-breaking
    values = (rng.integers(0, 4, size=(8, 8)) / 4.0).astype(np.float32)
    lab = segment_superpixels(amap(values), k=0.05, min_size=2)
    ref = reference_felzenszwalb(values, k=0.05, min_size=2)
    assert same_partition(lab.labels, ref)


def test_segmentation_deterministic():
    rng = np.random.default_rng(4)
    values = rng.random((8, 8)).astype(np.float32)
    a = segment_superpixels(amap(values))
    b = segment_superpixels(amap(values))
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.region_count == b.region_count


def test_segmentation_labels_contiguous_and_connected():
    rng = np.random.default_rng(5)
    values = (rng.integers(0, 3, size=(8, 8)) / 2.0).astype(np.float32)
    lab = segment_superpixels(amap(values), k=0.02, min_size=2)
    assert sorted(np.unique(lab.labels)) == list(range(lab.region_count))
    from attnguide.loop import mask_components
    for rid in range(lab.region_count):
        assert len(mask_components(lab.labels == rid)) == 1


# -- negative loss ---------------------------------------------------------


def checkerboard_labeling():
    values = np.zeros((4, 4), np.float32)
    values[:, 2:] = 1.0
    values[:2, :] += 0.5
    return segment_superpixels(amap(values), k=0.01, min_size=2)


def test_negative_loss_empty_regions_zero():
    lab = checkerboard_labeling()
    assert negative_loss(amap(np.ones((4, 4))), lab, []) == 0.0


def test_negative_loss_all_regions_total_mass():
    lab = checkerboard_labeling()
    rng = np.random.default_rng(2)
    values = rng.random((4, 4)).astype(np.float32)
    total = negative_loss(amap(values), lab, list(range(lab.region_count)))
    assert total == pytest.approx(float(values.sum()), rel=1e-6)


def test_negative_loss_additive_over_disjoint_regions():
    lab = checkerboard_labeling()
    rng = np.random.default_rng(3)
    values = rng.random((4, 4)).astype(np.float32)
    ids = list(range(lab.region_count))
    a, b = ids[:1], ids[1:]
    assert negative_loss(amap(values), lab, a + b) == pytest.approx(
        negative_loss(amap(values), lab, a)
        + negative_loss(amap(values), lab, b), rel=1e-6)


def test_negative_loss_unknown_region():
    lab = checkerboard_labeling()
    with pytest.raises(ContractError):
        negative_loss(amap(np.ones((4, 4))), lab, [lab.region_count + 3])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 15), st.floats(0.0, 2.0))
def test_negative_loss_monotone_under_increase(cell, bump):
    lab = checkerboard_labeling()
    rng = np.random.default_rng(6)
    values = rng.random((4, 4)).astype(np.float32)
    region = int(lab.labels[cell // 4, cell % 4])
    before = negative_loss(amap(values), lab, [region])
    values[cell // 4, cell % 4] += np.float32(bump)
    after = negative_loss(amap(values), lab, [region])
    assert after >= before - 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), unique=True, min_size=0, max_size=4))
def test_negative_loss_additivity_property(ids):
    lab = checkerboard_labeling()
    ids = [i for i in ids if i < lab.region_count]
    rng = np.random.default_rng(7)
    values = rng.random((4, 4)).astype(np.float32)
    total = negative_loss(amap(values), lab, ids)
    parts = sum(negative_loss(amap(values), lab, [i]) for i in ids)
    assert total == pytest.approx(parts, abs=1e-5)


def test_negative_loss_gradient_matches_finite_differences():
    from attnguide.guidance import negative_loss_t
    lab = checkerboard_labeling()
    rng = np.random.default_rng(8)
    x = T.Tensor(rng.random((4, 4)).astype(np.float32), requires_grad=True)
    err = T.grad_check(lambda t: negative_loss_t(t, lab, [0]), x, eps=5e-3)
    assert err < 1e-4


# -- combined loss ---------------------------------------------------------


def test_combined_loss_default_weights():
    cfg = GuidanceConfig()
    assert (cfg.w_g, cfg.w_c) == (0.75, 0.25)
    assert combined_loss(2.0, 1.0, 1.0, cfg) == pytest.approx(2.0)


def test_combined_loss_zero_guidance_weight():
    cfg = GuidanceConfig(w_g=0.0, w_c=0.25)
    assert combined_loss(3.0, 9.0, 9.0, cfg) == pytest.approx(0.75)


def test_combined_loss_no_guidance_terms():
    cfg = GuidanceConfig()
    assert combined_loss(4.0, 0.0, 0.0, cfg) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5))
def test_combined_loss_affine_exactly(c, p, n):
    cfg = GuidanceConfig()
    assert combined_loss(c, p, n, cfg) == pytest.approx(
        0.75 * (p + n) + 0.25 * c, rel=1e-9)


# -- coordinate mapping ----------------------------------------------------


def test_display_to_grid_proportional_floor():
    # 256x256 display over a 16x16 grid: (128, 64) -> (8, 4)
    assert display_to_grid((128, 64), (256, 256), 16, 16) == (8, 4)


def test_display_to_grid_clamps_edge():
    gx, gy = display_to_grid((255, 255), (256, 256), 16, 16)
    assert (gx, gy) == (15, 15)


# -- fine-tune step --------------------------------------------------------


def small_setup(seed=0):
    config = ClassifierConfig(input_size=8, channels=1, blocks=[(4, 2)],
                              num_classes=2)
    model = build_classifier(config, seed=seed)
    rng = np.random.default_rng(seed)
    images = rng.random((4, 1, 8, 8)).astype(np.float32)
    labels = np.array([0, 1, 0, 1])
    return model, images, labels


def test_fine_tune_all_empty_matches_plain_classification():
    cfg = GuidanceConfig()
    targets = [GuidanceTarget() for _ in range(4)]

    model_a, images, labels = small_setup(1)
    fine_tune_step(model_a, images, labels, targets, cfg, lr=0.01)

    from attnguide.model import classification_loss
    model_b, _, _ = small_setup(1)
    logits, _, _ = model_b.forward(images)
    loss = T.mul(classification_loss(logits, labels, 2), cfg.w_c)
    model_b.zero_grad()
    loss.backward()
    T.clip_grad_norm(model_b.parameters(), 3.0)
    T.sgd_step(model_b.parameters(), 0.01)

    for k in model_a.params:
        np.testing.assert_allclose(model_a.params[k].data,
                                   model_b.params[k].data, atol=1e-7)


def test_fine_tune_negative_region_reduces_attention_mass():
    model, images, labels = small_setup(2)
    maps = grad_cam_batch(model, images, [1] * 4)
    assert maps[0].max() > 0
    whole = np.ones((8, 8), dtype=bool)
    targets = [GuidanceTarget(negative_mask=whole)] + \
        [GuidanceTarget() for _ in range(3)]
    cfg = GuidanceConfig(w_g=0.75, w_c=0.0)
    before = float(grad_cam_batch(model, images[:1], [1])[0].sum())
    fine_tune_step(model, images, labels, targets, cfg, lr=0.05, cam_class=1)
    after = float(grad_cam_batch(model, images[:1], [1])[0].sum())
    assert after < before


def test_fine_tune_lr_zero_keeps_parameters():
    model, images, labels = small_setup(3)
    before = {k: v.data.copy() for k, v in model.params.items()}
    targets = [GuidanceTarget(positive_points=[(2.0, 2.0)])
               for _ in range(4)]
    fine_tune_step(model, images, labels, targets, GuidanceConfig(), lr=0.0,
                   cam_class=1)
    for k, v in model.params.items():
        assert v.data.tobytes() == before[k].tobytes()


def test_fine_tune_reports_loss_breakdown():
    model, images, labels = small_setup(4)
    targets = [GuidanceTarget(positive_points=[(1.0, 1.0)],
                              negative_mask=np.eye(8, dtype=bool))
               for _ in range(4)]
    breakdown = fine_tune_step(model, images, labels, targets,
                               GuidanceConfig(), lr=0.01, cam_class=1)
    assert breakdown.total > 0
    assert breakdown.loss_c > 0
    assert breakdown.loss_pos >= 0
    assert breakdown.loss_neg >= 0


def test_fine_tune_nan_input_raises_training_error():
    from attnguide.errors import TrainingError
    model, images, labels = small_setup(5)
    model.params["fc_w"].data[:] = np.nan
    targets = [GuidanceTarget() for _ in range(4)]
    with pytest.raises(TrainingError, match="non-finite"):
        fine_tune_step(model, images, labels, targets, GuidanceConfig(),
                       lr=0.01)


# -- annotation round trip ---------------------------------------------------


def test_annotation_json_round_trip():
    ann = Annotation(image_id="img-7", positive_points=[(1.5, 2.0)],
                     negative_regions=[0, 3], cleared=False,
                     display_size=(256, 256), timestamp=123.5)
    back = Annotation.from_json_dict(ann.to_json_dict())
    assert back.image_id == ann.image_id
    assert back.positive_points == ann.positive_points
    assert back.negative_regions == ann.negative_regions
    assert back.cleared == ann.cleared
    assert tuple(back.display_size) == ann.display_size
