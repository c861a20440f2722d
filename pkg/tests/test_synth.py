import numpy as np
import pytest
from scipy import ndimage

from oceseg import PlacementError, ShapeError
from oceseg.synth import (
    SceneSpec,
    build_pseudo_dataset,
    generate_dataset,
    object_template,
    synth_generate,
)


def test_deterministic_in_seed():
    a_img, a_lab = synth_generate(SceneSpec(seed=9))
    b_img, b_lab = synth_generate(SceneSpec(seed=9))
    assert np.array_equal(a_img, b_img) and np.array_equal(a_lab, b_lab)


def test_zero_objects_pure_noise():
    img, lab = synth_generate(SceneSpec(n_objects=0, seed=2))
    assert lab.max() == 0
    assert abs(float(img.mean()) - 0.1) < 0.01


def test_instances_disjoint_inside_canvas_consecutive():
    img, lab = synth_generate(SceneSpec(seed=4))
    ids = np.unique(lab)
    assert np.array_equal(ids, np.arange(0, lab.max() + 1))
    assert lab.max() == 20
    # nothing touches the border
    assert lab[0].max() == 0 and lab[-1].max() == 0
    assert lab[:, 0].max() == 0 and lab[:, -1].max() == 0
    # instances pairwise non-adjacent (placement keeps a gap)
    for ident in range(1, lab.max() + 1):
        m = lab == ident
        grown = ndimage.binary_dilation(m, structure=np.ones((3, 3)))
        assert not np.any(grown & (lab > 0) & ~m)


def test_objects_share_template_pattern():
    img, lab = synth_generate(SceneSpec(seed=5))
    ref = None
    for ident in (1, 2, 3):
        ys, xs = np.where(lab == ident)
        vals = img[0][ys, xs]
        if ref is None:
            ref = vals
        else:
            assert np.array_equal(ref, vals)


def test_labeled_pixels_brighter_than_background():
    img, lab = synth_generate(SceneSpec(seed=6))
    bg_mean = img[0][lab == 0].mean()
    assert img[0][lab > 0].min() > bg_mean


def test_placement_failure_raises():
    with pytest.raises(PlacementError):
        synth_generate(SceneSpec(height=64, width=64, n_objects=50, seed=0))


def test_generate_dataset_distinct_scenes():
    scenes = generate_dataset(SceneSpec(height=96, width=96, n_objects=3,
                                        radius_range=(5, 7)), 3, seed=1)
    assert len(scenes) == 3
    assert not np.array_equal(scenes[0][0], scenes[1][0])


def test_template_support_and_texture():
    values, support = object_template(6.0, 1.2, 0.3)
    assert values.shape == support.shape
    assert np.all(values[~support] == 0)
    assert values[support].min() > 0.3
    # texture varies within the object (position identifiable)
    assert len(np.unique(values[support])) > 0.9 * support.sum()


# ---------------------------------------------------------------------------
# pseudo dataset

def test_pseudo_replaces_overlapped_predictions():
    pred = np.zeros((40, 40), np.int32)
    pred[5:15, 5:15] = 1
    pred[20:30, 20:30] = 2
    ann = np.zeros((40, 40), bool)
    ann[8:13, 8:13] = True
    pseudo, known_bg = build_pseudo_dataset(pred, [ann])
    # object 1 replaced by the annotation, object 2 untouched
    assert set(np.unique(pseudo)) == {0, 1, 2}
    ann_id = pseudo[10, 10]
    assert np.array_equal(pseudo == ann_id, ann)
    kept_id = pseudo[25, 25]
    assert np.array_equal(pseudo == kept_id, pred == 2)


def test_pseudo_no_annotations_identity():
    pred = np.zeros((20, 20), np.int32)
    pred[3:6, 3:6] = 1
    pseudo, known_bg = build_pseudo_dataset(pred, [])
    assert np.array_equal(pseudo, pred)
    assert not known_bg.any()


def test_pseudo_known_background_disc():
    pred = np.zeros((101, 101), np.int32)
    ann = np.zeros((101, 101), bool)
    ann[50, 50] = True
    pseudo, known_bg = build_pseudo_dataset(pred, [ann])
    ys, xs = np.mgrid[0:101, 0:101]
    dist = np.hypot(ys - 50.0, xs - 50.0)
    expect = (dist < 30.0) & (pseudo == 0)
    assert np.array_equal(known_bg, expect)


def test_pseudo_overlapping_annotations_rejected():
    pred = np.zeros((20, 20), np.int32)
    a = np.zeros((20, 20), bool)
    b = np.zeros((20, 20), bool)
    a[3:8, 3:8] = True
    b[6:10, 6:10] = True
    with pytest.raises(ShapeError, match="overlap"):
        build_pseudo_dataset(pred, [a, b])
