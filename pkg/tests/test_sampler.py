import numpy as np
import pytest

from cascadeface.errors import ConfigError, SamplingError
from cascadeface.geometry import BoundingBox, iou
from cascadeface.sampler import (
    Face, Label, Proposal, SampleSet, augment_fill, flip_landmarks, generate_proposals,
    keep_count, label_from_iou, label_proposal, ohem_select,
)
from cascadeface.synth import render_scene


def test_label_examples():
    gt = BoundingBox(0, 0, 10, 10)
    # IoU 0.8: 8x10 box inside the gt
    assert label_proposal(BoundingBox(0, 0, 8, 10), [gt])[0] == Label.POSITIVE
    assert label_from_iou(0.5) == Label.PART
    assert label_proposal(gt, []) == (Label.NEGATIVE, None)


def test_label_boundaries_are_part_face():
    assert label_from_iou(0.3) == Label.PART
    assert label_from_iou(0.7) == Label.PART
    assert label_from_iou(np.nextafter(0.3, 0)) == Label.NEGATIVE
    assert label_from_iou(np.nextafter(0.7, 1)) == Label.POSITIVE


def test_label_matches_argmax_gt():
    gts = [BoundingBox(0, 0, 10, 10), BoundingBox(50, 50, 10, 10)]
    label, matched = label_proposal(BoundingBox(51, 50, 10, 10), gts)
    assert label == Label.POSITIVE and matched == gts[1]


def test_ohem_examples():
    assert ohem_select([1.0, 2.0, 3.0], 1.0).all()
    assert ohem_select([3, 1, 2, 0], 0.5).tolist() == [True, False, True, False]
    assert ohem_select(np.ones(10), 0.7).tolist() == [True] * 7 + [False] * 3


def test_ohem_rejects_bad_fraction():
    for kf in (0.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            ohem_select([1.0], kf)


def test_keep_count():
    assert keep_count(64, 0.7) == 45
    assert keep_count(10, 0.7) == 7
    assert keep_count(1, 0.01) == 1


def _scene():
    return render_scene(11, 160, 120, faces_per_image=(2, 2))


def test_no_faces_only_negatives():
    img = np.full((60, 80, 3), 90, np.uint8)
    props = generate_proposals(img, [], (5, 5, 5, 5), 0)
    assert len(props) == 5 and all(p.label == Label.NEGATIVE for p in props)


def test_proposals_respect_counts_and_labels():
    scene = _scene()
    gts = [f.box for f in scene.faces]
    props = generate_proposals(scene.image, scene.faces, (32, 16, 8, 8), 1, size=24)
    per = {label: sum(p.label == label for p in props) for label in Label}
    for label, cap in zip(Label, (32, 16, 8, 8)):
        assert per[label] <= cap
    for p in props:
        assert p.patch.shape == (3, 24, 24)
        if p.label == Label.LANDMARK:
            assert p.landmarks.shape == (10,)
            assert np.all((p.landmarks >= 0) & (p.landmarks <= 1))
            continue
        best = max(iou(p.box, g) for g in gts)
        if p.label == Label.NEGATIVE:
            assert best < 0.3
        elif p.label == Label.POSITIVE:
            assert iou(p.box, p.matched) > 0.7
        else:
            assert 0.3 <= iou(p.box, p.matched) <= 0.7


def test_proposals_deterministic():
    scene = _scene()
    a = generate_proposals(scene.image, scene.faces, (8, 4, 4, 4), 5)
    b = generate_proposals(scene.image, scene.faces, (8, 4, 4, 4), 5)
    assert [(p.box, p.label) for p in a] == [(p.box, p.label) for p in b]
    assert all(np.array_equal(x.patch, y.patch) for x, y in zip(a, b))


def test_tiny_image_skipped():
    stats = {}
    assert generate_proposals(np.zeros((8, 8, 3), np.uint8), [], (1, 0, 0, 0), 0,
                              stats=stats) == []
    assert stats["skipped"] == 1


def test_flip_landmarks_manual():
    lm = np.array([0.3, 0.4, 0.7, 0.41, 0.5, 0.6, 0.35, 0.8, 0.65, 0.82])
    expected = np.array([1 - 0.7, 0.41, 1 - 0.3, 0.4, 0.5, 0.6, 1 - 0.65, 0.82, 1 - 0.35, 0.8])
    np.testing.assert_allclose(flip_landmarks(lm), expected)
    np.testing.assert_allclose(flip_landmarks(flip_landmarks(lm)), lm)


def test_augment_fill_unchanged_when_enough():
    scene = _scene()
    props = generate_proposals(scene.image, scene.faces, (10, 0, 0, 0), 2)
    out = augment_fill(props, 4, 0)
    assert out == props[:4]


def test_augment_fill_counts_and_labels():
    scene = _scene()
    hard = generate_proposals(scene.image, scene.faces, (20, 10, 5, 5), 3, size=24)[:40]
    out = augment_fill(hard, 64, 7)
    assert len(out) == 64
    assert out[:len(hard)] == hard
    for p in out[len(hard):]:
        assert p.patch.shape == (3, 24, 24)
        if p.matched is not None and p.label != Label.LANDMARK:
            assert label_from_iou(iou(p.box, p.matched)) == p.label
        if p.label == Label.LANDMARK:
            assert np.all((p.landmarks >= 0) & (p.landmarks <= 1))


def test_augment_fill_empty():
    with pytest.raises(SamplingError):
        augment_fill([], 3, 0)
    assert augment_fill([], 0, 0) == []


def test_flipped_landmark_proposal_mirrors_patch():
    img = np.random.default_rng(0).integers(0, 256, (40, 40, 3)).astype(np.uint8)
    lm = np.array([[12, 15], [26, 15], [20, 20], [14, 28], [26, 28]], float)
    face = Face(BoundingBox(8, 8, 24, 24), lm)
    props = generate_proposals(img, [face], (0, 0, 0, 1), 0, size=24)
    rng = np.random.default_rng(3)
    for _ in range(30):
        out = augment_fill(props, 2, rng)[1]
        if out.flipped:
            # left/right eyes swap, so the new "left eye" is the mirrored right eye
            assert out.landmarks[0] < 0.5 < out.landmarks[2]
            break
    else:
        pytest.fail("no flipped copy produced")


def test_sample_set_labels_mask():
    scene = _scene()
    props = generate_proposals(scene.image, scene.faces, (6, 4, 4, 4), 4)
    data = SampleSet.from_proposals(props, 12)
    lab = data.labels(("pts",))
    assert not lab.mask[:, :2].any()
    assert np.array_equal(lab.mask[:, 2], data.kind == Label.LANDMARK)
    full = data.labels()
    full.validate()
    pos = data.kind == Label.POSITIVE
    assert full.mask[pos, 0].all() and full.mask[pos, 1].all()


def test_proposal_reg_target():
    p = Proposal(BoundingBox(0, 0, 10, 10), Label.POSITIVE, BoundingBox(1, 2, 10, 10))
    np.testing.assert_allclose(p.reg_target, [0.1, 0.2, 0, 0])
    assert Proposal(BoundingBox(0, 0, 1, 1), Label.NEGATIVE).reg_target is None
