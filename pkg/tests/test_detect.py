import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waterflow import ndgrad as G
from waterflow.detect import (GRID, Box, BoxError, DetHead, average_precision, cell_of,
                              decode_and_nms, det_loss, draw_boxes, focal_loss, giou, giou_loss,
                              giou_loss_box, iou, read_boxes_csv, write_boxes_csv)


def T(a):
    return G.Tensor(np.asarray(a, dtype=np.float64))


def logit(p):
    return math.log(p / (1 - p))


def scalar_focal(p, t, alpha=0.25, gamma=2.0):
    pt = p if t == 1 else 1 - p
    pt = min(max(pt, 1e-7), 1 - 1e-7)
    a = alpha if t == 1 else 1 - alpha
    return -a * (1 - pt) ** gamma * math.log(pt)


boxes = st.builds(Box, st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(0.02, 0.6), st.floats(0.02, 0.6))


class TestFocal:
    def test_hand_value(self):
        assert focal_loss(T([logit(0.6)]), np.array([1.0])).item() == pytest.approx(0.020433, abs=1e-6)

    def test_perfect_prediction_is_near_zero(self):
        assert focal_loss(T([40.0, -40.0]), np.array([1.0, 0.0])).item() < 1e-12

    def test_reduces_to_cross_entropy(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=50)
        t = (rng.uniform(size=50) > 0.5).astype(float)
        p = 1 / (1 + np.exp(-x))
        bce = -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))
        # equal class weights: alpha_t = 0.5 everywhere
        assert 2 * focal_loss(T(x), t, alpha=0.5, gamma=0.0).item() == pytest.approx(bce, rel=1e-10)
        # alpha = 1 keeps the positive term only (negatives weigh 1 - alpha)
        got = focal_loss(T(x), t, alpha=1.0, gamma=0.0).item()
        assert got == pytest.approx(-np.mean(t * np.log(p)), rel=1e-10)

    def test_monotone_in_pt(self):
        ps = np.linspace(0.05, 0.95, 19)
        vals = [focal_loss(T([logit(p)]), np.array([1.0])).item() for p in ps]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestGiou:
    def test_hand_value(self):
        g = giou(Box(0.25, 0.25, 0.5, 0.5), Box(0.5, 0.5, 0.5, 0.5))
        assert g == pytest.approx(1 / 7 - 2 / 9, abs=1e-12)
        assert giou_loss_box(Box(0.25, 0.25, 0.5, 0.5), Box(0.5, 0.5, 0.5, 0.5)) == pytest.approx(1.0794, abs=1e-4)

    def test_identical_boxes(self):
        b = Box(0.3, 0.4, 0.2, 0.1)
        assert giou(b, b) == pytest.approx(1.0, abs=1e-15)
        assert giou_loss_box(b, b) == pytest.approx(0.0, abs=1e-15)

    def test_disjoint_limit(self):
        vals = [giou(Box(0, 0, 1, 1), Box(d, d, 1, 1)) for d in (10.0, 100.0, 1e4)]
        assert vals[0] > vals[1] > vals[2] > -1.0
        assert vals[2] == pytest.approx(-1.0, abs=1e-3)

    def test_degenerate_box_rejected(self):
        with pytest.raises(BoxError):
            Box(0.5, 0.5, 0.0, 0.1)
        with pytest.raises(BoxError):
            giou_loss((T([0.5]), T([0.5]), T([0.0]), T([0.1])), np.array([[0.5, 0.5, 0.1, 0.1]]))

    def test_tensor_loss_matches_scalar(self):
        rng = np.random.default_rng(1)
        pred = rng.uniform(0.1, 0.6, size=(5, 4))
        gt = rng.uniform(0.1, 0.6, size=(5, 4))
        got = giou_loss(tuple(T(pred[:, k]) for k in range(4)), gt).item()
        ref = np.mean([giou_loss_box(Box(*p), Box(*g)) for p, g in zip(pred, gt)])
        assert got == pytest.approx(ref, rel=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(a=boxes, b=boxes)
    def test_properties(self, a, b):
        assert giou(a, b) == pytest.approx(giou(b, a), abs=1e-12)
        assert iou(a, b) >= giou(a, b) - 1e-12
        assert -1.0 < giou(a, b) <= 1.0 + 1e-12
        assert 0.0 <= giou_loss_box(a, b) < 2.0


def head_with(cells, grid=GRID, num_classes=3):
    """Head output with confident activations at ``cells`` = [(row, col,
    class, tx, ty, tw, th)] and near-zero objectness elsewhere."""
    out = np.full((1, 5 + num_classes, grid, grid), -20.0)
    out[0, 1 + num_classes:] = 0.0
    for r, c, k, tx, ty, tw, th in cells:
        out[0, 0, r, c] = 20.0
        out[0, 1 + k, r, c] = 20.0
        out[0, 1 + num_classes:, r, c] = (tx, ty, tw, th)
    return out


class TestDecode:
    def test_no_objects(self):
        assert decode_and_nms(head_with([])) == [[]]

    def test_three_separated_activations(self):
        head = head_with([(1, 2, 0, 0.0, 0.0, 0.0, 0.0), (4, 4, 1, 1.0, -1.0, 0.5, 0.0),
                          (7, 0, 2, 0.0, 0.0, 0.0, math.log(2.0))])
        got = sorted(decode_and_nms(head)[0], key=lambda b: b.class_id)
        assert len(got) == 3
        s = 1 / (1 + math.exp(-1.0))
        expected = [(2.5 / 8, 1.5 / 8, 1 / 8, 1 / 8), ((4 + s) / 8, (4 + 1 - s) / 8, math.exp(0.5) / 8, 1 / 8),
                    (0.5 / 8, 7.5 / 8, 1 / 8, 2 / 8)]
        for b, e in zip(got, expected):
            np.testing.assert_allclose([b.cx, b.cy, b.w, b.h], e, atol=1e-12)
            assert b.score == pytest.approx(1.0, abs=1e-8)

    def test_identical_candidates_collapse(self):
        # two neighbouring cells predicting the same box of one class
        head = head_with([(3, 3, 1, 4.0, 0.0, 1.5, 1.5), (3, 4, 1, -4.0, 0.0, 1.5, 1.5)])
        head[0, 0, 3, 4] = 5.0  # slightly lower score for the second
        got = decode_and_nms(head)[0]
        assert len(got) == 1
        assert got[0].score == pytest.approx(1.0, abs=1e-8)

    def test_cell_of_boundary_goes_to_lower_cell(self):
        assert cell_of(0.5, 0.25) == (1, 3)
        assert cell_of(0.0, 1.0) == (7, 0)


class TestDetLoss:
    def test_no_ground_truth(self):
        head = T(np.random.default_rng(2).normal(size=(1, 8, 8, 8)))
        loss, parts = det_loss(head, [[]])
        assert parts["loc"] == 0.0
        obj = focal_loss(G.Tensor(head.data[:, :1]), np.zeros((1, 1, 8, 8))).item()
        cls = focal_loss(G.Tensor(head.data[:, 1:4]), np.zeros((1, 3, 8, 8))).item()
        # no positives: the per-positive normaliser is 1, so cell means become sums
        assert loss.item() == pytest.approx(64 * (obj + cls), rel=1e-12)

    def test_perfect_prediction(self):
        gt = Box(2.5 / 8, 5.5 / 8, 1 / 8, 2 / 8, class_id=2)
        head = head_with([(5, 2, 2, 0.0, 0.0, 0.0, math.log(2.0))])
        loss, _ = det_loss(T(head), [[gt]])
        assert loss.item() < 1e-3

    def test_two_box_scene_matches_scalar_evaluation(self):
        rng = np.random.default_rng(3)
        head = rng.normal(size=(1, 8, 8, 8))
        gts = [Box(0.30, 0.20, 0.20, 0.10, 0), Box(0.70, 0.80, 0.15, 0.30, 2)]
        loss, parts = det_loss(T(head), [gts])
        obj_t = np.zeros((8, 8))
        cls_t = np.zeros((3, 8, 8))
        loc = []
        for b in gts:
            r, c = cell_of(b.cx, b.cy)
            obj_t[r, c] = 1
            cls_t[b.class_id, r, c] = 1
            tx, ty, tw, th = head[0, 4:, r, c]
            pred = Box((c + 1 / (1 + math.exp(-tx))) / 8, (r + 1 / (1 + math.exp(-ty))) / 8,
                       math.exp(tw) / 8, math.exp(th) / 8)
            loc.append(1 - giou(pred, b))
        sig = lambda x: 1 / (1 + math.exp(-x))  # noqa: E731
        obj = np.mean([scalar_focal(sig(head[0, 0, r, c]), obj_t[r, c]) for r in range(8) for c in range(8)])
        cls = np.mean([scalar_focal(sig(head[0, 1 + k, r, c]), cls_t[k, r, c])
                       for k in range(3) for r in range(8) for c in range(8)])
        cla = (obj + cls) * 64 / 2  # normalised by the two matched cells
        assert parts["cla"] == pytest.approx(cla, rel=1e-10)
        assert parts["loc"] == pytest.approx(np.mean(loc), rel=1e-10)
        assert loss.item() == pytest.approx(cla + np.mean(loc), rel=1e-10)

    def test_gradient_reaches_the_image(self):
        det = DetHead(dtype=np.float64)
        img = G.Tensor(np.random.default_rng(4).uniform(size=(1, 3, 64, 64)), requires_grad=True)
        loss, _ = det_loss(det(img), [[Box(0.4, 0.4, 0.2, 0.2, 1)]])
        G.backward(loss)
        assert np.abs(img.grad).max() > 0


class TestAveragePrecision:
    def test_perfect_predictions(self):
        gts = [[Box(0.2, 0.2, 0.1, 0.1, 0), Box(0.6, 0.6, 0.2, 0.2, 1)], [Box(0.5, 0.5, 0.3, 0.3, 2)]]
        preds = [[Box(b.cx, b.cy, b.w, b.h, b.class_id, 1.0) for b in g] for g in gts]
        per_class, m = average_precision(preds, gts)
        assert per_class == {0: 1.0, 1: 1.0, 2: 1.0}
        assert m == 1.0

    def test_no_predictions(self):
        gts = [[Box(0.2, 0.2, 0.1, 0.1, 0)]]
        per_class, m = average_precision([[]], gts)
        assert per_class == {0: 0.0} and m == 0.0

    def test_hand_pr_example(self):
        gt = Box(0.5, 0.5, 0.2, 0.2, 0)
        preds = [[Box(0.5, 0.5, 0.2, 0.2, 0, 0.9), Box(0.1, 0.1, 0.1, 0.1, 0, 0.8)]]
        per_class, m = average_precision(preds, [[gt]])
        assert per_class[0] == 1.0

    def test_class_without_ground_truth_is_excluded(self):
        gts = [[Box(0.5, 0.5, 0.2, 0.2, 1)]]
        preds = [[Box(0.5, 0.5, 0.2, 0.2, 1, 0.9), Box(0.2, 0.2, 0.1, 0.1, 0, 0.9)]]
        per_class, m = average_precision(preds, gts)
        assert set(per_class) == {1} and m == 1.0

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_invariant_to_monotone_score_changes(self, seed):
        rng = np.random.default_rng(seed)
        gts, preds = [], []
        for _ in range(4):
            g = [Box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.3, 2), int(rng.integers(3)))
                 for _ in range(int(rng.integers(1, 4)))]
            p = [Box(b.cx + rng.normal(0, 0.03), b.cy + rng.normal(0, 0.03), b.w, b.h,
                     int(rng.integers(3)), float(rng.uniform(0.01, 1))) for b in g]
            p += [Box(*rng.uniform(0.2, 0.8, 2), 0.1, 0.1, int(rng.integers(3)), float(rng.uniform(0.01, 1)))]
            gts.append(g)
            preds.append(p)
        warped = [[Box(b.cx, b.cy, b.w, b.h, b.class_id, b.score ** 3 * 0.5) for b in p] for p in preds]
        assert average_precision(preds, gts) == average_precision(warped, gts)


def test_box_csv_round_trip(tmp_path):
    rows = [("img_a", Box(0.123456789, 0.5, 0.25, 0.125, 2, 0.75)), ("img_b", Box(0.1, 0.2, 0.3, 0.4, 0, 0.5))]
    write_boxes_csv(tmp_path / "b.csv", rows, with_score=True)
    text = (tmp_path / "b.csv").read_text().splitlines()
    assert text[0] == "image_id,class_id,cx,cy,w,h,score"
    assert text[1] == "img_a,2,0.123457,0.500000,0.250000,0.125000,0.750000"
    back = read_boxes_csv(tmp_path / "b.csv")
    assert back["img_b"][0] == Box(0.1, 0.2, 0.3, 0.4, 0, 0.5)


def test_draw_boxes_outlines_only():
    img = np.zeros((3, 16, 16))
    out = draw_boxes(img, [Box(0.5, 0.5, 0.5, 0.5, 0)])
    assert out[0, 4, 4:12].min() == 1.0 and out[0, 4:12, 4].min() == 1.0
    assert out[:, 6:10, 6:10].max() == 0.0
    assert img.max() == 0.0
