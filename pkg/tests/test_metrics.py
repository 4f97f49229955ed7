import json
import math

import numpy as np
import pytest

from poet.metrics import (
    COCO_K17,
    DEFAULT_THRESHOLDS,
    Detection,
    EvalResult,
    GroundTruthInstance,
    NoVisibleKeypoints,
    OksParams,
    evaluate_detections,
    load_detections_coco,
    load_detections_jsonl,
    oks,
)

P2 = OksParams.uniform(2)


def gt(points, vis=None, area=None):
    points = np.asarray(points, dtype=float)
    vis = np.ones(len(points)) if vis is None else np.asarray(vis, dtype=float)
    return GroundTruthInstance(points, vis, area)


def det(points, score=1.0):
    return Detection(np.asarray(points, dtype=float), score)


def test_oks_identity_is_one():
    pts = [(10.0, 20.0), (30.0, 40.0)]
    assert oks(pts, pts, [2, 2], 25.0, P2) == 1.0


def test_oks_analytic_single_keypoint():
    s, k = 20.0, 0.1
    d = math.sqrt(2.0) * s * k
    value = oks([(d, 0.0)], [(0.0, 0.0)], [2], s, OksParams.uniform(1))
    assert value == pytest.approx(math.exp(-1.0), abs=1e-9)


def test_oks_far_prediction_goes_to_zero():
    assert oks([(1e5, 1e5)], [(0.0, 0.0)], [2], 10.0, OksParams.uniform(1)) < 1e-12


def test_oks_only_visible_counted():
    value = oks([(0.0, 0.0), (999.0, 999.0)], [(0.0, 0.0), (5.0, 5.0)], [2, 0], 10.0, P2)
    assert value == 1.0


def test_oks_requires_visible_and_positive_scale():
    with pytest.raises(NoVisibleKeypoints):
        oks([(0, 0)], [(0, 0)], [0], 10.0, OksParams.uniform(1))
    with pytest.raises(ValueError):
        oks([(0, 0)], [(0, 0)], [2], 0.0, OksParams.uniform(1))


def test_oks_bounds_translation_and_scale_invariance():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = int(rng.integers(1, 6))
        gt_pts = rng.uniform(0, 50, (k, 2))
        pr_pts = gt_pts + rng.normal(0, 3, (k, 2))
        vis = rng.integers(0, 3, k)
        if (vis > 0).sum() == 0:
            vis[0] = 2
        params = OksParams.uniform(k)
        v = oks(pr_pts, gt_pts, vis, 20.0, params)
        assert 0.0 <= v <= 1.0
        shift = rng.uniform(-100, 100, 2)
        assert oks(pr_pts + shift, gt_pts + shift, vis, 20.0, params) == pytest.approx(v, abs=1e-12)
        assert oks(pr_pts * 3, gt_pts * 3, vis, 60.0, params) == pytest.approx(v, abs=1e-12)


def test_oks_monotone_in_distance():
    base = oks([(1.0, 0.0)], [(0.0, 0.0)], [2], 10.0, OksParams.uniform(1))
    farther = oks([(2.0, 0.0)], [(0.0, 0.0)], [2], 10.0, OksParams.uniform(1))
    assert farther < base


def test_coco_constants_shape():
    assert len(COCO_K17) == 17
    assert OksParams.coco17().k == COCO_K17


def test_perfect_detector_all_ones():
    g1 = [gt([(10, 10), (40, 40)]), gt([(100, 100), (150, 160)], area=50 * 60)]
    g2 = [gt([(5, 5), (200, 200)], area=100**2)]
    dets = [[det(g.keypoints) for g in g1], [det(g.keypoints) for g in g2]]
    r = evaluate_detections(dets, [g1, g2], P2)
    assert r.ap == 1.0 and r.ap50 == 1.0 and r.ap75 == 1.0
    assert r.ar == 1.0 and r.ar50 == 1.0 and r.ar75 == 1.0
    assert r.ap_m == 1.0 and r.ap_l == 1.0 and r.ar_m == 1.0 and r.ar_l == 1.0


def test_no_detections_is_zero():
    g = [[gt([(10, 10), (40, 40)])]]
    r = evaluate_detections([[]], g, P2)
    assert r.ap == 0.0 and r.ar == 0.0 and r.ap50 == 0.0


def test_empty_ground_truth_undefined_not_zero():
    r = evaluate_detections([[det([(0, 0), (1, 1)])]], [[]], P2)
    assert all(v is None for v in r.as_dict().values())


def test_two_gts_one_perfect_detection_ap50():
    g = [gt([(10, 10), (40, 40)]), gt([(100, 10), (140, 40)])]
    r = evaluate_detections([[det(g[0].keypoints)]], [g], P2)
    # 101-point interpolation: levels 0.00..0.50 see precision 1, the rest 0
    assert r.ap50 == pytest.approx(51 / 101, abs=1e-12)
    assert r.ar50 == pytest.approx(0.5, abs=1e-12)


def test_threshold_monotonicity():
    rng = np.random.default_rng(9)
    gts = []
    dets = []
    for _ in range(6):
        g = [gt(rng.uniform(0, 80, (3, 2))) for _ in range(2)]
        d = [det(x.keypoints + rng.normal(0, 2.0, (3, 2)), rng.uniform(0.3, 1.0)) for x in g]
        gts.append(g)
        dets.append(d)
    params = OksParams.uniform(3)
    aps = []
    for t in DEFAULT_THRESHOLDS:
        r = evaluate_detections(dets, gts, params, thresholds=[t])
        aps.append(r.ap)
    for lo, hi in zip(aps[1:], aps[:-1]):
        assert lo <= hi + 1e-12


def test_greedy_matcher_one_to_one():
    # two detections near one gt: only one may be a true positive
    g = [gt([(10, 10), (40, 40)])]
    d = [det(g[0].keypoints, 0.9), det(g[0].keypoints + 0.5, 0.8)]
    r = evaluate_detections([d], [g], P2, thresholds=[0.5])
    # one TP then one FP at lower score: precision falls to 1/2 after recall 1.0
    assert r.ar50 == 1.0
    assert r.ap50 == 1.0


def test_duplicate_detections_hurt_precision_before_recall():
    # duplicate has the higher score, so the PR curve starts with a FP
    g = [gt([(10, 10), (40, 40)])]
    d = [det(g[0].keypoints + 30.0, 0.95), det(g[0].keypoints, 0.8)]
    r = evaluate_detections([d], [g], P2, thresholds=[0.5])
    assert r.ap50 == pytest.approx(0.5, abs=1e-9)


def test_size_buckets_select_instances():
    small = gt([(0, 0), (10, 10)])           # area 100
    medium = gt([(100, 0), (150, 50)])       # area 2500
    large = gt([(300, 300), (450, 450)])     # area 22500
    g = [small, medium, large]
    d = [det(medium.keypoints, 0.9)]         # only the medium instance is found
    r = evaluate_detections([d], [g], P2, thresholds=[0.5])
    assert r.ap_m == 1.0
    assert r.ap_l == 0.0
    assert r.ar_m == 1.0 and r.ar_l == 0.0


def test_undefined_bucket_when_no_instances_in_range():
    g = [[gt([(0, 0), (10, 10)])]]  # small only
    r = evaluate_detections([[det(g[0][0].keypoints)]], g, P2)
    assert r.ap_m is None and r.ap_l is None and r.ar_m is None and r.ar_l is None
    assert r.ap == 1.0


def test_provided_area_overrides_proxy():
    g = [[gt([(0, 0), (10, 10)], area=40.0**2)]]  # proxy would say small; annotation says medium
    r = evaluate_detections([[det(g[0][0].keypoints)]], g, P2)
    assert r.ap_m == 1.0 and r.ap_l is None


def test_eval_result_json_and_table():
    r = evaluate_detections([[det([(0, 0), (5, 5)])]], [[gt([(0, 0), (5, 5)])]], P2)
    parsed = json.loads(r.to_json())
    assert parsed["ap"] == 1.0 and parsed["ap_m"] is None
    assert len(EvalResult.table_header().split()) == 10
    assert "----" in r.table_row()


def test_load_detections_jsonl(tmp_path):
    path = tmp_path / "preds.jsonl"
    record = {"preds": [{"pose": [0.5, 0.5, 0.1, -0.1, 1.0], "class_probs": [0.8, 0.2]}]}
    path.write_text(json.dumps(record) + "\n")
    per_image = load_detections_jsonl(str(path), [(200, 100)])
    assert len(per_image) == 1 and len(per_image[0]) == 1
    np.testing.assert_allclose(per_image[0][0].keypoints, [[120.0, 40.0]])
    assert per_image[0][0].score == 0.8


def test_load_detections_jsonl_errors(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        load_detections_jsonl(str(path), [(10, 10)])


def test_load_detections_coco(tmp_path):
    path = tmp_path / "results.json"
    entries = [
        {"image_id": 2, "category_id": 1, "keypoints": [5, 6, 2, 7, 8, 2], "score": 0.7},
        {"image_id": 1, "category_id": 1, "keypoints": [1, 2, 2, 3, 4, 2], "score": 0.9},
        {"image_id": 99, "category_id": 1, "keypoints": [0, 0, 0, 0, 0, 0], "score": 0.1},
    ]
    path.write_text(json.dumps(entries))
    per_image = load_detections_coco(str(path), [1, 2])
    assert len(per_image) == 2
    np.testing.assert_allclose(per_image[0][0].keypoints, [[1, 2], [3, 4]])
    assert per_image[1][0].score == 0.7
