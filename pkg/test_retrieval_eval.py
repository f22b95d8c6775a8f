import csv
import itertools
import json

import numpy as np
import pytest

from mask_utils import encode_mask
from retrieval_eval import (COCO_IOU_THRESHOLDS, GroundTruth, GroundTruthInstance, ScoredInstance,
                            ap_at_iou, average_precision_at_k, coco_map, iou, map_at_k, mean_ap_at_iou,
                            write_report_csv, write_report_json)
from search_errors import EvaluationError, ShapeMismatchError
from seg_kernels import BBox


def oracle_ap(ranking, relevant, k):
    """Term-by-term: precision at each relevant rank, over min(|relevant|, k)."""
    cutoff = len(ranking) if k is None else k
    terms = []
    for i, image in enumerate(ranking[:cutoff], start=1):
        if image in relevant:
            terms.append(sum(1 for other in ranking[:i] if other in relevant) / i)
    normalizer = len(relevant) if k is None else min(len(relevant), k)
    return sum(terms) / normalizer


def box(x0, y0, x1, y1, size=10):
    return BBox(x0, y0, x1, y1, size, size)


def test_ap_examples():
    assert average_precision_at_k(['a', 'b', 'c'], {'a', 'b', 'c'}, 3) == 1.0
    assert average_precision_at_k(['r1', 'n', 'r2'], {'r1', 'r2'}, 3) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision_at_k(['n1', 'n2', 'r'], {'r'}, 2) == 0.0


def test_truncated_normalizer_allows_perfect_score():
    relevant = {f"r{i}" for i in range(30)}
    ranking = sorted(relevant)
    assert average_precision_at_k(ranking, relevant, 10) == 1.0
    assert average_precision_at_k(ranking, relevant, None) == 1.0


def test_ap_errors():
    with pytest.raises(EvaluationError):
        average_precision_at_k(['a'], set(), 1)
    with pytest.raises(EvaluationError):
        average_precision_at_k(['a', 'a'], {'a'}, 2)
    with pytest.raises(EvaluationError):
        average_precision_at_k(['a'], {'a'}, 0)


def test_ap_matches_exhaustive_oracle():
    items = [f"i{n}" for n in range(6)]
    for size in range(1, 7):
        pool = items[:size]
        for relevant_count in range(1, size + 1):
            for relevant in itertools.combinations(pool, relevant_count):
                for ranking in itertools.permutations(pool):
                    for k in (1, 3, size, None):
                        assert average_precision_at_k(list(ranking), relevant, k) == \
                            pytest.approx(oracle_ap(list(ranking), set(relevant), k), abs=1e-12)


@pytest.mark.slow
def test_ap_matches_exhaustive_oracle_eight_items():
    pool = [f"i{n}" for n in range(8)]
    for relevant_count in (1, 3, 8):
        for relevant in itertools.combinations(pool, relevant_count):
            for ranking in itertools.permutations(pool):
                assert average_precision_at_k(list(ranking), relevant, 5) == \
                    pytest.approx(oracle_ap(list(ranking), set(relevant), 5), abs=1e-12)


def test_swapping_relevant_downward_never_helps(rng):
    for _ in range(200):
        ranking = [f"i{n}" for n in rng.permutation(10)]
        relevant = set(ranking[i] for i in rng.choice(10, size=4, replace=False))
        for i in range(9):
            if ranking[i] in relevant and ranking[i + 1] not in relevant:
                swapped = ranking[:i] + [ranking[i + 1], ranking[i]] + ranking[i + 2:]
                for k in (3, 5, None):
                    assert average_precision_at_k(swapped, relevant, k) <= \
                        average_precision_at_k(ranking, relevant, k) + 1e-12


def test_map_examples():
    gt = GroundTruth.from_mapping({'q1': {'a'}, 'q2': {'b', 'c'}})
    single = map_at_k({'q1': ['a', 'x']}, gt, ks=[10], query_ids=['q1'])
    assert single.mean_ap['10'] == 1.0

    rankings = {'q1': ['x', 'y', 'z', 'w', 'a'], 'q2': ['b', 'c']}
    report = map_at_k(rankings, gt, ks=[10, None])
    assert report.per_query['q1']['10'] == pytest.approx(0.2)
    assert report.mean_ap['10'] == pytest.approx(0.6)
    assert report.mean_ap['all'] == pytest.approx(0.6)


def test_map_is_permutation_invariant_and_matches_reference(rng):
    queries = {f"q{n}": {f"img{m}" for m in rng.choice(30, size=int(rng.integers(1, 8)), replace=False)}
               for n in range(5)}
    rankings = {q: [f"img{m}" for m in rng.permutation(30)] for q in queries}
    gt = GroundTruth.from_mapping(queries)
    report = map_at_k(rankings, gt, ks=[10, 20, None])
    reversed_report = map_at_k(dict(reversed(list(rankings.items()))), gt, ks=[10, 20, None])
    assert report.mean_ap == reversed_report.mean_ap
    for k, label in ((10, '10'), (20, '20'), (None, 'all')):
        reference = np.mean([oracle_ap(rankings[q], queries[q], k) for q in queries])
        assert report.mean_ap[label] == pytest.approx(reference, abs=1e-9)


def test_map_missing_ranking_names_query():
    gt = GroundTruth.from_mapping({'q1': {'a'}, 'q2': {'b'}})
    with pytest.raises(EvaluationError) as info:
        map_at_k({'q1': ['a']}, gt)
    assert info.value.context['query_id'] == 'q2'


def test_ground_truth_rejects_empty_sets():
    with pytest.raises(EvaluationError):
        GroundTruth.from_mapping({'q': []})


def test_report_writers(tmp_path):
    gt = GroundTruth.from_mapping({'q2': {'a'}, 'q1': {'b'}})
    report = map_at_k({'q1': ['b'], 'q2': ['x', 'a']}, gt, ks=[10, 20, 50, 100, None], timings={'q1': 0.5})
    write_report_json(report, tmp_path / 'r.json')
    write_report_csv(report, tmp_path / 'r.csv')
    data = json.loads((tmp_path / 'r.json').read_text())
    assert data['ks'] == ['10', '20', '50', '100', 'all']
    assert 'timings' not in data
    rows = list(csv.reader((tmp_path / 'r.csv').open()))
    assert rows[0] == ['query_id', 'k', 'ap']
    assert len(rows) - 1 == 2 * 5
    assert [row[0] for row in rows[1:]] == ['q1'] * 5 + ['q2'] * 5


def test_iou_boxes():
    assert iou(box(0, 0, 2, 2), box(0, 0, 2, 2)) == 1.0
    assert iou(box(0, 0, 2, 2), box(5, 5, 6, 6)) == 0.0
    assert iou(box(0, 0, 2, 2), box(1, 0, 3, 2)) == pytest.approx(1 / 3)
    with pytest.raises(EvaluationError):
        iou(box(1, 1, 1, 1), box(2, 2, 2, 2))
    with pytest.raises(ShapeMismatchError):
        iou(box(0, 0, 1, 1), BBox(0, 0, 1, 1, 20, 20))


def test_iou_masks_and_rle():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[:, :2] = True
    b[:, 1:3] = True
    assert iou(a, b) == pytest.approx(4 / 12)
    assert iou(encode_mask(a), encode_mask(b)) == pytest.approx(4 / 12)
    with pytest.raises(EvaluationError):
        iou(np.zeros((2, 2), dtype=bool), np.zeros((2, 2), dtype=bool))


def test_ap_at_iou_examples():
    gt = {'img': [box(0, 0, 4, 4)]}
    exact = {'img': [ScoredInstance(box(0, 0, 4, 4), 0.9)]}
    for threshold in COCO_IOU_THRESHOLDS:
        assert ap_at_iou(exact, gt, threshold) == 1.0

    false_box = ScoredInstance(box(6, 6, 9, 9), 0.5)
    assert ap_at_iou({'img': [ScoredInstance(box(0, 0, 4, 4), 0.9), false_box]}, gt, 0.5) == 1.0
    assert ap_at_iou({'img': [ScoredInstance(box(0, 0, 4, 4), 0.1), false_box]}, gt, 0.5) == 0.5

    # IoU 0.6 fails a 0.7 threshold
    partial = {'img': [ScoredInstance(box(0, 0, 4, 2.4), 0.9)]}
    assert iou(box(0, 0, 4, 2.4), box(0, 0, 4, 4)) == pytest.approx(0.6)
    assert ap_at_iou(partial, gt, 0.7) == 0.0


def test_ap_at_iou_matches_each_ground_truth_once():
    gt = {'img': [box(0, 0, 4, 4)]}
    duplicate = {'img': [ScoredInstance(box(0, 0, 4, 4), 0.9), ScoredInstance(box(0, 0, 4, 4), 0.8)]}
    assert ap_at_iou(duplicate, gt, 0.5) == 1.0
    missed = {'other': [ScoredInstance(box(0, 0, 4, 4), 0.9)]}
    assert ap_at_iou(missed, {'img': [box(0, 0, 4, 4)], 'other': []}, 0.5) == 0.0


def test_ap_at_iou_invariant_to_monotone_rescaling(rng):
    gt = {f"img{n}": [box(0, 0, 5, 5), box(5, 5, 10, 10)] for n in range(4)}
    detections = {}
    for image in gt:
        detections[image] = []
        for _ in range(3):
            (x0, x1), (y0, y1) = np.sort(rng.uniform(0, 10, size=(2, 2)), axis=1)
            detections[image].append(ScoredInstance(box(x0, y0, x1, y1), float(rng.random())))
        detections[image].append(ScoredInstance(box(0, 0, 5, 5), float(rng.random())))
    rescaled = {image: [ScoredInstance(d.region, 3 * d.score ** 3 + 1) for d in dets]
                for image, dets in detections.items()}
    assert ap_at_iou(rescaled, gt, 0.5) == ap_at_iou(detections, gt, 0.5)


def test_ap_at_iou_errors():
    with pytest.raises(EvaluationError):
        ap_at_iou({}, {'img': []}, 0.5)
    with pytest.raises(EvaluationError):
        ap_at_iou({}, {'img': [box(0, 0, 1, 1)]}, 1.0)


def test_coco_map_reports_table_shapes():
    gt = {'img': [GroundTruthInstance(box(0, 0, 4, 4), 1), GroundTruthInstance(box(5, 5, 9, 9), 2)]}
    dets = {'img': [ScoredInstance(box(0, 0, 4, 4), 0.9, 1), ScoredInstance(box(5, 5, 9, 8), 0.8, 2)]}
    result = coco_map(dets, gt)
    assert set(result) == {'mAP@0.5', 'mAP@0.7', 'mAP@[0.5:0.95]'}
    # category 2 has IoU 0.75: matched up to 0.75, missed above
    assert result['mAP@0.5'] == 1.0
    assert result['mAP@0.7'] == 1.0
    assert mean_ap_at_iou(dets, gt, 0.8) == 0.5
    assert result['mAP@[0.5:0.95]'] == pytest.approx((6 * 1.0 + 4 * 0.5) / 10)
