import math

import numpy as np
import pytest

from app.errors import ContractError, UndefinedMetricError
from app.metrics import auprc, curve_area, pr_curve


def test_perfect_ranking():
    assert auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_known_value():
    """Test AP on an interleaved ranking"""
    value = auprc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    assert math.isclose(value, (1.0 + 2.0 / 3.0) / 2)


def test_tied_scores_share_a_threshold():
    """Test ties are admitted together regardless of order"""
    value = auprc([0.5, 0.5, 0.2], [1, 0, 1])
    assert math.isclose(value, (0.5 + 2.0 / 3.0) / 2)
    assert auprc([0.5, 0.5, 0.2], [0, 1, 1]) == value


def test_constant_scores_give_prevalence():
    labels = [1, 0, 0, 0, 1, 0, 0, 0, 0, 0]
    assert math.isclose(auprc(np.full(10, 0.3), labels), 0.2)


def test_pr_curve():
    """Test points run from the highest threshold to full recall"""
    points = pr_curve([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    assert [p[2] for p in points] == [0.9, 0.8, 0.7, 0.6]
    assert points[0][:2] == (1.0, 0.5)
    assert points[-1][1] == 1.0
    assert math.isclose(curve_area(points), auprc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]))


def test_curve_area_matches_auprc_on_random_scores():
    rng = np.random.default_rng(0)
    scores = rng.random(200).round(2)
    labels = (rng.random(200) < 0.3).astype(int)
    assert math.isclose(curve_area(pr_curve(scores, labels)), auprc(scores, labels))


def test_invalid_inputs():
    with pytest.raises(UndefinedMetricError):
        auprc([0.1, 0.2], [0, 0])
    with pytest.raises(ContractError):
        auprc([0.1, 0.2], [0, 1, 1])
    with pytest.raises(ContractError):
        auprc([], [])
    with pytest.raises(ContractError):
        auprc([0.1, float("nan")], [0, 1])
    with pytest.raises(ContractError):
        auprc([0.1, 0.2], [0, 2])


def threshold_average_precision(scores, labels):
    """AP by admitting every score >= t for each distinct t, highest first"""
    n_pos = sum(labels)
    area, previous_recall = 0.0, 0.0
    for threshold in sorted(set(scores), reverse=True):
        admitted = [label for score, label in zip(scores, labels) if score >= threshold]
        recall = sum(admitted) / n_pos
        area += (recall - previous_recall) * sum(admitted) / len(admitted)
        previous_recall = recall
    return area


def random_instances(count, seed):
    rng = np.random.default_rng(seed)
    made = 0
    while made < count:
        n = int(rng.integers(1, 13))
        labels = rng.integers(0, 2, n).tolist()
        if sum(labels) == 0:
            continue
        # one decimal place makes ties common
        scores = rng.random(n).round(1).tolist()
        made += 1
        yield scores, labels


def test_auprc_matches_threshold_enumeration():
    for scores, labels in random_instances(500, seed=1):
        assert abs(auprc(scores, labels) - threshold_average_precision(scores, labels)) <= 1e-9


@pytest.mark.parametrize("transform", [np.exp, lambda s: 3.0 * s + 1.0, lambda s: s ** 3])
def test_auprc_is_invariant_to_increasing_transforms(transform):
    for scores, labels in random_instances(100, seed=2):
        moved = transform(np.asarray(scores))
        assert abs(auprc(moved, labels) - auprc(scores, labels)) <= 1e-12


def test_lowest_scored_positive():
    assert auprc([0.9, 0.2], [0, 1]) == 0.5
