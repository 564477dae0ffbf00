import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oshp.data import FoldSpec, build_meta_test_list, tailor_dataset
from oshp.errors import ContractError
from oshp.evaluation import (ConfusionAccumulator, EvalReport, OraclePredictor, RandomPredictor, binary_iou,
                             protocol_episodes, run_meta_test, score_episode)
from oshp.synthetic import SyntheticConfig, generate_synthetic_dataset


def brute_force(pairs, n):
    conf = [[0] * n for _ in range(n)]
    for pred, gt in pairs:
        for p, g in zip(np.ravel(pred), np.ravel(gt)):
            conf[int(g)][int(p)] += 1
    return np.array(conf, dtype=np.int64)


def test_score_episode_examples():
    gt = np.array([[0, 0], [2, 2]])
    acc = score_episode(gt, gt, [0, 2], ConfusionAccumulator(3))
    assert acc.class_iou() == {0: 100.0, 2: 100.0} and acc.accuracy() == 100.0

    acc = score_episode(np.zeros_like(gt), gt, [0, 2], ConfusionAccumulator(3))
    assert acc.class_iou()[2] == 0.0 and acc.accuracy() == 50.0

    pred = np.array([[2, 2], [0, 0]])
    assert score_episode(pred, gt, [0, 2], ConfusionAccumulator(3)).class_iou()[2] == 0.0


def test_score_episode_contract():
    acc = ConfusionAccumulator(3)
    with pytest.raises(ContractError):
        score_episode(np.zeros((2, 2)), np.zeros((2, 3)), [0], acc)
    with pytest.raises(ContractError):
        score_episode(np.full((2, 2), 5), np.zeros((2, 2)), [0, 5], acc)
    with pytest.raises(ContractError):
        score_episode(np.full((2, 2), 2), np.zeros((2, 2)), [0, 1], acc)


def test_binary_iou_examples():
    gt = np.array([[1, 1], [0, 0]])
    assert binary_iou(gt, gt) == 100.0
    assert binary_iou(1 - gt, gt) == 0.0
    assert binary_iou(np.ones_like(gt), gt) == 25.0
    assert binary_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 100.0


def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(0)
    n = 5
    acc, pairs = ConfusionAccumulator(n), []
    for _ in range(50):
        shape = tuple(rng.integers(1, 9, size=2))
        gt, pred = rng.integers(0, n, size=shape), rng.integers(0, n, size=shape)
        score_episode(pred, gt, list(range(n)), acc)
        pairs.append((pred, gt))
    conf = brute_force(pairs, n)
    assert np.array_equal(acc.confusion, conf)
    for c, v in acc.class_iou().items():
        inter = conf[c, c]
        union = conf[c, :].sum() + conf[:, c].sum() - inter
        assert v == 100.0 * inter / union
    assert acc.correct == np.trace(conf) and acc.total == conf.sum()
    ious = acc.class_iou()
    assert min(ious.values()) <= acc.miou(range(n)) <= max(ious.values())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_aggregation_is_order_free_and_mergeable(seed):
    rng = np.random.default_rng(seed)
    eps = [(rng.integers(0, 4, (3, 4)), rng.integers(0, 4, (3, 4))) for _ in range(6)]
    fwd, rev = ConfusionAccumulator(4), ConfusionAccumulator(4)
    for p, g in eps:
        score_episode(p, g, range(4), fwd)
    for p, g in reversed(eps):
        score_episode(p, g, range(4), rev)
    a, b = ConfusionAccumulator(4), ConfusionAccumulator(4)
    for i, (p, g) in enumerate(eps):
        score_episode(p, g, range(4), a if i % 2 else b)
    assert np.array_equal(fwd.confusion, rev.confusion)
    assert np.array_equal(a.merge(b).confusion, fwd.confusion)
    assert np.array_equal(b.merge(a).confusion, fwd.confusion)


def test_unseen_classes_are_left_out_of_means():
    acc = score_episode(np.array([[0, 1]]), np.array([[0, 1]]), [0, 1], ConfusionAccumulator(4))
    assert acc.miou([1, 2, 3]) == 100.0
    assert math.isnan(acc.miou([3]))


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("bench")
    cfg = SyntheticConfig(split_sizes={"meta_test_support": 10, "meta_test_query": 10})
    raw = generate_synthetic_dataset(cfg, 1, root / "raw")
    fold = FoldSpec.identity(raw.class_names, ["hat", "skirt"])
    test = tailor_dataset(raw, fold, "meta_test", root / "test")
    return test, fold, build_meta_test_list(test, fold, 5, rng_seed=0)


def test_oracle_model_scores_100(bench):
    test, fold, tl = bench
    for protocol in ("k_way", "one_way"):
        res = run_meta_test(OraclePredictor(), test, tl, protocol, fold)
        assert res["novel_miou"] == 100.0 and res["human_miou"] == 100.0
        assert res["accuracy" if protocol == "k_way" else "binary_iou"] == 100.0


def test_random_model_matches_monte_carlo_oracle(bench):
    test, fold, tl = bench
    eps = list(protocol_episodes(test, tl, "k_way"))
    # expected counts under a uniform draw from each episode's class set
    inter, pred_mass, gt_mass = {}, {}, {}
    for ep in eps:
        gt, k = ep.query_target(), len(ep.class_set)
        for c in ep.class_set:
            n_c = int((gt == c).sum())
            inter[c] = inter.get(c, 0) + n_c / k
            gt_mass[c] = gt_mass.get(c, 0) + n_c
            pred_mass[c] = pred_mass.get(c, 0) + gt.size / k
    expected = [100 * inter[c] / (gt_mass[c] + pred_mass[c] - inter[c]) for c in sorted(fold.novel_classes)
                if gt_mass.get(c)]
    runs = [run_meta_test(RandomPredictor(s), test, tl, "k_way", fold)["novel_miou"] for s in range(3)]
    assert abs(np.mean(runs) - np.mean(expected)) < 1.0


def test_prediction_dump(bench, tmp_path):
    test, fold, tl = bench
    run_meta_test(OraclePredictor(), test, tl[:2], "k_way", fold, dump_dir=tmp_path)
    assert len(list((tmp_path / "k_way").glob("*.png"))) == 2


def test_report_round_trip_and_table(tmp_path):
    rep = EvalReport()
    rep.add("f1", "k_way", {"novel_miou": 20.0, "human_miou": 40.0, "accuracy": 80.0})
    rep.add("f2", "k_way", {"novel_miou": 30.0, "human_miou": 50.0, "accuracy": 90.0})
    assert rep.average("k_way", "novel_miou") == 25.0
    rep.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json") == rep
    table = rep.to_table()
    assert "25.0" in table and "45.0" in table and "85.0" in table
    other = EvalReport()
    other.add("f3", "one_way", {"novel_miou": 1.0, "human_miou": 2.0, "binary_iou": 3.0})
    merged = rep.merge(other)
    assert sorted(merged.folds) == ["f1", "f2", "f3"]
    assert "Bi-mIoU" in merged.to_table()
