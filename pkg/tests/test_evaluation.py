import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waferseg.evaluation import (
    ConfusionMatrix,
    EvaluationError,
    confusion,
    cross_validate,
    ensemble_predict,
    evaluate,
    metrics,
    stratified_folds,
    summarize,
)
from waferseg.model import ModelConfig, build_model, predict_classes
from waferseg.pipeline import preprocess
from waferseg.tensor import Tensor, no_grad
from waferseg.training import TrainConfig
from waferseg.wafergen import WaferGenConfig, generate_wafer

WORKED = [[2, 0, 0], [0, 3, 1], [0, 1, 1]]


def set_oracle(pred, truth):
    """Metrics from pixel-index sets, independent of the confusion-matrix code."""
    idx = np.arange(pred.size)
    pred, truth = pred.ravel(), truth.ravel()
    acc, iou = [], []
    correct = 0
    for k in range(3):
        t = set(idx[truth == k].tolist())
        p = set(idx[pred == k].tolist())
        correct += len(t & p)
        if t:
            acc.append(len(t & p) / len(t))
            iou.append(len(t & p) / len(t | p))
    t2 = set(idx[truth == 2].tolist())
    dca = len(t2 & set(idx[pred == 2].tolist())) / len(t2) if t2 else math.nan
    return correct / pred.size, sum(acc) / len(acc), sum(iou) / len(iou), dca


def labels_from_matrix(counts):
    truth, pred = [], []
    for j in range(3):
        for i in range(3):
            truth += [j] * counts[j][i]
            pred += [i] * counts[j][i]
    return np.array(pred), np.array(truth)


class TestConfusion:
    def test_identity(self, rng):
        x = rng.integers(0, 3, (9, 7))
        cm = confusion(x, x).counts
        assert np.array_equal(cm, np.diag(np.bincount(x.ravel(), minlength=3)))

    def test_all_predicted_background(self, rng):
        truth = rng.integers(0, 3, (5, 5))
        cm = confusion(np.zeros_like(truth), truth).counts
        assert cm[:, 1:].sum() == 0 and cm[:, 0].sum() == 25

    def test_tally_oracle(self, rng):
        pred, truth = rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))
        expected = np.zeros((3, 3), int)
        for j, i in zip(truth.ravel(), pred.ravel()):
            expected[j, i] += 1
        assert np.array_equal(confusion(pred, truth).counts, expected)

    def test_errors(self):
        with pytest.raises(EvaluationError, match="class"):
            confusion(np.array([[3]]), np.array([[0]]))
        with pytest.raises(EvaluationError, match="shape"):
            confusion(np.zeros((2, 2), int), np.zeros((2, 3), int))
        with pytest.raises(EvaluationError):
            ConfusionMatrix(-np.ones((3, 3)))

    def test_text_grid(self):
        text = ConfusionMatrix(WORKED).to_text().splitlines()
        assert text[0].startswith("true\\pred") and text[2].split() == ["1", "0", "3", "1"]


class TestMetrics:
    def test_worked_example(self):
        r = metrics(ConfusionMatrix(WORKED))
        assert r.pixel_accuracy == 0.75
        assert r.mean_pixel_accuracy == 0.75
        assert r.mean_iou == pytest.approx((1 + 3 / 5 + 1 / 3) / 3, abs=1e-15)
        assert round(r.mean_iou, 4) == 0.6444
        assert r.defect_class_accuracy == 0.5

    def test_perfect(self, rng):
        x = rng.integers(0, 3, (6, 6))
        x[0, :3] = [0, 1, 2]
        r = metrics(confusion(x, x))
        assert (r.pixel_accuracy, r.mean_pixel_accuracy, r.mean_iou, r.defect_class_accuracy) == (1, 1, 1, 1)

    def test_set_oracle_random_pairs(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            shape = tuple(rng.integers(1, 12, 2))
            truth = rng.integers(0, 3, shape)
            pred = np.where(rng.random(shape) < 0.6, truth, rng.integers(0, 3, shape))
            r = metrics(confusion(pred, truth))
            pa, mpa, miou, dca = set_oracle(pred, truth)
            assert abs(r.pixel_accuracy - pa) <= 1e-12
            assert abs(r.mean_pixel_accuracy - mpa) <= 1e-12
            assert abs(r.mean_iou - miou) <= 1e-12
            assert (math.isnan(dca) and math.isnan(r.defect_class_accuracy)) or abs(r.defect_class_accuracy - dca) <= 1e-12

    def test_empty_class_excluded(self):
        r = metrics(ConfusionMatrix([[3, 1, 0], [0, 4, 0], [0, 0, 0]]))
        assert r.mean_pixel_accuracy == pytest.approx((0.75 + 1) / 2)
        assert math.isnan(r.defect_class_accuracy)
        assert math.isnan(r.class_iou[2])

    def test_all_zero(self):
        with pytest.raises(EvaluationError):
            metrics(ConfusionMatrix(np.zeros((3, 3))))
        assert math.isnan(metrics(np.zeros((3, 3)), allow_empty=True).pixel_accuracy)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=9, max_size=9).filter(lambda c: sum(c) > 0))
    def test_miou_at_most_mpa(self, counts):
        r = metrics(np.array(counts).reshape(3, 3))
        assert r.mean_iou <= r.mean_pixel_accuracy + 1e-15
        for v in (r.pixel_accuracy, r.mean_pixel_accuracy, r.mean_iou):
            assert 0 <= v <= 1

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 30), min_size=9, max_size=9).filter(lambda c: sum(c) > 0),
           st.permutations([0, 1, 2]))
    def test_permutation_invariance(self, counts, perm):
        cm = np.array(counts).reshape(3, 3)
        pred, truth = labels_from_matrix(cm)
        perm = np.array(perm)
        a = metrics(confusion(pred, truth))
        b = metrics(confusion(perm[pred], perm[truth]))
        assert a.pixel_accuracy == pytest.approx(b.pixel_accuracy, abs=1e-15)
        assert a.mean_pixel_accuracy == pytest.approx(b.mean_pixel_accuracy, abs=1e-15)
        assert a.mean_iou == pytest.approx(b.mean_iou, abs=1e-15)


def tiny_model(seed=0, skips=5):
    return build_model(ModelConfig(skip_count=skips), seed=seed)


def four_pass_oracle(model, image):
    maps = []
    with no_grad():
        for k in range(4):
            rotated = np.ascontiguousarray(np.rot90(image.data, k=-k, axes=(2, 3)))
            probs = model.forward(Tensor(rotated), "inference").data
            maps.append(np.ascontiguousarray(np.rot90(probs, k=k, axes=(2, 3))))
    mean = (maps[0] + maps[1] + maps[2] + maps[3]) / maps[0].dtype.type(4)
    return mean.argmax(axis=1).astype(np.uint8)


class TestEnsemble:
    def test_four_angles_match_oracle(self, rng):
        model = tiny_model(seed=3)
        image = Tensor(rng.standard_normal((1, 1, 34, 34)).astype(np.float32))
        got = ensemble_predict(model, image, (0, 90, 180, 270))
        assert got.tobytes() == four_pass_oracle(model, image).tobytes()

    def test_single_angle_is_plain_prediction(self, rng):
        model = tiny_model(seed=4)
        image = Tensor(rng.standard_normal((1, 1, 36, 33)).astype(np.float32))
        with no_grad():
            plain = predict_classes(model.forward(image, "inference"))
        assert ensemble_predict(model, image, (0,)).tobytes() == plain.tobytes()

    def test_symmetric_case(self, rng):
        model = build_model(ModelConfig(skip_count=5), seed=5, dtype=np.float64)
        for conv in model.convs.values():
            w = conv.weight.data
            w[...] = (w + w[:, :, ::-1, ::-1]) / 2
        half = rng.standard_normal((16, 32))
        img = np.concatenate([half, half[::-1, ::-1]], axis=0)
        image = Tensor(img[None, None])
        assert np.array_equal(ensemble_predict(model, image, (0, 180)), ensemble_predict(model, image, (0,)))

    def test_vote(self, rng):
        model = tiny_model(seed=6)
        image = Tensor(rng.standard_normal((1, 1, 32, 32)).astype(np.float32))
        single = ensemble_predict(model, image, (0,))
        assert np.array_equal(ensemble_predict(model, image, (0,), combine="vote"), single)
        assert ensemble_predict(model, image, (0, 90, 180, 270), combine="vote").shape == (1, 32, 32)

    def test_angle_errors(self):
        model = tiny_model()
        with pytest.raises(EvaluationError, match="square"):
            ensemble_predict(model, Tensor(np.zeros((1, 1, 32, 40), np.float32)), (0, 90))
        with pytest.raises(EvaluationError, match="angles"):
            ensemble_predict(model, Tensor(np.zeros((1, 1, 32, 32), np.float32)), (45,))
        with pytest.raises(EvaluationError, match="combine"):
            ensemble_predict(model, Tensor(np.zeros((1, 1, 32, 32), np.float32)), (0,), combine="max")


def test_evaluate_pools_counts():
    samples = [preprocess(generate_wafer(WaferGenConfig(height=32, width=32, seed=s, void_count=0)))
               for s in range(3)]
    result = evaluate(tiny_model(), samples, keep_predictions=True)
    pooled = sum((cm for _, cm, _ in result.per_wafer), ConfusionMatrix(np.zeros((3, 3))))
    assert np.array_equal(pooled.counts, result.pooled.counts)
    assert result.pooled.total == 3 * 32 * 32 and len(result.predictions) == 3


def test_perfect_predictions_score_one():
    class Oracle:
        def forward(self, image, mode="inference"):
            return Tensor(self.truth)

    s = preprocess(generate_wafer(WaferGenConfig(height=32, width=32, seed=1)))
    oracle = Oracle()
    oracle.truth = s.onehot.astype(np.float32)
    r = evaluate(oracle, [s]).report
    assert (r.pixel_accuracy, r.mean_pixel_accuracy, r.mean_iou, r.defect_class_accuracy) == (1, 1, 1, 1)


class TestFolds:
    def test_partition(self):
        flags = [i % 5 == 0 for i in range(40)]
        folds = stratified_folds(flags, 4, master_seed=0)
        flat = sorted(i for f in folds for i in f)
        assert flat == list(range(40))
        assert [len(f) for f in folds] == [10, 10, 10, 10]

    def test_cluster_balance(self):
        flags = [True] * 8 + [False] * 32
        for seed in range(5):
            folds = stratified_folds(flags, 4, master_seed=seed)
            assert [sum(flags[i] for i in f) for f in folds] == [2, 2, 2, 2]

    def test_uneven_sizes(self):
        folds = stratified_folds([False] * 10, 4, 1, stratify=False)
        assert sorted(len(f) for f in folds) == [2, 2, 3, 3]

    def test_deterministic(self):
        flags = [i % 3 == 0 for i in range(20)]
        assert stratified_folds(flags, 4, 7) == stratified_folds(flags, 4, 7)

    @pytest.mark.parametrize("flags,folds", [([True] * 3, 4), ([True, True] + [False] * 10, 4), ([False] * 5, 1)])
    def test_errors(self, flags, folds):
        with pytest.raises(EvaluationError):
            stratified_folds(flags, folds, 0)


def test_cross_validate_reports_each_fold():
    samples = []
    for s in range(8):
        w = generate_wafer(WaferGenConfig(height=40, width=40, seed=s, void_count=0, cluster_count=int(s < 4),
                                          cluster_size_range=(0.2, 0.3)))
        samples.append(preprocess(w))
    seen = []
    result = cross_validate(samples, 4, True, 0, TrainConfig(epochs=1, eval_every=0),
                            ModelConfig(skip_count=3), on_fold=lambda k, rep, res: seen.append(k))
    assert seen == [0, 1, 2, 3] and len(result.reports) == 4
    assert all(sum(samples[i].is_cluster for i in f) == 1 for f in result.folds)
    assert set(result.summary) == {"pa", "mpa", "miou", "dca"}


def test_summarize_skips_nan():
    from waferseg.evaluation import MetricsReport

    reps = [MetricsReport(0.9, 0.8, 0.7, math.nan), MetricsReport(0.7, 0.6, 0.5, 0.4)]
    s = summarize(reps)
    assert s["pa"]["mean"] == pytest.approx(0.8) and s["dca"]["mean"] == pytest.approx(0.4)
