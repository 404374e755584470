import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmad.dataio import generate_synthetic_corpus
from cmad.errors import DataError, UndefinedMetricError
from cmad.metrics import MetricsReport, average_precision, evaluate, image_score, roc_auc


def auc_bruteforce(scores, labels):
    """O(n^2) pairwise concordance with ties at half weight."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def ap_stepwise_oracle(scores, labels):
    """Loop over distinct thresholds, accumulate (R_k - R_{k-1}) * P_k."""
    n_pos = sum(labels)
    prev_recall = 0.0
    ap = 0.0
    for thr in sorted(set(scores), reverse=True):
        keep = [l for s, l in zip(scores, labels) if s >= thr]
        tp = sum(keep)
        precision = tp / len(keep)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


class TestRocAuc:
    def test_perfect_ranking(self):
        assert roc_auc(np.array([0.9, 0.1]), np.array([1, 0])) == 1.0

    def test_inverted_ranking(self):
        assert roc_auc(np.array([0.1, 0.9]), np.array([1, 0])) == 0.0

    def test_tied_pair(self):
        got = roc_auc(np.array([0.8, 0.8, 0.3]), np.array([1, 0, 0]))
        assert got == 0.75  # 1 concordant + 1 tie over 2 pairs

    def test_single_class_rejected(self):
        with pytest.raises(UndefinedMetricError):
            roc_auc(np.array([0.1, 0.2]), np.array([1, 1]))

    def test_matches_bruteforce_with_ties(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 101))
            scores = rng.integers(0, 6, size=n).astype(float)  # heavy ties
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            assert roc_auc(scores, labels) == auc_bruteforce(scores.tolist(), labels.tolist())

    def test_monotone_transform_invariance(self, rng):
        scores = rng.uniform(size=60)
        labels = (rng.uniform(size=60) > 0.4).astype(int)
        base = roc_auc(scores, labels)
        assert roc_auc(2.0 * scores + 1.0, labels) == base
        assert roc_auc(np.log(scores + 2.0), labels) == base

    def test_complement_symmetry_without_ties(self, rng):
        scores = rng.permutation(np.linspace(0.0, 1.0, 40))
        labels = (rng.uniform(size=40) > 0.5).astype(int)
        labels[0], labels[1] = 0, 1
        assert roc_auc(scores, labels) + roc_auc(-scores, labels) == 1.0


class TestAveragePrecision:
    def test_all_positives_first(self):
        assert average_precision(np.array([0.9, 0.8, 0.1]), np.array([1, 1, 0])) == 1.0

    def test_interleaved(self):
        got = average_precision(np.array([0.9, 0.8, 0.7]), np.array([1, 0, 1]))
        assert abs(got - 5.0 / 6.0) < 1e-12

    def test_single_positive_ranked_last(self):
        got = average_precision(np.array([0.9, 0.8, 0.1]), np.array([0, 0, 1]))
        assert abs(got - 1.0 / 3.0) < 1e-12

    def test_no_positives_rejected(self):
        with pytest.raises(UndefinedMetricError):
            average_precision(np.array([0.3, 0.2]), np.array([0, 0]))

    def test_matches_stepwise_oracle_with_ties(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 101))
            scores = rng.integers(0, 5, size=n).astype(float)
            labels = rng.integers(0, 2, size=n)
            if labels.sum() == 0:
                labels[0] = 1
            got = average_precision(scores, labels)
            assert abs(got - ap_stepwise_oracle(scores.tolist(), labels.tolist())) <= 1e-12

    def test_monotone_transform_invariance(self, rng):
        scores = rng.uniform(size=50)
        labels = (rng.uniform(size=50) > 0.5).astype(int)
        labels[0] = 1
        base = average_precision(scores, labels)
        assert average_precision(2.0 * scores + 1.0, labels) == base
        assert average_precision(np.log(scores + 2.0), labels) == base

    @given(st.lists(st.integers(0, 4), min_size=2, max_size=60))
    @settings(max_examples=60, deadline=None)
    def test_hypothesis_brute_force_agreement(self, raw):
        scores = np.array(raw, dtype=float)
        labels = np.array([(v * 7 + 3) % 2 for v in range(len(raw))])
        if labels.sum() == 0:
            labels[0] = 1
        got = average_precision(scores, labels)
        assert abs(got - ap_stepwise_oracle(scores.tolist(), labels.tolist())) <= 1e-12
        if labels.min() != labels.max():
            assert roc_auc(scores, labels) == auc_bruteforce(scores.tolist(), labels.tolist())


class TestImageScore:
    def test_zero_map(self):
        assert image_score(np.zeros((8, 8))) == 0.0

    def test_single_peak(self):
        m = np.zeros((8, 8))
        m[3, 4] = 0.7
        assert image_score(m) == 0.7

    def test_matches_linear_scan(self, rng):
        m = rng.uniform(size=(32, 32))
        assert image_score(m) == max(v for row in m for v in row)


class _OracleModel:
    """Perfect predictor: outputs the ground-truth mask as its map."""

    def predict_map(self, sample):
        return sample.mask.astype(np.float64)


class _ConstantModel:
    def predict_map(self, sample):
        return np.full(sample.pixels.shape[:2], 0.25)


class TestEvaluate:
    def test_oracle_model_is_perfect(self, tiny_corpus):
        report = evaluate(_OracleModel(), tiny_corpus)
        for metrics in report.per_class.values():
            assert metrics["p_auc"] == 1.0
            assert metrics["i_auc"] == 1.0
        assert report.mean["p_auc"] == 1.0

    def test_constant_model_degrades_to_half(self, tiny_corpus):
        report = evaluate(_ConstantModel(), tiny_corpus)
        for metrics in report.per_class.values():
            assert metrics["p_auc"] == 0.5
            assert metrics["i_auc"] == 0.5

    def test_deterministic(self, tiny_corpus):
        a = evaluate(_OracleModel(), tiny_corpus)
        b = evaluate(_OracleModel(), tiny_corpus)
        assert a.to_dict() == b.to_dict()

    def test_mean_is_arithmetic_mean(self, tiny_corpus):
        report = evaluate(_OracleModel(), tiny_corpus)
        for key in ("i_auc", "i_ap", "p_auc", "p_ap"):
            vals = [m[key] for m in report.per_class.values()]
            assert abs(report.mean[key] - float(np.mean(vals))) <= 1e-9

    def test_class_without_anomalies_skipped_with_warning(self):
        corpus = generate_synthetic_corpus(2, 2, 2, seed=3)
        cls = corpus.classes[0]
        for s in corpus.samples:
            if s.class_id == cls and s.split == "test":
                s.is_anomalous = False
                s.mask = np.zeros_like(s.mask)
        with pytest.warns(UserWarning):
            report = evaluate(_OracleModel(), corpus)
        assert cls in report.skipped
        assert cls not in report.per_class

    def test_missing_mask_raises_data_error(self, tiny_corpus):
        import copy

        corpus = copy.deepcopy(tiny_corpus)
        for s in corpus.samples:
            if s.is_anomalous:
                s.mask = None
                break
        with pytest.raises(DataError):
            evaluate(_OracleModel(), corpus)


class TestReportFormat:
    def test_table_columns_and_mean_row(self):
        report = MetricsReport(
            per_class={"widget": {"i_auc": 0.5, "i_ap": 0.25, "p_auc": 1.0, "p_ap": 0.75}},
            mean={"i_auc": 0.5, "i_ap": 0.25, "p_auc": 1.0, "p_ap": 0.75},
        )
        table = report.format_table()
        header = table.splitlines()[0].split()
        assert header == ["Class", "AUC", "AP", "P-AUC", "P-AP"]
        assert table.splitlines()[-1].startswith("Mean")
