"""Frame-level scoring and ROC/AUC tests, cross-checked against a
rank-statistic oracle computed pairwise in this file."""

import json

import numpy as np
import pytest

from magvad import data, evaluation as ev, synth
from magvad.model import init_params


def rank_auc(scores, labels):
    """Probability a positive outranks a negative, ties counted half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return wins / (pos.size * neg.size)


def curve_auc(scores, labels):
    return ev.auc(ev.roc_curve(scores, labels))


# =============================================================================
# snippet-to-frame expansion
# =============================================================================

class TestFrameExpansion:
    def test_even_split(self):
        out = ev.snippet_to_frame_scores([0.2, 0.8], 4)
        assert np.array_equal(out, [0.2, 0.2, 0.8, 0.8])

    def test_remainder_truncates_tail(self):
        out = ev.snippet_to_frame_scores([0.2, 0.8], 5)
        assert np.array_equal(out, [0.2, 0.2, 0.2, 0.8, 0.8])

    def test_single_snippet_covers_all_frames(self):
        assert np.array_equal(ev.snippet_to_frame_scores([0.7], 3), [0.7] * 3)

    def test_fewer_frames_than_snippets_rejected(self):
        with pytest.raises(ValueError):
            ev.snippet_to_frame_scores([0.1, 0.2, 0.3], 2)


# =============================================================================
# ROC and AUC
# =============================================================================

class TestRoc:
    def test_reference_case(self):
        points = ev.roc_curve([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert ev.auc(points) == 0.75
        coords = [(p.fpr, p.tpr) for p in points]
        assert coords == [(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]
        assert points[0].threshold == np.inf
        assert [p.threshold for p in points[1:]] == [0.8, 0.4, 0.35, 0.1]

    def test_perfect_and_inverted(self):
        labels = [0, 0, 1, 1]
        assert curve_auc([0.1, 0.2, 0.8, 0.9], labels) == 1.0
        assert curve_auc([0.9, 0.8, 0.2, 0.1], labels) == 0.0

    def test_constant_scores_give_half(self):
        assert curve_auc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5

    def test_threshold_rule_is_geq(self):
        # one threshold per distinct score; at t = 0.4 both frames with
        # score >= 0.4 are predicted positive
        points = ev.roc_curve([0.4, 0.4, 0.1], [1, 0, 0])
        at_04 = [p for p in points if p.threshold == 0.4][0]
        assert (at_04.fpr, at_04.tpr) == (0.5, 1.0)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            ev.roc_curve([0.1, 0.2], [1, 1])
        with pytest.raises(ValueError, match="both classes"):
            ev.roc_curve([0.1, 0.2], [0, 0])

    def test_bad_inputs_rejected(self):
        with pytest.raises(ValueError):
            ev.roc_curve([0.1, np.nan], [0, 1])
        with pytest.raises(ValueError):
            ev.roc_curve([0.1, 0.2], [0, 2])
        with pytest.raises(ValueError):
            ev.roc_curve([0.1], [0, 1])

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        scores = rng.random(60)
        labels = rng.integers(0, 2, size=60)
        labels[:2] = [0, 1]
        base = curve_auc(scores, labels)
        assert curve_auc(3.0 * scores + 2.0, labels) == base
        assert curve_auc(np.tanh(scores), labels) == base

    def test_negation_antisymmetry(self):
        rng = np.random.default_rng(1)
        scores = rng.permutation(40) / 40.0  # distinct scores
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        assert abs(curve_auc(-scores, labels) - (1.0 - curve_auc(scores, labels))) < 1e-12

    def test_pooling_order_invariance(self):
        rng = np.random.default_rng(2)
        scores = rng.random(50)
        labels = rng.integers(0, 2, size=50)
        labels[:2] = [0, 1]
        perm = rng.permutation(50)
        assert curve_auc(scores[perm], labels[perm]) == curve_auc(scores, labels)

    def test_matches_rank_statistic_on_random_instances(self):
        # trapezoid-under-curve and pairwise rank probability are two
        # routes to the same number; ties included deliberately
        rng = np.random.default_rng(42)
        for _ in range(100):
            n = int(rng.integers(4, 201))
            scores = np.round(rng.random(n), 2)  # rounding forces ties
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            assert abs(curve_auc(scores, labels) - rank_auc(scores, labels)) < 1e-12

    def test_auc_validates_curve(self):
        with pytest.raises(ValueError):
            ev.auc([ev.RocPoint(np.inf, 0.0, 0.0)])
        with pytest.raises(ValueError):  # endpoints must be (0,0) and (1,1)
            ev.auc([ev.RocPoint(np.inf, 0.0, 0.1), ev.RocPoint(0.0, 1.0, 1.0)])


# =============================================================================
# whole-manifest evaluation
# =============================================================================

@pytest.fixture
def test_corpus(tmp_path):
    cfg = synth.SynthConfig(n_normal=3, n_abnormal=3, T=8, D=16, crops=1,
                            anomaly_snippets_per_video=2, seed=5, split="test")
    return data.load_manifest(synth.synth_generate(cfg, tmp_path), split="test")


class TestEvaluate:
    def test_zero_weights_score_half_and_auc_half(self, test_corpus):
        params = init_params(16, 8, seed=0)
        for p in params.parameters():
            p.value.data[...] = 0.0
        report = ev.evaluate(params, test_corpus)
        assert report.auc == 0.5
        for video in report.per_video.values():
            assert video["max_score"] == 0.5

    def test_report_shape(self, test_corpus):
        params = init_params(16, 8, seed=0)
        report = ev.evaluate(params, test_corpus)
        assert len(report.per_video) == 6
        assert report.frames_evaluated == 6 * 8 * 16
        assert report.positive_frames == 3 * 2 * 16
        assert 0.0 <= report.auc <= 1.0
        for video in report.per_video.values():
            assert 0.0 < video["mean_score"] <= video["max_score"] < 1.0

    def test_missing_frame_labels_names_video(self, test_corpus):
        test_corpus.entries[2].frame_labels_path = None
        params = init_params(16, 8, seed=0)
        with pytest.raises(ValueError, match=test_corpus.entries[2].id):
            ev.evaluate(params, test_corpus)

    def test_dim_mismatch_names_video(self, test_corpus):
        params = init_params(32, 8, seed=0)
        with pytest.raises(ValueError, match=test_corpus.entries[0].id):
            ev.evaluate(params, test_corpus)

    def test_report_json_parses(self, test_corpus):
        params = init_params(16, 8, seed=0)
        report = ev.evaluate(params, test_corpus)
        parsed = json.loads(report.to_json())
        assert parsed["auc"] == report.auc
        assert parsed["frames_evaluated"] == report.frames_evaluated
        assert len(parsed["roc"]) == len(report.roc)
        # the sentinel threshold uses the json module's Infinity extension
        assert parsed["roc"][0]["threshold"] == float("inf")
        assert "Infinity" in report.to_json()

    def test_roc_csv(self, tmp_path, test_corpus):
        params = init_params(16, 8, seed=0)
        report = ev.evaluate(params, test_corpus)
        out = tmp_path / "roc.csv"
        ev.write_roc_csv(out, report.roc)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "threshold,fpr,tpr"
        assert lines[1] == "inf,0.0,0.0"
        assert len(lines) == len(report.roc) + 1
        last = lines[-1].split(",")
        assert (float(last[1]), float(last[2])) == (1.0, 1.0)
