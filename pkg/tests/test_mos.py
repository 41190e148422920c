"""Subjective-score consolidation: moment-formula oracles, screening
fixtures, the two-pass annotator rejection, and exactness properties."""

import math

import numpy as np
import pytest

from vqmoe.errors import FormatError, ShapeError
from vqmoe.metrics import annotator_consistency
from vqmoe.mos import (
    LAMBDA_FREE,
    LAMBDA_GAUSSIAN,
    RatingRecord,
    consolidate,
    inlier_set,
    kurtosis,
    select_lambda,
)

FIXTURE16 = [1, 2, 2, 2, 3, 3, 3, 3, 3, 3, 3, 3, 4, 4, 4, 5]
SPIKES = [3, 3, 3, 3, 3, 3, 3, 3, 1, 5]

# 14-score honest panels whose full cell (with one extreme rating added)
# stays inside the near-Gaussian kurtosis window, so the extreme is screened
PANEL_A = [2, 2, 2] + [3] * 8 + [4, 4, 4]          # mean 3
PANEL_B = [2, 2] + [3] * 8 + [4, 4, 4, 4]          # mean 22/7


def oracle_kurtosis(xs):
    """Straight-line population-moment computation."""
    n = len(xs)
    mu = sum(xs) / n
    m2 = sum((x - mu) ** 2 for x in xs) / n
    m4 = sum((x - mu) ** 4 for x in xs) / n
    return m4 / (m2 * m2)


def honest_ratings(video, panel, dimension="overall_percept"):
    return [
        RatingRecord(f"h{j:02d}", video, dimension, panel[j])
        for j in range(len(panel))
    ]


class TestRatingRecord:
    def test_valid(self):
        r = RatingRecord("a1", "v1", "word[3]", 5)
        assert r.score == 5

    @pytest.mark.parametrize("score", [0, 6, -1, 2.5, True, "3"])
    def test_bad_scores(self, score):
        with pytest.raises(FormatError):
            RatingRecord("a1", "v1", "spatial", score)

    @pytest.mark.parametrize("dim", ["overall", "word", "word[0]", "word[-1]",
                                     "Spatial", "word[1.5]", ""])
    def test_bad_dimensions(self, dim):
        with pytest.raises(FormatError):
            RatingRecord("a1", "v1", dim, 3)

    def test_empty_ids(self):
        with pytest.raises(FormatError):
            RatingRecord("", "v1", "spatial", 3)
        with pytest.raises(FormatError):
            RatingRecord("a1", "", "spatial", 3)


class TestKurtosis:
    def test_one_sided_spike(self):
        assert kurtosis([1, 1, 1, 1, 5]) == pytest.approx(3.25, abs=1e-12)

    def test_fixture16(self):
        # m2 = 14/16, m4 = 38/16 -> beta2 = 2.375 / 0.875^2
        expect = (38 / 16) / (14 / 16) ** 2
        assert kurtosis(FIXTURE16) == pytest.approx(expect, abs=1e-12)
        assert expect == pytest.approx(3.102, abs=1e-3)

    def test_two_sided_spikes(self):
        assert kurtosis(SPIKES) == pytest.approx(5.0, abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            xs = rng.integers(1, 6, size=rng.integers(4, 20)).tolist()
            if len(set(xs)) == 1:
                continue
            assert kurtosis(xs) == pytest.approx(oracle_kurtosis(xs), rel=1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(ShapeError):
            kurtosis([3, 3, 3, 3])
        with pytest.raises(ShapeError):
            kurtosis([3])


class TestSelectLambda:
    def test_gaussian_window(self):
        lam, info = select_lambda([1, 1, 1, 1, 5])
        assert lam == LAMBDA_GAUSSIAN
        assert info["beta2"] == pytest.approx(3.25)
        assert not info["degenerate"]

    def test_heavy_tails(self):
        lam, info = select_lambda(SPIKES)
        assert lam == LAMBDA_FREE == pytest.approx(math.sqrt(20.0))
        assert info["beta2"] == pytest.approx(5.0)

    def test_degenerate_constant(self):
        lam, info = select_lambda([4, 4, 4, 4, 4])
        assert lam == LAMBDA_GAUSSIAN
        assert info["degenerate"] and info["beta2"] is None

    def test_minimum_panel(self):
        with pytest.raises(ShapeError):
            select_lambda([1, 2, 3])


class TestInlierSet:
    def test_all_equal_all_in(self):
        np.testing.assert_array_equal(inlier_set([2, 2, 2, 2], 2.0),
                                      np.arange(4))

    def test_one_sided_spike_survives(self):
        # sample sigma 1.78885, threshold 3.5777, |5 - 1.8| = 3.2
        kept = inlier_set([1, 1, 1, 1, 5], 2.0)
        np.testing.assert_array_equal(kept, np.arange(5))

    def test_fixture16_excludes_extremes(self):
        kept = inlier_set(FIXTURE16, 2.0)
        assert len(kept) == 14
        excluded = sorted(set(range(16)) - set(kept.tolist()))
        assert [FIXTURE16[i] for i in excluded] == [1, 5]
        sigma = float(np.std(FIXTURE16, ddof=1))
        assert 2.0 * sigma == pytest.approx(1.932, abs=1e-3)

    def test_minimum_size(self):
        with pytest.raises(ShapeError):
            inlier_set([3], 2.0)

    def test_affine_invariance_exact(self):
        rng = np.random.default_rng(32)
        for trial in range(50):
            xs = rng.integers(1, 6, size=int(rng.integers(4, 16)))
            if np.ptp(xs) == 0:
                continue
            lam, info = select_lambda(xs)
            for a, b in [(0.5, 0.0), (2.0, -1.0), (4.0, 2.0)]:
                ys = a * xs.astype(np.float64) + b
                lam2, info2 = select_lambda(ys)
                assert lam2 == lam
                np.testing.assert_array_equal(inlier_set(ys, lam2),
                                              inlier_set(xs, lam))


class TestConsolidate:
    def test_fixture16_panel(self):
        ratings = [
            RatingRecord(f"a{i:02d}", "v0", "overall_percept", s)
            for i, s in enumerate(FIXTURE16)
        ]
        report, labels = consolidate(ratings)
        cell = report.cells[("v0", "overall_percept")]
        # pass 1 screens out the 1 and the 5; their annotators each have a
        # 100% outlier fraction and are rejected, so the final cell is the
        # 14 central ratings
        assert len(cell.excluded) == 2
        assert sorted(ratings[i].score for i in cell.excluded) == [1, 5]
        assert cell.lam == LAMBDA_GAUSSIAN
        assert cell.mos == pytest.approx(42.0 / 14.0)
        assert cell.mos == pytest.approx(3.0)
        assert labels["v0"]["q_overall_percept"] == pytest.approx(3.0)
        assert report.annotators["a00"].rejected  # gave the 1
        assert report.annotators["a15"].rejected  # gave the 5
        assert not report.annotators["a05"].rejected

    def test_one_sided_spike_no_exclusions(self):
        ratings = [
            RatingRecord(f"a{i}", "v0", "sentence", s)
            for i, s in enumerate([1, 1, 1, 1, 5])
        ]
        report, labels = consolidate(ratings)
        cell = report.cells[("v0", "sentence")]
        assert cell.excluded == ()
        assert cell.mos == pytest.approx(1.8)
        assert not any(rep.rejected for rep in report.annotators.values())

    def test_single_annotator_panel_unscreened(self):
        ratings = [
            RatingRecord("solo", f"v{i}", "spatial", s)
            for i, s in enumerate([2, 4, 5])
        ]
        report, labels = consolidate(ratings)
        for i, s in enumerate([2, 4, 5]):
            cell = report.cells[(f"v{i}", "spatial")]
            assert "unscreened_small_panel" in cell.flags
            assert cell.mos == float(s)
            assert cell.sigma is None
        assert not report.annotators["solo"].rejected
        # idempotence: consolidating the consolidated values is the identity
        again = [
            RatingRecord("solo", f"v{i}", "spatial", int(labels[f"v{i}"]["q_spatial"]))
            for i in range(3)
        ]
        _, labels2 = consolidate(again)
        assert labels2 == labels

    def adversarial_panel(self, n_videos=12, extra=None):
        ratings = []
        for v in range(n_videos):
            video = f"v{v:02d}"
            panel = PANEL_A if v % 2 == 0 else PANEL_B
            ratings.extend(honest_ratings(video, panel))
            ratings.append(RatingRecord("adv", video, "overall_percept", 1))
        if extra:
            ratings.extend(extra)
        return ratings

    def test_adversarial_annotator_rejected(self):
        report, labels = consolidate(self.adversarial_panel())
        adv = report.annotators["adv"]
        assert adv.rejected
        assert adv.outlier_fraction == pytest.approx(1.0)
        for j in range(14):
            assert not report.annotators[f"h{j:02d}"].rejected
        # second pass must aggregate honest ratings only
        for v in range(12):
            expect = 3.0 if v % 2 == 0 else 22.0 / 7.0
            assert labels[f"v{v:02d}"]["q_overall_percept"] == pytest.approx(expect)

    def test_consistency_ordering_after_consolidation(self):
        ratings = self.adversarial_panel()
        report, labels = consolidate(ratings)
        mos = {
            (v, "overall_percept"): block["q_overall_percept"]
            for v, block in labels.items()
        }
        cons = annotator_consistency(ratings, mos)
        adv_srcc = cons.per_annotator["adv"]["srcc"]
        honest = [cons.per_annotator[f"h{j:02d}"]["srcc"] for j in range(14)]
        assert all(h >= adv_srcc for h in honest)
        assert max(honest) > adv_srcc

    def test_cell_emptied_by_rejection_falls_back(self):
        extra = [RatingRecord("adv", "lonely", "sentence", 1)]
        report, labels = consolidate(self.adversarial_panel(extra=extra))
        cell = report.cells[("lonely", "sentence")]
        assert "no_ratings_after_rejection" in cell.flags
        assert cell.mos == 1.0
        assert labels["lonely"]["q_sentence"] == 1.0

    def test_rejection_threshold_is_strict(self):
        def panel(n_videos):
            ratings = []
            for v in range(n_videos):
                video = f"w{v:02d}"
                ratings.extend(honest_ratings(video, PANEL_A))
                score = 1 if v == 0 else 3
                ratings.append(RatingRecord("t", video, "overall_percept", score))
            return ratings

        # 1 outlier in 20 ratings = exactly 5%: kept
        report, _ = consolidate(panel(20))
        t = report.annotators["t"]
        assert t.n_outliers == 1 and t.n_ratings == 20
        assert t.outlier_fraction == pytest.approx(0.05)
        assert not t.rejected
        # 1 outlier in 19 ratings > 5%: rejected
        report, _ = consolidate(panel(19))
        assert report.annotators["t"].rejected

    def test_word_labels_and_mask(self):
        ratings = []
        for i, dim in enumerate(["word[1]", "word[3]", "sentence"]):
            for a in range(4):
                ratings.append(RatingRecord(f"a{a}", "v0", dim, 2 + i))
        _, labels = consolidate(ratings)
        block = labels["v0"]
        assert block["q_word"] == [2.0, None, 3.0]
        assert block["token_mask"] == [True, False, True]
        assert block["q_sentence"] == 4.0
        assert block["q_spatial"] is None

    def test_randomized_invariants(self):
        rng = np.random.default_rng(33)
        ratings = []
        for v in range(6):
            for a in range(8):
                for dim in ("spatial", "temporal", "overall_percept"):
                    ratings.append(RatingRecord(
                        f"a{a}", f"v{v}", dim, int(rng.integers(1, 6))))
        report, labels = consolidate(ratings)
        for key, cell in report.cells.items():
            idxs = [i for i, r in enumerate(ratings)
                    if (r.video_id, r.dimension) == key]
            scores = [ratings[i].score for i in idxs]
            assert min(scores) <= cell.mos <= max(scores)
            assert 1.0 <= cell.mos <= 5.0
            assert set(cell.excluded) <= set(idxs)
            if "no_ratings_after_rejection" not in cell.flags:
                kept = [ratings[i].score for i in idxs if i not in set(cell.excluded)]
                assert cell.mos == pytest.approx(float(np.mean(kept)))
                rejected = {a for a, rep in report.annotators.items() if rep.rejected}
                kept_annotators = {ratings[i].annotator_id for i in idxs
                                   if i not in set(cell.excluded)}
                assert not (kept_annotators & rejected)

    def test_rejected_iff_fraction_above_rule(self):
        report, _ = consolidate(self.adversarial_panel())
        for rep in report.annotators.values():
            assert rep.rejected == (rep.outlier_fraction > 0.05)

    def test_validation(self):
        with pytest.raises(ShapeError):
            consolidate([])
        with pytest.raises(FormatError):
            consolidate([("a", "v", "spatial", 3)])

    def test_report_serializes(self):
        import json

        report, _ = consolidate(self.adversarial_panel(n_videos=2))
        payload = json.dumps(report.to_dict())
        assert "adv" in payload and "::overall_percept" in payload
