from datetime import datetime, timezone

import numpy as np
import pytest

from latcast.errors import ValidationError
from latcast.metrics import (
    EnsembleForecast,
    ScoreReport,
    crps_field,
    ensemble_mean,
    fair_crps,
    fair_crps_pairwise,
    weighted_rmse,
)

UTC = timezone.utc


class TestWeightedRmse:
    def test_zero_when_equal(self, rng):
        x = rng.standard_normal((4, 6))
        assert weighted_rmse(x, x, np.ones(4)) == 0.0

    def test_two_point_hand_case(self):
        # weights (4/3, 2/3), errors (1, 2): sqrt((4/3*1 + 2/3*4)/2) = sqrt(2)
        pred = np.array([[1.0], [2.0]])
        truth = np.array([[0.0], [0.0]])
        w = np.array([4.0 / 3.0, 2.0 / 3.0])
        assert weighted_rmse(pred, truth, w) == pytest.approx(np.sqrt(2.0), abs=1e-15)

    def test_uniform_weights_match_plain_rmse(self, rng):
        pred = rng.standard_normal((5, 7))
        truth = rng.standard_normal((5, 7))
        plain = np.sqrt(((pred - truth) ** 2).mean())
        assert weighted_rmse(pred, truth, np.ones(5)) == pytest.approx(plain, rel=1e-12)

    def test_scales_linearly(self, rng):
        pred = rng.standard_normal((3, 4))
        truth = rng.standard_normal((3, 4))
        w = np.array([0.5, 1.5, 1.0])
        base = weighted_rmse(pred, truth, w)
        assert weighted_rmse(-2 * pred, -2 * truth, w) == pytest.approx(2 * base, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            weighted_rmse(np.zeros((2, 2)), np.zeros((3, 2)), np.ones(2))


class TestFairCrps:
    def test_all_members_equal_truth(self):
        assert fair_crps(np.array([1.5, 1.5, 1.5]), np.array(1.5)) == 0.0

    def test_hand_case_bracketing(self):
        # x = {0, 2}, y = 1: (1/2)(1+1) - (1/(2*2*1))*(2+2) = 0
        assert fair_crps(np.array([0.0, 2.0]), np.array(1.0)) == pytest.approx(0.0, abs=1e-15)

    def test_hand_case_degenerate_pair(self):
        # x = {0, 0}, y = 1: 1 - 0 = 1
        assert fair_crps(np.array([0.0, 0.0]), np.array(1.0)) == pytest.approx(1.0, abs=1e-15)

    def test_single_member_rejected(self):
        with pytest.raises(ValidationError, match="ensemble too small"):
            fair_crps(np.array([1.0]), np.array(1.0))
        with pytest.raises(ValidationError, match="ensemble too small"):
            fair_crps_pairwise(np.array([1.0]), np.array(1.0))

    def test_sort_based_equals_pairwise_oracle(self, rng):
        for _ in range(300):
            m = int(rng.integers(2, 51))
            x = rng.standard_normal(m) * rng.uniform(0.1, 10)
            y = rng.standard_normal()
            a = fair_crps(x, np.asarray(y))
            b = fair_crps_pairwise(x, np.asarray(y))
            assert abs(a - b) < 1e-12

    def test_permutation_invariant(self, rng):
        x = rng.standard_normal(9)
        y = np.asarray(0.3)
        base = fair_crps(x, y)
        for _ in range(10):
            assert fair_crps(rng.permutation(x), y) == pytest.approx(base, abs=1e-14)

    def test_translation_equivariant(self, rng):
        x = rng.standard_normal(7)
        y = np.asarray(-0.4)
        c = 3.7
        assert fair_crps(x + c, y + c) == pytest.approx(fair_crps(x, y), abs=1e-12)

    def test_vectorized_over_fields(self, rng):
        members = rng.standard_normal((6, 4, 5))
        truth = rng.standard_normal((4, 5))
        out = fair_crps(members, truth)
        assert out.shape == (4, 5)
        for i in range(4):
            for j in range(5):
                assert out[i, j] == pytest.approx(
                    fair_crps_pairwise(members[:, i, j], truth[i, j]), abs=1e-12
                )

    def test_nonnegative_on_random_ensembles(self, rng):
        for _ in range(50):
            x = rng.standard_normal(int(rng.integers(2, 20)))
            assert fair_crps(x, np.asarray(rng.standard_normal())) >= -1e-12

    def test_variance_shrinks_with_ensemble_size(self, rng):
        # statistical smoke test: fair CRPS estimates stabilize as M grows
        y = np.asarray(0.0)
        var = []
        for m in (4, 16, 64):
            estimates = [fair_crps(rng.standard_normal(m), y) for _ in range(200)]
            var.append(np.var(estimates))
        assert var[0] > var[1] > var[2]

    def test_field_level_weighting(self, rng):
        members = rng.standard_normal((5, 3, 4))
        truth = rng.standard_normal((3, 4))
        w = np.array([1.5, 1.0, 0.5])
        pointwise = fair_crps(members, truth)
        assert crps_field(members, truth, w) == pytest.approx(
            float((pointwise * w[:, None]).mean()), rel=1e-14
        )
        assert crps_field(members, truth, np.ones(3)) == pytest.approx(float(pointwise.mean()), rel=1e-14)


def _forecast(small_grid, small_catalog, fields, seeds):
    return EnsembleForecast(
        init_time=datetime(2018, 1, 1, tzinfo=UTC),
        lead_hours=tuple(6 * (k + 1) for k in range(fields.shape[1])),
        fields=fields,
        grid=small_grid,
        catalog=small_catalog,
        member_seeds=seeds,
    )


class TestEnsembleForecast:
    def test_lead_times_must_be_six_hour_multiples(self, small_grid, small_catalog, rng):
        fields = rng.standard_normal((1, 2, 5, small_grid.n_lat, small_grid.n_lon))
        with pytest.raises(ValidationError):
            EnsembleForecast(
                init_time=datetime(2018, 1, 1, tzinfo=UTC),
                lead_hours=(6, 9),
                fields=fields,
                grid=small_grid,
                catalog=small_catalog,
                member_seeds=(0,),
            )

    def test_ensemble_mean_single_member_identity(self, small_grid, small_catalog, rng):
        fields = rng.standard_normal((1, 2, 5, small_grid.n_lat, small_grid.n_lon)).astype(np.float32)
        fc = _forecast(small_grid, small_catalog, fields, (0,))
        means = ensemble_mean(fc)
        assert len(means) == 2
        assert np.allclose(means[0].data, fields[0, 0])

    def test_ensemble_mean_symmetric_members_cancel(self, small_grid, small_catalog, rng):
        x = rng.standard_normal((1, 5, small_grid.n_lat, small_grid.n_lon)).astype(np.float32)
        fields = np.stack([x, -x])
        fc = _forecast(small_grid, small_catalog, fields, (0, 1))
        assert np.allclose(ensemble_mean(fc)[0].data, 0.0, atol=1e-7)

    def test_ensemble_mean_matches_bruteforce(self, small_grid, small_catalog, rng):
        fields = rng.standard_normal((5, 3, 5, small_grid.n_lat, small_grid.n_lon)).astype(np.float32)
        fc = _forecast(small_grid, small_catalog, fields, tuple(range(5)))
        means = ensemble_mean(fc)
        brute = fields.astype(np.float64).sum(axis=0) / 5
        for li in range(3):
            assert np.allclose(means[li].data, brute[li], atol=1e-12)

    def test_valid_times(self, small_grid, small_catalog, rng):
        fields = rng.standard_normal((1, 3, 5, small_grid.n_lat, small_grid.n_lon))
        fc = _forecast(small_grid, small_catalog, fields, (0,))
        hours = [(t - fc.init_time).total_seconds() / 3600 for t in fc.valid_times()]
        assert hours == [6, 12, 18]


class TestScoreReport:
    def test_csv_ordering_and_round_trip(self, tmp_path):
        report = ScoreReport()
        report.add("z-500", 12, "rmse", [2.0, 3.0])
        report.add("msl", 6, "crps", [1.0])
        report.add("msl", 6, "rmse", [1.5, 2.5])
        path = report.to_csv(tmp_path / "report.csv")
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "variable,lead_hours,metric,value,n_samples,std"
        first_cols = [l.split(",")[:3] for l in lines[1:]]
        assert first_cols == sorted(first_cols)
        back = ScoreReport.from_csv(path)
        assert back.value("msl", 6, "rmse") == 2.0

    def test_two_sample_std(self, tmp_path):
        report = ScoreReport()
        report.add("msl", 6, "rmse", [1.0, 3.0])
        row = report.rows[0]
        # two-sample std: |x1 - x2| / sqrt(2)
        assert row.std == pytest.approx(2.0 / np.sqrt(2.0), rel=1e-12)
        assert row.n_samples == 2

    def test_single_sample_has_blank_std(self, tmp_path):
        report = ScoreReport()
        report.add("msl", 6, "rmse", [1.0])
        path = report.to_csv(tmp_path / "r.csv")
        assert path.read_text().strip().splitlines()[1].endswith(",1,")

    def test_negative_score_rejected(self):
        report = ScoreReport()
        with pytest.raises(ValidationError):
            report.add("msl", 6, "rmse", [-1.0])
