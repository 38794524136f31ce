import numpy as np
import pytest

from oracle_utils import ORACLE_INIT, oracle_subject

from pmbnn.errors import OutOfBounds, SegmentTooShort, Singularity
from pmbnn.experiment import (
    ActivityPhase,
    ExperimentConfig,
    SyntheticSpec,
    generate_synthetic_subject,
    reconstruct_pmbnn_r,
    run_subject_experiment,
    split_by_activity,
)
from pmbnn.physio_model import LambdaParams, de_residual_series
from pmbnn.signal_pipeline import SubjectRecord, UniformSeries, preprocess_subject
from pmbnn.stats_eval import rmse
from pmbnn.training import PmFitConfig, TrainConfig, fit_pm, simulate_record_hr


def make_record(n_per_segment, labels=None):
    chunks = []
    bounds = []
    pos = 0
    for n in n_per_segment:
        chunks.append(np.linspace(0.5, 2.5, n))
        bounds.append((pos, pos + n))
        pos += n
    labels = labels or [f"act{i}" for i in range(len(n_per_segment))]
    all_labels = []
    for (a, b), lab in zip(bounds, labels):
        all_labels.extend([lab] * (b - a))
    vo2 = UniformSeries(0.0, 1.0, np.concatenate(chunks), tuple(bounds), "L/min")
    hr = UniformSeries(0.0, 1.0, 60.0 + np.arange(pos, dtype=float), tuple(bounds), "bpm")
    return SubjectRecord("t", vo2, hr, tuple(all_labels))


class TestSplitByActivity:
    def test_eighty_twenty_on_300(self):
        split = split_by_activity(make_record([300]))
        assert len(split.train) == 240 and len(split.test) == 60

    def test_floor_rule_on_5(self):
        split = split_by_activity(make_record([5]))
        assert len(split.train) == 4 and len(split.test) == 1

    def test_three_segments_order_preserved(self):
        rec = make_record([100, 100, 100], ["rest", "cycle", "run"])
        split = split_by_activity(rec)
        assert split.train.vo2.segment_bounds == ((0, 80), (80, 160), (160, 240))
        assert split.train.segment_labels() == ("rest", "cycle", "run")
        assert split.test.segment_labels() == ("rest", "cycle", "run")

    def test_coverage_and_disjointness(self):
        rec = make_record([17, 41, 99])
        split = split_by_activity(rec)
        merged = np.sort(np.concatenate([split.train_indices, split.test_indices]))
        np.testing.assert_array_equal(merged, np.arange(len(rec)))

    def test_values_follow_provenance(self):
        rec = make_record([30, 50])
        split = split_by_activity(rec)
        np.testing.assert_array_equal(
            split.train.hr.values, rec.hr.values[split.train_indices]
        )
        np.testing.assert_array_equal(
            split.test.vo2.values, rec.vo2.values[split.test_indices]
        )

    def test_deterministic(self):
        rec = make_record([64, 101])
        a, b = split_by_activity(rec), split_by_activity(rec)
        assert a.provenance_hash() == b.provenance_hash()

    def test_short_segment_rejected(self):
        with pytest.raises(SegmentTooShort):
            split_by_activity(make_record([4]))


class TestGenerateSyntheticSubject:
    def test_rest_plateau_constant_hr(self):
        lam = LambdaParams(0.02, 0.1, -5.3, 10.5, 0.44, 0.0)
        spec = SyntheticSpec(
            "flat", (ActivityPhase("rest", 120, 0.4),), lam, hr0=68.0, seed=1
        )
        rec = generate_synthetic_subject(spec)
        np.testing.assert_allclose(rec.hr.values, 68.0, atol=1e-12)
        np.testing.assert_allclose(rec.vo2.values, 0.4, atol=1e-12)

    def test_zero_noise_satisfies_dynamics(self):
        lam_true, _, rec = oracle_subject(5)
        res = de_residual_series(rec.hr, rec.vo2, lam_true)
        assert np.max(np.abs(res)) <= 1e-8

    def test_same_seed_bitwise_identical(self):
        _, _, a = oracle_subject(6, noise_sigma_hr=3.0)
        _, _, b = oracle_subject(6, noise_sigma_hr=3.0)
        np.testing.assert_array_equal(a.hr.values, b.hr.values)
        np.testing.assert_array_equal(a.vo2.values, b.vo2.values)

    def test_labels_merge_adjacent_phases(self):
        _, _, rec = oracle_subject(0)
        assert rec.segment_labels() == ("rest", "cycle", "run")
        assert len(rec.vo2.segment_bounds) == 3

    def test_vo2_continuous_across_phases(self):
        _, _, rec = oracle_subject(0)
        steps = np.abs(np.diff(rec.vo2.values))
        assert steps.max() < 0.1

    def test_singular_spec_rejected_with_diagnostic(self):
        lam = LambdaParams(0.011, 0.149, -5.9, 12.5, 0.59, 0.0)
        spec = SyntheticSpec(
            "bad",
            (ActivityPhase("rest", 120, 0.4), ActivityPhase("run", 120, 3.0)),
            lam, hr0=70.0, seed=1,
        )
        with pytest.raises(Singularity):
            generate_synthetic_subject(spec)


class TestReconstruct:
    def test_true_lambda_reproduces_measured(self):
        lam_true, _, rec = oracle_subject(7)
        split = split_by_activity(rec)
        recon = reconstruct_pmbnn_r(split.test, lam_true)
        assert rmse(split.test.hr.values, recon.values) <= 1e-6

    def test_out_of_bounds_lambda_rejected(self):
        _, _, rec = oracle_subject(7)
        split = split_by_activity(rec)
        bad = LambdaParams(0.5, 0.1, -5.3, 10.5, 0.44, 0.0)
        with pytest.raises(OutOfBounds):
            reconstruct_pmbnn_r(split.test, bad)

    def test_singular_lambda_surfaces_no_partial_series(self):
        lam = LambdaParams(0.011, 0.149, -5.9, 12.5, 0.59, 0.0)
        n = 200
        v = UniformSeries(0.0, 1.0, np.linspace(0.4, 3.0, n), ((0, n),), "L/min")
        hr = UniformSeries(0.0, 1.0, np.full(n, 80.0), ((0, n),), "bpm")
        rec = SubjectRecord("s", v, hr, ("run",) * n)
        with pytest.raises(Singularity):
            reconstruct_pmbnn_r(rec, lam)


@pytest.fixture(scope="module")
def experiment_result():
    _, _, rec = oracle_subject(0, noise_sigma_hr=3.0)
    cfg = ExperimentConfig(
        pmbnn=TrainConfig(seed=11),
        fcnn=TrainConfig(seed=11),
        pm_fit=PmFitConfig(),
    )
    return run_subject_experiment(preprocess_subject(rec), cfg)


class TestRunSubjectExperiment:
    def test_easy_subject_pmbnn_r2(self, experiment_result):
        _, results, _ = experiment_result
        assert results["pmbnn"].r2 >= 0.9

    def test_all_models_present_with_shared_split(self, experiment_result):
        split, results, manifest = experiment_result
        assert set(results) == {"pmbnn", "fcnn", "pm", "pmbnn_r"}
        assert manifest["split_hash"] == split.provenance_hash()

    def test_per_activity_metrics_for_each_label(self, experiment_result):
        _, results, _ = experiment_result
        for res in results.values():
            assert set(res.per_activity) == {"rest", "cycle", "run"}
            for metrics in res.per_activity.values():
                assert metrics["rmse"] >= 0

    def test_pm_prediction_is_reconstruction_code_path(self, experiment_result):
        split, results, _ = experiment_result
        again = reconstruct_pmbnn_r(split.test, results["pm"].lam).values
        np.testing.assert_array_equal(results["pm"].predictions, again)

    def test_manifest_row_shape(self, experiment_result):
        # lambda table + metrics per model, as in the identified-parameters table
        _, _, manifest = experiment_result
        for name in ("pmbnn", "pm", "pmbnn_r"):
            entry = manifest["models"][name]
            assert len(entry["lambda"]) == 6
            assert "r2" in entry and "rmse" in entry


def test_oracle_soundness_zero_noise_fit():
    _, _, rec = oracle_subject(8)
    split = split_by_activity(rec)
    lam_fit = fit_pm(split.train, init=ORACLE_INIT)
    pred = simulate_record_hr(split.test, lam_fit).values
    assert rmse(split.test.hr.values, pred) <= 0.5
