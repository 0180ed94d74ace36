"""Tests for data generation, the Monte Carlo harness, and summaries."""

import math

import numpy as np
import pytest

from cfsurv.estimation import EstimationError
from cfsurv.model import FirstStageFamily, ThetaParams
from cfsurv.simulation import (
    SimulationDesign,
    default_theta_true,
    generate_dataset,
    run_monte_carlo,
    summary_table,
)

FULL_LABELS = ["β_{T,0}", "β_{T,1}", "α_T", "λ_T", "β_{C,0}", "β_{C,1}",
               "α_C", "λ_C", "σ_T", "σ_C", "ρ"]


def _stat(summary, variant, label):
    for row in summary.stats[variant]:
        if row.label == label:
            return row
    raise KeyError(label)


class TestGenerateDataset:
    def test_deterministic(self):
        design = SimulationDesign(design_id=3, n=400, replications=1, seed=9)
        a, va = generate_dataset(design, 5)
        b, vb = generate_dataset(design, 5)
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.delta, b.delta)
        assert np.array_equal(a.x_tilde, b.x_tilde)
        assert np.array_equal(a.w_tilde, b.w_tilde)
        assert np.array_equal(a.z, b.z)
        assert np.array_equal(va, vb)

    def test_replications_differ(self):
        design = SimulationDesign(design_id=3, n=400, replications=2, seed=9)
        a, _ = generate_dataset(design, 0)
        b, _ = generate_dataset(design, 1)
        assert not np.array_equal(a.y, b.y)

    def test_design4_censoring_band(self):
        design = SimulationDesign(design_id=4, n=100000, replications=1, seed=1)
        data, _ = generate_dataset(design, 0)
        rate = 1.0 - data.delta.mean()
        assert 0.43 <= rate <= 0.49

    def test_design1_censoring_band(self):
        design = SimulationDesign(design_id=1, n=100000, replications=1, seed=1)
        data, _ = generate_dataset(design, 0)
        rate = 1.0 - data.delta.mean()
        assert 0.48 <= rate <= 0.54

    def test_design_structure(self):
        spec = {1: (FirstStageFamily.LINEAR, False),
                2: (FirstStageFamily.LINEAR, True),
                3: (FirstStageFamily.LOGIT, False),
                4: (FirstStageFamily.LOGIT, True)}
        for design_id, (family, binary_w) in spec.items():
            design = SimulationDesign(design_id=design_id, n=2000,
                                      replications=1, seed=2)
            assert design.family is family
            assert design.binary_instrument is binary_w
            data, v = generate_dataset(design, 0)
            w_vals = np.unique(data.w_tilde)
            if binary_w:
                assert set(w_vals) <= {0.0, 1.0}
            else:
                assert data.w_tilde.min() >= 0.0
                assert data.w_tilde.max() <= 2.0
            if family is FirstStageFamily.LOGIT:
                assert set(np.unique(data.z)) <= {0.0, 1.0}
            else:
                # linear reduced form: the control value is the noise itself
                idx = data.w_design @ design.gamma_true
                assert np.allclose(v, data.z - idx, atol=1e-12)

    def test_nu_variance_switch(self):
        base = SimulationDesign(design_id=1, n=200000, replications=1, seed=3)
        wide = SimulationDesign(design_id=1, n=200000, replications=1, seed=3,
                                nu_variance=4.0)
        _, v_base = generate_dataset(base, 0)
        _, v_wide = generate_dataset(wide, 0)
        assert np.std(v_base) == pytest.approx(math.sqrt(2.0), abs=0.02)
        assert np.std(v_wide) == pytest.approx(2.0, abs=0.02)

    def test_validation(self):
        with pytest.raises(ValueError):
            SimulationDesign(design_id=5, n=100)
        with pytest.raises(ValueError):
            SimulationDesign(design_id=1, n=1)
        with pytest.raises(ValueError):
            SimulationDesign(design_id=1, n=100, seed=-3)

    def test_delta_tie_convention(self):
        # Ties have probability zero under the continuous errors; construct
        # the indicator directly to pin the convention delta = 1(T <= C).
        design = SimulationDesign(design_id=2, n=5000, replications=1, seed=4)
        data, _ = generate_dataset(design, 0)
        assert set(np.unique(data.delta)) == {0, 1}


class TestRunMonteCarlo:
    def test_smoke_all_variants(self):
        design = SimulationDesign(design_id=4, n=300, replications=2, seed=5)
        summary = run_monte_carlo(
            design, ["two_step", "naive", "independent", "oracle"])
        assert summary.healthy
        assert summary.failures == {v: 0 for v in summary.variants}
        assert 0.3 <= summary.censoring_rate <= 0.6
        for variant in summary.variants:
            for row in summary.stats[variant]:
                assert math.isfinite(row.bias)
                assert math.isfinite(row.esd)
                assert math.isfinite(row.rmse)
                assert 0.0 <= row.cr <= 1.0
                # rmse decomposition identity at the aggregate level
                n_ok = design.replications - summary.failures[variant]
                ident = row.bias ** 2 + row.esd ** 2 * (n_ok - 1) / n_ok
                assert row.rmse ** 2 == pytest.approx(ident, abs=1e-10)

    def test_seed_determinism(self):
        design = SimulationDesign(design_id=4, n=250, replications=3, seed=6)
        a = run_monte_carlo(design, ["naive"])
        b = run_monte_carlo(design, ["naive"])
        assert summary_table(a)[1] == summary_table(b)[1]

    def test_parallel_matches_serial(self):
        design = SimulationDesign(design_id=4, n=250, replications=2, seed=7)
        serial = run_monte_carlo(design, ["naive"], n_jobs=1)
        parallel = run_monte_carlo(design, ["naive"], n_jobs=2)
        assert summary_table(serial)[1] == summary_table(parallel)[1]

    def test_failures_counted_and_flagged(self, monkeypatch):
        def always_fails(*args, **kwargs):
            raise EstimationError("boom")

        monkeypatch.setattr("cfsurv.simulation.fit_naive", always_fails)
        design = SimulationDesign(design_id=4, n=250, replications=2, seed=8)
        summary = run_monte_carlo(design, ["naive"])
        assert summary.failures["naive"] == 2
        assert not summary.healthy
        assert summary.stats["naive"] == []

    def test_minimum_replications(self):
        design = SimulationDesign(design_id=4, n=250, replications=1, seed=9)
        with pytest.raises(ValueError):
            run_monte_carlo(design, ["naive"])

    def test_compute_se_false_skips_coverage(self):
        design = SimulationDesign(design_id=4, n=250, replications=2, seed=10)
        summary = run_monte_carlo(design, ["oracle"], compute_se=False)
        row = _stat(summary, "oracle", "α_T")
        assert math.isnan(row.cr) and math.isnan(row.mean_se)
        assert math.isfinite(row.bias)


class TestSummaryTable:
    def test_empty_variants_header_only(self):
        design = SimulationDesign(design_id=4, n=250, replications=2, seed=11)
        summary = run_monte_carlo(design, [])
        text, csv_text = summary_table(summary)
        assert csv_text.splitlines() == [
            "design,n,replications,seed,variant,parameter,truth,"
            "bias,esd,rmse,cr,mean_se,failures"]
        assert "design 4" in text

    def test_row_labels_full_model(self):
        design = SimulationDesign(design_id=4, n=300, replications=2, seed=12)
        summary = run_monte_carlo(design, ["two_step"])
        labels = [row.label for row in summary.stats["two_step"]]
        assert labels == FULL_LABELS

    def test_variant_specific_rows(self):
        design = SimulationDesign(design_id=4, n=300, replications=2, seed=12)
        summary = run_monte_carlo(design, ["naive", "independent"])
        naive_labels = [row.label for row in summary.stats["naive"]]
        indep_labels = [row.label for row in summary.stats["independent"]]
        assert "λ_T" not in naive_labels and "λ_C" not in naive_labels
        assert "ρ" in naive_labels
        assert "ρ" not in indep_labels and "λ_T" in indep_labels

    def test_csv_bit_stable(self):
        design = SimulationDesign(design_id=4, n=250, replications=2, seed=13)
        summary = run_monte_carlo(design, ["naive"])
        assert summary_table(summary)[1] == summary_table(summary)[1]


class TestStatisticalBehavior:
    def test_oracle_dominates_two_step_esd(self):
        # The generated-regressor noise can only inflate dispersion.
        for design_id in (1, 2, 3, 4):
            design = SimulationDesign(design_id=design_id, n=1000,
                                      replications=60, seed=14)
            summary = run_monte_carlo(design, ["oracle", "two_step"],
                                      compute_se=False)
            assert summary.healthy
            esd_oracle = _stat(summary, "oracle", "α_T").esd
            esd_two = _stat(summary, "two_step", "α_T").esd
            assert esd_oracle <= esd_two, (design_id, esd_oracle, esd_two)

    def test_rmse_shrinks_with_sample_size(self):
        rmse = {}
        for n in (250, 500, 1000):
            design = SimulationDesign(design_id=4, n=n, replications=100,
                                      seed=15)
            summary = run_monte_carlo(design, ["two_step"], compute_se=False)
            assert summary.healthy
            rmse[n] = _stat(summary, "two_step", "α_T").rmse
        assert rmse[1000] < rmse[500] < rmse[250], rmse

    def test_oracle_and_independent_reference_values(self):
        # Benchmarks at design 4, n=1000: the oracle is unbiased with ~95%
        # coverage for the causal effect, while the misspecified independence
        # fit inflates the censoring scale by about 0.207.
        design = SimulationDesign(design_id=4, n=1000, replications=120,
                                  seed=16)
        summary = run_monte_carlo(design, ["oracle", "independent"])
        assert summary.healthy
        oracle_alpha = _stat(summary, "oracle", "α_T")
        assert abs(oracle_alpha.bias - (-0.004)) <= 0.045
        assert 0.89 <= oracle_alpha.cr <= 0.99
        indep_sigma_c = _stat(summary, "independent", "σ_C")
        assert abs(indep_sigma_c.bias - 0.207) <= 0.016
