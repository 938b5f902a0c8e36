import csv
import json

import numpy as np
import pytest

from surge.config import ExperimentConfig
from surge.harness import (
    METRIC_COLUMNS,
    TrainingDiverged,
    compare_methods,
    gradient_histogram,
    histogram_from_values,
    noise_contrast,
    run_training,
    summarize,
    trajectory_variance,
)

HEADER = ("step,seed,method,loss,dist_to_opt,lambda_l1,lambda_l2,wb_norm_l1,wb_norm_l2,wa_norm_l1,"
          "wa_norm_l2,alpha_w_l1,alpha_x_l1,alpha_w_l2,alpha_x_l2,cos_w,cos_x")


def small(tmp_path, **kw):
    base = dict(steps=30, seeds=[0, 1], output_dir=str(tmp_path / "runs"))
    base.update(kw)
    return ExperimentConfig(**base)


class TestRunTraining:
    def test_header_and_rows(self, tmp_path):
        r = run_training(small(tmp_path), "STE+SURGE", 0)
        text = (tmp_path / "runs" / "STE_SURGE" / "seed0" / "metrics.csv").read_text()
        assert text.splitlines()[0] == HEADER == ",".join(METRIC_COLUMNS)
        rows = list(csv.DictReader(text.splitlines()))
        assert len(rows) == 30 and rows[-1]["step"] == "30"
        assert all(row["lambda_l1"] and row["wa_norm_l2"] for row in rows)
        assert r.lambdas[1].shape == (30,)

    def test_baseline_leaves_surge_columns_empty(self, tmp_path):
        run_training(small(tmp_path), "STE", 0)
        rows = list(csv.DictReader((tmp_path / "runs" / "STE" / "seed0" / "metrics.csv").open()))
        assert rows[0]["lambda_l1"] == "" and rows[0]["cos_w"] == ""
        assert rows[0]["alpha_w_l1"] != ""

    def test_log_thinning(self, tmp_path):
        r = run_training(small(tmp_path, log_every=7), "FP", 0, write=False)
        assert [row["step"] for row in r.rows] == [7, 14, 21, 28, 30]

    def test_lambda_is_previous_step_ags_value(self, tmp_path):
        r = run_training(small(tmp_path, steps=40), "STE+SURGE", 1, write=False)
        for slot in (1, 2):
            hist = r.ags_history[slot]
            np.testing.assert_array_equal(hist[:, 0], r.lambdas[slot])
            np.testing.assert_array_equal(hist[1:, 0], hist[:-1, 3])
            np.testing.assert_array_equal(hist[:, 3], 0.01 * hist[:, 1] / (hist[:, 2] + 1e-8))
        assert [float(row["lambda_l2"]) for row in r.rows] == list(r.lambdas[2])

    def test_determinism(self, tmp_path):
        a = run_training(small(tmp_path, output_dir=str(tmp_path / "a")), "STE+Noise", 3)
        b = run_training(small(tmp_path, output_dir=str(tmp_path / "b")), "STE+Noise", 3)
        for name in ("metrics.csv", "model.srge"):
            assert (tmp_path / "a" / "STE_Noise" / "seed3" / name).read_bytes() == \
                   (tmp_path / "b" / "STE_Noise" / "seed3" / name).read_bytes()
        assert a.final_loss == b.final_loss

    def test_manifest(self, tmp_path):
        cfg = small(tmp_path)
        run_training(cfg, "BiReal", 1)
        m = json.loads((tmp_path / "runs" / "BiReal" / "seed1" / "manifest.json").read_text())
        assert m["seed"] == 1 and m["method"] == "BiReal" and m["config_digest"] == cfg.digest()

    def test_event_order(self, tmp_path):
        events = []
        run_training(small(tmp_path, steps=3), "STE+SURGE", 0, events=events, write=False)
        phases = ["forward", "loss", "backward", "ags", "update"]
        assert events == [(p, s) for s in (1, 2, 3) for p in phases]

    def test_fp_loss_decreases(self, tmp_path):
        r = run_training(small(tmp_path, steps=200), "FP", 0, write=False)
        assert r.final_loss < r.losses[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_step(self, tmp_path):
        cfg = small(tmp_path, optimizer="sgd", lr=1e300, steps=50)
        with pytest.raises(TrainingDiverged) as info:
            run_training(cfg, "FP", 0, write=False)
        assert 1 <= info.value.step <= 51

    def test_classifier(self, tmp_path):
        cfg = small(tmp_path, task="classifier", steps=20, layer_sizes=[2, 8, 8, 2], n_samples=200)
        r = run_training(cfg, "STE+SURGE", 0, write=False)
        assert 0.0 <= r.test_accuracy <= 1.0 and r.final_dist is None

    def test_cnn_classifier(self, tmp_path):
        cfg = small(tmp_path, task="classifier", model_kind="cnn", dataset="stripes", layer_sizes=[1, 4, 4, 2],
                    steps=5, n_samples=60, batch_size=8, surge_star=True)
        assert run_training(cfg, "STE+SURGE", 0, write=False).test_accuracy is not None


class TestSummaries:
    def test_compare_and_duplicates(self, tmp_path):
        cfg = small(tmp_path, methods=["STE", "STE", "STE+SURGE"], steps=10)
        s = compare_methods(cfg)
        assert s["methods"][0] == s["methods"][1]
        assert (tmp_path / "runs" / "summary.json").exists() and (tmp_path / "runs" / "summary.csv").exists()

    def test_missing_runs_listed(self, tmp_path):
        cfg = small(tmp_path, steps=5)
        res = {("STE", 0): run_training(cfg, "STE", 0, write=False)}
        with pytest.raises(KeyError, match="STE/seed1"):
            summarize(res, ["STE"], [0, 1])

    def test_permutation_invariant(self, tmp_path):
        cfg = small(tmp_path, steps=5, seeds=[0, 1, 2])
        res = {(m, s): run_training(cfg, m, s, write=False) for m in ("STE", "FP") for s in (0, 1, 2)}
        assert summarize(res, ["STE", "FP"], [2, 0, 1]) == summarize(res, ["STE", "FP"], [0, 1, 2])

    def test_trajectory_variance(self):
        assert trajectory_variance([1.0]) == 0.0
        assert trajectory_variance([3.0, 2.0, 1.0]) == 0.0
        assert trajectory_variance([0.0, 1.0, 0.0]) == 1.0

    def test_noise_contrast_keys(self, tmp_path):
        s = noise_contrast(small(tmp_path, steps=10, seeds=[0]), write=False)
        assert {m["method"] for m in s["methods"]} >= {"STE", "STE+Noise", "STE+SURGE"}
        assert all(m["median_trajectory_variance"] >= 0 for m in s["methods"])


class TestHistogram:
    def test_all_zero(self):
        h = histogram_from_values(np.zeros(10))
        assert h["counts"] == [10] and h["zero_fraction"] == 1.0
        assert h["cdf"] == [1.0]

    def test_cdf_monotone(self):
        h = histogram_from_values(np.random.default_rng(0).standard_normal(500))
        assert np.all(np.diff(h["cdf"]) >= 0) and h["cdf"][-1] == 1.0
        assert sum(h["counts"]) == 500

    def test_from_runs(self, tmp_path):
        cfg = small(tmp_path, steps=10, seeds=[0], record_grads_layer=2)
        for m in ("STE", "STE+SURGE"):
            run_training(cfg, m, 0)
        h = gradient_histogram(tmp_path / "runs", 2)
        assert set(h["methods"]) == {"STE", "STE+SURGE"}
        assert h["methods"]["STE"]["bin_edges"] == h["methods"]["STE+SURGE"]["bin_edges"]

    def test_uninstrumented_layer(self, tmp_path):
        run_training(small(tmp_path, steps=2, seeds=[0]), "STE", 0)
        with pytest.raises(ValueError, match="layer 1"):
            gradient_histogram(tmp_path / "runs", 1)
