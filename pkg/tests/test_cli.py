import json

import pytest

from surge.checkpoint import has_auxiliary, load_checkpoint
from surge.cli import main


def write_config(tmp_path, text):
    p = tmp_path / "cfg.yaml"
    p.write_text(text)
    return p


class TestTrain:
    def test_flags_override_config(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "steps: 500\nseeds: [0, 1, 2]\n")
        out = tmp_path / "runs"
        code = main(["train", "--config", str(cfg), "--method", "STE+SURGE", "--seed", "1", "--steps", "7",
                     "--eta", "0.05", "--output-dir", str(out)])
        assert code == 0
        run = out / "STE_SURGE" / "seed1"
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["config"]["eta"] == 0.05 and manifest["config"]["steps"] == 7
        assert len((run / "metrics.csv").read_text().splitlines()) == 8
        assert not (out / "STE_SURGE" / "seed0").exists()
        assert "STE+SURGE" in capsys.readouterr().out

    def test_bad_config_value(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "eta: -1\n")
        assert main(["train", "--config", str(cfg)]) == 1
        assert "eta" in capsys.readouterr().err

    def test_unknown_method(self, tmp_path):
        assert main(["train", "--method", "XNOR", "--output-dir", str(tmp_path)]) == 1

    def test_usage_error_is_config_error(self):
        with pytest.raises(SystemExit) as info:
            main(["train", "--steps", "many"])
        assert info.value.code == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_failure(self, tmp_path):
        code = main(["train", "--method", "FP", "--seed", "0", "--optimizer", "sgd", "--lr", "1e300",
                     "--steps", "20", "--output-dir", str(tmp_path / "runs")])
        assert code == 2

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        code = main(["train", "--method", "STE", "--seed", "0", "--steps", "2", "--output-dir", str(blocker / "runs")])
        assert code == 3

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.yaml")]) == 3

    def test_theory_task(self, tmp_path):
        cfg = write_config(tmp_path, f"task: theory\nd: 8\nsamples: 2000\noutput_dir: {tmp_path / 'th'}\n")
        assert main(["train", "--config", str(cfg)]) == 0
        report = json.loads((tmp_path / "th" / "theory.json").read_text())
        assert report["runs"][0]["n"] == 2000


class TestCompare:
    def test_summary_written(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "methods: [STE, STE+SURGE]\nseeds: [0, 1]\nsteps: 5\n")
        assert main(["compare", "--config", str(cfg), "--output-dir", str(tmp_path / "runs")]) == 0
        summary = json.loads((tmp_path / "runs" / "summary.json").read_text())
        assert [m["method"] for m in summary["methods"]] == ["STE", "STE+SURGE"]
        assert "median_final_loss" in capsys.readouterr().out


class TestTheory:
    def test_report_file(self, tmp_path):
        out = tmp_path / "t.json"
        assert main(["theory", "--d", "8", "--samples", "3000", "--seed", "2", "--models", "2", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["seed"] == 2 and len(report["runs"]) == 2

    def test_invalid_dimension(self):
        assert main(["theory", "--d", "0"]) == 1


class TestHistogramAndStrip:
    def test_histogram(self, tmp_path):
        runs = tmp_path / "runs"
        for m in ("STE", "STE+SURGE"):
            assert main(["train", "--method", m, "--seed", "0", "--steps", "5", "--record-grads-layer", "2",
                         "--output-dir", str(runs)]) == 0
        out = tmp_path / "h.json"
        assert main(["histogram", "--run", str(runs), "--layer", "2", "--out", str(out)]) == 0
        assert set(json.loads(out.read_text())["methods"]) == {"STE", "STE+SURGE"}
        assert main(["histogram", "--run", str(runs), "--layer", "1"]) == 1

    def test_strip(self, tmp_path, capsys):
        runs = tmp_path / "runs"
        main(["train", "--method", "STE+SURGE", "--seed", "0", "--steps", "3", "--output-dir", str(runs)])
        src = runs / "STE_SURGE" / "seed0" / "model.srge"
        dst = tmp_path / "slim.srge"
        assert main(["strip", "--in", str(src), "--out", str(dst)]) == 0
        assert dst.stat().st_size < src.stat().st_size
        assert has_auxiliary(load_checkpoint(src)) and not has_auxiliary(load_checkpoint(dst))
        assert "bytes" in capsys.readouterr().out

    def test_strip_missing_input(self, tmp_path):
        assert main(["strip", "--in", str(tmp_path / "none.srge"), "--out", str(tmp_path / "o.srge")]) == 3

    def test_strip_corrupt_input(self, tmp_path):
        bad = tmp_path / "bad.srge"
        bad.write_bytes(b"nope")
        assert main(["strip", "--in", str(bad), "--out", str(tmp_path / "o.srge")]) == 3
