import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from noisymm import cli
from noisymm import config as C
from noisymm import reporting as R
from noisymm import synthdata as S

SMALL = """\
schema_version: 1
label: smoke
generator: {n_classes: 6, per_class: 20, per_class_test: 5, d_v: 8, d_a: 8, seed: 0}
noise: {label_mode: symmetric, label_rate: 0.4, correspondence_rate: 0.2, seed: 1}
train: {epochs: 3, warmup_epochs: 1, batch_size: 16, gamma_switch: 2, d: 8,
        encoder_hidden: [16], classifier_hidden: 16, knn_k: 5, similar_cap: 8, seed: 0}
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text(SMALL)
    return p


class TestConfig:
    def test_round_trip_and_hash(self, cfg_path):
        cfg, text = C.load(cfg_path)
        assert text == SMALL
        again = C.from_dict(yaml.safe_load(cfg.dump()))
        assert again == cfg and again.hash() == cfg.hash()
        assert len(cfg.hash()) == 16
        assert cfg.with_seed(3).hash() != cfg.hash()

    def test_unknown_key(self):
        with pytest.raises(C.ConfigError, match="unknown keys"):
            C.from_dict({"train": {"epoch": 3}})
        with pytest.raises(C.ConfigError, match="top-level"):
            C.from_dict({"trian": {}})

    def test_invalid_value(self):
        with pytest.raises(C.ConfigError):
            C.from_dict({"noise": {"label_rate": 2.0, "label_mode": "symmetric"}})

    def test_defaults(self):
        cfg = C.from_dict({})
        assert cfg.generator == S.GeneratorConfig() and cfg.train.epochs == 40


class TestGenerate:
    def test_writes_dataset_and_exact_audit(self, cfg_path, tmp_path, capsys):
        out = tmp_path / "data"
        assert cli.main(["generate", "--config", str(cfg_path), "--out", str(out)]) == 0
        audit = json.loads((out / "audit.json").read_text())
        assert audit["label_flipped"] == 48 and audit["correspondence_mismatched"] == 24
        sp = S.load_splits(out)
        assert len(sp.train) == 120 and len(sp.test) == 30
        assert "label rate 0.400" in capsys.readouterr().out

    def test_label_sweep(self, cfg_path, tmp_path):
        out = tmp_path / "sweep"
        assert cli.main(["generate", "--config", str(cfg_path), "--out", str(out),
                         "--sweep", "label-rate"]) == 0
        for rate in cli.LABEL_RATE_GRID:
            audit = json.loads((out / f"label_{rate:.2f}" / "audit.json").read_text())
            assert audit["label_flipped"] == int(np.floor(rate * 120 + 0.5))


class TestTrain:
    def test_outputs_and_determinism(self, cfg_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["train", "--config", str(cfg_path), "--out", str(a)]) == 0
        assert cli.main(["train", "--config", str(cfg_path), "--out", str(b)]) == 0
        for name in ("report.csv", "report.jsonl", "ce_trace.csv", "weights.csv", "config.yaml",
                     "resolved_config.yaml", "run.json", "schema.json", "summary.csv",
                     "checkpoint.nmm"):
            assert (a / name).is_file(), name
        assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
        rows = R.read_csv(a / "report.csv")
        assert {r["method"] for r in rows} == {"baseline", "full"}
        assert all(r["schema_version"] == "1" for r in rows)
        assert (a / "config.yaml").read_text() == SMALL

    def test_data_dir(self, cfg_path, tmp_path):
        data = tmp_path / "data"
        cli.main(["generate", "--config", str(cfg_path), "--out", str(data)])
        cfg = yaml.safe_load(SMALL)
        cfg["data_dir"] = str(data)
        p = tmp_path / "with_data.yaml"
        p.write_text(yaml.safe_dump(cfg))
        assert cli.main(["train", "--config", str(p), "--out", str(tmp_path / "r"),
                         "--no-baseline"]) == 0
        assert {r["method"] for r in R.read_csv(tmp_path / "r" / "report.csv")} == {"full"}

    def test_ablate_and_report(self, cfg_path, tmp_path):
        out = tmp_path / "abl"
        assert cli.main(["train", "--config", str(cfg_path), "--out", str(out), "--ablate"]) == 0
        methods = {r["method"] for r in R.read_csv(out / "ablation.csv")}
        assert methods == {"baseline", "none", "ins-only", "cat-only", "full"}
        merged = tmp_path / "merged"
        assert cli.main(["report", str(out), "--out", str(merged), "--bins", "5"]) == 0
        grid = R.read_csv(merged / "grid.csv")
        assert len(grid) == 5 and all(r["n_runs"] == "1" for r in grid)
        hist = R.read_csv(merged / "weight_hist.csv")
        assert len(hist) == 10
        # four variant runs of 120 samples each, 24 of them mismatched
        assert sum(int(r["mismatched"]) for r in hist if r["modality"] == "a") == 4 * 24

    def test_report_rejects_other_schema_version(self, cfg_path, tmp_path):
        out = tmp_path / "r"
        cli.main(["train", "--config", str(cfg_path), "--out", str(out), "--no-baseline"])
        text = (out / "report.csv").read_text().replace("\n1,", "\n2,")
        (out / "report.csv").write_text(text)
        assert cli.main(["report", str(out), "--out", str(tmp_path / "m")]) == 2


class TestExitCodes:
    def test_missing_config(self, tmp_path, capsys):
        assert cli.main(["train", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 2
        assert "nope.yaml" in capsys.readouterr().err

    def test_bad_config(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("train: {epochz: 3}\n")
        assert cli.main(["generate", "--config", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_conflicting_flags(self, cfg_path, tmp_path):
        assert cli.main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "o"),
                         "--ablate", "--sweep", "gamma"]) == 1

    def test_entry_point_usage_error(self):
        res = subprocess.run([sys.executable, "-m", "noisymm.cli", "train"], capture_output=True,
                             text=True)
        assert res.returncode == 1 and "--config" in res.stderr

    def test_help(self):
        res = subprocess.run([sys.executable, "-m", "noisymm.cli", "--help"], capture_output=True,
                             text=True)
        assert res.returncode == 0 and "generate" in res.stdout
