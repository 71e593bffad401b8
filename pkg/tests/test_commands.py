import csv
import json
import os

import pytest

from src.commands import run_files
from src.commands.sweepAblation import axis_overrides
from src.config import settings
from src.storage import token_store
from tests.conftest import DATA_OVERRIDES, run_driver


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def _json(path):
    with open(path) as f:
        return json.load(f)


@pytest.fixture(scope="session")
def diagnosed_runs(star_run, baseline_run, run_overrides):
    for run in (star_run, baseline_run):
        assert run_driver("attn", "--run", run, overrides=run_overrides) == 0
        assert run_driver("probe", "--run", run, overrides=run_overrides) == 0
        assert run_driver("invariance", "--run", run, overrides=run_overrides) == 0
    return star_run, baseline_run


class TestMakeData:
    def test_counts(self, data_dir):
        header, sequences = token_store.read_tokens(os.path.join(data_dir, run_files.TOKENS_FILE))
        assert header == {"V": 8, "T": 16, "C": 3, "count": 18}
        assert sorted({s.condition for s in sequences}) == [0, 1, 2]
        assert all(sum(s.condition == c for s in sequences) == 6 for c in range(3))

    def test_deterministic(self, tmp_path, data_dir):
        out = str(tmp_path / "again")
        assert run_driver("make-data", "--out", out, overrides=DATA_OVERRIDES) == 0
        for name in (run_files.TOKENS_FILE, run_files.CODEBOOK_FILE, run_files.DATASET_FILE):
            assert _read(os.path.join(out, name)) == _read(os.path.join(data_dir, name))

    def test_flags_override_config(self, tmp_path, capsys):
        out = str(tmp_path / "small")
        assert run_driver("make-data", "--out", out, "--classes", "2", "--per-class", "3",
                          overrides=DATA_OVERRIDES) == 0
        header, _ = token_store.read_tokens(os.path.join(out, run_files.TOKENS_FILE))
        assert header["C"] == 2 and header["count"] == 6
        assert "class 1: 3" in capsys.readouterr().out


class TestUsage:
    def test_unknown_override_key(self, tmp_path):
        assert run_driver("make-data", "--out", str(tmp_path), overrides=["model.depth=3"]) == 2

    def test_no_command(self):
        assert run_driver() == 2

    def test_help_json(self, capsys):
        assert run_driver("--help-json") == 0
        reference = json.loads(capsys.readouterr().out)
        assert set(reference["commands"]) == {"make-data", "train", "sample", "probe", "attn", "invariance",
                                              "gradcheck", "sweep", "compare", "report"}
        train_flags = {f for entry in reference["commands"]["train"]["flags"] for f in entry["flags"]}
        assert {"--star", "--baseline", "--resume", "--out"} <= train_flags

    def test_training_refuses_a_used_directory(self, star_run, run_overrides):
        assert run_driver("train", "--out", star_run, overrides=run_overrides) == 2

    def test_missing_dataset(self, tmp_path, run_overrides):
        overrides = run_overrides + [f"data.dir={tmp_path / 'nothing'}"]
        assert run_driver("train", "--out", str(tmp_path / "run"), overrides=overrides) == 4


class TestTrain:
    def test_run_files(self, star_run):
        for name in (run_files.CONFIG_FILE, run_files.MANIFEST_FILE, run_files.METRICS_FILE,
                     run_files.CHECKPOINT_FILE, run_files.FINISHED_FILE):
            assert os.path.exists(os.path.join(star_run, name)), name
        manifest = _json(os.path.join(star_run, run_files.MANIFEST_FILE))
        assert manifest["command"] == "train"
        assert manifest["config"]["model.layers"] == "2"
        assert len(manifest["code_sha256"]) == 64
        assert set(manifest["named_seeds"]) == {"data", "mask", "dropout", "positions", "sample", "probe"}
        assert _json(os.path.join(star_run, run_files.FINISHED_FILE))["step"] == 4

    def test_baseline_trains_next_token_only(self, baseline_run):
        with open(os.path.join(baseline_run, run_files.METRICS_FILE)) as f:
            rows = [json.loads(line) for line in f]
        assert [r["step"] for r in rows] == [1, 2, 3, 4]
        for row in rows:
            assert row["l_mim"] == 0.0 and row["l_step"] == 0.0 and row["l_view"] == 0.0
            assert row["total"] == row["l_ar"]

    def test_star_uses_every_loss(self, star_run):
        with open(os.path.join(star_run, run_files.METRICS_FILE)) as f:
            rows = [json.loads(line) for line in f]
        assert all(r["l_mim"] > 0 and r["l_step"] > 0 and r["l_view"] > 0 for r in rows)

    def test_same_seed_same_run(self, tmp_path, star_run, run_overrides):
        out = str(tmp_path / "twin")
        assert run_driver("train", "--star", "--out", out, overrides=run_overrides) == 0
        assert _read(os.path.join(out, run_files.METRICS_FILE)) == _read(os.path.join(star_run, run_files.METRICS_FILE))
        assert (_json(os.path.join(out, run_files.FINISHED_FILE))["params_sha256"]
                == _json(os.path.join(star_run, run_files.FINISHED_FILE))["params_sha256"])

    def test_resume_matches_a_straight_run(self, tmp_path, star_run, run_overrides):
        out = str(tmp_path / "resumed")
        assert run_driver("train", "--star", "--out", out, "--steps", "2", overrides=run_overrides) == 0
        assert _json(os.path.join(out, run_files.FINISHED_FILE))["step"] == 2
        assert run_driver("train", "--resume", "--out", out, "--steps", "4") == 0
        assert _read(os.path.join(out, run_files.METRICS_FILE)) == _read(os.path.join(star_run, run_files.METRICS_FILE))
        finished = _json(os.path.join(out, run_files.FINISHED_FILE))
        assert finished["resumed"] is True
        assert finished["params_sha256"] == _json(os.path.join(star_run, run_files.FINISHED_FILE))["params_sha256"]

    def test_resume_needs_a_run(self, tmp_path):
        assert run_driver("train", "--resume", "--out", str(tmp_path / "none")) == 4


class TestSample:
    def test_repeatable(self, tmp_path, star_run):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert run_driver("sample", "--run", star_run, "--class", "1", "--count", "3", "--out", a) == 0
        assert run_driver("sample", "--run", star_run, "--class", "1", "--count", "3", "--out", b) == 0
        assert _read(os.path.join(a, "samples.startok")) == _read(os.path.join(b, "samples.startok"))
        header, samples = token_store.read_tokens(os.path.join(a, "samples.startok"))
        assert header["count"] == 3
        assert all(s.condition == 1 for s in samples)
        assert len([n for n in os.listdir(a) if n.endswith(".png")]) == 3

    def test_model_mismatch(self, tmp_path, star_run):
        assert run_driver("sample", "--run", star_run, "--out", str(tmp_path / "s"),
                          overrides=["model.width=32"]) == 4

    def test_top_k_above_vocab(self, tmp_path, star_run):
        assert run_driver("sample", "--run", star_run, "--top-k", "9", "--out", str(tmp_path / "s")) == 2


class TestDiagnosticsCommands:
    def test_files(self, diagnosed_runs):
        for run in diagnosed_runs:
            locality = _json(os.path.join(run, "locality.json"))
            assert locality["traces"] == 8
            assert len(locality["mean_attention"]) == 2
            probe = _json(os.path.join(run, "probe.json"))
            assert sorted(int(s) for s in probe["accuracies"]) == [4, 8, 12, 16]
            assert probe["permuted_labels"] is False
            invariance = _json(os.path.join(run, "invariance.json"))
            assert invariance["pairs"] == 6 and invariance["layer"] == 1
            assert invariance["feature_cosine"] is not None

    def test_tokenizer_only_invariance(self, data_dir, capsys):
        assert run_driver("invariance", "--data", data_dir, "--pairs", "4", overrides=DATA_OVERRIDES) == 0
        assert "Token change rate" in capsys.readouterr().out

    def test_compare(self, diagnosed_runs):
        star, baseline = diagnosed_runs
        assert run_driver("compare", "--baseline", baseline, "--star", star) == 0
        verdicts = _json(os.path.join(star, "compare.json"))["verdicts"]
        claims = {v["claim"] for v in verdicts}
        assert "final-layer mean attention distance is larger" in claims
        assert "inter-view feature cosine is higher" in claims
        assert all(isinstance(v["holds"], bool) for v in verdicts)

    def test_report(self, tmp_path, diagnosed_runs):
        out = str(tmp_path / "report")
        assert run_driver("report", "--runs", *diagnosed_runs, "--out", out) == 0
        names = set(os.listdir(out))
        assert {"locality.csv", "probe.csv", "invariance.csv", "probe.svg", "locality_distance.svg",
                "attention_star_layer1.svg", "attention_baseline_layer2.svg"} <= names
        with open(os.path.join(out, "probe.csv")) as f:
            assert len(list(csv.DictReader(f))) == 8


def test_gradcheck_command():
    assert run_driver("gradcheck", "--max-coords", "2", "--seed", "3") == 0


def test_sweep_over_loss_settings(tmp_path, run_overrides):
    out = str(tmp_path / "sweep")
    assert run_driver("sweep", "--axis", "losses", "--out", out, overrides=run_overrides) == 0
    with open(os.path.join(out, "sweep.csv")) as f:
        rows = list(csv.DictReader(f))
    assert [r["value"] for r in rows] == ["none", "mim", "mim+step", "mim+view", "mim+step+view"]
    assert all(r["exit_code"] == "0" for r in rows)
    assert float(rows[0]["l_mim"]) == 0.0 and float(rows[0]["l_step"]) == 0.0
    assert float(rows[-1]["l_view"]) > 0.0
    reference = settings.load_config(os.path.join(rows[0]["run"], run_files.CONFIG_FILE))
    assert reference["model"].getfloat("mask_ratio") == 0.0
    assert reference["loss"].getfloat("alpha") == 0.0 and reference["loss"].getfloat("beta") == 0.0
    masked = settings.load_config(os.path.join(rows[1]["run"], run_files.CONFIG_FILE))
    assert masked["model"].getfloat("mask_ratio") == 0.25
    manifest = _json(os.path.join(out, run_files.MANIFEST_FILE))
    assert manifest["axis"] == "losses" and manifest["jobs"] == 1


def test_reference_loss_row_trains_without_masking():
    config = settings.load_config(overrides=axis_overrides("losses", "none", 6))
    assert config["model"].getfloat("mask_ratio") == 0.0
    assert config["loss"].getfloat("alpha") == 0.0 and config["loss"].getfloat("beta") == 0.0
    mim_only = settings.load_config(overrides=axis_overrides("losses", "mim", 6))
    assert mim_only["model"].getfloat("mask_ratio") == 0.25
    assert mim_only["loss"].getboolean("use_mim") and not mim_only["loss"].getboolean("use_step")
