"""End-to-end tests for the command-line front end.

A module-scoped synthetic corpus keeps the suite fast: generate once,
then exercise split/train/eval/mos/gmad/gradcheck against it.
"""

import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from vqmoe.cli import (
    DEFAULT_MODEL,
    main,
    read_config_file,
    resolve_run_config,
)
from vqmoe.dataset import read_manifest
from vqmoe.errors import ConfigError, FormatError
from vqmoe.tensorio import read_tensor

SMALL_CFG = """\
# small shape set for fast runs
t_frames = 2
height = 2
width = 2
l_tokens = 3
channels = 8
m_spatial = 2
n_temporal = 2
z_alignment = 2
k = 1
lr0 = 0.005
epochs = 3
batch_size = 4
seed = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus + splits + one trained run, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL_CFG)
    corpus = root / "corpus"
    assert main([
        "synth", "--out-dir", str(corpus), "--n-videos", "200",
        "--sigma", "0.1", "--seed", "0", "--config", str(cfg),
    ]) == 0
    splits_dir = root / "splits"
    assert main([
        "split", "--out-dir", str(splits_dir),
        "--manifest", str(corpus / "manifest.jsonl"), "--seeds", "3",
    ]) == 0
    run = root / "run0"
    assert main([
        "train", "--out-dir", str(run),
        "--manifest", str(corpus / "manifest.jsonl"),
        "--split", str(splits_dir / "splits.json"),
        "--split-seed", "0", "--config", str(cfg),
    ]) == 0
    return {
        "root": root,
        "cfg": cfg,
        "corpus": corpus,
        "manifest": corpus / "manifest.jsonl",
        "splits": splits_dir / "splits.json",
        "run": run,
    }


class TestConfigFile:
    def test_parses_comments_types_and_bools(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text(
            "# comment\n\nepochs = 7  # trailing\nlr0 = 0.01\n"
            "fusion_on = false\ndtype = \"float64\"\n"
        )
        raw = read_config_file(p)
        assert raw == {
            "epochs": 7, "lr0": 0.01, "fusion_on": False, "dtype": "float64",
        }

    def test_rejects_unknown_key(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("bogus = 1\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            read_config_file(p)

    def test_rejects_duplicate_key(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("epochs = 1\nepochs = 2\n")
        with pytest.raises(ConfigError, match="duplicate"):
            read_config_file(p)

    def test_rejects_malformed_line(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("just words\n")
        with pytest.raises(FormatError, match="key = value"):
            read_config_file(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError, match="not found"):
            read_config_file(tmp_path / "nope.cfg")

    def test_resolve_defaults_and_overrides(self, tmp_path):
        config, schedule, weights = resolve_run_config(None)
        assert config.to_dict()["channels"] == DEFAULT_MODEL["channels"]
        assert schedule.epochs == 50
        assert weights.overall == 0.25

        p = tmp_path / "c.cfg"
        p.write_text("epochs = 2\nweight_word = 0.5\nchannels = 8\n")
        config, schedule, weights = resolve_run_config(
            p, dtype="float64", seed=9
        )
        assert config.channels == 8
        assert config.dtype == "float64"
        assert schedule.epochs == 2
        assert schedule.seed == 9
        assert weights.word == 0.5


class TestSynthAndSplit:
    def test_artifacts_exist(self, workspace):
        corpus = workspace["corpus"]
        assert (corpus / "manifest.jsonl").is_file()
        assert (corpus / "dataset_meta.json").is_file()
        echo = json.loads((corpus / "resolved_config.json").read_text())
        assert echo["command"] == "synth"
        assert echo["model"]["channels"] == 8
        records = read_manifest(corpus / "manifest.jsonl")
        assert len(records) == 200
        arr = read_tensor(corpus / records[0].f_vst_path)
        assert arr.shape == (2, 2, 2, 8)

    def test_split_sizes_and_echo(self, workspace):
        payload = json.loads(workspace["splits"].read_text())
        assert len(payload["splits"]) == 3
        first = payload["splits"][0]
        counts = {"train": 0, "val": 0, "test": 0}
        for split in first["assignment"].values():
            counts[split] += 1
        assert counts == {"train": 120, "val": 40, "test": 40}

    def test_synth_dtype_override(self, tmp_path):
        out = tmp_path / "c64"
        assert main([
            "synth", "--out-dir", str(out), "--n-videos", "1",
            "--sigma", "0.0", "--dtype", "float64",
        ]) == 0
        rec = read_manifest(out / "manifest.jsonl")[0]
        assert read_tensor(out / rec.f_vst_path).dtype.name == "float64"

    def test_synth_usage_errors(self, tmp_path):
        assert main([
            "synth", "--out-dir", str(tmp_path / "x"), "--n-videos", "-1",
        ]) == 1
        assert main([
            "synth", "--out-dir", str(tmp_path / "y"), "--sigma", "-0.5",
        ]) == 1

    def test_split_missing_manifest(self, tmp_path):
        assert main([
            "split", "--out-dir", str(tmp_path / "s"),
            "--manifest", str(tmp_path / "nope.jsonl"),
        ]) == 2


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace["run"]
        assert (run / "checkpoint_best.zip").is_file()
        assert (run / "checkpoint_final.zip").is_file()
        summary = json.loads((run / "train_summary.json").read_text())
        assert summary["epochs_run"] == 3
        assert summary["aborted"] is False
        assert summary["best_val_srcc"] > 0.8
        log_lines = (run / "train_log.jsonl").read_text().splitlines()
        assert len(log_lines) == 3
        echo = json.loads((run / "resolved_config.json").read_text())
        assert echo["command"] == "train"
        assert echo["schedule"]["epochs"] == 3
        assert echo["weights"]["overall"] == 0.25

    def test_unknown_split_seed(self, workspace, tmp_path):
        assert main([
            "train", "--out-dir", str(tmp_path / "r"),
            "--manifest", str(workspace["manifest"]),
            "--split", str(workspace["splits"]),
            "--split-seed", "99", "--config", str(workspace["cfg"]),
        ]) == 2

    def test_divergence_exits_numerical(self, workspace, tmp_path):
        cfg = tmp_path / "diverge.cfg"
        cfg.write_text(SMALL_CFG.replace("lr0 = 0.005", "lr0 = 1e200")
                       .replace("epochs = 3", "epochs = 1"))
        out = tmp_path / "r"
        assert main([
            "train", "--out-dir", str(out),
            "--manifest", str(workspace["manifest"]),
            "--split", str(workspace["splits"]),
            "--config", str(cfg),
        ]) == 3
        summary = json.loads((out / "train_summary.json").read_text())
        assert summary["aborted"] is True

    def test_does_not_mutate_inputs(self, workspace, tmp_path):
        manifest = workspace["manifest"]
        before = manifest.read_bytes()
        splits_before = workspace["splits"].read_bytes()
        assert main([
            "train", "--out-dir", str(tmp_path / "r"),
            "--manifest", str(manifest),
            "--split", str(workspace["splits"]),
            "--config", str(workspace["cfg"]),
        ]) == 0
        assert manifest.read_bytes() == before
        assert workspace["splits"].read_bytes() == splits_before


def _write_perfect_predictions(manifest, out_csv):
    rows = []
    for rec in read_manifest(manifest):
        lab = rec.labels
        rows.append((rec.video_id, "spatial", lab["q_spatial"]))
        rows.append((rec.video_id, "temporal", lab["q_temporal"]))
        rows.append((rec.video_id, "overall_percept", lab["q_overall_percept"]))
        rows.append((rec.video_id, "sentence", lab["q_sentence"]))
        for pos, (word, keep) in enumerate(
            zip(lab["q_word"], rec.token_mask), start=1
        ):
            if keep and word is not None:
                rows.append((rec.video_id, f"word[{pos}]", word))
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "dimension", "score"])
        writer.writerows(rows)


class TestEval:
    def test_perfect_predictions_score_one(self, workspace, tmp_path):
        preds = tmp_path / "perfect.csv"
        _write_perfect_predictions(workspace["manifest"], preds)
        out = tmp_path / "eval"
        assert main([
            "eval", "--out-dir", str(out),
            "--manifest", str(workspace["manifest"]),
            "--predictions", str(preds),
        ]) == 0
        report = json.loads((out / "eval_report.json").read_text())
        dims = report["dimensions"]
        assert set(dims) == {
            "spatial", "temporal", "overall_percept", "word", "sentence",
        }
        for row in dims.values():
            assert row["srcc"] == pytest.approx(1.0, abs=1e-9)
            assert row["plcc"] == pytest.approx(1.0, abs=1e-9)
            assert row["krcc"] == pytest.approx(1.0, abs=1e-9)
            assert row["rmse"] == 0.0

    def test_checkpoint_single_split(self, workspace, tmp_path):
        out = tmp_path / "eval"
        assert main([
            "eval", "--out-dir", str(out),
            "--manifest", str(workspace["manifest"]),
            "--checkpoint", str(workspace["run"] / "checkpoint_best.zip"),
            "--split", str(workspace["splits"]), "--split-seed", "0",
        ]) == 0
        payload = json.loads((out / "eval_report.json").read_text())
        assert len(payload["splits"]) == 1
        dims = payload["splits"][0]["dimensions"]
        assert dims["overall_percept"]["srcc"] > 0.8
        assert payload["splits"][0]["n_samples"]["overall_percept"] == 40

    def test_checkpoint_all_splits_aggregates(self, workspace, tmp_path):
        out = tmp_path / "eval"
        assert main([
            "eval", "--out-dir", str(out),
            "--manifest", str(workspace["manifest"]),
            "--checkpoint", str(workspace["run"] / "checkpoint_best.zip"),
            "--split", str(workspace["splits"]), "--all-splits",
        ]) == 0
        payload = json.loads((out / "eval_report.json").read_text())
        assert len(payload["splits"]) == 3
        agg = payload["aggregate"]["aggregate"]
        assert "mean" in agg["overall_percept"]["srcc"]
        assert "std" in agg["overall_percept"]["srcc"]

    def test_mapped_plcc_flag(self, workspace, tmp_path):
        out = tmp_path / "eval"
        assert main([
            "eval", "--out-dir", str(out),
            "--manifest", str(workspace["manifest"]),
            "--checkpoint", str(workspace["run"] / "checkpoint_best.zip"),
            "--split", str(workspace["splits"]), "--mapped-plcc",
        ]) == 0
        payload = json.loads((out / "eval_report.json").read_text())
        row = payload["splits"][0]["dimensions"]["overall_percept"]
        # the logistic remap brings RMSE back to label scale
        assert row["rmse"] < 1.0

    def test_usage_requires_exactly_one_source(self, workspace, tmp_path):
        base = [
            "eval", "--out-dir", str(tmp_path / "e"),
            "--manifest", str(workspace["manifest"]),
        ]
        assert main(base) == 1
        assert main(base + [
            "--predictions", "a.csv", "--checkpoint", "b.zip",
        ]) == 1
        assert main(base + [
            "--checkpoint", str(workspace["run"] / "checkpoint_best.zip"),
        ]) == 1  # missing --split

    def test_bad_predictions_csv(self, workspace, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("video_id,dimension\nv0,spatial\n")
        args = [
            "eval", "--out-dir", str(tmp_path / "e"),
            "--manifest", str(workspace["manifest"]),
            "--predictions", str(bad),
        ]
        assert main(args) == 2

        bad.write_text("video_id,dimension,score\nghost,spatial,3\n")
        assert main(args) == 2

        bad.write_text("video_id,dimension,score\nvid-0000,mystery,3\n")
        assert main(args) == 2

        bad.write_text("video_id,dimension,score\nvid-0000,word[99],3\n")
        assert main(args) == 2


MOS_FIXTURE_SCORES = [1, 2, 2, 2, 3, 3, 3, 3, 3, 3, 3, 3, 4, 4, 4, 5]


class TestMos:
    def test_sixteen_rating_fixture(self, tmp_path, capsys):
        ratings = tmp_path / "ratings.csv"
        lines = ["annotator_id,video_id,dimension,score"]
        for i, score in enumerate(MOS_FIXTURE_SCORES, start=1):
            lines.append(f"a{i:02d},v0,overall_percept,{score}")
        ratings.write_text("\n".join(lines) + "\n")
        out = tmp_path / "mos"
        assert main(["mos", "--out-dir", str(out), "--ratings", str(ratings)]) == 0
        label_line = json.loads((out / "labels.jsonl").read_text())
        assert label_line["video_id"] == "v0"
        assert label_line["q_overall_percept"] == 3.0
        report = json.loads((out / "mos_report.json").read_text())
        cell = report["cells"]["v0::overall_percept"]
        assert cell["lambda"] == 2.0
        assert len(cell["excluded"]) == 2
        table = capsys.readouterr().out
        assert "3.0000" in table

    def test_bad_csv_exits_data(self, tmp_path):
        out = str(tmp_path / "m")
        bad = tmp_path / "r.csv"
        bad.write_text("who,video_id,dimension,score\na,v,spatial,3\n")
        assert main(["mos", "--out-dir", out, "--ratings", str(bad)]) == 2
        bad.write_text("annotator_id,video_id,dimension,score\na,v,spatial,x\n")
        assert main(["mos", "--out-dir", out, "--ratings", str(bad)]) == 2
        bad.write_text("annotator_id,video_id,dimension,score\na,v,spatial,9\n")
        assert main(["mos", "--out-dir", out, "--ratings", str(bad)]) == 2
        assert main([
            "mos", "--out-dir", out, "--ratings", str(tmp_path / "nope.csv"),
        ]) == 2


class TestGmad:
    @staticmethod
    def _write_scores(path, scores):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["video_id", "score"])
            writer.writerows(scores.items())

    def test_orientations_and_artifacts(self, tmp_path):
        d, a = tmp_path / "d.csv", tmp_path / "a.csv"
        self._write_scores(d, {"v0": 1.0, "v1": 2.0, "v2": 3.0, "v3": 4.0})
        self._write_scores(a, {"v0": 1.0, "v1": 4.0, "v2": 2.0, "v3": 4.5})
        out = tmp_path / "g"
        assert main([
            "gmad", "--out-dir", str(out), "--defender", str(d),
            "--attacker", str(a), "--eps", "1.0", "--top-n", "2",
        ]) == 0
        payload = json.loads((out / "gmad_pairs.json").read_text())
        assert set(payload) == {"standard", "swapped"}
        top = payload["standard"][0]
        assert (top["video_a"], top["video_b"]) == ("v0", "v1")
        assert top["attacker_delta"] == 3.0

    def test_errors(self, tmp_path):
        d, a = tmp_path / "d.csv", tmp_path / "a.csv"
        self._write_scores(d, {"v0": 1.0, "v1": 2.0})
        self._write_scores(a, {"v0": 1.0, "v9": 2.0})
        out = str(tmp_path / "g")
        args = ["gmad", "--out-dir", out, "--defender", str(d), "--attacker", str(a)]
        assert main(args) == 2  # key-set mismatch
        self._write_scores(a, {"v0": 1.0, "v1": 2.0})
        assert main(args + ["--top-n", "0"]) == 1
        dup = tmp_path / "dup.csv"
        dup.write_text("video_id,score\nv0,1.0\nv0,2.0\n")
        assert main([
            "gmad", "--out-dir", out, "--defender", str(dup), "--attacker", str(a),
        ]) == 2


class TestGradcheck:
    def test_cli_run_passes(self, tmp_path, capsys):
        out = tmp_path / "gc"
        assert main(["gradcheck", "--out-dir", str(out), "--k", "1"]) == 0
        payload = json.loads((out / "gradcheck_report.json").read_text())
        assert payload["k=1"]["passed"] is True
        assert "PASS" in capsys.readouterr().out


class TestPlumbing:
    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert main(["eval", "--help"]) == 0
        capsys.readouterr()

    def test_unknown_command_exits_usage(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "invalid choice" in capsys.readouterr().err

    def test_missing_required_flag_exits_usage(self, capsys):
        assert main(["synth"]) == 1
        capsys.readouterr()

    def test_every_command_echoes_resolved_config(self, workspace):
        for sub in ("corpus", "run"):
            echo = workspace[sub] / "resolved_config.json"
            assert echo.is_file()
            payload = json.loads(echo.read_text())
            assert "command" in payload and "args" in payload

    def test_console_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "vqmoe.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "synth" in proc.stdout and "gradcheck" in proc.stdout
