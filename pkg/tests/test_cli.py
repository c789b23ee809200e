"""End-to-end smoke run of every CLI subcommand on a tiny synthetic corpus."""

import json

import pytest

from birdsep.audio import read_wav
from birdsep.cli import main

TINY = {
    "synth": {"n_species": 3, "clips_per_species": 3, "eval_clips": 8, "eval_max_species": 2,
              "mom_eval_pairs": 2, "noise_clips": 2, "noise_clip_s": 6.0},
    "separator": {"n_basis": 16, "hidden_channels": 8, "n_blocks": 1, "n_repeats": 1, "dilations": [1]},
    "separator_train": {"steps": 2, "batch_size": 2, "crop_s": 0.25, "checkpoint_every": 0},
    "classifier": {"widths": [4, 8], "hidden_dim": 8, "frontend": {"n_channels": 16}},
    "classifier_train": {"steps": 2, "batch_size": 2, "n_models": 2},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY))
    data = root / "data"
    assert main(["make-synth", "--seed", "3", "--out", str(data), "--config", str(cfg)]) == 0
    assert main(["train-separator", "--config", str(cfg), "--data", str(data / "train.jsonl"),
                 "--out", str(root / "sep")]) == 0
    assert main(["train-classifier", "--config", str(cfg), "--data", str(data / "train.jsonl"),
                 "--taxonomy", str(data / "taxonomy.tsv"), "--targets", str(data / "targets.txt"),
                 "--noise", str(data / "noise.txt"), "--out", str(root / "cls")]) == 0
    return root


def test_make_synth_files(workspace):
    data = workspace / "data"
    for name in ("taxonomy.tsv", "targets.txt", "train.jsonl", "eval.jsonl", "mom_eval.jsonl", "noise.txt"):
        assert (data / name).is_file()
    assert len((data / "train.jsonl").read_text().splitlines()) == 9


def test_training_outputs(workspace):
    assert (workspace / "sep" / "final.ckpt").is_file()
    log = [json.loads(line) for line in (workspace / "sep" / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [1, 2]
    assert sorted(p.name for p in (workspace / "cls").glob("*.ckpt")) == ["classifier_0.ckpt", "classifier_1.ckpt"]


def test_select_windows(workspace, tmp_path):
    data = workspace / "data"
    out = tmp_path / "windows.jsonl"
    assert main(["select-windows", "--data", str(data / "train.jsonl"), "--out", str(out),
                 "--max-windows", "2", "--extract", str(tmp_path / "win")]) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 9  # 6 s clips give one full-length window each
    assert {"path", "start_s", "duration_s", "peak_energy", "foreground", "background"} <= set(rows[0])
    assert (tmp_path / "win" / "windows.jsonl").is_file()
    assert read_wav(rows[0]["window_path"]).duration_s == pytest.approx(rows[0]["duration_s"], abs=1e-3)


def test_separate_and_momi(workspace, tmp_path):
    data = workspace / "data"
    clip = sorted((data / "audio" / "eval").glob("*.wav"))[0]
    assert main(["separate", "--separator", str(workspace / "sep" / "final.ckpt"), "--out-dir", str(tmp_path),
                 str(clip)]) == 0
    outs = sorted(tmp_path.glob(f"{clip.stem}_src*.wav"))
    assert len(outs) == 4
    report = tmp_path / "momi.json"
    assert main(["eval-momi", "--separator", str(workspace / "sep" / "final.ckpt"),
                 "--pairs", str(data / "mom_eval.jsonl"), "--report", str(report)]) == 0
    r = json.loads(report.read_text())
    assert r["n_examples"] == 2 and isinstance(r["momi_db"], float)


def test_infer_evaluate_matches_combine_eval(workspace, tmp_path):
    data = workspace / "data"
    cls = [str(p) for p in sorted((workspace / "cls").glob("*.ckpt"))]
    sep = str(workspace / "sep" / "final.ckpt")
    preds = tmp_path / "preds.jsonl"
    assert main(["infer", "--classifiers", *cls, "--separator", sep, "--mode", "mix+sep",
                 "--data", str(data / "eval.jsonl"), "--out", str(preds)]) == 0
    rows = [json.loads(line) for line in preds.read_text().splitlines()]
    assert len(rows) == 8 and set(rows[0]["scores"]) == {"sp00", "sp01", "sp02"}
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["evaluate", "--predictions", str(preds), "--labels", str(data / "eval.jsonl"),
                 "--report", str(a), "--min-count", "1", "--table", str(tmp_path / "t.tsv")]) == 0
    assert main(["combine-eval", "--mode", "mix+sep", "--separator", sep, "--classifiers", *cls,
                 "--data", str(data / "eval.jsonl"), "--report", str(b), "--min-count", "1"]) == 0
    ra, rb = json.loads(a.read_text()), json.loads(b.read_text())
    for key in ("cmap", "lwlrap", "d_prime", "top1"):
        assert ra[key] == pytest.approx(rb[key], abs=1e-12)
    assert (tmp_path / "t.tsv").read_text().startswith("class\tap\n")


def test_mix_mode_needs_no_separator(workspace, tmp_path):
    cls = [str(p) for p in sorted((workspace / "cls").glob("*.ckpt"))]
    assert main(["combine-eval", "--mode", "mix", "--classifiers", *cls, "--data",
                 str(workspace / "data" / "eval.jsonl"), "--report", str(tmp_path / "r.json"),
                 "--min-count", "1"]) == 0


def test_errors_are_reported(workspace, tmp_path, capsys):
    cls = [str(p) for p in sorted((workspace / "cls").glob("*.ckpt"))]
    assert main(["combine-eval", "--mode", "sep", "--classifiers", *cls, "--data",
                 str(workspace / "data" / "eval.jsonl"), "--report", str(tmp_path / "r.json")]) == 1
    assert "--separator is required" in capsys.readouterr().err
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"path": "nowhere.wav", "foreground": ["sp0"]}) + "\n")
    assert main(["combine-eval", "--classifiers", *cls, "--data", str(bad), "--report", str(tmp_path / "r.json")]) == 1
    assert "missing audio" in capsys.readouterr().err
    assert main(["make-synth", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "none.json")]) == 1
