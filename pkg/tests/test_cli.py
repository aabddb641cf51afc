import json

import pytest

from colld.cli import run


def call(capsys, *argv):
    code = run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def small_config(tmp_path, **extra):
    doc = {
        "seed": 0, "steps": 4, "output_dir": "run",
        "teacher": {"preset": "tiny", "seed": 1},
        "student": {"preset": "tiny", "seed": 2, "overrides": {"layers": 2}},
        "distill": {"total_steps": 10, "warmup_steps": 2, "batch_size": 2, "num_distractors": 8,
                    "mask_prob": 0.1, "mask_span": 5, "checkpoint_every": 2, "log_wallclock": False},
        "data": {"source": "synthetic", "seed": 0, "num_utterances": 6, "min_frames": 60, "max_frames": 80},
    }
    doc.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_map(capsys):
    code, out, _ = call(capsys, "map", "--student", "12", "--teacher", "40")
    doc = json.loads(out)
    assert code == 0 and len(doc["pairs"]) == 12 and doc["pairs"][-1] == [12, 40]


def test_map_rejects_student_deeper_than_teacher(capsys):
    code, _, err = call(capsys, "map", "--student", "5", "--teacher", "4")
    assert code == 2 and "error" in err


def test_cost(capsys):
    code, out, _ = call(capsys, "cost", "--preset", "large12", "--seconds", "20")
    doc = json.loads(out)
    assert code == 0 and doc["frames"] == 1000 and doc["gmacs"] > 0 and doc["param_count"] > 0


def test_mask_stats(capsys):
    code, out, _ = call(capsys, "mask-stats", "--n", "20000")
    doc = json.loads(out)
    assert code == 0 and doc["expected_coverage"] == pytest.approx(0.4893585, abs=1e-6)
    assert doc["empirical_coverage"] == pytest.approx(0.49, abs=0.02)


def test_missing_config_exits_2(capsys, tmp_path):
    code, _, err = call(capsys, "distill", "--config", str(tmp_path / "nope.json"))
    assert code == 2 and "not found" in err


def test_unknown_key_is_named(capsys, tmp_path):
    path = small_config(tmp_path, data={"source": "synthetic", "seed": 0, "bogus": 1})
    code, _, err = call(capsys, "distill", "--config", str(path))
    assert code == 2 and "data.bogus" in err


def test_bad_distill_value_is_named(capsys, tmp_path):
    path = small_config(tmp_path, distill={"temperature": -1.0})
    code, _, err = call(capsys, "distill", "--config", str(path))
    assert code == 2 and "distill.temperature" in err


def test_argparse_errors_exit_2(capsys):
    assert run(["cost"]) == 2
    assert run(["no-such-command"]) == 2


def test_distill_run_directory_and_resume(capsys, tmp_path):
    path = small_config(tmp_path)
    code, out, _ = call(capsys, "distill", "--config", str(path))
    assert code == 0 and json.loads(out)["step"] == 4
    run_dir = tmp_path / "run"
    assert {p.name for p in run_dir.iterdir()} >= {"metrics.jsonl", "config.json", "run.json", "checkpoints"}
    full = (run_dir / "metrics.jsonl").read_bytes()
    resolved = json.loads((run_dir / "config.json").read_text())
    assert resolved["data"]["max_segment"] == 60 and resolved["distill"]["temperature"] == 0.1

    # rerunning into a used directory is refused
    code, _, err = call(capsys, "distill", "--config", str(path))
    assert code == 2 and "already exists" in err

    code, _, _ = call(capsys, "distill", "--config", str(path), "--resume",
                      str(run_dir / "checkpoints" / "step_000002.ckpt"))
    assert code == 0 and (run_dir / "metrics.jsonl").read_bytes() == full


def test_synth_data_then_probe(capsys, tmp_path):
    code, out, _ = call(capsys, "synth-data", "--out", str(tmp_path / "d"), "--num-utterances", "6",
                        "--min-frames", "40", "--max-frames", "60")
    assert code == 0 and json.loads(out)["num_utterances"] == 6
    manifest = tmp_path / "d" / "manifest.jsonl"
    code, out, _ = call(capsys, "probe", "--manifest", str(manifest), "--preset", "tiny", "--layer", "2")
    doc = json.loads(out)
    assert code == 0 and doc["layer"] == 2 and 0 <= doc["accuracy"] <= 1


def test_probe_from_training_checkpoint(capsys, tmp_path):
    path = small_config(tmp_path)
    assert call(capsys, "distill", "--config", str(path))[0] == 0
    code, out, _ = call(capsys, "probe", "--checkpoint", str(tmp_path / "run" / "checkpoints" / "last.ckpt"),
                        "--config", str(path))
    assert code == 0 and json.loads(out)["layer"] == 2


def test_probe_needs_data(capsys):
    code, _, err = call(capsys, "probe", "--preset", "tiny")
    assert code == 2 and "--manifest" in err


def test_grad_check(capsys):
    code, out, _ = call(capsys, "grad-check", "--case", "softmax", "--case", "masked_l2", "--seeds", "2")
    doc = json.loads(out)
    assert code == 0 and doc["passed"] and set(doc["cases"]) == {"softmax", "masked_l2"}


def test_grad_check_failure_exits_1(capsys):
    code, out, _ = call(capsys, "grad-check", "--case", "swish", "--seeds", "1", "--tolerance", "0")
    assert code == 1 and not json.loads(out)["passed"]


def test_unknown_grad_check_case(capsys):
    code, _, err = call(capsys, "grad-check", "--case", "nope", "--seeds", "1")
    assert code == 2 and "unknown" in err
