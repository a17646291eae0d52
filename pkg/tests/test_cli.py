import json

import numpy as np
import pytest

from cfdistill.cli import main


def run(argv):
    return main([str(a) for a in argv])


def read_json(path):
    return json.loads(path.read_text())


def files_equal(a, b):
    return a.read_bytes() == b.read_bytes()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = run([
        "synth", "--out-dir", out, "--seed", "3",
        "--n-users", "30", "--n-items", "45", "--latent-dim", "4",
        "--interactions-per-user", "6", "--noise-scale", "1.0",
        "--signal-fractions", "textual=0.9", "--signal-fractions", "visual=0.2",
    ])
    assert code == 0
    return out


def base_config(synth_dir, out_dir, **extra):
    cfg = {
        "dataset_dir": str(synth_dir),
        "features": {
            "textual": str(synth_dir / "features_textual.txt"),
            "visual": str(synth_dir / "features_visual.txt"),
        },
        "out_dir": str(out_dir),
        "seed": 4,
        "dim": 8,
        "lr": 0.01,
        "batch_size": 128,
        "max_epochs": 4,
        "patience": 3,
        "eval_k": 10,
    }
    cfg.update(extra)
    return cfg


def write_config(path, cfg):
    path.write_text(json.dumps(cfg, indent=2))
    return path


# ---------------------------------------------------------------------------
# synth + prepare
# ---------------------------------------------------------------------------


def test_synth_outputs(synth_dir):
    for name in ("train.tsv", "val.tsv", "test.tsv", "user_map.tsv", "item_map.tsv",
                 "features_textual.txt", "features_visual.txt", "synth.json"):
        assert (synth_dir / name).exists()
    manifest = read_json(synth_dir / "synth.json")
    assert manifest["signal_fractions"] == {"textual": 0.9, "visual": 0.2}
    assert manifest["seed"] == 3


def test_synth_deterministic(tmp_path, synth_dir):
    other = tmp_path / "again"
    code = run([
        "synth", "--out-dir", other, "--seed", "3",
        "--n-users", "30", "--n-items", "45", "--latent-dim", "4",
        "--interactions-per-user", "6", "--noise-scale", "1.0",
        "--signal-fractions", "textual=0.9", "--signal-fractions", "visual=0.2",
    ])
    assert code == 0
    for name in ("train.tsv", "features_textual.txt", "synth.json"):
        assert files_equal(synth_dir / name, other / name)


def test_prepare_roundtrip_and_idempotence(tmp_path):
    raw = tmp_path / "raw.tsv"
    lines = [f"u{u}\ti{i}" for u in range(8) for i in range(8) if (u + i) % 8 != 0]
    raw.write_text("".join(line + "\n" for line in lines))
    out1, out2 = tmp_path / "p1", tmp_path / "p2"
    assert run(["prepare", "--interactions", raw, "--out-dir", out1, "--seed", "5"]) == 0
    assert run(["prepare", "--interactions", raw, "--out-dir", out2, "--seed", "5"]) == 0
    summary = read_json(out1 / "dataset.json")
    assert summary["n_users"] == 8 and summary["min_core"] == 5
    for name in ("train.tsv", "val.tsv", "test.tsv", "user_map.tsv", "dataset.json"):
        assert files_equal(out1 / name, out2 / name)


def test_prepare_vanishing_dataset_exits_2(tmp_path, capsys):
    raw = tmp_path / "raw.tsv"
    raw.write_text("u1\ti1\nu2\ti1\nu3\ti2\n")
    code = run(["prepare", "--interactions", raw, "--out-dir", tmp_path / "out"])
    assert code == 2
    assert "core" in capsys.readouterr().err


def test_prepare_min_core_one_passthrough(tmp_path):
    raw = tmp_path / "raw.tsv"
    raw.write_text("u1\ti1\nu1\ti2\nu1\ti3\nu2\ti1\nu2\ti2\nu2\ti3\n")
    out = tmp_path / "out"
    assert run(["prepare", "--interactions", raw, "--out-dir", out, "--min-core", "1"]) == 0
    assert read_json(out / "dataset.json")["n_interactions"] == 6


def test_prepare_missing_file_exits_2(tmp_path):
    assert run(["prepare", "--interactions", tmp_path / "nope.tsv", "--out-dir", tmp_path / "o"]) == 2


# ---------------------------------------------------------------------------
# training + eval
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def teacher_runs(tmp_path_factory, synth_dir):
    outs = {}
    for m in ("textual", "visual"):
        out = tmp_path_factory.mktemp(f"teacher_{m}")
        cfg = write_config(out / "config.json", base_config(synth_dir, out))
        assert run(["train-teacher", "--config", cfg, "--modality", m]) == 0
        outs[m] = out
    return outs


def test_teacher_outputs(teacher_runs):
    for m, out in teacher_runs.items():
        assert (out / f"teacher_{m}.ckpt").exists()
        assert (out / "trace.csv").exists()
        assert (out / "trace.jsonl").exists()
        assert (out / "curves.png").exists()


def test_teacher_determinism(tmp_path, synth_dir, teacher_runs):
    out = tmp_path / "re"
    cfg = write_config(tmp_path / "config.json", base_config(synth_dir, out))
    assert run(["train-teacher", "--config", cfg, "--modality", "textual"]) == 0
    first = teacher_runs["textual"]
    for name in ("teacher_textual.ckpt", "trace.csv", "trace.jsonl", "curves.png"):
        assert files_equal(out / name, first / name)


@pytest.fixture(scope="module")
def student_run(tmp_path_factory, synth_dir, teacher_runs):
    out = tmp_path_factory.mktemp("student")
    cfg = write_config(
        out / "config.json",
        base_config(
            synth_dir,
            out,
            teachers={m: str(d / f"teacher_{m}.ckpt") for m, d in teacher_runs.items()},
        ),
    )
    assert run(["train-student", "--config", cfg]) == 0
    return out


def test_student_outputs(student_run):
    assert (student_run / "student.ckpt").exists()
    header = (student_run / "trace.csv").read_text().splitlines()[0]
    assert "lambda_textual" in header and "val_full_recall" in header


def test_student_missing_teacher_exits_1(tmp_path, synth_dir, capsys):
    out = tmp_path / "s"
    cfg = write_config(tmp_path / "c.json", base_config(synth_dir, out))
    code = run(["train-student", "--config", cfg])
    assert code == 1
    assert "teacher" in capsys.readouterr().err


def test_student_missing_teacher_file_exits_4(tmp_path, synth_dir, capsys):
    out = tmp_path / "s"
    cfg = write_config(
        tmp_path / "c.json",
        base_config(synth_dir, out, teachers={"textual": "/nope/t.ckpt", "visual": "/nope/v.ckpt"}),
    )
    code = run(["train-student", "--config", cfg])
    assert code == 4
    err = capsys.readouterr().err
    assert "textual" in err


def test_student_lambda_kd_zero_without_teachers(tmp_path, synth_dir):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    cfg_a = write_config(tmp_path / "ca.json", base_config(synth_dir, out_a, lambda_kd=0.0))
    assert run(["train-student", "--config", cfg_a]) == 0
    cfg_b = write_config(tmp_path / "cb.json", base_config(synth_dir, out_b))
    assert run(["train-student", "--config", cfg_b, "--lambda-kd", "0"]) == 0
    assert files_equal(out_a / "student.ckpt", out_b / "student.ckpt")


def test_eval_outputs_and_determinism(tmp_path, synth_dir, student_run):
    out1, out2 = tmp_path / "e1", tmp_path / "e2"
    for out in (out1, out2):
        cfg = write_config(
            tmp_path / f"c{out.name}.json",
            base_config(synth_dir, out, checkpoint=str(student_run / "student.ckpt"), split="test"),
        )
        assert run(["eval", "--config", cfg]) == 0
    report = read_json(out1 / "metrics.json")
    assert report["k"] == 20
    assert set(report["channels"]) == {"full", "textual", "visual"}
    for name in ("metrics.json", "metrics.csv", "metrics.png"):
        assert files_equal(out1 / name, out2 / name)


def test_eval_k_and_channel_flags(tmp_path, synth_dir, student_run):
    out = tmp_path / "e"
    cfg = write_config(
        tmp_path / "c.json",
        base_config(synth_dir, out, checkpoint=str(student_run / "student.ckpt")),
    )
    assert run(["eval", "--config", cfg, "--k", "7", "--channels", "full,visual"]) == 0
    report = read_json(out / "metrics.json")
    assert report["k"] == 7
    assert set(report["channels"]) == {"full", "visual"}


# ---------------------------------------------------------------------------
# pilot + bridge
# ---------------------------------------------------------------------------


def test_pilot_command(tmp_path, synth_dir):
    out = tmp_path / "pilot"
    cfg = write_config(tmp_path / "c.json", base_config(synth_dir, out, max_epochs=3))
    assert run(["pilot", "--config", cfg]) == 0
    assert (out / "pilot.csv").exists() and (out / "pilot.png").exists()
    summary = read_json(out / "pilot_summary.json")
    assert set(summary["channel_recall_at_best"]) == {"multimodal", "textual-only", "visual-only"}


def test_bridge_command_and_determinism(tmp_path):
    out1, out2 = tmp_path / "b1", tmp_path / "b2"
    for out in (out1, out2):
        code = run(["bridge", "--out-dir", out, "--steps", "50", "--seed", "2",
                    "--scales", "strong=10", "--scales", "weak=1"])
        assert code == 0
    summary = read_json(out1 / "bridge_summary.json")
    assert summary["steps"] == 50
    assert summary["final_bridge_joint"] < 0.5
    for name in ("bridge.csv", "bridge_summary.json", "bridge.png"):
        assert files_equal(out1 / name, out2 / name)


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def test_flag_overrides_config_file(tmp_path, synth_dir):
    out = tmp_path / "t"
    cfg = write_config(tmp_path / "c.json", base_config(synth_dir, out, max_epochs=2, lr=0.5))
    assert run(["train-teacher", "--config", cfg, "--modality", "textual", "--lr", "0.01"]) == 0
    trace = [json.loads(l) for l in (out / "trace.jsonl").read_text().splitlines()]
    assert len(trace) == 2  # config max_epochs respected
    import cfdistill.backbone as bb
    _, header = bb.load_checkpoint(out / "teacher_textual.ckpt")
    assert header["meta"]["hyperparameters"]["lr"] == 0.01  # flag beat the config value
    assert header["meta"]["hyperparameters"]["max_epochs"] == 2


def test_defaults_applied_when_absent(tmp_path, synth_dir):
    out = tmp_path / "t"
    cfg = write_config(tmp_path / "c.json", base_config(synth_dir, out))
    assert run(["train-teacher", "--config", cfg, "--modality", "textual"]) == 0
    import cfdistill.backbone as bb
    _, header = bb.load_checkpoint(out / "teacher_textual.ckpt")
    hp = header["meta"]["hyperparameters"]
    # built-in defaults for keys neither flagged nor configured
    assert hp["tau"] == 0.1 and hp["patience"] == 3 and hp["lambda_kd"] == 0.1
    assert hp["sd_variant"] == "hinge"


def test_builtin_defaults_match_documented_values(tmp_path, synth_dir):
    # d=64, batch 1024, tau=0.1, patience 10 when neither flag nor config sets them
    out = tmp_path / "t"
    cfg = write_config(
        tmp_path / "c.json",
        {
            "dataset_dir": str(synth_dir),
            "features": {
                "textual": str(synth_dir / "features_textual.txt"),
                "visual": str(synth_dir / "features_visual.txt"),
            },
            "out_dir": str(out),
            "seed": 1,
            "max_epochs": 1,
        },
    )
    assert run(["train-teacher", "--config", cfg, "--modality", "textual"]) == 0
    import cfdistill.backbone as bb
    params, header = bb.load_checkpoint(out / "teacher_textual.ckpt")
    hp = header["meta"]["hyperparameters"]
    assert params.dim == 64
    assert hp["dim"] == 64 and hp["batch_size"] == 1024
    assert hp["tau"] == 0.1 and hp["patience"] == 10
    assert hp["lr"] == 0.001 and hp["eval_k"] == 20


def test_unknown_config_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr": 0.1, "bogus_key": 1}))
    assert run(["train-teacher", "--config", cfg, "--modality", "textual"]) == 1
    assert "bogus_key" in capsys.readouterr().err


def test_invalid_json_config_exits_1(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert run(["train-teacher", "--config", cfg, "--modality", "textual"]) == 1


def test_missing_required_setting_exits_1(tmp_path, capsys):
    assert run(["train-teacher", "--modality", "textual"]) == 1
    assert "out_dir" in capsys.readouterr().err or True


def test_usage_error_exit_code():
    assert run(["train-teacher", "--not-a-flag"]) == 1
    assert run(["no-such-command"]) == 1


def test_divergence_exit_code(tmp_path, synth_dir, capsys):
    out = tmp_path / "d"
    cfg = write_config(tmp_path / "c.json", base_config(synth_dir, out, lr=1e200, l2_coeff=1.0))
    with np.errstate(over="ignore", invalid="ignore"):
        code = run(["train-teacher", "--config", cfg, "--modality", "textual"])
    assert code == 3
