import json
import shutil

import jsonschema
import numpy as np
import pytest

from fingercascade import cli
from fingercascade import datagen as dg
from fingercascade import evaluation as ev
from fingercascade.config import RunConfig, build_config, named_seed

TINY = ["--image-width", "64", "--image-height", "64", "--hand-train-size", "36",
        "--hand-input-size", "32", "--finger-patch-size", "32",
        "--hand-channels", "2,2,2,2,2", "--hand-hidden", "8,8",
        "--finger-channels", "2,2,2,2,2", "--finger-hidden", "8,8",
        "--hand-epochs", "2", "--finetune-epochs", "1", "--finger-epochs", "2"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Data and a full set of tiny trained models, built once through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    common = ["--data-dir", root / "data", "--models-dir", root / "models", *TINY]
    assert cli.main([str(a) for a in ["gen-data", "--count", "12", *common]]) == 0
    for stage in ("hand", "finetune", "finger-mfd", "finger-spd"):
        assert cli.main([str(a) for a in ["train", "--stage", stage, *common]]) == 0
    return root, [str(a) for a in common]


def test_gen_data_empty(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--count", 0, "--data-dir", tmp_path / "d")
    assert code == 0 and "count: 0" in out
    assert (tmp_path / "d" / "manifest.jsonl").read_text() == ""


def test_gen_data_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "gen-data", "--count", 3, "--image-width", 48, "--image-height", 48,
                   "--data-dir", tmp_path / name)[0] == 0
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == \
        (tmp_path / "b" / "manifest.jsonl").read_bytes()


def test_gen_data_prints_summary(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--count", 20, "--image-width", 32,
                       "--image-height", 32, "--data-dir", tmp_path)
    assert code == 0
    assert "manifest:" in out and "dark fraction" in out and "left" in out


def test_split_changes_stream(tmp_path):
    a = build_config(overrides={"split": "train"}).scene_params().seed
    b = build_config(overrides={"split": "held"}).scene_params().seed
    assert a != b and a == named_seed(RunConfig().seed, "data/train")


def test_finetune_without_base_names_file(tmp_path, capsys):
    run(capsys, "gen-data", "--count", 2, "--image-width", 32, "--image-height", 32,
        "--data-dir", tmp_path / "d")
    code, _, err = run(capsys, "train", "--stage", "finetune", "--data-dir", tmp_path / "d",
                       "--models-dir", tmp_path / "m", *TINY)
    assert code == 1
    assert str(tmp_path / "m" / "rough_hand.cdw") in err


def test_missing_manifest_named(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--stage", "hand", "--data-dir", tmp_path / "nowhere")
    assert code == 1 and "nowhere" in err


def test_loss_trace_rows(workspace):
    root, _ = workspace
    lines = (root / "models" / "loss_hand.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss" and len(lines) - 1 == 2
    assert len((root / "models" / "loss_finetune.csv").read_text().splitlines()) - 1 == 1


def test_train_deterministic(workspace, tmp_path, capsys):
    root, common = workspace
    other = tmp_path / "m2"
    args = [a if a != str(root / "models") else str(other) for a in common]
    assert run(capsys, "train", "--stage", "hand", *args)[0] == 0
    assert (other / "rough_hand.cdw").read_bytes() == \
        (root / "models" / "rough_hand.cdw").read_bytes()


def test_eval_file_set_and_curves(workspace, tmp_path, capsys):
    _, common = workspace
    code, out, _ = run(capsys, "eval", *common, "--out", tmp_path / "e")
    assert code == 0
    names = sorted(p.name for p in (tmp_path / "e").iterdir())
    assert names == sorted(
        ["overlap_RHD.csv", "overlap_RECENTER.csv", "overlap_AHD.csv", "cross_table.csv",
         "zones.csv"] + [f"error_{h}_{f}.csv" for h in ("RHD", "AHD", "GT") for f in ("MFD", "SPD")])
    for p in (tmp_path / "e").glob("overlap_*.csv"):
        r = ev.read_curve_csv(p).detection_rates
        assert all(b <= a for a, b in zip(r, r[1:]))
    for p in (tmp_path / "e").glob("error_*.csv"):
        r = ev.read_curve_csv(p, "error").detection_rates
        assert all(b >= a for a, b in zip(r, r[1:]))
    assert len(ev.read_cross_csv(tmp_path / "e" / "cross_table.csv").cells) == 6


def test_eval_gt_curve_ignores_hand_weights(workspace, tmp_path, capsys):
    root, common = workspace
    run(capsys, "eval", *common, "--out", tmp_path / "a")
    swapped = tmp_path / "models"
    shutil.copytree(root / "models", swapped)
    shutil.copy(root / "models" / "rough_hand.cdw", swapped / "attention_hand.cdw")
    args = [a if a != str(root / "models") else str(swapped) for a in common]
    run(capsys, "eval", *args, "--out", tmp_path / "b")
    for name in ("error_GT_MFD.csv", "error_GT_SPD.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_eval_missing_models_named(workspace, tmp_path, capsys):
    _, common = workspace
    args = list(common)
    args[args.index("--models-dir") + 1] = str(tmp_path / "empty")
    code, _, err = run(capsys, "eval", *args)
    assert code == 1 and "empty" in err


def test_bench_report_schema(workspace, tmp_path, capsys):
    _, common = workspace
    code, out, _ = run(capsys, "bench", *common, "--reps", 30, "--out", tmp_path)
    assert code == 0
    doc = json.loads((tmp_path / "timing.json").read_text())
    jsonschema.validate(doc, ev.TIMING_SCHEMA)
    for name in ("hand_detect", "finger_detect", "processing", "total"):
        assert name in out


def test_bench_rejects_few_reps(workspace, capsys):
    _, common = workspace
    code, _, err = run(capsys, "bench", *common, "--reps", 10)
    assert code == 1 and "repetitions ≥ 30 required" in err


def test_detect_json_and_annotation(workspace, tmp_path, capsys):
    root, common = workspace
    img = root / "data" / "images" / "000003.png"
    code, out, _ = run(capsys, "detect", img, *common, "--annotate", tmp_path / "a.png")
    assert code == 0
    d = json.loads(out)
    assert set(d) == {"hand_box", "fingertip", "joint", "timings_ms"}
    x1, y1, x2, y2 = d["hand_box"]
    assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64
    for key in ("fingertip", "joint"):
        assert 0 <= d[key][0] <= 64 and 0 <= d[key][1] <= 64
    assert dg.read_png(tmp_path / "a.png").shape == (64, 64, 3)
    _, again, _ = run(capsys, "detect", img, *common)
    strip = lambda s: {k: v for k, v in json.loads(s).items() if k != "timings_ms"}
    assert strip(again) == strip(out)


def test_detect_spd_has_no_joint(workspace, capsys):
    root, common = workspace
    code, out, _ = run(capsys, "detect", root / "data" / "images" / "000000.png", *common,
                       "--finger", "spd")
    assert code == 0 and "joint" not in json.loads(out)


def test_detect_unreadable_image(workspace, tmp_path, capsys):
    _, common = workspace
    code, _, err = run(capsys, "detect", tmp_path / "nope.png", *common)
    assert code == 1 and "nope.png" in err
    (tmp_path / "bad.png").write_bytes(b"not a png")
    code, _, err = run(capsys, "detect", tmp_path / "bad.png", *common)
    assert code == 2 and "bad.png" in err


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run(capsys, "train")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "gen-data", "--count", "many")[0] == 1
    assert run(capsys, "gen-data", "--config", tmp_path / "missing.ini")[0] == 1


def test_config_file_and_flag_precedence(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\ncount = 2\nimage_width = 32\nimage_height = 32\n"
                   f"data_dir = {tmp_path / 'from_file'}\n")
    assert run(capsys, "gen-data", "--config", ini)[0] == 0
    assert len(dg.read_manifest(tmp_path / "from_file")) == 2
    assert run(capsys, "gen-data", "--config", ini, "--count", 3)[0] == 0
    assert len(dg.read_manifest(tmp_path / "from_file")) == 3


def test_config_rejects_unknown_keys(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nwibble = 1\n")
    code, _, err = run(capsys, "gen-data", "--config", ini)
    assert code == 1 and "wibble" in err


def test_config_round_trip(tmp_path):
    cfg = build_config(overrides={"hand_epochs": "7", "margin": "0.2"})
    (tmp_path / "c.ini").write_text(cfg.to_ini())
    assert build_config(tmp_path / "c.ini") == cfg


def test_every_key_has_a_flag():
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices["train"]
    flags = {s for a in sub._actions for s in a.option_strings}
    for key in RunConfig.__dataclass_fields__:
        assert "--" + key.replace("_", "-") in flags or key == "out_dir"
    assert "--out" in flags and "--seed" in flags and "--config" in flags


def test_divergence_exit_2(workspace, tmp_path, capsys):
    _, common = workspace
    args = list(common)
    args[args.index("--models-dir") + 1] = str(tmp_path / "m")
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, "train", "--stage", "hand", *args, "--hand-learning-rate",
                           "1e8", "--hand-weight-init-scale", "50", "--hand-epochs", "3",
                           "--hand-grad-clip", "0")
    assert code == 2 and "diverged" in err
