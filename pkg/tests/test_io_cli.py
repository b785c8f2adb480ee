import filecmp
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from mtbirads import config as C
from mtbirads import io
from mtbirads import model as M
from mtbirads.cli import main
from mtbirads.lexicon import DESCRIPTORS, DescriptorLabels

SMALL = ["--set", "model.input_size=32", "--set", "model.blocks=2", "--set", "model.base_channels=4",
         "--set", "model.head_hidden=8"]
TABLE_COLUMNS = {"accuracy", "sensitivity", "specificity", "orientation", "shape", "margin",
                 "echo_pattern", "posterior_features", "dice_score"}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A 10-sample dataset plus a one-fold, one-epoch training run."""
    root = tmp_path_factory.mktemp("cli")
    data, runs = root / "data", root / "run"
    assert run("synth", "--n", 10, "--malignant-frac", 0.5, "--seed", 4, "--out", data) == 0
    assert run("train", "--data", data, "--folds", 1, "--max-epochs", 1, "--seed", 4, "--out", runs,
               "--workers", 1, *SMALL) == 0
    return root, data, runs


# --- file formats ------------------------------------------------------------------------------


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 11)).astype(np.uint8)
    io.write_pgm(tmp_path / "a.pgm", img)
    back = io.read_pgm(tmp_path / "a.pgm")
    np.testing.assert_array_equal(back, img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n11 7\n255\n")


def test_pgm_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x05\xff")
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "c.pgm"), [[5, 255]])


def test_pgm_rejects_ascii(tmp_path):
    (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n7\n")
    with pytest.raises(ValueError):
        io.read_pgm(tmp_path / "p2.pgm")


def test_checkpoint_round_trip(tmp_path):
    cfg = M.ModelConfig(input_size=16, blocks=2, base_channels=2, head_hidden=4)
    params = M.init(cfg, 3)
    io.save_checkpoint(tmp_path / "c.mtbr", params, {"model": cfg.to_dict()}, 3, {"note": 1})
    back, stored, seed, extra = io.load_checkpoint(tmp_path / "c.mtbr")
    assert list(back) == list(params) and seed == 3 and extra == {"note": 1}
    assert stored["model"] == cfg.to_dict()
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
    raw = (tmp_path / "c.mtbr").read_bytes()
    assert raw[:5] == b"MTBR1"


@pytest.mark.parametrize("mangle", [
    lambda raw: b"XXXXX" + raw[5:],
    lambda raw: raw[:-8],
    lambda raw: raw + b"\0",
    lambda raw: raw[:7],
])
def test_checkpoint_corruption_detected(tmp_path, mangle):
    io.save_checkpoint(tmp_path / "c.mtbr", {"w": np.ones(3)}, {}, 0)
    (tmp_path / "bad.mtbr").write_bytes(mangle((tmp_path / "c.mtbr").read_bytes()))
    with pytest.raises(io.CheckpointError):
        io.load_checkpoint(tmp_path / "bad.mtbr")


def test_labels_round_trip(tmp_path):
    labels = DescriptorLabels(orientation="Parallel", margin="NotCircumscribed", angular="Present")
    io.write_labels(tmp_path / "labels.csv", [io.labels_row("a", 1, labels), io.labels_row("b", None, DescriptorLabels())])
    rows = io.read_labels(tmp_path / "labels.csv")
    assert rows[0] == ("a", 1, labels)
    assert rows[1] == ("b", None, DescriptorLabels())


@pytest.mark.parametrize("body,line", [
    ("a,benign,Parallel\nb,cancer,Parallel\n", 3),
    ("a,benign,Sideways\n", 2),
    (",benign,Parallel\n", 2),
])
def test_labels_errors_name_the_line(tmp_path, body, line):
    (tmp_path / "labels.csv").write_text("name,tumor_class,orientation\n" + body)
    with pytest.raises(io.DatasetError) as info:
        io.read_labels(tmp_path / "labels.csv")
    assert info.value.line == line and f"line {line}" in str(info.value)


def test_labels_inconsistent_margin_reported(tmp_path):
    (tmp_path / "labels.csv").write_text("name,margin,spiculated\na,Circumscribed,Present\n")
    with pytest.raises(io.DatasetError, match="line 2"):
        io.read_labels(tmp_path / "labels.csv")


def test_labels_unknown_column(tmp_path):
    (tmp_path / "labels.csv").write_text("name,colour\na,red\n")
    with pytest.raises(io.DatasetError, match="line 1"):
        io.read_labels(tmp_path / "labels.csv")


# --- config -----------------------------------------------------------------------------------------


def test_config_seed_propagates():
    cfg = C.from_flat({"seed": 9})
    assert cfg.synth.rng_seed == cfg.train.seed == cfg.train.augment_cfg.rng_seed == 9


def test_config_nested_and_flat_agree(tmp_path):
    (tmp_path / "a.json").write_text(json.dumps({"train": {"max_epochs": 4}, "data.crop": False}))
    flat = C.load_flat(str(tmp_path / "a.json"))
    assert flat == {"train.max_epochs": 4, "data.crop": False}
    cfg = C.from_flat(flat)
    assert cfg.train.max_epochs == 4 and cfg.data.crop is False


@pytest.mark.parametrize("flat", [
    {"train.nonsense": 1},
    {"train.max_epochs": "many"},
    {"data.crop": 1},
    {"train.seed": 3},
    {"model.in_channels": 1},
    {"model": 3},
])
def test_config_rejects(flat):
    with pytest.raises(C.ConfigError):
        C.from_flat(flat)


def test_single_channel_sets_model_channels():
    assert C.from_flat({"data.single_channel": True}).model.in_channels == 1


def test_parse_assignments():
    assert C.parse_assignments(["a.b=3", "c=false", "d=hello"]) == {"a.b": 3, "c": False, "d": "hello"}
    with pytest.raises(C.ConfigError):
        C.parse_assignments(["novalue"])


def test_every_ablation_row_expressible():
    flags = {
        "no_augmentation": {"train.augment": False},
        "single_channel": {"data.single_channel": True},
        "no_cropping": {"data.crop": False},
        "alternate_backbone": {"model.base_channels": 16},
    }
    base = C.from_flat({}).ablations()
    assert base["no_pretraining"] is True
    assert not any(base[k] for k in flags)
    for key, flat in flags.items():
        ab = C.from_flat(flat).ablations()
        assert ab[key] is True
        assert [k for k in flags if ab[k]] == [key]


# --- synth ------------------------------------------------------------------------------------------


def test_synth_counts(workspace, capsys):
    _, data, _ = workspace
    pgms = sorted(p.name for p in data.glob("*.pgm"))
    assert len([p for p in pgms if p.endswith("_mask.pgm")]) == 10 and len(pgms) == 20
    lines = (data / "labels.csv").read_text().splitlines()
    assert len(lines) == 11 and lines[0].startswith("name,tumor_class")
    tumors = [l.split(",")[1] for l in lines[1:]]
    assert tumors.count("malignant") == 5


def test_synth_rerun_is_byte_identical(workspace, tmp_path):
    _, data, _ = workspace
    assert run("synth", "--n", 10, "--malignant-frac", 0.5, "--seed", 4, "--out", tmp_path / "again") == 0
    cmp = filecmp.dircmp(data, tmp_path / "again")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for name in cmp.common_files:
        assert (data / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_synth_all_malignant(tmp_path, capsys):
    assert run("synth", "--n", 6, "--malignant-frac", 1, "--out", tmp_path) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["tumor_class"] == {"benign": 0, "malignant": 6}
    rows = (tmp_path / "labels.csv").read_text().splitlines()[1:]
    assert all(r.split(",")[1] == "malignant" for r in rows)


def test_synth_masks_are_binary_255(workspace):
    _, data, _ = workspace
    m = io.read_pgm(next(data.glob("*_mask.pgm")))
    assert set(np.unique(m)) == {0, 255}


def test_unwritable_output_is_exit_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("synth", "--n", 2, "--out", blocker / "sub") == 2


# --- train ------------------------------------------------------------------------------------------


def test_train_outputs(workspace):
    _, data, runs = workspace
    assert (runs / "fold0" / "checkpoint.mtbr").exists()
    log_lines = (runs / "fold0" / "train_log.jsonl").read_text().splitlines()
    assert len(log_lines) == 1
    assert set(json.loads(log_lines[0])) == {"epoch", "train_loss", "val_loss", "lr", "plateau_counter", "stop_counter"}
    agg = json.loads((runs / "aggregate.json").read_text())
    assert TABLE_COLUMNS <= set(agg["metrics"])
    assert set(agg["ablations"]) >= {"no_augmentation", "no_pretraining", "single_channel", "no_cropping",
                                     "alternate_backbone"}
    fold = json.loads((runs / "fold0" / "metrics.json").read_text())
    assert TABLE_COLUMNS <= set(fold)
    _, stored, seed, extra = io.load_checkpoint(runs / "fold0" / "checkpoint.mtbr")
    assert seed == 4 and stored["model"]["input_size"] == 32 and len(extra["baseline"]) == 25
    assert len(extra["split"]["test"]) == 2


def test_train_malformed_labels_exit_3(tmp_path, workspace, capsys):
    _, data, _ = workspace
    bad = tmp_path / "bad"
    bad.mkdir()
    for p in data.iterdir():
        (bad / p.name).write_bytes(p.read_bytes())
    lines = (bad / "labels.csv").read_text().splitlines()
    lines[4] = lines[4].replace("benign", "benignish").replace("malignant", "benignish")
    (bad / "labels.csv").write_text("\n".join(lines) + "\n")
    assert run("train", "--data", bad, "--folds", 1, "--max-epochs", 1, "--out", tmp_path / "o", *SMALL) == 3
    assert "line 5" in capsys.readouterr().err


def test_train_single_class_dataset_fails_cleanly(tmp_path):
    assert run("synth", "--n", 4, "--malignant-frac", 0, "--out", tmp_path / "d") == 0
    assert run("train", "--data", tmp_path / "d", "--folds", 1, "--max-epochs", 1, "--out", tmp_path / "o",
               *SMALL) == 1


def test_bad_config_key_exit_1(tmp_path, workspace):
    _, data, _ = workspace
    assert run("train", "--data", data, "--set", "train.bogus=1", "--out", tmp_path) == 1


def test_train_is_reproducible(workspace, tmp_path):
    _, data, runs = workspace
    assert run("train", "--data", data, "--folds", 1, "--max-epochs", 1, "--seed", 4, "--out", tmp_path,
               "--workers", 1, *SMALL) == 0
    for rel in ("fold0/checkpoint.mtbr", "fold0/train_log.jsonl", "fold0/metrics.json", "aggregate.json"):
        assert (runs / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel


# --- eval ---------------------------------------------------------------------------------------------


def test_eval_outputs(workspace, tmp_path):
    _, data, runs = workspace
    assert run("eval", "--checkpoint", runs / "fold0" / "checkpoint.mtbr", "--data", data, "--out", tmp_path) == 0
    masks = sorted((tmp_path / "masks").glob("*_pred.pgm"))
    assert len(masks) == 10
    m = io.read_pgm(masks[0])
    assert m.shape == (32, 32) and set(np.unique(m)) <= {0, 255}
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    for k in TABLE_COLUMNS:
        assert metrics[k] is None or 0 <= metrics[k] <= 1
    preds = json.loads((tmp_path / "predictions.json").read_text())
    rec = preds["samples"][0]
    assert set(rec["descriptor_probs"]) == set(DESCRIPTORS)
    assert sum(rec["tumor_probs"].values()) == pytest.approx(1.0)


def test_eval_config_mismatch_exit_4(workspace, tmp_path):
    _, data, runs = workspace
    code = run("eval", "--checkpoint", runs / "fold0" / "checkpoint.mtbr", "--data", data, "--out", tmp_path,
               "--set", "model.base_channels=8")
    assert code == 4


def test_eval_corrupt_checkpoint_exit_4(workspace, tmp_path):
    _, data, _ = workspace
    (tmp_path / "x.mtbr").write_bytes(b"not a checkpoint")
    assert run("eval", "--checkpoint", tmp_path / "x.mtbr", "--data", data, "--out", tmp_path / "o") == 4


def test_eval_tensor_shape_mismatch_exit_4(workspace, tmp_path):
    _, data, runs = workspace
    params, stored, seed, extra = io.load_checkpoint(runs / "fold0" / "checkpoint.mtbr")
    stored = json.loads(json.dumps(stored))
    stored["model"]["head_hidden"] = 16
    io.save_checkpoint(tmp_path / "x.mtbr", params, stored, seed, extra)
    assert run("eval", "--checkpoint", tmp_path / "x.mtbr", "--data", data, "--out", tmp_path / "o") == 4


def test_overfit_tiny_model_segments_training_set(tmp_path):
    data = tmp_path / "d"
    assert run("synth", "--n", 6, "--malignant-frac", 0.5, "--seed", 1, "--out", data) == 0
    assert run("train", "--data", data, "--folds", 1, "--max-epochs", 60, "--no-augment", "--out", tmp_path / "r",
               "--set", "train.stop_patience=1000", "--set", "train.val_frac=0.0", "--set", "train.lr_init=0.003",
               *SMALL) == 0
    full = tmp_path / "r" / "fold0" / "checkpoint.mtbr"
    assert run("eval", "--checkpoint", full, "--data", data, "--out", tmp_path / "e") == 0
    _, _, _, extra = io.load_checkpoint(full)
    train_names = set(extra["split"]["train"])
    preds = {p.name[:-len("_pred.pgm")]: io.read_pgm(p) for p in (tmp_path / "e" / "masks").glob("*_pred.pgm")}
    from mtbirads.losses import dice_score

    samples = {s.name: s for s in io.load_dataset(data, 32)}
    dices = [dice_score(preds[n] / 255.0, samples[n].mask) for n in train_names]
    assert np.mean(dices) > 0.9


# --- explain -------------------------------------------------------------------------------------------


def test_explain_outputs(workspace, tmp_path):
    _, data, runs = workspace
    name = (data / "labels.csv").read_text().splitlines()[1].split(",")[0]
    assert run("explain", "--checkpoint", runs / "fold0" / "checkpoint.mtbr", "--data", data, "--sample", name,
               "--out", tmp_path) == 0
    rep = json.loads((tmp_path / f"{name}_attribution.json").read_text())
    assert abs(sum(rep["phi"]) - (rep["v_full"] - rep["v_empty"])) <= 1e-9
    assert rep["mode"] == "exact-group" and len(rep["phi"]) == 9
    mags = [abs(r["phi"]) for r in rep["ranked"]]
    assert mags == sorted(mags, reverse=True)
    assert io.read_pgm(tmp_path / f"{name}_pred_mask.pgm").shape == (32, 32)
    assert (tmp_path / f"{name}_attribution.svg").read_text().startswith("<svg")
    assert "malignant" in (tmp_path / f"{name}_attribution.txt").read_text()


def test_explain_sampled_mode(workspace, tmp_path):
    _, data, runs = workspace
    name = (data / "labels.csv").read_text().splitlines()[2].split(",")[0]
    assert run("explain", "--checkpoint", runs / "fold0" / "checkpoint.mtbr", "--data", data, "--sample", name,
               "--mode", "sampled", "--n-perms", 30, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / f"{name}_attribution.json").read_text())
    assert rep["n_permutations"] == 30 and len(rep["phi"]) == 25


def test_explain_class_mode_exit_5(workspace, tmp_path, capsys):
    _, data, runs = workspace
    code = run("explain", "--checkpoint", runs / "fold0" / "checkpoint.mtbr", "--data", data, "--sample", "x",
               "--mode", "class", "--out", tmp_path)
    assert code == 5 and "group" in capsys.readouterr().err


def test_explain_unknown_sample(workspace, tmp_path):
    _, data, runs = workspace
    assert run("explain", "--checkpoint", runs / "fold0" / "checkpoint.mtbr", "--data", data, "--sample",
               "nope", "--out", tmp_path) == 1


def test_module_entry_point(tmp_path):
    env = dict(os.environ, MTBR_LOG="quiet")
    proc = subprocess.run([sys.executable, "-m", "mtbirads", "synth", "--n", "2", "--out", str(tmp_path)],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["n_samples"] == 2
