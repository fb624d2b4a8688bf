import csv
import json
import shutil

import numpy as np
import pytest

from pyramidcount import density as dgt
from pyramidcount.cli import main
from pyramidcount.pgm import read_pgm, write_pgm

SPEC = {"height": 64, "width": 64, "count_min": 3, "count_max": 6, "size_top": 4,
        "size_gradient": 0.1, "seed": 5}
NET = {"name": "mini", "layers": [
    {"kind": "conv", "out_ch": 4, "in_ch": 1, "kh": 3, "kw": 3, "activation": "leaky_relu"},
    {"kind": "pool"},
    {"kind": "conv", "out_ch": 4, "in_ch": 4, "kh": 3, "kw": 3, "activation": "leaky_relu"},
    {"kind": "pool"},
    {"kind": "conv", "out_ch": 4, "in_ch": 4, "kh": 3, "kw": 3, "activation": "leaky_relu"},
    {"kind": "conv", "out_ch": 1, "in_ch": 4, "kh": 1, "kw": 1, "activation": "relu"}]}


def _json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", _json(root / "spec.json", SPEC), str(root / "ds"),
                 "--n-images", "4"]) == 0
    return root / "ds"


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = {"version": 1,
           "model": {"network": NET, "scales": [1.0, 0.5], "fusion_mode": "adaptive"},
           "gt": {"mode": "fixed", "sigma": 2.0},
           "train": {"patch_size": 32, "target_size": 8, "epochs": 2, "batch_size": 2,
                     "adam_warm_epochs": 1, "seed": 1}}
    out = root / "out"
    code = main(["train", _json(root / "train.json", cfg), str(dataset), str(out),
                 "--val-dir", str(dataset)])
    return code, out, dataset, cfg


def test_synth_files_and_reproducible(tmp_path):
    spec = _json(tmp_path / "s.json", dict(SPEC, n_images=20))
    assert main(["synth", spec, str(tmp_path / "a")]) == 0
    assert main(["synth", spec, str(tmp_path / "b")]) == 0
    assert len(list((tmp_path / "a" / "images").glob("*.pgm"))) == 20
    assert len(list((tmp_path / "a" / "annotations").glob("*.json"))) == 20
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file() and f.name != "manifest.json":
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    man_a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    man_b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man_a["artifacts"] == man_b["artifacts"] and man_a["seed"] == 5


def test_synth_centres_match_annotations(dataset):
    ann = json.loads((dataset / "annotations" / "img_0.json").read_text())
    img = read_pgm(dataset / "images" / "img_0.pgm")
    assert img.shape == (64, 64)
    x, y = ann["points"][0]
    # blob centre is brighter than the background corner region
    assert img[int(round(y)), int(round(x))] > 100


def test_synth_invalid_field(tmp_path, capsys):
    spec = _json(tmp_path / "s.json", dict(SPEC, n_images=2, colour="red"))
    assert main(["synth", spec, str(tmp_path / "o")]) == 2
    assert "colour" in capsys.readouterr().err


def test_gt_fixed_mass(tmp_path):
    ann = tmp_path / "ann"
    ann.mkdir()
    (ann / "a.json").write_text(json.dumps(
        {"image": "a", "height": 60, "width": 80, "points": [[3, 4], [40, 30], [79, 59]]}))
    assert main(["gt", str(ann), str(tmp_path / "out"), "--mode", "fixed", "--sigma", "15"]) == 0
    assert abs(dgt.load_csv(tmp_path / "out" / "a.csv").sum() - 3) <= 1e-5
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["mass_report"]["a"]["points"] == 3


def test_gt_adaptive_single_point_warns(tmp_path, capsys):
    ann = tmp_path / "ann"
    ann.mkdir()
    (ann / "one.json").write_text(json.dumps(
        {"image": "one", "height": 40, "width": 40, "points": [[20, 20]]}))
    assert main(["gt", str(ann), str(tmp_path / "out"), "--mode", "adaptive", "--k", "5"]) == 0
    assert "fallback" in capsys.readouterr().err
    ref = dgt.generate_fixed([(20, 20)], (40, 40), dgt.FALLBACK_SIGMA)
    np.testing.assert_allclose(dgt.load_csv(tmp_path / "out" / "one.csv"), ref, atol=1e-12)


def test_gt_empty_and_out_of_bounds(tmp_path, capsys):
    ann = tmp_path / "ann"
    ann.mkdir()
    (ann / "empty.json").write_text(json.dumps({"image": "empty", "height": 8, "width": 8,
                                                "points": []}))
    assert main(["gt", str(ann), str(tmp_path / "o1")]) == 0
    assert not dgt.load_csv(tmp_path / "o1" / "empty.csv").any()
    (ann / "bad.json").write_text(json.dumps({"image": "bad", "height": 8, "width": 8,
                                              "points": [[9, 1]]}))
    assert main(["gt", str(ann), str(tmp_path / "o2")]) == 2
    assert "bad.json" in capsys.readouterr().err


def test_gt_dims_from_image(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "annotations").mkdir()
    write_pgm(tmp_path / "images" / "p.pgm", np.zeros((12, 20)))
    dgt.save_annotations(tmp_path / "annotations" / "p.json", "p", [(5.0, 5.0)])
    assert main(["gt", str(tmp_path / "annotations"), str(tmp_path / "o"), "--sigma", "2"]) == 0
    assert dgt.load_csv(tmp_path / "o" / "p.csv").shape == (12, 20)


def test_train_smoke(trained):
    code, out, _, _ = trained
    assert code == 0
    with open(out / "train_log.csv") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert set(rows[0]) == {"epoch", "lr", "train_loss", "val_mae"}
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and "model.pyrd" in man["artifacts"]


def test_train_resume_continues_numbering(trained, tmp_path):
    _, out, data, cfg = trained
    run = tmp_path / "resumed"
    shutil.copytree(out, run)
    cfg = json.loads(json.dumps(cfg))
    cfg["train"]["epochs"] = 3
    code = main(["train", _json(tmp_path / "t.json", cfg), str(data), str(run), "--resume"])
    assert code == 0
    with open(run / "train_log.csv") as f:
        assert [int(r["epoch"]) for r in csv.DictReader(f)] == [1, 2, 3]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_3(dataset, tmp_path):
    cfg = {"model": {"network": NET, "scales": [1.0], "fusion_mode": "fixed"},
           "train": {"patch_size": 32, "target_size": 8, "epochs": 3, "batch_size": 2,
                     "lr_initial": 1e30, "momentum": 0.0}}
    out = tmp_path / "o"
    assert main(["train", _json(tmp_path / "t.json", cfg), str(dataset), str(out)]) == 3
    assert "diverged" in json.loads((out / "manifest.json").read_text())["status"]


def test_train_bad_config(dataset, tmp_path):
    cfg = {"model": {"network": "FCN-3c"}}
    assert main(["train", _json(tmp_path / "t.json", cfg), str(dataset), str(tmp_path / "o")]) == 2
    assert main(["train", str(tmp_path / "missing.json"), str(dataset), str(tmp_path / "o")]) == 2


def test_eval_passthrough_is_perfect(dataset, tmp_path, capsys):
    assert main(["eval", "none", str(dataset), "--passthrough", "--out-dir",
                 str(tmp_path / "e")]) == 0
    summary = json.loads((tmp_path / "e" / "summary.json").read_text())
    assert summary["mae"] <= 1e-9
    with open(tmp_path / "e" / "report.csv") as f:
        assert len(list(csv.DictReader(f))) == 4


def test_eval_with_model(trained, dataset, tmp_path, capsys):
    _, out, _, _ = trained
    assert main(["eval", str(out / "model.pyrd"), str(dataset), "--out-dir",
                 str(tmp_path / "e")]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.startswith("MAE=")
    assert json.loads((tmp_path / "e" / "summary.json").read_text())["fps"] > 0


def test_eval_missing_weights(dataset, tmp_path, capsys):
    assert main(["eval", str(tmp_path / "nope.pyrd"), str(dataset), "--out-dir",
                 str(tmp_path / "e")]) == 2
    assert "not found" in capsys.readouterr().err


def test_predict_outputs(trained, dataset, tmp_path, capsys):
    _, out, _, _ = trained
    assert main(["predict", str(out / "model.pyrd"), str(dataset / "images" / "img_1.pgm"),
                 str(tmp_path / "p")]) == 0
    printed = capsys.readouterr().out.strip()
    count = float(printed)
    assert count >= 0
    assert sorted(f.name for f in (tmp_path / "p").glob("attention_s*.pgm")) == [
        "attention_s0.pgm", "attention_s1.pgm"]
    dens = dgt.load_csv(tmp_path / "p" / "density.csv")
    assert dens.shape == (16, 16)
    assert float(f"{dens.sum():.6g}") == pytest.approx(count)


def test_predict_non_image(trained, tmp_path, capsys):
    _, out, _, _ = trained
    (tmp_path / "x.pgm").write_text("hello")
    assert main(["predict", str(out / "model.pyrd"), str(tmp_path / "x.pgm"),
                 str(tmp_path / "p")]) == 2


@pytest.mark.parametrize("name,rf,params", [("FCN-7c", 76, 148593), ("FCN-5c", 40, 50497)])
def test_inspect_presets(name, rf, params, capsys):
    assert main(["inspect", name]) == 0
    out = capsys.readouterr().out
    assert f"receptive field: {rf}" in out and f"backbone parameters: {params}" in out


def test_inspect_pyramid_and_file(tmp_path, capsys):
    assert main(["inspect", "FCN-7c", "--scales", "1", "0.7", "0.5", "--fusion-mode", "sum"]) == 0
    assert "parameters: 150914" in capsys.readouterr().out
    assert main(["inspect", _json(tmp_path / "net.json", NET), "--input-size", "32", "48"]) == 0
    out = capsys.readouterr().out
    assert "receptive field: 18" in out and "(1, 8, 12)" in out


def test_inspect_unknown(capsys):
    assert main(["inspect", "FCN-99c"]) == 2
    assert "FCN-7c" in capsys.readouterr().err
