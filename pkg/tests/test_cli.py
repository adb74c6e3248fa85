import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.append(str(Path(__file__).resolve().parents[1]))

from nightforge import cli, zerodce
from nightforge.boxops import read_detections
from nightforge.imgcore import Image, read_png, write_png


def _image_tree(root, count=3, width=24, height=20):
    rng = np.random.default_rng(0)
    for index in range(count):
        folder = root / ("night" if index % 2 else "")
        write_png(folder / f"img_{index}.png", Image(rng.uniform(0.05, 0.4, size=(3, height, width))))
    return root


def _write_config(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


VOLATILE_OUTPUTS = {"config.json", "run_report.json", "run_report.csv"}


def _stable_tree(root):
    return {
        path.relative_to(root).as_posix(): path.read_bytes()
        for path in sorted(root.rglob("*"))
        if path.is_file() and path.name not in VOLATILE_OUTPUTS
    }


def _annotated_corpus(root):
    lines = []
    for name, boxes in {"a": [(2, 2, 10, 10)], "b": [(5, 5, 15, 15), (20, 2, 30, 12)]}.items():
        write_png(root / "images" / f"{name}.png", Image.full(40, 20, 0.2))
        label = root / "labels" / f"{name}.txt"
        label.parent.mkdir(parents=True, exist_ok=True)
        label.write_text(f"{len(boxes)}\n" + "".join(" ".join(map(str, b)) + "\n" for b in boxes))
        lines.append(f"images/{name}.png\tlabels/{name}.txt")
    manifest = root / "gt.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _write_preds(folder, rows_by_image):
    folder.mkdir(parents=True, exist_ok=True)
    for name, rows in rows_by_image.items():
        body = "".join(" ".join(map(str, row)) + "\n" for row in rows)
        (folder / f"{name}.txt").write_text(f"{len(rows)}\n{body}")
    return folder


def test_enhance_writes_images_report_and_config(tmp_path, capsys):
    src = _image_tree(tmp_path / "in")
    out = tmp_path / "out"
    assert cli.main(["enhance", str(src), str(out), "--method", "msrcr"]) == 0

    produced = sorted(p.relative_to(out).as_posix() for p in out.rglob("*.png"))
    assert produced == ["img_0.png", "img_2.png", "night/img_1.png"]
    assert read_png(out / "img_0.png").size == (24, 20)
    assert json.loads((out / "config.json").read_text())["schema_version"] == 1
    report = json.loads((out / "run_report.json").read_text())
    assert report["succeeded"] == 3
    assert "enhance[msrcr]" in capsys.readouterr().out


def test_enhance_is_reproducible_and_zero_alpha_saliency_matches_msrcr(tmp_path):
    src = _image_tree(tmp_path / "in", count=2)
    assert cli.main(["enhance", str(src), str(tmp_path / "a")]) == 0
    assert cli.main(["enhance", str(src), str(tmp_path / "b")]) == 0
    assert cli.main(["enhance", str(src), str(tmp_path / "c"), "--method", "msrcr+saliency", "--alpha", "0"]) == 0
    for name in ("img_0.png", "night/img_1.png"):
        reference = (tmp_path / "a" / name).read_bytes()
        assert (tmp_path / "b" / name).read_bytes() == reference
        assert (tmp_path / "c" / name).read_bytes() == reference


def test_enhance_zerodce_writes_curve_maps(tmp_path):
    src = _image_tree(tmp_path / "in", count=1, width=20, height=12)
    config = _write_config(
        tmp_path / "dce.json",
        {"zerodce": {"steps": 3, "grid_w": 4, "grid_h": 4, "iterations": 2, "fit_width": 16}},
    )
    out = tmp_path / "out"
    assert cli.main(["enhance", str(src), str(out), "--method", "zerodce", "--config", config]) == 0
    assert (out / "img_0.png").is_file()
    assert (out / "img_0.dce").read_bytes()[:4] == b"DCE1"


def test_transfer_output_does_not_depend_on_workers(tmp_path):
    src = _image_tree(tmp_path / "in", count=4)
    assert cli.main(["transfer", str(src), str(tmp_path / "w1"), "--workers", "1", "--seed", "5"]) == 0
    assert cli.main(["transfer", str(src), str(tmp_path / "w8"), "--workers", "8", "--seed", "5"]) == 0

    stable = _stable_tree(tmp_path / "w1")
    assert stable == _stable_tree(tmp_path / "w8")
    assert "transfer_manifest.tsv" in stable and "night/img_3.png" in stable
    manifest = (tmp_path / "w1" / "transfer_manifest.tsv").read_text()
    rows = [line.split("\t") for line in manifest.splitlines()]
    assert [row[0] for row in rows] == ["img_0.png", "img_2.png", "night/img_1.png", "night/img_3.png"]


def test_transfer_report_carries_warnings_and_aggregates(tmp_path):
    src = _image_tree(tmp_path / "in", count=2)
    config = _write_config(tmp_path / "noisy.json", {"darken": {"sigma_read": 0.5}})
    out = tmp_path / "out"
    assert cli.main(["transfer", str(src), str(out), "--config", config]) == 0

    report = json.loads((out / "run_report.json").read_text())
    for result in report["results"]:
        assert any("clipped to black" in warning for warning in result["warnings"])
    metrics = report["metrics"]
    assert metrics["images"] == 2.0 and metrics["failed"] == 0.0
    assert metrics["warnings"] >= 2.0
    gammas = [result["metrics"]["gamma"] for result in report["results"]]
    assert metrics["mean_gamma"] == pytest.approx(sum(gammas) / 2)
    assert 2.0 <= metrics["mean_gamma"] <= 3.5


def test_degenerate_transfer_equals_enhance(tmp_path):
    src = _image_tree(tmp_path / "in", count=2)
    config = _write_config(
        tmp_path / "flat.json",
        {"darken": {"gamma_range": [1.0, 1.0], "scale_range": [1.0, 1.0], "sigma_read": 0.0, "sigma_shot": 0.0}},
    )
    assert cli.main(["transfer", str(src), str(tmp_path / "t"), "--config", config]) == 0
    assert cli.main(["enhance", str(src), str(tmp_path / "e")]) == 0
    assert (tmp_path / "t" / "img_0.png").read_bytes() == (tmp_path / "e" / "img_0.png").read_bytes()


def test_fuse_single_identity_leaf_round_trips(tmp_path):
    preds = tmp_path / "preds"
    _write_preds(preds / "m1" / "identity", {"img": [(1.0, 2.0, 11.0, 12.0, 0.8)]})
    out = tmp_path / "fused"
    assert cli.main(["fuse", str(preds), str(out)]) == 0
    (det,) = read_detections(out / "img.txt")
    assert det.box.as_tuple() == (1.0, 2.0, 11.0, 12.0)
    assert det.score == 0.8


def test_fuse_duplicate_models_leave_detections_unchanged(tmp_path):
    rows = [(1.0, 2.0, 11.0, 12.0, 0.8), (40.0, 40.0, 52.0, 50.0, 0.6)]
    preds = tmp_path / "preds"
    _write_preds(preds / "m1" / "identity", {"img": rows})
    _write_preds(preds / "m2" / "identity", {"img": rows})
    out = tmp_path / "fused"
    assert cli.main(["fuse", str(preds), str(out)]) == 0
    fused = read_detections(out / "img.txt")
    assert [d.box.as_tuple() + (d.score,) for d in fused] == rows


def test_enhance_output_does_not_depend_on_workers(tmp_path):
    src = _image_tree(tmp_path / "in", count=4)
    assert cli.main(["enhance", str(src), str(tmp_path / "w1"), "--workers", "1"]) == 0
    assert cli.main(["enhance", str(src), str(tmp_path / "w8"), "--workers", "8"]) == 0
    assert _stable_tree(tmp_path / "w1") == _stable_tree(tmp_path / "w8")
    first = json.loads((tmp_path / "w1" / "config.json").read_text())
    second = json.loads((tmp_path / "w8" / "config.json").read_text())
    assert (first.pop("workers"), second.pop("workers")) == (1, 8)
    assert first == second


def test_fuse_flags_leaves_without_detections(tmp_path):
    preds = tmp_path / "preds"
    _write_preds(preds / "m1" / "identity", {"img": [(1.0, 2.0, 11.0, 12.0, 0.8)]})
    _write_preds(preds / "m1" / "hflip", {"img": []})
    out = tmp_path / "fused"
    assert cli.main(["fuse", str(preds), str(out), "--image-width", "100"]) == 0

    report = json.loads((out / "run_report.json").read_text())
    assert report["results"][0]["warnings"] == ["m1/hflip has no detections"]
    assert report["metrics"]["mean_leaves"] == 2.0
    assert len(read_detections(out / "img.txt")) == 1


def test_fuse_hflip_uses_image_width(tmp_path):
    preds = tmp_path / "preds"
    _write_preds(preds / "m1" / "identity", {"img": [(10.0, 0.0, 20.0, 10.0, 0.9)]})
    _write_preds(preds / "m1" / "hflip", {"img": [(80.0, 0.0, 90.0, 10.0, 0.9)]})
    out = tmp_path / "fused"
    assert cli.main(["fuse", str(preds), str(out), "--image-width", "100", "--config",
                     _write_config(tmp_path / "c.json", {"boxes": {"pre_suppression": "none"}})]) == 0
    (det,) = read_detections(out / "img.txt")
    assert det.box.as_tuple() == (10.0, 0.0, 20.0, 10.0)


def test_fuse_rejects_unknown_transform_directory(tmp_path, capsys):
    preds = tmp_path / "preds"
    _write_preds(preds / "m1" / "rotate90", {"img": [(1.0, 2.0, 11.0, 12.0, 0.8)]})
    assert cli.main(["fuse", str(preds), str(tmp_path / "out")]) == 2
    assert "rotate90" in capsys.readouterr().err


def test_eval_prints_map_and_writes_report(tmp_path, capsys):
    manifest = _annotated_corpus(tmp_path)
    preds = _write_preds(
        tmp_path / "preds",
        {"a": [(2, 2, 10, 10, 0.9)], "b": [(5, 5, 15, 15, 0.8), (20, 2, 30, 12, 0.7)]},
    )
    assert cli.main(["eval", str(manifest), str(preds)]) == 0
    assert "mAP 1.0000" in capsys.readouterr().out
    assert json.loads((preds / "ap_report.json").read_text())["n_gt"] == 3


def test_eval_missing_prediction_file_fails(tmp_path, capsys):
    manifest = _annotated_corpus(tmp_path)
    preds = _write_preds(tmp_path / "preds", {"a": [(2, 2, 10, 10, 0.9)]})
    assert cli.main(["eval", str(manifest), str(preds)]) == 1
    assert "missing [b]" in capsys.readouterr().err


def test_split_and_anchors(tmp_path, capsys):
    manifest = _annotated_corpus(tmp_path)
    prefix = tmp_path / "splits" / "faces"
    assert cli.main(["split", str(manifest), str(prefix)]) == 0
    train = (tmp_path / "splits" / "faces.train.txt").read_text().splitlines()
    val = (tmp_path / "splits" / "faces.val.txt").read_text().splitlines()
    assert sorted(train + val) == ["images/a.png", "images/b.png"]
    assert len(val) == 1

    assert cli.main(["anchors", str(manifest), "--k", "1"]) == 0
    assert "Anchor width" in capsys.readouterr().out


def test_compare_writes_csv(tmp_path):
    manifest = _annotated_corpus(tmp_path)
    good = _write_preds(
        tmp_path / "good",
        {"a": [(2, 2, 10, 10, 0.9)], "b": [(5, 5, 15, 15, 0.8), (20, 2, 30, 12, 0.7)]},
    )
    poor = _write_preds(tmp_path / "poor", {"a": [(30, 10, 38, 18, 0.9)], "b": [(5, 5, 15, 15, 0.8)]})
    csv_path = tmp_path / "table.csv"
    assert cli.main(["compare", str(manifest), f"good={good}", f"poor={poor}", "--csv", str(csv_path)]) == 0
    frame = pd.read_csv(csv_path)
    assert list(frame["setting"]) == ["good", "poor"]
    assert frame["mAP"][0] == 1.0
    assert frame["mAP"][1] < 1.0


def test_bad_config_exits_with_usage_code(tmp_path, capsys):
    src = _image_tree(tmp_path / "in", count=1)
    config = _write_config(tmp_path / "bad.json", {"fusion": {"alpha": 3}})
    assert cli.main(["enhance", str(src), str(tmp_path / "out"), "--config", config]) == 2
    assert "Error:" in capsys.readouterr().err
    assert cli.main(["enhance", str(tmp_path / "absent"), str(tmp_path / "out")]) == 2


def test_curve_fit_underflow_becomes_a_warning():
    img = Image.full(16, 16, 0.1)
    fit = zerodce.optimize_curve(img, steps=10, step_size=1e-13, grid_w=4, grid_h=4)
    (warning,) = cli._curve_fit_warnings(fit)
    assert "step size underflow" in warning
    assert cli._flat_channel_warnings(Image.full(4, 4, 0.5)) == [
        f"channel {index} is flat after colour balance" for index in range(3)
    ]
