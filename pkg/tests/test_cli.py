import json
import math
import subprocess
import sys

import numpy as np
import pytest

from grasprefine import datasets, evaluation, refinement
from grasprefine.cli import main
from grasprefine.codec import GraspCandidate
from grasprefine.datasets import AnnotatedImage, read_canonical, write_canonical


def _corpus(tmp_path, seed=0, n=30):
    rng = np.random.default_rng(seed)
    gts, preds = [], []
    for i in range(n):
        gt = [GraspCandidate(*rng.uniform(20, 80, 2), *rng.uniform(8, 30, 2), rng.uniform(0, math.pi))
              for _ in range(2)]
        cands = [g.replace(x=g.x + rng.normal(0, 3), theta=g.theta + rng.normal(0, 0.4),
                           score=float(rng.random())) for g in gt]
        gts.append(AnnotatedImage(f"img{i}", 100, 100, gt))
        preds.append(AnnotatedImage(f"img{i}", 100, 100, cands))
    write_canonical(tmp_path / "gt.jsonl", gts)
    write_canonical(tmp_path / "pred.jsonl", preds)
    return gts, preds


def _err_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("grasprefine: error: ")
    return err[0]


def test_eval_identity(tmp_path, capsys):
    _corpus(tmp_path)
    rc = main(["eval", "--gt", str(tmp_path / "gt.jsonl"), "--pred", str(tmp_path / "gt.jsonl"),
               "--out-dir", str(tmp_path / "rep"), "--no-figures"])
    assert rc == 0
    doc = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert doc["grasp_accuracy"] == 1.0
    assert "grasp_accuracy=1.000000" in capsys.readouterr().out


def test_eval_matches_library(tmp_path):
    gts, preds = _corpus(tmp_path, seed=2)
    out = tmp_path / "rep"
    assert main(["eval", "--gt", str(tmp_path / "gt.jsonl"), "--pred", str(tmp_path / "pred.jsonl"),
                 "--out-dir", str(out)]) == 0
    expected = evaluation.image_accuracy([p.grasps for p in preds], [g.grasps for g in gts])
    assert 0 < expected < 1
    assert json.loads((out / "report.json").read_text())["grasp_accuracy"] == expected
    for name in ("sweep.csv", "sweep.png", "sweep_heatmap.png"):
        assert (out / name).stat().st_size > 0


def test_eval_empty_prediction_file(tmp_path, capsys):
    _corpus(tmp_path)
    (tmp_path / "empty.jsonl").write_text("")
    rc = main(["eval", "--gt", str(tmp_path / "gt.jsonl"), "--pred", str(tmp_path / "empty.jsonl"),
               "--out-dir", str(tmp_path / "rep")])
    assert rc == 2
    assert "input" in _err_line(capsys)


def test_eval_schema_error_reports_line(tmp_path, capsys):
    _corpus(tmp_path)
    lines = (tmp_path / "pred.jsonl").read_text().splitlines()
    lines[2] = "{broken"
    (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
    rc = main(["eval", "--gt", str(tmp_path / "gt.jsonl"), "--pred", str(tmp_path / "bad.jsonl"),
               "--out-dir", str(tmp_path / "rep")])
    assert rc == 2
    assert "bad.jsonl:3:" in _err_line(capsys)


def test_eval_per_class(tmp_path):
    mask = np.zeros((40, 40), dtype=int)
    mask[:, 20:] = 2
    mask[:, :20] = 1
    names = {1: "a", 2: "b"}
    gt = AnnotatedImage("x", 40, 40, [GraspCandidate(10, 20, 8, 4, 0.2, class_id=1),
                                      GraspCandidate(30, 20, 8, 4, 1.2, class_id=2)],
                        segmentation=mask, class_names=names)
    pred = AnnotatedImage("x", 40, 40, [GraspCandidate(10, 20, 8, 4, 0.2, class_id=1, score=0.9),
                                        GraspCandidate(10, 20, 8, 4, 1.2, class_id=2, score=0.8)],
                          segmentation=mask, class_names=names)
    write_canonical(tmp_path / "g.jsonl", [gt])
    write_canonical(tmp_path / "p.jsonl", [pred])
    assert main(["eval", "--gt", str(tmp_path / "g.jsonl"), "--pred", str(tmp_path / "p.jsonl"),
                 "--out-dir", str(tmp_path / "rep")]) == 0
    doc = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert doc["per_class_accuracy"] == {"1": 1.0, "2": 0.0}
    assert doc["segmentation_iou"]["mean_iou"] == 1.0
    assert (tmp_path / "rep" / "per_class.png").exists()


def test_sweep(tmp_path, capsys):
    gts, preds = _corpus(tmp_path, seed=4)
    out = tmp_path / "s.csv"
    assert main(["sweep", "--gt", str(tmp_path / "gt.jsonl"), "--pred", str(tmp_path / "pred.jsonl"),
                 "--iou", "0.25,0.35", "--angle", "30,5", "--out", str(out), "--figure", str(tmp_path / "s.png")]) == 0
    rows = [line.split(",") for line in out.read_text().splitlines()]
    assert rows[0] == ["angle_deg", "iou_0.25", "iou_0.35"]
    grid = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert grid[1, 0] <= grid[0, 0] and grid[0, 1] <= grid[0, 0]
    expected = evaluation.image_accuracy([p.grasps for p in preds], [g.grasps for g in gts])
    assert grid[0, 0] == pytest.approx(expected, abs=1e-6)
    assert capsys.readouterr().out.splitlines()[0] == "angle_deg,iou_0.25,iou_0.35"
    assert main(["sweep", "--gt", str(tmp_path / "gt.jsonl"), "--pred", str(tmp_path / "pred.jsonl"),
                 "--iou", "", "--out", str(out)]) == 2


TRAIN = ["refine", "train", "--num-scenes", "6", "--epochs", "3", "--hidden", "8", "--crop", "6"]


def test_refine_train_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(TRAIN + ["--params", str(tmp_path / f"{name}.bin"),
                             "--curve", str(tmp_path / f"{name}.csv")]) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    assert main(TRAIN + ["--seed", "1", "--params", str(tmp_path / "c.bin")]) == 0
    assert (tmp_path / "c.bin").read_bytes() != (tmp_path / "a.bin").read_bytes()


def test_refine_train_figure(tmp_path):
    assert main(TRAIN + ["--params", str(tmp_path / "p.bin"), "--figure", str(tmp_path / "c.png")]) == 0
    assert (tmp_path / "c.png").read_bytes()[:4] == b"\x89PNG"


def test_refine_apply_zero_params_is_identity(tmp_path):
    refinement.save_params(tmp_path / "z.bin", refinement.MlpParams.zeros(2 * 6 * 6, 4))
    args = ["refine", "apply", "--params", str(tmp_path / "z.bin"), "--crop", "6", "--num-scenes", "4",
            "--seed", "2", "--out", str(tmp_path / "r.jsonl"), "--baseline-out", str(tmp_path / "b.jsonl"),
            "--gt-out", str(tmp_path / "g.jsonl")]
    assert main(args) == 0
    assert read_canonical(tmp_path / "r.jsonl") == read_canonical(tmp_path / "b.jsonl")
    gt = read_canonical(tmp_path / "g.jsonl")
    assert len(gt) == 4 and gt[0].segmentation is not None


def test_refine_apply_from_files(tmp_path):
    scenes = refinement.generate_synthetic_scenes(2, seed=5, candidates_per_grasp=2)
    imgs = [AnnotatedImage(f"s{i}", 96, 96, sc.candidates) for i, sc in enumerate(scenes)]
    write_canonical(tmp_path / "in.jsonl", imgs)
    np.savez(tmp_path / "maps.npz", **{f"s{i}": sc.prob_map for i, sc in enumerate(scenes)})
    refinement.save_params(tmp_path / "z.bin", refinement.MlpParams.zeros(2 * 4 * 4, 3))
    base = ["refine", "apply", "--params", str(tmp_path / "z.bin"), "--crop", "4",
            "--pred", str(tmp_path / "in.jsonl"), "--out", str(tmp_path / "o.jsonl")]
    assert main(base + ["--maps", str(tmp_path / "maps.npz")]) == 0
    assert read_canonical(tmp_path / "o.jsonl") == imgs
    assert main(base) == 2


def test_refine_apply_corrupt_header(tmp_path, capsys):
    p = tmp_path / "p.bin"
    refinement.save_params(p, refinement.MlpParams.zeros(2 * 6 * 6, 4))
    data = p.read_bytes()
    p.write_bytes(b"NOPE" + data[4:])
    rc = main(["refine", "apply", "--params", str(p), "--crop", "6", "--num-scenes", "1",
               "--out", str(tmp_path / "o.jsonl")])
    assert rc == 2 and "magic" in _err_line(capsys)
    p.write_bytes(data[:4] + (9).to_bytes(4, "little") + data[8:])
    rc = main(["refine", "apply", "--params", str(p), "--crop", "6", "--num-scenes", "1",
               "--out", str(tmp_path / "o.jsonl")])
    assert rc == 2 and "version" in _err_line(capsys)


def test_refine_divergence_exit_code(tmp_path, capsys):
    rc = main(TRAIN + ["--epochs", "50", "--lr", "50", "--params", str(tmp_path / "p.bin")])
    assert rc == 1 and "diverged" in _err_line(capsys)


def test_convert_cornell_and_jacquard(tmp_path, capsys):
    (tmp_path / "pcd0100cpos.txt").write_text("0 0\n0 10\n20 10\n20 0\nNaN 1\n2 3\n4 5\n6 7\n")
    out = tmp_path / "c.jsonl"
    assert main(["convert", "--from", "cornell", str(tmp_path / "pcd0100cpos.txt"), str(out)]) == 0
    (img,) = read_canonical(out)
    assert img.image_id == "pcd0100cpos" and (img.width, img.height) == (640, 480)
    assert img.grasps == [GraspCandidate(10, 5, 20, 10, 0)]
    captured = capsys.readouterr()
    assert "warnings=1" in captured.out and "pcd0100cpos.txt:5" in captured.err
    (tmp_path / "j.txt").write_text("50;60;90;20;10\n")
    assert main(["convert", "--from", "jacquard", "--width", "100", "--height", "100",
                 str(tmp_path / "j.txt"), str(out)]) == 0
    assert read_canonical(out)[0].grasps[0].theta == pytest.approx(math.pi / 2)
    (tmp_path / "bad.txt").write_text("1 2\n")
    assert main(["convert", "--from", "cornell", str(tmp_path / "bad.txt"), str(out)]) == 2


def test_convert_ocid(tmp_path):
    from PIL import Image

    root = tmp_path / "ocid"
    (root / "Annotations").mkdir(parents=True)
    (root / "seg_mask_labels").mkdir()
    (root / "Annotations" / "r0.txt").write_text(datasets.export_cornell([GraspCandidate(10, 10, 6, 3, 0.5)]))
    (root / "Annotations" / "r0.labels").write_text("4\n")
    mask = np.zeros((20, 30), dtype=np.uint8)
    mask[5:15, 5:15] = 4
    Image.fromarray(mask).save(root / "seg_mask_labels" / "r0.png")
    assert main(["convert", "--from", "ocid", str(root), str(tmp_path / "o.jsonl")]) == 0
    (img,) = read_canonical(tmp_path / "o.jsonl")
    assert img.grasps[0].class_id == 4 and np.array_equal(img.segmentation, mask)


def test_iou(capsys):
    assert main(["iou", "0", "0", "1", "1", "0", "0", "0", "1", "1", "45"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(1 / math.sqrt(2), abs=1e-9)
    assert main(["iou", "--radians", "--axis-aligned", "0", "0", "2", "2", "0", "1", "0", "2", "2", "0"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(1 / 3)
    assert main(["iou", "0", "0", "0", "1", "0", "0", "0", "1", "1", "0"]) == 2


def test_config_file_and_override(tmp_path):
    gts, preds = _corpus(tmp_path, seed=6)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"angle_threshold": 5.0, "no_figures": True}))
    args = ["--config", str(cfg), "eval", "--gt", str(tmp_path / "gt.jsonl"),
            "--pred", str(tmp_path / "pred.jsonl"), "--out-dir", str(tmp_path / "a")]
    assert main(args) == 0
    doc = json.loads((tmp_path / "a" / "report.json").read_text())
    assert doc["config"]["angle_threshold_deg"] == pytest.approx(5.0)
    assert not (tmp_path / "a" / "sweep.png").exists()
    args[-1] = str(tmp_path / "b")
    assert main(args + ["--angle-threshold", "20"]) == 0
    assert json.loads((tmp_path / "b" / "report.json").read_text())["config"]["angle_threshold_deg"] == 20.0
    cfg.write_text(json.dumps({"bogus_key": 1}))
    assert main(args) == 2


def test_unknown_flag_and_missing_file(tmp_path, capsys):
    assert main(["eval", "--gt", "x", "--pred", "y", "--out-dir", "z", "--nope"]) == 2
    _err_line(capsys)
    assert main(["eval", "--gt", str(tmp_path / "missing.jsonl"), "--pred", "y", "--out-dir", "z"]) == 2
    _err_line(capsys)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "grasprefine", "iou", "0", "0", "1", "1", "0",
                           "0", "0", "1", "1", "90"], capture_output=True, text=True)
    assert proc.returncode == 0 and float(proc.stdout) == pytest.approx(1.0)
