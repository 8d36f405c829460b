import csv
import json
import xml.etree.ElementTree as ET

import pytest

from fcoskit.cli import main
from synth import make_coco, make_detections

COMMANDS = ["assign", "bpr", "ambiguity", "eval", "nms", "scatter", "traincheck", "gradcheck"]


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    coco = make_coco(12, seed=3, n_categories=5, crowd_rate=0.05)
    (d / "ann.json").write_text(json.dumps(coco))
    (d / "det.json").write_text(json.dumps(make_detections(coco, seed=1)))
    return d


@pytest.fixture(autouse=True)
def _isolate(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("FCOS_OUTPUT_DIR", raising=False)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.mark.parametrize("cmd", COMMANDS)
def test_help(cmd, capsys):
    assert run(cmd, "--help") == 0
    assert "--output-dir" in capsys.readouterr().out


def test_usage_errors(files):
    assert run() == 1
    assert run("frobnicate") == 1
    assert run("bpr", "--annotations", files / "ann.json", "--mode", "nope") == 1
    assert run("eval", "--annotations", files / "ann.json") == 1
    assert run("eval", "--annotations", files / "ann.json", "--detections", files / "det.json", "--iou", "1.5") == 1


def test_missing_file_is_io_error(tmp_path, capsys):
    assert run("bpr", "--annotations", tmp_path / "missing.json", "--mode", "fcos") == 2
    assert "missing.json" in capsys.readouterr().err


def test_malformed_input(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    assert run("bpr", "--annotations", tmp_path / "bad.json", "--mode", "fcos") == 1


def test_bad_config(tmp_path, files):
    (tmp_path / "c.toml").write_text("bogus = 1\n")
    assert run("bpr", "--annotations", files / "ann.json", "--mode", "fcos", "--config", tmp_path / "c.toml") == 1


def test_config_file_sets_output_dir(tmp_path, files):
    (tmp_path / "fcos.toml").write_text('output_dir = "from_config"\n')
    assert run("bpr", "--annotations", files / "ann.json", "--mode", "fcos") == 0
    assert (tmp_path / "from_config" / "bpr_fcos.json").exists()


def test_env_output_dir(tmp_path, files, monkeypatch):
    monkeypatch.setenv("FCOS_OUTPUT_DIR", str(tmp_path / "env"))
    assert run("ambiguity", "--annotations", files / "ann.json") == 0
    assert (tmp_path / "env" / "ambiguity.json").exists()
    assert run("ambiguity", "--annotations", files / "ann.json", "--output-dir", tmp_path / "flag") == 0
    assert (tmp_path / "flag" / "ambiguity.json").exists()


@pytest.mark.parametrize("mode", ["fcos", "fcos-nofpn", "anchors-none", "anchors-low04", "anchors-all"])
def test_bpr_modes(tmp_path, files, mode):
    assert run("bpr", "--annotations", files / "ann.json", "--mode", mode, "--output-dir", tmp_path) == 0
    out = json.loads((tmp_path / f"bpr_{mode}.json").read_text())
    assert 0 <= out["bpr_percent"] <= 100 and out["images"] == 12


def test_anchor_bpr_ordering(tmp_path, files):
    vals = {}
    for mode in ("anchors-none", "anchors-low04", "anchors-all"):
        run("bpr", "--annotations", files / "ann.json", "--mode", mode, "--output-dir", tmp_path)
        vals[mode] = json.loads((tmp_path / f"bpr_{mode}.json").read_text())["bpr_percent"]
    assert vals["anchors-none"] <= vals["anchors-low04"] <= vals["anchors-all"]


def test_assign_csv(tmp_path, files):
    assert run("assign", "--annotations", files / "ann.json", "--output-dir", tmp_path) == 0
    with open(tmp_path / "targets.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and rows[0].keys() >= {"image_id", "level", "l", "t", "r", "b", "centerness", "ambiguous"}
    for r in rows[:200]:
        assert int(r["class"]) > 0 and 0 < float(r["centerness"]) <= 1
        assert r["level"] in {"P3", "P4", "P5", "P6", "P7"}
    assert run("assign", "--annotations", files / "ann.json", "--output-dir", tmp_path / "p4", "--no-fpn") == 0
    with open(tmp_path / "p4" / "targets.csv") as fh:
        assert {r["level"] for r in csv.DictReader(fh)} == {"P4"}


def test_eval_outputs(tmp_path, files, capsys):
    assert run("eval", "--annotations", files / "ann.json", "--detections", files / "det.json",
               "--output-dir", tmp_path, "--iou", "0.75") == 0
    out = json.loads((tmp_path / "eval.json").read_text())
    assert 0 <= out["AP"] <= 100 and "AP@0.75" in out
    assert "AP" in capsys.readouterr().out
    ET.parse(tmp_path / "pr_iou75.svg")
    with open(tmp_path / "pr_iou75.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["threshold", "precision", "recall"]
    recall = [float(r[2]) for r in rows[1:]]
    assert recall == sorted(recall)


def test_eval_unknown_image(tmp_path, files):
    (tmp_path / "d.json").write_text(json.dumps([{"image_id": 999, "category_id": 1, "bbox": [0, 0, 1, 1], "score": 0.5}]))
    assert run("eval", "--annotations", files / "ann.json", "--detections", tmp_path / "d.json") == 1


def test_nms_and_scatter(tmp_path, files):
    assert run("nms", "--detections", files / "det.json", "--output-dir", tmp_path) == 0
    kept = json.loads((tmp_path / "nms.json").read_text())
    assert 0 < len(kept) <= len(json.loads((files / "det.json").read_text()))
    for flag in ("--fused", "--unfused"):
        assert run("scatter", "--annotations", files / "ann.json", "--detections", files / "det.json",
                   flag, "--output-dir", tmp_path) == 0
    ET.parse(tmp_path / "scatter_fused.svg")
    assert (tmp_path / "scatter_unfused.csv").read_text().startswith("score,iou\n")


def test_thread_count_does_not_change_outputs(tmp_path, files):
    for t in (1, 4):
        d = tmp_path / f"t{t}"
        assert run("assign", "--annotations", files / "ann.json", "--output-dir", d, "--threads", t) == 0
        assert run("nms", "--detections", files / "det.json", "--output-dir", d, "--threads", t) == 0
        assert run("ambiguity", "--annotations", files / "ann.json", "--output-dir", d, "--threads", t) == 0
    for name in ("targets.csv", "nms.json", "ambiguity.json"):
        assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t4" / name).read_bytes()


def test_gradcheck_exit_codes(tmp_path):
    assert run("gradcheck", "--n-params", 30, "--output-dir", tmp_path) == 0
    assert json.loads((tmp_path / "gradcheck.json").read_text())["passed"]
    assert run("gradcheck", "--n-params", 30, "--corrupt", "--output-dir", tmp_path) == 1


def test_traincheck_short(tmp_path):
    assert run("traincheck", "--epochs", 20, "--scenes", 2, "--output-dir", tmp_path) == 0
    summary = json.loads((tmp_path / "train_summary.json").read_text())
    assert summary["epochs"] == 20 and summary["gradcheck_passed"]
    assert len((tmp_path / "train_loss.csv").read_text().splitlines()) == 21
