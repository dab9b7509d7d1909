import filecmp
import os

import pytest

from silverdet import cli

CONFIG = """\
data.gold_size = 2
data.unlabeled_factor = 1.0
data.test_size = 4
detector.conf_threshold = 0.05
teacher.epochs = 1
student.epochs = 1
classifier.epochs = 1
"""

GRID = """\
grid.gold_sizes = 2
grid.combiners = const1
grid.seeds = 0
grid.unlabeled_factor = 1.0
grid.test_size = 4
"""


def run(argv):
    return cli.main(argv)


def run_pipeline(root):
    """Full command sequence under one directory; returns key output paths."""
    root = str(root)
    cfg = os.path.join(root, "run.cfg")
    with open(cfg, "w") as f:
        f.write(CONFIG)
    data = os.path.join(root, "data")
    teacher = os.path.join(root, "teacher.ckpt")
    silver = os.path.join(root, "silver")
    ens = os.path.join(root, "classifiers.ckpt")
    scored = os.path.join(root, "scored")
    student = os.path.join(root, "student.ckpt")
    report = os.path.join(root, "report.csv")

    steps = [
        ["gen-data", "--seed", "1", "--config", cfg, "--out", data],
        ["train-teacher", "--seed", "1", "--config", cfg,
         "--data", os.path.join(data, "gold"), "--out", teacher],
        ["pseudolabel", "--seed", "1", "--config", cfg, "--teacher", teacher,
         "--unlabeled", os.path.join(data, "unlabeled"), "--out", silver],
        ["train-classifiers", "--seed", "1", "--config", cfg,
         "--gold", os.path.join(data, "gold"), "--out", ens],
        ["score", "--seed", "1", "--silver", silver, "--classifiers", ens,
         "--combiner", "max", "--out", scored],
        ["train-student", "--seed", "1", "--config", cfg, "--silver", scored,
         "--init", "bootstrap", "--teacher", teacher, "--out", student],
        ["eval", "--seed", "1", "--config", cfg, "--model", student,
         "--test", os.path.join(data, "test"), "--out", report],
    ]
    for argv in steps:
        assert run(argv) == 0, argv[0]
    return {"teacher": teacher, "student": student, "report": report,
            "scores": os.path.join(scored, "scores.csv"),
            "silver_manifest": os.path.join(silver, "manifest.txt")}


@pytest.fixture(scope="module")
def pipeline_outputs(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run_a"))


def test_pipeline_produces_all_artifacts(pipeline_outputs):
    for name, path in pipeline_outputs.items():
        assert os.path.exists(path), name
        assert os.path.getsize(path) > 0, name


def test_pipeline_rerun_byte_identical(pipeline_outputs, tmp_path_factory):
    again = run_pipeline(tmp_path_factory.mktemp("run_b"))
    for name in pipeline_outputs:
        assert filecmp.cmp(pipeline_outputs[name], again[name], shallow=False), name


def test_status_line_on_stdout(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CONFIG)
    assert run(["gen-data", "--seed", "2", "--config", str(cfg),
                "--out", str(tmp_path / "data")]) == 0
    out = capsys.readouterr().out
    assert len(out.strip().splitlines()) == 1
    assert "wrote" in out


def test_logs_go_to_stderr(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CONFIG)
    run(["gen-data", "--seed", "2", "--config", str(cfg),
         "--out", str(tmp_path / "data")])
    err = capsys.readouterr().err
    assert "split=gold" in err


def test_eval_report_content(pipeline_outputs):
    lines = open(pipeline_outputs["report"]).read().splitlines()
    assert lines[0] == "class,AP,n_gt,n_det,tp,fp"
    assert lines[-1].startswith("mAP,")


def test_scores_csv_header(pipeline_outputs):
    header = open(pipeline_outputs["scores"]).readline().strip()
    assert header == "image,box_index,class,s0,s1,s2,s3,det_conf,alpha,combiner"


def test_missing_input_exits_nonzero(tmp_path, capsys):
    assert run(["train-teacher", "--data", str(tmp_path / "nope"),
                "--out", str(tmp_path / "t.ckpt")]) == 1
    assert "error:" in capsys.readouterr().err


def test_bad_config_exits_nonzero(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("teacher.warp = 9\n")
    assert run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 1
    assert "unknown config key" in capsys.readouterr().err


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("silverdet ")


def test_sweep_command(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CONFIG)
    grid = tmp_path / "grid.cfg"
    grid.write_text(GRID)
    out = tmp_path / "sweep"
    assert run(["sweep", "--seed", "3", "--config", str(cfg),
                "--grid", str(grid), "--out", str(out)]) == 0
    results = (out / "results.csv").read_text().splitlines()
    assert results[0].startswith("gold_size,gold_fraction,combiner,init,seed,")
    assert len(results) >= 2
    manifest = (out / "run_manifest.txt").read_text()
    assert "sweep.seed = 3" in manifest
    assert "teacher.epochs = 1" in manifest
