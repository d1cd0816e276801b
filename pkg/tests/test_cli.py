"""CLI subcommands: smoke pipeline, evaluation fixture, error handling."""

import numpy as np
import pytest

from noduleforge.cli import build_parser, cli_main, worker_count
from noduleforge.fileio import (
    read_annotations_csv,
    read_candidates_csv,
    read_froc_csv,
    write_annotations_csv,
    write_candidates_csv,
)

from fixtures import DIAG_CONVNET, leaderboard_row_fixture

TINY = [
    "--phantom-dims", "64 64 24",
    "--phantom-train-volumes", "3",
    "--phantom-test-volumes", "2",
    "--phantom-nodules-per-volume", "1",
    "--phantom-mimics-per-volume", "2",
    "--seed", "5",
]


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli_main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli_main(["gen-data", "--out", "x", "--no-such-flag", "1"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_gen_data_writes_volumes_and_is_idempotent(tmp_path):
    out = tmp_path / "data"
    assert cli_main(["gen-data", "--out", str(out)] + TINY) == 0
    train = out / "train"
    assert sorted(p.name for p in train.glob("*.mhd")) == [
        "train_0000.mhd", "train_0001.mhd", "train_0002.mhd"
    ]
    annos = read_annotations_csv(train / "annotations.csv")
    assert len(annos) == 3
    assert (out / "test" / "annotations.csv").exists()
    assert (out / "config.txt").exists()

    before = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert cli_main(["gen-data", "--out", str(out)] + TINY) == 0
    after = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert before == after


def test_gen_data_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("phantom_train_volumes = 2\nphantom_test_volumes = 1\n"
                   "phantom_nodules_per_volume = 1\nphantom_mimics_per_volume = 0\n"
                   "phantom_dims = 48 48 20\nseed = 3\n")
    out = tmp_path / "data"
    assert cli_main(["gen-data", "--out", str(out), "--config", str(cfg),
                     "--phantom-train-volumes", "1"]) == 0
    assert len(list((out / "train").glob("*.mhd"))) == 1  # override wins
    assert len(list((out / "test").glob("*.mhd"))) == 1


def test_evaluate_prints_published_cpm(tmp_path, capsys):
    cands, annos = leaderboard_row_fixture(DIAG_CONVNET)
    cpath = tmp_path / "cands.csv"
    apath = tmp_path / "annos.csv"
    write_candidates_csv(cpath, cands)
    write_annotations_csv(apath, annos)
    out = tmp_path / "cpm.csv"
    assert cli_main(["evaluate", "--candidates", str(cpath),
                     "--annotations", str(apath), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "cpm 0.838" in printed
    assert out.exists()


def test_froc_plot_writes_points(tmp_path):
    cands, annos = leaderboard_row_fixture(DIAG_CONVNET)
    cpath = tmp_path / "cands.csv"
    apath = tmp_path / "annos.csv"
    write_candidates_csv(cpath, cands)
    write_annotations_csv(apath, annos)
    out = tmp_path / "froc.csv"
    assert cli_main(["froc-plot", "--candidates", str(cpath),
                     "--annotations", str(apath), "--out", str(out)]) == 0
    points = read_froc_csv(out)
    assert points == sorted(points)
    assert points[-1][1] == pytest.approx(0.923)


def test_evaluate_missing_file_exits_1(tmp_path, capsys):
    apath = tmp_path / "annos.csv"
    write_annotations_csv(apath, [])
    code = cli_main(["evaluate", "--candidates", str(tmp_path / "nope.csv"),
                     "--annotations", str(apath)])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_failed_subcommand_leaves_no_partial_output(tmp_path, capsys):
    cands, annos = leaderboard_row_fixture(DIAG_CONVNET)
    cpath = tmp_path / "cands.csv"
    apath = tmp_path / "annos.csv"
    write_candidates_csv(cpath, cands)
    write_annotations_csv(apath, annos)
    missing_dir = tmp_path / "no" / "such" / "dir"
    code = cli_main(["evaluate", "--candidates", str(cpath),
                     "--annotations", str(apath),
                     "--out", str(missing_dir / "cpm.csv")])
    assert code == 1
    assert not missing_dir.exists()
    capsys.readouterr()


def test_gen_data_leaves_no_temp_files(tmp_path):
    out = tmp_path / "data"
    assert cli_main(["gen-data", "--out", str(out)] + TINY) == 0
    assert not list(out.rglob("*.tmp"))


def test_worker_count_env_cap(monkeypatch):
    monkeypatch.setenv("NODULEFORGE_THREADS", "1")
    assert worker_count() == 1
    assert worker_count(5) == 1
    monkeypatch.delenv("NODULEFORGE_THREADS")
    assert worker_count(1) == 1


def test_parser_has_all_subcommands():
    parser = build_parser()
    text = parser.format_help()
    for name in ("gen-data", "train-fcn", "screen", "train-refiner",
                 "detect", "evaluate", "froc-plot"):
        assert name in text


@pytest.mark.slow
def test_tiny_pipeline_end_to_end(tmp_path, capsys):
    """Cheap version of the full pipeline; the acceptance suite runs the
    default-size one."""
    out = tmp_path / "run"
    data = out / "data"
    fast = TINY + [
        "--fcn-batch-size", "16", "--fcn-max-iters", "8",
        "--fcn-learning-rate", "0.02",
        "--refine-batch-size", "6", "--refine-max-iters", "6",
        "--screen-threshold", "0.5", "--decision-threshold", "0.0",
    ]
    assert cli_main(["gen-data", "--out", str(data)] + TINY) == 0
    assert cli_main(["train-fcn", "--data", str(data / "train"),
                     "--out", str(out / "fcn.ndf"),
                     "--trace", str(out / "fcn_trace.csv")] + fast) == 0
    trace = (out / "fcn_trace.csv").read_text().splitlines()
    assert trace[0] == "iter,loss,selected,total"
    assert len(trace) == 9
    assert cli_main(["screen", "--model", str(out / "fcn.ndf"),
                     "--data", str(data / "test"),
                     "--out", str(out / "cands.csv")] + fast) == 0
    assert cli_main(["train-refiner", "--data", str(data / "train"),
                     "--fcn", str(out / "fcn.ndf"),
                     "--out", str(out / "refiner.ndf")] + fast) == 0
    assert cli_main(["detect", "--fcn", str(out / "fcn.ndf"),
                     "--refiner", str(out / "refiner.ndf"),
                     "--data", str(data / "test"),
                     "--out", str(out / "detections.csv")] + fast) == 0
    detections = read_candidates_csv(out / "detections.csv")
    code = cli_main(["evaluate", "--candidates", str(out / "detections.csv"),
                     "--annotations", str(data / "test" / "annotations.csv"),
                     "--n-scans", "2"])
    assert code == 0
    assert "cpm" in capsys.readouterr().out
