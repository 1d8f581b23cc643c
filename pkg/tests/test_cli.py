"""End-to-end command-line behavior: file outputs and exit codes."""

import csv
import os

import numpy as np
import pytest

from evfusion.cli import main
from evfusion.io import read_aer, read_checkpoint, read_config_text, read_flo

SPEC = """\
texture_size = 96
motion_dx = 2.0
motion_dy = 0.0
num_frames = 10
frame_interval = 10000
theta = 0.25
height = 32
width = 32
substeps = 16
"""


@pytest.fixture(scope="module")
def spec_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("spec") / "scene.txt"
    p.write_text(SPEC)
    return str(p)


@pytest.fixture(scope="module")
def dataset(spec_file, tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", spec_file, str(d), "--dt", "1"]) == 0
    return str(d)


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    """A short real training run; returns the run directory."""
    out = tmp_path_factory.mktemp("train")
    code = main(["--seed", "3", "train", dataset, str(out),
                 "--epochs", "1", "--base-channels", "2", "--n-steps", "2",
                 "--crop-size", "16", "--batch-size", "4", "--lr0", "1e-4"])
    assert code == 0
    return str(out)


class TestSynth:
    def test_pair_count_dt1(self, dataset):
        with open(os.path.join(dataset, "manifest.txt")) as fh:
            lines = [l for l in fh.read().splitlines() if l.strip()]
        assert len(lines) == 9          # 10 frames -> 9 adjacent pairs
        cols = lines[0].split()
        assert len(cols) == 5 and cols[4] == "1"

    def test_pair_count_dt4(self, spec_file, tmp_path):
        assert main(["synth", spec_file, str(tmp_path), "--dt", "4"]) == 0
        with open(tmp_path / "manifest.txt") as fh:
            lines = [l for l in fh.read().splitlines() if l.strip()]
        assert len(lines) == 6          # 10 frames -> 6 stride-4 pairs
        assert lines[0].split()[4] == "4"

    def test_files_exist_and_parse(self, dataset):
        with open(os.path.join(dataset, "manifest.txt")) as fh:
            entry = fh.readline().split()
        stream = read_aer(os.path.join(dataset, entry[2]))
        assert len(stream) > 0
        assert (stream.width, stream.height) == (32, 32)
        flow = read_flo(os.path.join(dataset, entry[3]))
        assert flow.shape == (2, 32, 32)
        assert np.allclose(flow[0], 2.0) and np.allclose(flow[1], 0.0)

    def test_event_window_matches_pair(self, dataset):
        # sample k covers [k*10000, (k+1)*10000]
        s1 = read_aer(os.path.join(dataset, "events_0001_dt1.aer"))
        assert (s1.t_start, s1.t_end) == (10000, 20000)
        assert all(10000 <= e.t <= 20000 for e in s1.events)

    def test_deterministic_under_seed(self, spec_file, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["--seed", "7", "synth", spec_file, str(a)])
        main(["--seed", "7", "synth", spec_file, str(b)])
        fa = (a / "events_0000_dt1.aer").read_bytes()
        fb = (b / "events_0000_dt1.aer").read_bytes()
        assert fa == fb

    def test_config_echoed(self, dataset):
        cfg = read_config_text(os.path.join(dataset, "config.txt"))
        assert cfg["command"] == "synth"
        assert cfg["theta"] == "0.25"

    def test_nonempty_dir_gets_timestamped_subdir(self, spec_file, tmp_path):
        (tmp_path / "existing.txt").write_text("x")
        main(["synth", spec_file, str(tmp_path)])
        subs = [d for d in os.listdir(tmp_path) if d.startswith("run-")]
        assert len(subs) == 1
        assert os.path.exists(tmp_path / subs[0] / "manifest.txt")
        assert not os.path.exists(tmp_path / "manifest.txt")

    def test_force_writes_in_place(self, spec_file, tmp_path):
        (tmp_path / "existing.txt").write_text("x")
        main(["--force", "synth", spec_file, str(tmp_path)])
        assert os.path.exists(tmp_path / "manifest.txt")

    def test_bad_spec_exit_2(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("no equals sign here\n")
        assert main(["synth", str(bad), str(tmp_path / "out")]) == 2

    def test_missing_spec_exit_4(self, tmp_path):
        assert main(["synth", str(tmp_path / "nope.txt"),
                     str(tmp_path / "out")]) == 4


class TestTrain:
    def test_outputs(self, trained):
        names = os.listdir(trained)
        assert "checkpoint_final.ffnw" in names
        assert "checkpoint_final.ffnw.state.npz" in names
        assert "checkpoint_initial.ffnw" in names
        assert "config.txt" in names
        with open(os.path.join(trained, "train_log.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3           # 9 samples / batch 4 -> 3 steps
        assert float(rows[0]["loss_total"]) > 0
        assert rows[0]["aee_all"] != ""

    def test_config_echo_names_model(self, trained):
        cfg = read_config_text(os.path.join(trained, "config.txt"))
        assert cfg["variant"] == "early"
        assert cfg["base_channels"] == "2"
        assert cfg["command"] == "train"

    def test_epochs_zero(self, dataset, tmp_path):
        code = main(["train", dataset, str(tmp_path), "--epochs", "0",
                     "--base-channels", "2", "--n-steps", "2",
                     "--crop-size", "16"])
        assert code == 0
        assert os.path.exists(tmp_path / "checkpoint_final.ffnw")
        with open(tmp_path / "train_log.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 0

    def test_epochs_zero_checkpoint_equals_initial(self, dataset, tmp_path):
        main(["train", dataset, str(tmp_path), "--epochs", "0",
              "--base-channels", "2", "--n-steps", "2", "--crop-size", "16"])
        a = read_checkpoint(tmp_path / "checkpoint_initial.ffnw")
        b = read_checkpoint(tmp_path / "checkpoint_final.ffnw")
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_deterministic_under_seed(self, dataset, tmp_path):
        args = ["--seed", "5", "train", dataset, None, "--epochs", "1",
                "--base-channels", "2", "--n-steps", "2", "--crop-size", "16",
                "--batch-size", "4"]
        for sub in ("a", "b"):
            args[4] = str(tmp_path / sub)
            assert main(list(args)) == 0
        fa = (tmp_path / "a" / "checkpoint_final.ffnw").read_bytes()
        fb = (tmp_path / "b" / "checkpoint_final.ffnw").read_bytes()
        assert fa == fb

    def test_resume_matches_straight_run(self, dataset, tmp_path):
        base = ["--base-channels", "2", "--n-steps", "2", "--crop-size", "16",
                "--batch-size", "4", "--lr0", "1e-4"]
        main(["--seed", "9", "train", dataset, str(tmp_path / "full"),
              "--epochs", "2"] + base)
        main(["--seed", "9", "train", dataset, str(tmp_path / "p1"),
              "--epochs", "1"] + base)
        main(["--seed", "9", "train", dataset, str(tmp_path / "p2"),
              "--epochs", "2", "--resume",
              str(tmp_path / "p1" / "checkpoint_final.ffnw")] + base)
        want = read_checkpoint(tmp_path / "full" / "checkpoint_final.ffnw")
        got = read_checkpoint(tmp_path / "p2" / "checkpoint_final.ffnw")
        for k in want:
            assert np.allclose(want[k], got[k], atol=1e-6), k

    def test_missing_manifest_exit_4(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["train", str(empty), str(tmp_path / "out"),
                     "--epochs", "0"]) == 4

    def test_corrupt_minority_skipped(self, spec_file, tmp_path, capsys):
        d = tmp_path / "data"
        spec2 = tmp_path / "spec2.txt"
        spec2.write_text(SPEC.replace("num_frames = 10", "num_frames = 13"))
        main(["synth", str(spec2), str(d)])       # 12 samples
        (d / "events_0003_dt1.aer").write_bytes(b"JUNK")
        code = main(["train", str(d), str(tmp_path / "out"), "--epochs", "0",
                     "--base-channels", "2", "--n-steps", "2",
                     "--crop-size", "16"])
        assert code == 0
        assert "skipping corrupt sample" in capsys.readouterr().err

    def test_corrupt_majority_aborts(self, spec_file, tmp_path):
        d = tmp_path / "data"
        main(["synth", spec_file, str(d)])
        for k in range(3):
            (d / ("events_000%d_dt1.aer" % k)).write_bytes(b"JUNK")
        assert main(["train", str(d), str(tmp_path / "out"), "--epochs", "0",
                     "--base-channels", "2", "--n-steps", "2",
                     "--crop-size", "16"]) == 2


class TestEval:
    def test_csv_with_aggregate_oracle(self, trained, dataset, tmp_path):
        out = tmp_path / "eval.csv"
        ckpt = os.path.join(trained, "checkpoint_final.ffnw")
        assert main(["eval", ckpt, dataset, "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        body, agg = rows[:-1], rows[-1]
        assert len(body) == 9
        assert agg["sequence"] == "aggregate"
        mean_all = np.mean([float(r["aee_all"]) for r in body])
        assert np.isclose(float(agg["aee_all"]), mean_all, rtol=1e-4)
        ev = [float(r["aee_event"]) for r in body if r["aee_event"] != "n/a"]
        assert np.isclose(float(agg["aee_event"]), np.mean(ev), rtol=1e-4)

    def test_stdout_default(self, trained, dataset, capsys):
        ckpt = os.path.join(trained, "checkpoint_final.ffnw")
        main(["eval", ckpt, dataset])
        out = capsys.readouterr().out
        assert "aee_all" in out and "aggregate" in out

    def test_missing_checkpoint_exit_4(self, dataset, tmp_path):
        assert main(["eval", str(tmp_path / "no.ffnw"), dataset]) == 4


class TestPredict:
    def test_flo_and_png(self, trained, dataset, tmp_path):
        from PIL import Image
        ckpt = os.path.join(trained, "checkpoint_final.ffnw")
        out = tmp_path / "pred"
        assert main(["predict", ckpt, dataset, str(out), "--index", "2"]) == 0
        flow = read_flo(out / "flow.flo")
        assert flow.shape == (2, 32, 32)
        img = Image.open(out / "flow.png")
        assert img.size == (32, 32)

    def test_zero_model_white_rendering(self, trained, dataset, tmp_path):
        # a checkpoint with all-zero parameters predicts zero flow, which
        # the color wheel renders as pure white
        from PIL import Image
        zero_dir = tmp_path / "zero"
        zero_dir.mkdir()
        src = read_checkpoint(os.path.join(trained, "checkpoint_final.ffnw"))
        from evfusion.io import write_checkpoint
        write_checkpoint({k: np.zeros_like(v) for k, v in src.items()},
                         zero_dir / "z.ffnw")
        cfgsrc = read_config_text(os.path.join(trained, "config.txt"))
        from evfusion.io import write_config_text
        write_config_text(cfgsrc, zero_dir / "config.txt")
        out = tmp_path / "pred0"
        assert main(["predict", str(zero_dir / "z.ffnw"), dataset,
                     str(out)]) == 0
        assert np.all(read_flo(out / "flow.flo") == 0)
        img = np.asarray(Image.open(out / "flow.png"))
        assert np.all(img == 255)

    def test_index_out_of_range_exit_2(self, trained, dataset, tmp_path):
        ckpt = os.path.join(trained, "checkpoint_final.ffnw")
        assert main(["predict", ckpt, dataset, str(tmp_path / "x"),
                     "--index", "99"]) == 2


class TestProfile:
    def test_report_and_csv(self, trained, dataset, tmp_path, capsys):
        ckpt = os.path.join(trained, "checkpoint_final.ffnw")
        out = tmp_path / "ops.csv"
        assert main(["profile", ckpt, dataset, "--out", str(out)]) == 0
        printed = capsys.readouterr().out
        assert "ops_snn" in printed and "E_total" in printed
        text = out.read_text()
        assert "total_snn" in text and "total_ann" in text

    def test_single_sample_index(self, trained, dataset, capsys):
        ckpt = os.path.join(trained, "checkpoint_final.ffnw")
        assert main(["profile", ckpt, dataset, "--index", "0"]) == 0
        assert "E_total" in capsys.readouterr().out

    def test_deterministic(self, trained, dataset, tmp_path):
        ckpt = os.path.join(trained, "checkpoint_final.ffnw")
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["profile", ckpt, dataset, "--out", str(a)])
        main(["profile", ckpt, dataset, "--out", str(b)])
        assert a.read_text() == b.read_text()

    def test_energy_flags_rescale(self, trained, dataset, capsys):
        import re
        ckpt = os.path.join(trained, "checkpoint_final.ffnw")

        def e_total(args):
            main(["profile", ckpt, dataset, "--index", "0"] + args)
            m = re.search(r"E_total = ([0-9.e+-]+) mJ",
                          capsys.readouterr().out)
            return float(m.group(1))

        base = e_total([])
        no_ann = e_total(["--e-mac", "0"])
        no_snn = e_total(["--e-ac", "0"])
        assert np.isclose(base, no_ann + no_snn, rtol=1e-5)
        doubled = e_total(["--e-mac", "9.2e-12"])
        assert np.isclose(doubled - base, no_snn, rtol=1e-4)

    def test_index_out_of_range_exit_2(self, trained, dataset):
        ckpt = os.path.join(trained, "checkpoint_final.ffnw")
        assert main(["profile", ckpt, dataset, "--index", "99"]) == 2
