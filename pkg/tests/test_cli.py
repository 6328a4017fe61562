"""Command-line behavior: manifests, outputs, exit codes, reproducibility."""

import csv
import json

import pytest

from groupact.cli import main

TINY_CONFIG = """\
# desk-scale smoke configuration
T = 3
N = 4
D = 8
heads = 2
C = 2
blocks = 1
scene_tokens = 4
kmeans_iters = 2
epochs = 2
batch_size = 4
n_clips = 8
dropout = 0.0
lr = 0.001
decay_epochs =
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


def _run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestGen:
    def test_same_seed_twice_is_byte_identical(self, tiny_config, tmp_path,
                                               capsys):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code, stdout, _ = _run(capsys, "gen", "--config", tiny_config,
                                   "--out", str(out), "--seed", "7")
            assert code == 0
            assert "wrote 8 clips" in stdout
            outs.append(out)
        assert (outs[0] / "dataset.bin").read_bytes() == \
            (outs[1] / "dataset.bin").read_bytes()
        assert (outs[0] / "dataset.bin.json").read_text() == \
            (outs[1] / "dataset.bin.json").read_text()

    def test_different_seeds_differ(self, tiny_config, tmp_path, capsys):
        blobs = []
        for seed in ("7", "8"):
            out = tmp_path / seed
            code, _, _ = _run(capsys, "gen", "--config", tiny_config,
                              "--out", str(out), "--seed", seed)
            assert code == 0
            blobs.append((out / "dataset.bin").read_bytes())
        assert blobs[0] != blobs[1]

    def test_manifest_echoes_resolved_config(self, tiny_config, tmp_path,
                                             capsys):
        out = tmp_path / "run"
        _run(capsys, "gen", "--config", tiny_config, "--out", str(out),
             "--seed", "3")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "gen"
        assert manifest["seed"] == 3
        assert manifest["config"]["D"] == 8
        assert manifest["config"]["n_clips"] == 8

    def test_unknown_config_key_is_named(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("depth = 3\n")
        code, _, err = _run(capsys, "gen", "--config", cfg.as_posix(),
                            "--out", str(tmp_path / "x"))
        assert code == 2
        assert "depth" in err

    def test_missing_config_file_is_config_error(self, tmp_path, capsys):
        code, _, err = _run(capsys, "gen", "--config",
                            str(tmp_path / "absent.cfg"),
                            "--out", str(tmp_path / "x"))
        assert code == 2
        assert "not found" in err


class TestTrain:
    def test_outputs_and_reproducibility(self, tiny_config, tmp_path, capsys):
        logs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code, stdout, _ = _run(capsys, "train", "--config", tiny_config,
                                   "--out", str(out), "--seed", "11")
            assert code == 0
            assert "best epoch" in stdout
            assert (out / "checkpoints" / "best.ckpt").exists()
            assert (out / "training_curves.png").stat().st_size > 0
            logs.append((out / "metrics.jsonl").read_bytes())
        assert logs[0] == logs[1]

    def test_metrics_rows_are_json_per_epoch(self, tiny_config, tmp_path,
                                             capsys):
        out = tmp_path / "run"
        _run(capsys, "train", "--config", tiny_config, "--out", str(out),
             "--seed", "2")
        rows = [json.loads(line) for line in
                (out / "metrics.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [0, 1]
        for r in rows:
            assert set(r) == {"epoch", "lr", "train_loss", "val_loss",
                              "group_acc", "ind_acc"}

    def test_flag_overrides_beat_config_file(self, tiny_config, tmp_path,
                                             capsys):
        out = tmp_path / "run"
        code, _, _ = _run(capsys, "train", "--config", tiny_config,
                          "--out", str(out), "--seed", "2", "--epochs", "1")
        assert code == 0
        assert len((out / "metrics.jsonl").read_text().splitlines()) == 1

    def test_divergence_exits_5_after_manifest(self, tmp_path, capsys):
        cfg = tmp_path / "diverge.cfg"
        cfg.write_text(TINY_CONFIG + "lr = 1e200\ngrad_clip = 0\n")
        out = tmp_path / "run"
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            code, _, err = _run(capsys, "train", "--config", cfg.as_posix(),
                                "--out", str(out), "--seed", "1")
        assert code == 5
        assert err.startswith("error: training:")
        assert "\n" not in err.strip()
        # the manifest landed before the run blew up
        assert (out / "manifest.json").exists()

    def test_invalid_cluster_count_exits_2(self, tiny_config, tmp_path,
                                           capsys):
        code, _, err = _run(capsys, "train", "--config", tiny_config,
                            "--out", str(tmp_path / "x"), "--clusters", "0")
        assert code == 2
        assert err.startswith("error: config:")


class TestEval:
    @pytest.fixture()
    def trained_run(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "train"
        code, _, _ = _run(capsys, "train", "--config", tiny_config,
                          "--out", str(out), "--seed", "4")
        assert code == 0
        return out, tiny_config

    def test_eval_prints_metrics_and_writes_json(self, trained_run, tmp_path,
                                                 capsys):
        run_dir, _ = trained_run
        out = tmp_path / "eval"
        code, stdout, _ = _run(capsys, "eval", "--checkpoint",
                               str(run_dir / "checkpoints" / "best.ckpt"),
                               "--out", str(out))
        assert code == 0
        assert "group_acc=" in stdout and "ind_acc=" in stdout
        metrics = json.loads((out / "eval.json").read_text())
        assert 0.0 <= metrics["group_acc"] <= 1.0

    def test_eval_matches_training_best_row(self, trained_run, tmp_path,
                                            capsys):
        run_dir, _ = trained_run
        out = tmp_path / "eval"
        _run(capsys, "eval", "--checkpoint",
             str(run_dir / "checkpoints" / "best.ckpt"), "--out", str(out))
        metrics = json.loads((out / "eval.json").read_text())
        rows = [json.loads(line) for line in
                (run_dir / "metrics.jsonl").read_text().splitlines()]
        assert metrics["group_acc"] == max(r["group_acc"] for r in rows)

    def test_conflicting_overrides_exit_4(self, trained_run, tmp_path,
                                          capsys):
        run_dir, _ = trained_run
        code, _, err = _run(capsys, "eval", "--checkpoint",
                            str(run_dir / "checkpoints" / "best.ckpt"),
                            "--out", str(tmp_path / "eval"),
                            "--clusters", "4")
        assert code == 4
        assert err.startswith("error: checkpoint:")

    def test_missing_checkpoint_exits_6(self, tmp_path, capsys):
        code, _, err = _run(capsys, "eval", "--checkpoint",
                            str(tmp_path / "absent.ckpt"),
                            "--out", str(tmp_path / "eval"))
        assert code == 6
        assert err.startswith("error: io:")


class TestGradcheck:
    def test_default_shape_passes_and_reports(self, tmp_path, capsys):
        out = tmp_path / "gc"
        code, stdout, _ = _run(capsys, "gradcheck", "--out", str(out),
                               "--seed", "1", "--samples", "1")
        assert code == 0
        assert "PASS" in stdout
        assert "max_rel_err=" in stdout
        payload = json.loads((out / "gradcheck.json").read_text())
        assert payload["verdict"] == "PASS"
        assert payload["max_rel_err"] <= payload["tol"]

    def test_impossible_tolerance_fails_with_5(self, tmp_path, capsys):
        out = tmp_path / "gc"
        code, stdout, _ = _run(capsys, "gradcheck", "--out", str(out),
                               "--seed", "1", "--samples", "1",
                               "--tol", "1e-18")
        assert code == 5
        assert "FAIL" in stdout


class TestAblate:
    def test_blocks_plan_writes_csv_and_chart(self, tiny_config, tmp_path,
                                              capsys):
        out = tmp_path / "abl"
        code, stdout, _ = _run(capsys, "ablate", "--config", tiny_config,
                               "--out", str(out), "--seed", "3",
                               "--plan", "blocks", "--epochs", "1")
        assert code == 0
        lines = (out / "ablation.csv").read_text().splitlines()
        assert lines[0] == "arm,group_acc,ind_acc,seed"
        assert [ln.split(",")[0] for ln in lines[1:]] == \
            ["blocks=0", "blocks=1", "blocks=2"]
        assert (out / "ablation.png").stat().st_size > 0
        assert "blocks=1" in stdout

    def test_toggles_plan_trains_every_arm(self, tiny_config, tmp_path,
                                           capsys):
        # the off arms leave the centroid attention out of the graph and
        # must still train (regression: missing grads crashed the optimizer)
        out = tmp_path / "abl"
        code, _, _ = _run(capsys, "ablate", "--config", tiny_config,
                          "--out", str(out), "--seed", "3",
                          "--plan", "toggles", "--epochs", "1")
        assert code == 0
        with (out / "ablation.csv").open(newline="") as fh:
            rows = list(csv.reader(fh))
        assert [row[0] for row in rows[1:]] == \
            ["intra=off,inter=off", "intra=on,inter=off",
             "intra=off,inter=on", "intra=on,inter=on"]
        assert all(len(row) == 4 for row in rows)

    def test_unknown_plan_rejected_by_parser(self, tiny_config, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["ablate", "--config", tiny_config,
                  "--out", str(tmp_path / "x"), "--plan", "nope"])
        assert exc.value.code == 2


class TestExportClusters:
    def test_export_writes_labels_and_figure(self, tiny_config, tmp_path,
                                             capsys):
        train_out = tmp_path / "train"
        _run(capsys, "train", "--config", tiny_config, "--out",
             str(train_out), "--seed", "9")
        out = tmp_path / "clusters"
        code, _, _ = _run(capsys, "export-clusters", "--checkpoint",
                          str(train_out / "checkpoints" / "best.ckpt"),
                          "--out", str(out), "--count", "3")
        assert code == 0
        payload = json.loads((out / "clusters.json").read_text())
        assert payload["clusters"] == 2
        assert len(payload["clips"]) == 3
        labels = payload["clips"][0]["labels"][0]
        assert len(labels) == 3  # frames
        assert all(lab in (0, 1) for frame in labels for lab in frame)
        assert (out / "clusters.png").stat().st_size > 0


class TestParser:
    def test_help_enumerates_flags(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--help"])
        assert exc.value.code == 0
        stdout = capsys.readouterr().out
        for flag in ("--config", "--out", "--seed", "--workers", "--epochs",
                     "--clusters", "--blocks", "--variant", "--no-grg",
                     "--intra", "--inter"):
            assert flag in stdout

    def test_unknown_flag_is_an_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--out", "x", "--turbo"])
        assert exc.value.code == 2

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
