"""Figure rendering: files land where asked and are real PNGs."""

import numpy as np

from groupact import report

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _history(n):
    return [{"epoch": e, "lr": 1e-3, "train_loss": 2.0 / (e + 1),
             "val_loss": 2.2 / (e + 1), "group_acc": e / n,
             "ind_acc": min(1.0, 0.5 + e / n)} for e in range(n)]


class TestTrainingCurves:
    def test_writes_png(self, tmp_path):
        path = report.training_curves(_history(5), tmp_path / "curves.png")
        data = path.read_bytes()
        assert data[:8] == PNG_MAGIC
        assert len(data) > 1000

    def test_single_epoch_history(self, tmp_path):
        path = report.training_curves(_history(1), tmp_path / "one.png")
        assert path.read_bytes()[:8] == PNG_MAGIC


class TestAblationChart:
    def test_writes_png(self, tmp_path):
        rows = [{"arm": f"variant={v}", "group_acc": 0.5 + 0.05 * i,
                 "ind_acc": 0.9, "seed": 0}
                for i, v in enumerate(["baseline", "spatial", "ours"])]
        path = report.ablation_chart(rows, tmp_path / "ablation.png")
        assert path.read_bytes()[:8] == PNG_MAGIC


class TestClusterScatter:
    def test_writes_png(self, tmp_path):
        rng = np.random.default_rng(0)
        boxes = np.concatenate([rng.uniform(0.1, 0.9, size=(4, 6, 2)),
                                np.full((4, 6, 2), 0.05)], axis=-1)
        labels = rng.integers(0, 2, size=(4, 6))
        path = report.cluster_scatter(boxes, labels, tmp_path / "scatter.png")
        assert path.read_bytes()[:8] == PNG_MAGIC

    def test_caps_frame_count(self, tmp_path):
        rng = np.random.default_rng(1)
        boxes = np.concatenate([rng.uniform(0.1, 0.9, size=(9, 5, 2)),
                                np.full((9, 5, 2), 0.05)], axis=-1)
        labels = rng.integers(0, 3, size=(9, 5))
        path = report.cluster_scatter(boxes, labels, tmp_path / "many.png",
                                      max_frames=2)
        assert path.read_bytes()[:8] == PNG_MAGIC
