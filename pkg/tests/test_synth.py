"""Synthetic clip generator: determinism, label structure, oracles, export."""

import numpy as np
import pytest

from groupact import synth
from groupact.config import ConfigError, GeneratorConfig
from groupact.synth import DatasetError


@pytest.fixture(scope="module")
def default_cfg():
    return GeneratorConfig()


@pytest.fixture(scope="module")
def pool(default_cfg):
    """A shared clip pool so the slower statistics reuse one generation."""
    return synth.dataset(default_cfg, 600)


class TestDeterminism:
    def test_same_seed_index_bit_identical(self, default_cfg):
        a = synth.generate_clip(default_cfg, 3)
        b = synth.generate_clip(default_cfg, 3)
        assert np.array_equal(a.individuals, b.individuals)
        assert np.array_equal(a.scene, b.scene)
        assert np.array_equal(a.boxes, b.boxes)
        assert a.y_g == b.y_g and np.array_equal(a.y_a, b.y_a) and a.seed == b.seed

    def test_different_indices_differ(self, default_cfg):
        a = synth.generate_clip(default_cfg, 0)
        b = synth.generate_clip(default_cfg, 1)
        assert not np.array_equal(a.individuals, b.individuals)

    def test_different_root_seeds_differ(self):
        a = synth.generate_clip(GeneratorConfig(seed=1), 0)
        b = synth.generate_clip(GeneratorConfig(seed=2), 0)
        assert not np.array_equal(a.individuals, b.individuals)


class TestShapesAndRanges:
    def test_field_shapes(self, default_cfg, pool):
        s = pool[0]
        cfg = default_cfg
        assert s.individuals.shape == (cfg.T, cfg.N, cfg.D_in)
        assert s.scene.shape == (cfg.T, synth.scene_channels(cfg),
                                 synth.SCENE_SIDE, synth.SCENE_SIDE)
        assert s.boxes.shape == (cfg.T, cfg.N, 4)
        assert s.y_a.shape == (cfg.N,)

    def test_positions_within_unit_square(self, pool):
        for s in pool[:100]:
            assert s.boxes[:, :, :2].min() >= 0.0
            assert s.boxes[:, :, :2].max() <= 1.0

    def test_labels_in_range(self, default_cfg, pool):
        for s in pool:
            assert 0 <= s.y_g < default_cfg.G_cls
            assert s.y_a.min() >= 0 and s.y_a.max() < default_cfg.A_cls

    def test_feature_width_independent_of_model_width(self):
        cfg = GeneratorConfig(D_in=11)
        s = synth.generate_clip(cfg, 0)
        assert s.individuals.shape[-1] == 11


class TestConfigValidation:
    def test_too_few_frames(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(T=1).validate()

    def test_too_few_agents(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(N=1).validate()

    def test_interaction_needs_even_group_classes(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(G_cls=7).validate()

    def test_narrow_features_rejected(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(D_in=4).validate()

    def test_unknown_family_rejected(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(task_family="chaos").validate()


class TestDatasetStream:
    def test_split_sizes_even(self, pool):
        train, val = synth.train_val_split(pool[:100])
        assert len(train) == 50 and len(val) == 50

    def test_split_by_index_parity(self, pool):
        train, val = synth.train_val_split(pool[:10])
        assert train[0].seed == pool[0].seed
        assert val[0].seed == pool[1].seed

    def test_minimum_size(self, default_cfg):
        with pytest.raises(ConfigError):
            synth.dataset(default_cfg, 1)

    def test_label_marginals_uniform_chi_square(self, default_cfg):
        samples = synth.dataset(default_cfg, 2000)
        counts = np.bincount([s.y_g for s in samples], minlength=default_cfg.G_cls)
        expected = 2000 / default_cfg.G_cls
        chi2 = ((counts - expected) ** 2 / expected).sum()
        # 0.5% critical value for 7 degrees of freedom
        assert chi2 < 20.09, f"chi2={chi2}, counts={counts}"


class TestLabelSemantics:
    def test_noiseless_clips_are_bayes_recoverable(self):
        cfg = GeneratorConfig(noise_sigma=0.0)
        table = synth.archetype_table(cfg)
        for i in range(100):
            s = synth.generate_clip(cfg, i)
            assert synth.trajectory_oracle(s, cfg, table) == s.y_g

    def test_majority_label_is_the_mode(self):
        cfg = GeneratorConfig(task_family="majority")
        for i in range(50):
            s = synth.generate_clip(cfg, i)
            counts = np.bincount(s.y_a, minlength=cfg.A_cls)
            assert s.y_g == int(np.argmax(counts))

    def test_majority_unanimous_clip_gets_that_label(self):
        cfg = GeneratorConfig(task_family="majority", N=3, A_cls=2, G_cls=8)
        found = False
        for i in range(60):
            s = synth.generate_clip(cfg, i)
            if len(set(s.y_a.tolist())) == 1:
                assert s.y_g == int(s.y_a[0])
                found = True
        assert found, "no unanimous clip in the scanned range"

    def test_interaction_label_decomposes_into_pattern_and_half(self, default_cfg, pool):
        halves = [s.y_g % 2 for s in pool]
        assert 0.4 < np.mean(halves) < 0.6


class TestOracles:
    """Thresholds frozen from the pre-build calibration run."""

    def test_trajectory_oracle_on_default_config(self, default_cfg, pool):
        table = synth.archetype_table(default_cfg)
        hits = [synth.trajectory_oracle(s, default_cfg, table) == s.y_g for s in pool]
        assert np.mean(hits) >= 0.99

    def test_pooled_feature_probe_stays_weak(self, default_cfg, pool):
        sklearn = pytest.importorskip("sklearn.linear_model")
        X = np.stack([s.individuals.mean(axis=(0, 1)) for s in pool])
        y = np.array([s.y_g for s in pool])
        clf = sklearn.LogisticRegression(max_iter=2000).fit(X[:400], y[:400])
        assert clf.score(X[400:], y[400:]) <= 0.60

    def test_frame_shuffle_destroys_temporal_half(self, default_cfg, pool):
        table = synth.archetype_table(default_cfg)
        rng = np.random.default_rng(123)
        hits = []
        for s in pool[:200]:
            shuffled = synth.shuffle_frames(s, rng)
            hits.append(synth.trajectory_oracle(shuffled, default_cfg, table) == s.y_g)
        assert np.mean(hits) <= 0.75

    def test_archetype_decode_recovers_actions(self, default_cfg, pool):
        table = synth.archetype_table(default_cfg)
        accs = [np.mean(synth.decode_archetypes(s, default_cfg, table) == s.y_a)
                for s in pool[:100]]
        assert np.mean(accs) >= 0.99

    def test_majority_oracle(self):
        cfg = GeneratorConfig(task_family="majority")
        table = synth.archetype_table(cfg)
        hits = [synth.trajectory_oracle(synth.generate_clip(cfg, i), cfg, table)
                == synth.generate_clip(cfg, i).y_g for i in range(100)]
        assert np.mean(hits) >= 0.99


class TestBinaryFormat:
    def test_round_trip(self, default_cfg, pool, tmp_path):
        path = tmp_path / "clips.bin"
        synth.write_dataset(path, default_cfg, pool[:20])
        cfg2, back = synth.read_dataset(path)
        assert cfg2 == default_cfg
        assert len(back) == 20
        for a, b in zip(pool[:20], back):
            assert np.allclose(a.individuals, b.individuals, atol=1e-6)
            assert np.allclose(a.scene, b.scene, atol=1e-5)
            assert np.allclose(a.boxes, b.boxes, atol=1e-6)
            assert a.y_g == b.y_g
            assert np.array_equal(a.y_a, b.y_a)
            assert a.seed == b.seed

    def test_rewrite_is_byte_identical(self, default_cfg, pool, tmp_path):
        p1, s1 = synth.write_dataset(tmp_path / "a.bin", default_cfg, pool[:10])
        p2, s2 = synth.write_dataset(tmp_path / "b.bin", default_cfg, pool[:10])
        assert p1.read_bytes() == p2.read_bytes()
        assert s1.read_bytes() == s2.read_bytes()

    def test_header_magic(self, default_cfg, pool, tmp_path):
        path, _ = synth.write_dataset(tmp_path / "c.bin", default_cfg, pool[:2])
        assert path.read_bytes()[:4] == b"CSTT"

    def test_bad_magic_rejected(self, default_cfg, pool, tmp_path):
        path, _ = synth.write_dataset(tmp_path / "d.bin", default_cfg, pool[:2])
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(DatasetError):
            synth.read_dataset(path)

    def test_truncation_rejected(self, default_cfg, pool, tmp_path):
        path, _ = synth.write_dataset(tmp_path / "e.bin", default_cfg, pool[:2])
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 7])
        with pytest.raises(DatasetError):
            synth.read_dataset(path)

    def test_missing_sidecar_rejected(self, default_cfg, pool, tmp_path):
        path, sidecar = synth.write_dataset(tmp_path / "f.bin", default_cfg, pool[:2])
        sidecar.unlink()
        with pytest.raises(DatasetError):
            synth.read_dataset(path)
