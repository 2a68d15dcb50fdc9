import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from darc.errors import FormatError, LengthError, ValidationError
from darc.store import (
    MAGIC,
    CovMode,
    EmbeddingDataset,
    View,
    compute_class_stats,
    load_dataset,
    partition_by_frequency,
    save_dataset,
)
from darc.synth import oracle_stats

from conftest import make_dataset, random_dataset


def assert_datasets_equal(a, b):
    assert a.embeddings.tobytes() == b.embeddings.tobytes()
    assert np.array_equal(a.labels, b.labels)
    assert a.class_names == b.class_names
    assert a.view == b.view
    assert a.meta == b.meta


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path, rng):
        dataset = random_dataset(rng, n=37, dim=5, n_classes=4, view=View.AUGMENTED)
        dataset.meta.update({"modality": "base", "split": "train"})
        path = tmp_path / "d.darc1"
        save_dataset(dataset, path)
        assert_datasets_equal(load_dataset(path), dataset)

    def test_save_twice_byte_identical(self, tmp_path, rng):
        dataset = random_dataset(rng, n=12, dim=3, n_classes=2)
        p1, p2 = tmp_path / "a.darc1", tmp_path / "b.darc1"
        save_dataset(dataset, p1)
        save_dataset(dataset, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_meta_sidecar_absent_is_legal(self, tmp_path, rng):
        dataset = random_dataset(rng, n=4, dim=2, n_classes=2)
        path = tmp_path / "d.darc1"
        save_dataset(dataset, path)
        assert not (tmp_path / "d.darc1.meta.json").exists()
        assert load_dataset(path).meta == {}

    def test_nan_rejected_before_write(self, tmp_path):
        dataset = make_dataset([[1.0, 2.0]], [0])
        dataset.embeddings = np.array([[np.nan, 2.0]], dtype=np.float32)
        path = tmp_path / "d.darc1"
        with pytest.raises(ValidationError):
            save_dataset(dataset, path)
        assert not path.exists()

    @settings(max_examples=40, deadline=None)
    @given(
        dim=st.integers(1, 6),
        n_classes=st.integers(1, 4),
        rows=st.data(),
    )
    def test_round_trip_property(self, dim, n_classes, rows):
        n = rows.draw(st.integers(0, 16))
        features = rows.draw(
            hnp.arrays(
                np.float32,
                (n, dim),
                elements=st.floats(
                    -1e6, 1e6, width=32, allow_nan=False, allow_subnormal=False
                ),
            )
        )
        labels = rows.draw(
            hnp.arrays(np.int64, (n,), elements=st.integers(0, n_classes - 1))
        )
        dataset = make_dataset(features, labels, n_classes=n_classes)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "prop.darc1"
            save_dataset(dataset, path)
            assert_datasets_equal(load_dataset(path), dataset)


class TestFormatErrors:
    def _valid_bytes(self, tmp_path, rng):
        dataset = random_dataset(rng, n=2, dim=3, n_classes=2)
        path = tmp_path / "ok.darc1"
        save_dataset(dataset, path)
        return path.read_bytes()

    def test_bad_magic(self, tmp_path, rng):
        blob = self._valid_bytes(tmp_path, rng)
        bad = tmp_path / "bad.darc1"
        bad.write_bytes(b"XXXX" + blob[4:])
        with pytest.raises(FormatError):
            load_dataset(bad)

    def test_bad_version(self, tmp_path, rng):
        blob = self._valid_bytes(tmp_path, rng)
        bad = tmp_path / "bad.darc1"
        bad.write_bytes(blob[:4] + struct.pack("<I", 9) + blob[8:])
        with pytest.raises(FormatError):
            load_dataset(bad)

    def test_truncated_payload(self, tmp_path, rng):
        # n=2, dim=3 declared but only 5 floats of embedding payload
        blob = self._valid_bytes(tmp_path, rng)
        bad = tmp_path / "bad.darc1"
        bad.write_bytes(blob[:-4])
        with pytest.raises(LengthError):
            load_dataset(bad)

    def test_label_out_of_range_rejected(self, tmp_path, rng):
        blob = bytearray(self._valid_bytes(tmp_path, rng))
        # labels sit right before the 2*3 f32 embedding payload
        label_offset = len(blob) - 2 * 3 * 4 - 2 * 4
        struct.pack_into("<I", blob, label_offset, 77)
        bad = tmp_path / "bad.darc1"
        bad.write_bytes(bytes(blob))
        with pytest.raises(ValidationError):
            load_dataset(bad)

    def test_nonfinite_payload_rejected(self, tmp_path, rng):
        blob = bytearray(self._valid_bytes(tmp_path, rng))
        struct.pack_into("<f", blob, len(blob) - 4, float("inf"))
        bad = tmp_path / "bad.darc1"
        bad.write_bytes(bytes(blob))
        with pytest.raises(ValidationError):
            load_dataset(bad)


class TestClassStats:
    def test_two_point_class(self):
        dataset = make_dataset([[1.0, 3.0], [3.0, 5.0]], [0, 0])
        (stats,) = compute_class_stats(dataset)
        assert np.allclose(stats.mean, [2.0, 4.0])
        assert np.allclose(stats.cov, [2.0, 2.0])
        assert stats.cov_defined
        assert stats.count == 2

    def test_single_sample_class(self):
        dataset = make_dataset([[7.0, 7.0]], [0])
        (stats,) = compute_class_stats(dataset)
        assert np.allclose(stats.mean, [7.0, 7.0])
        assert not stats.cov_defined
        assert np.all(stats.cov == 0.0)

    def test_matches_two_pass_oracle(self, rng):
        # 5 classes x 50 samples; expected values from the independent oracle
        dataset = random_dataset(rng, n=250, dim=8, n_classes=5)
        expected = oracle_stats(dataset.embeddings, dataset.labels)
        for stats in compute_class_stats(dataset):
            mean, var = expected[stats.class_id]
            np.testing.assert_allclose(stats.mean, mean, rtol=1e-6)
            np.testing.assert_allclose(stats.cov, var, rtol=1e-6, atol=1e-12)

    def test_full_cov_matches_oracle(self, rng):
        dataset = random_dataset(rng, n=60, dim=4, n_classes=3)
        expected = oracle_stats(dataset.embeddings, dataset.labels, full_cov=True)
        for stats in compute_class_stats(dataset, CovMode.FULL):
            mean, cov = expected[stats.class_id]
            assert stats.cov.shape == (4, 4)
            np.testing.assert_allclose(stats.cov, cov, rtol=1e-6, atol=1e-12)

    def test_skips_absent_classes(self, rng):
        dataset = make_dataset([[0.0], [1.0]], [0, 2], n_classes=4)
        ids = [s.class_id for s in compute_class_stats(dataset)]
        assert ids == [0, 2]

    def test_permutation_invariance(self, rng):
        dataset = random_dataset(rng, n=100, dim=6, n_classes=3)
        perm = rng.permutation(dataset.n)
        shuffled = make_dataset(
            dataset.embeddings[perm], dataset.labels[perm], n_classes=3
        )
        for a, b in zip(compute_class_stats(dataset), compute_class_stats(shuffled)):
            assert a.class_id == b.class_id
            np.testing.assert_allclose(a.mean, b.mean, rtol=1e-6)
            np.testing.assert_allclose(a.cov, b.cov, rtol=1e-6)

    def test_thread_count_invariance(self, rng):
        dataset = random_dataset(rng, n=200, dim=5, n_classes=4)
        serial = compute_class_stats(dataset, threads=1)
        parallel = compute_class_stats(dataset, threads=8)
        for a, b in zip(serial, parallel):
            assert np.array_equal(a.mean, b.mean)
            assert np.array_equal(a.cov, b.cov)


class TestPartition:
    def test_counts_500_20_eta_400(self):
        features = np.zeros((520, 2), dtype=np.float32)
        labels = np.array([0] * 500 + [1] * 20)
        dataset = make_dataset(features, labels)
        partition = partition_by_frequency(dataset, 400)
        assert partition.common_ids == {0}
        assert partition.rare_ids == {1}

    def test_eta_zero_all_common(self, rng):
        dataset = random_dataset(rng, n=30, dim=2, n_classes=3)
        partition = partition_by_frequency(dataset, 0)
        assert partition.rare_ids == frozenset()
        assert partition.common_ids == set(np.unique(dataset.labels))

    def test_boundary_is_strict(self):
        dataset = make_dataset(np.zeros((400, 1), dtype=np.float32), [0] * 400)
        partition = partition_by_frequency(dataset, 400)
        assert partition.common_ids == frozenset()
        assert partition.rare_ids == {0}

    def test_totality(self, rng):
        dataset = random_dataset(rng, n=64, dim=2, n_classes=5)
        partition = partition_by_frequency(dataset, 10)
        present = set(int(c) for c in np.unique(dataset.labels))
        assert partition.common_ids | partition.rare_ids == present
        assert not partition.common_ids & partition.rare_ids


class TestOracles:
    def test_oracle_stats_two_point(self):
        out = oracle_stats(np.array([[1.0, 3.0], [3.0, 5.0]]), np.array([0, 0]))
        mean, var = out[0]
        assert np.allclose(mean, [2.0, 4.0])
        assert np.allclose(var, [2.0, 2.0])
