import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltnseg.constraints import ConstraintParams, connectedness_hard, volume_similarity_hard
from ltnseg.data import (DATA_MAGIC, DatasetFormatError, LabeledVolume, PhantomConfig, generate_dataset,
                         generate_sample, kfold_split, read_dataset, stack_samples, subsample_fraction,
                         write_dataset)


@pytest.fixture(scope="module")
def samples():
    return generate_dataset(24, PhantomConfig(), seed=7)


class TestGenerator:
    def test_deterministic(self):
        a = generate_sample(PhantomConfig(), seed=7, sample_id=3)
        b = generate_sample(PhantomConfig(), seed=7, sample_id=3)
        assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)

    def test_seed_changes_output(self):
        a = generate_sample(PhantomConfig(), seed=1, sample_id=0)
        b = generate_sample(PhantomConfig(), seed=2, sample_id=0)
        assert not np.array_equal(a.labels, b.labels)

    def test_shapes_and_values(self, samples):
        for s in samples:
            assert s.image.shape == s.labels.shape == (32, 32)
            assert set(np.unique(s.labels)) == {0, 1, 2}
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0

    def test_lobes_touch(self, samples):
        for s in samples:
            a, b = np.argwhere(s.labels == 1), np.argwhere(s.labels == 2)
            d = np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1))
            assert d.min() == 1.0  # 4-adjacent somewhere

    def test_ground_truth_profile_on_small_set(self, samples):
        params = ConstraintParams()
        conn = [connectedness_hard(s.labels, params) for s in samples]
        assert min(conn) > 0.95

    def test_volume_band(self, samples):
        cfg = PhantomConfig()
        params = ConstraintParams()
        for s in samples:
            n1, n2 = int((s.labels == 1).sum()), int((s.labels == 2).sum())
            assert cfg.ratio_band[0] <= n1 / n2 <= cfg.ratio_band[1]
            assert abs(n1 - n2) <= params.resolve_epsilon(s.labels.size)
            assert volume_similarity_hard(s.labels, params) == 1.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PhantomConfig(ratio_band=(1.1, 1.3))
        with pytest.raises(ValueError):
            PhantomConfig(size=(12, 12))

    def test_labeled_volume_checks(self):
        with pytest.raises(ValueError):
            LabeledVolume(np.zeros((2, 2)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            LabeledVolume(np.zeros((2, 2)), np.full((2, 2), 3))


class TestDatasetFile:
    def test_roundtrip(self, samples, tmp_path):
        path = tmp_path / "d.slsg"
        write_dataset(samples, path)
        back = read_dataset(path)
        assert len(back) == len(samples)
        for a, b in zip(samples, back):
            assert a.sample_id == b.sample_id
            assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)

    def test_layout(self, samples, tmp_path):
        path = tmp_path / "d.slsg"
        write_dataset(samples[:2], path)
        raw = path.read_bytes()
        assert raw[:8] == DATA_MAGIC
        assert struct.unpack_from("<IQ", raw, 8) == (1, 2)
        sid, rank = struct.unpack_from("<QB", raw, 20)
        assert (sid, rank) == (0, 2)
        assert struct.unpack_from("<2I", raw, 29) == (32, 32)
        per_sample = 9 + 8 + 32 * 32 * 9
        assert len(raw) == 20 + 2 * per_sample

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x"
        path.write_bytes(b"XXXXXXXX" + bytes(12))
        with pytest.raises(DatasetFormatError) as err:
            read_dataset(path)
        assert err.value.offset == 0

    def test_truncated(self, samples, tmp_path):
        path = tmp_path / "d.slsg"
        write_dataset(samples[:1], path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(DatasetFormatError, match="expected 1024 bytes, found 1019"):
            read_dataset(path)

    def test_trailing_bytes(self, samples, tmp_path):
        path = tmp_path / "d.slsg"
        write_dataset(samples[:1], path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(DatasetFormatError, match="trailing"):
            read_dataset(path)

    def test_reading_does_not_modify_file(self, samples, tmp_path):
        path = tmp_path / "d.slsg"
        write_dataset(samples[:3], path)
        before = path.read_bytes()
        read_dataset(path)
        assert path.read_bytes() == before

    def test_stack(self, samples):
        images, labels, ids = stack_samples(samples, [2, 0])
        assert images.shape == (2, 32, 32) and labels.dtype == np.int64
        assert ids.tolist() == [2, 0]


class TestSplits:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(5, 300), st.integers(2, 5), st.integers(0, 2 ** 16))
    def test_partition(self, n, k, seed):
        plan = kfold_split(n, k, seed)
        every = np.sort(np.concatenate(plan.folds))
        assert every.tolist() == list(range(n))
        sizes = [len(f) for f in plan.folds]
        assert max(sizes) - min(sizes) <= 1
        for i in range(k):
            assert not set(plan.val_ids(i)) & set(plan.train_ids(i))

    def test_split_deterministic(self):
        assert [f.tolist() for f in kfold_split(50, 5, 3).folds] == [f.tolist() for f in kfold_split(50, 5, 3).folds]

    def test_bad_k(self):
        with pytest.raises(ValueError):
            kfold_split(3, 5)

    def test_fraction_sizes(self):
        ids = np.arange(160)
        assert len(subsample_fraction(ids, 0.05)) == 8
        assert len(subsample_fraction(ids, 0.25)) == 40
        assert subsample_fraction(ids, 1.0).tolist() == ids.tolist()
        assert len(subsample_fraction(np.arange(3), 0.01)) == 1

    def test_smaller_fraction_is_nested_subset(self):
        ids = np.arange(100, 260)
        small = set(subsample_fraction(ids, 0.05, 4))
        big = set(subsample_fraction(ids, 0.25, 4))
        assert small <= big <= set(ids)

    @pytest.mark.parametrize("fraction", [0.0, 1.5])
    def test_fraction_range(self, fraction):
        with pytest.raises(ValueError):
            subsample_fraction(np.arange(10), fraction)
