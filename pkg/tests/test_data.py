"""Dataset plumbing: IDX parsing, encodings, corruptions, episode and mask
samplers. Everything must be a pure function of (inputs, seed)."""

import gzip
import struct

import numpy as np
import pytest

from hpsnn.data import (FeatureSet, ImageSet, apply_permutation,
                        bernoulli_encode, crop_center, load_idx, load_mnist,
                        make_permutation_tasks, salt_pepper, sample_episode,
                        sequential_rows, sparse_gp_mask, synthetic_fewshot)
from hpsnn.errors import DataError, DimensionError


def write_idx_images(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, h, w = pixels.shape
    path.write_bytes(struct.pack(">IIII", 0x803, n, h, w) + pixels.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    path.write_bytes(struct.pack(">II", 0x801, labels.size) + labels.tobytes())


class TestLoadIdx:
    def test_hand_built_fixture(self, tmp_path):
        p = tmp_path / "img.idx"
        write_idx_images(p, np.array([[[0, 255], [128, 64]]]))
        out = load_idx(p)
        assert out.shape == (1, 2, 2)
        assert np.allclose(out[0], [[0.0, 1.0], [128 / 255, 64 / 255]])

    def test_gzip_transparent(self, tmp_path):
        raw = struct.pack(">II", 0x801, 3) + bytes([7, 1, 9])
        p = tmp_path / "labels.idx.gz"
        p.write_bytes(gzip.compress(raw))
        assert load_idx(p).tolist() == [7, 1, 9]

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "bad.idx"
        p.write_bytes(struct.pack(">I", 0xDEADBEEF))
        with pytest.raises(DataError):
            load_idx(p)

    def test_empty_file_truncation(self, tmp_path):
        p = tmp_path / "empty.idx"
        p.write_bytes(b"")
        with pytest.raises(DataError):
            load_idx(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "short.idx"
        p.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + b"\x00" * 3)
        with pytest.raises(DataError):
            load_idx(p)

    def test_trailing_garbage(self, tmp_path):
        p = tmp_path / "extra.idx"
        p.write_bytes(struct.pack(">II", 0x801, 1) + b"\x05\x00")
        with pytest.raises(DataError):
            load_idx(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_idx(tmp_path / "nope.idx")

    def test_label_container_in_image_slot(self, tmp_path):
        write_idx_labels(tmp_path / "train-images-idx3-ubyte", [1, 2])
        write_idx_labels(tmp_path / "train-labels-idx1-ubyte", [1, 2])
        with pytest.raises(DataError):
            load_mnist(tmp_path, "train")

    def test_vendored_mnist_loads(self, mnist_dir):
        test = load_mnist(mnist_dir, "test")
        assert len(test) == 10000
        assert test.images.shape == (10000, 28, 28)
        assert test.images.min() >= 0.0 and test.images.max() <= 1.0
        assert test.n_classes == 10


class TestBernoulliEncode:
    def test_extremes_never_and_always(self):
        img = np.array([0.0, 1.0])
        spikes = bernoulli_encode(img, 50, 0)
        assert np.all(spikes[:, 0] == 0.0)
        assert np.all(spikes[:, 1] == 1.0)

    def test_empirical_rate(self):
        spikes = bernoulli_encode(np.array([0.5]), 10000, 1)
        assert spikes.mean() == pytest.approx(0.5, abs=0.02)

    def test_seed_determinism(self):
        img = np.linspace(0, 1, 20)
        a = bernoulli_encode(img, 16, 99)
        b = bernoulli_encode(img, 16, 99)
        assert np.array_equal(a, b)

    def test_out_of_range_pixel_rejected(self):
        with pytest.raises(DataError):
            bernoulli_encode(np.array([1.5]), 4, 0)


class TestSequentialRows:
    def test_constant_image_all_rows_equal(self):
        img = np.full((28, 28), 0.25)
        seq = sequential_rows(img)
        assert seq.shape == (28, 28)
        assert np.allclose(seq, 0.25)

    def test_single_bright_pixel(self):
        img = np.zeros((28, 28))
        img[5, 9] = 1.0
        seq = sequential_rows(img)
        assert seq[5, 9] == 1.0
        assert seq.sum() == 1.0

    def test_roundtrip_reconstruction(self):
        rng = np.random.default_rng(0)
        img = rng.random((28, 28))
        assert np.array_equal(np.stack(list(sequential_rows(img))), img)

    def test_batch_axis_moves_to_steps(self):
        rng = np.random.default_rng(1)
        imgs = rng.random((5, 28, 28))
        seq = sequential_rows(imgs)
        assert seq.shape == (28, 5, 28)
        assert np.array_equal(seq[3, 2], imgs[2, 3])

    def test_wrong_shape(self):
        with pytest.raises(DimensionError):
            sequential_rows(np.zeros((10, 10)))


class TestCropCenter:
    def test_zero_intensity_is_identity(self):
        rng = np.random.default_rng(0)
        img = rng.random((28, 28))
        assert np.array_equal(crop_center(img, 0), img)

    def test_full_intensity_blanks_everything(self):
        img = np.ones((28, 28))
        assert np.all(crop_center(img, 14) == 0.0)

    def test_mid_intensity_counting_oracle(self):
        img = np.ones((28, 28))
        out = crop_center(img, 7)
        assert (out == 0.0).sum() == 196
        assert np.all(out[7:21, 7:21] == 0.0)
        assert np.all(out[:7, :] == 1.0)

    def test_out_of_range(self):
        with pytest.raises(DataError):
            crop_center(np.ones((28, 28)), 15)

    def test_shape_and_range_preserved(self):
        rng = np.random.default_rng(1)
        img = rng.random((3, 28, 28))
        out = crop_center(img, 5)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestSaltPepper:
    def test_zero_level_is_identity(self):
        rng = np.random.default_rng(0)
        img = rng.random((28, 28))
        assert np.array_equal(salt_pepper(img, 0, 1), img)

    def test_full_level_touches_exact_count(self):
        img = np.full((28, 28), 0.5)  # 0.5 never equals the written 0/1
        out = salt_pepper(img, 14, 7)
        assert (out != img).sum() == round(0.28 * 784)
        assert (out != img).sum() == 220

    def test_written_values_are_binary(self):
        img = np.full((28, 28), 0.5)
        out = salt_pepper(img, 8, 3)
        changed = out[out != img]
        assert set(np.unique(changed)) <= {0.0, 1.0}

    def test_seed_determinism(self):
        img = np.full((28, 28), 0.5)
        assert np.array_equal(salt_pepper(img, 6, 11), salt_pepper(img, 6, 11))

    def test_out_of_range(self):
        with pytest.raises(DataError):
            salt_pepper(np.ones((28, 28)), -1, 0)


class TestPermutationTasks:
    def test_single_task_is_identity(self):
        tasks = make_permutation_tasks(1, 0)
        assert len(tasks) == 1
        assert np.array_equal(tasks[0].perm, np.arange(784))

    def test_bijection_inverts(self):
        tasks = make_permutation_tasks(3, 5)
        perm = tasks[2].perm
        inv = np.empty_like(perm)
        inv[perm] = np.arange(784)
        assert np.array_equal(perm[inv], np.arange(784))

    def test_permutations_are_near_derangements(self):
        tasks = make_permutation_tasks(6, 9)
        dists = []
        for t in tasks[1:]:
            dists.append((t.perm != np.arange(784)).sum())
        assert np.mean(dists) > 775  # expectation is 783 of 784

    def test_apply_permutation_moves_pixels(self):
        rng = np.random.default_rng(2)
        img = rng.random((28, 28))
        task = make_permutation_tasks(2, 3)[1]
        out = apply_permutation(img, task)
        assert np.array_equal(out.reshape(-1), img.reshape(-1)[task.perm])


class TestSampleEpisode:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.data = FeatureSet(features=rng.normal(size=(200, 6)),
                               labels=np.repeat(np.arange(10), 20))

    def test_counts(self):
        ep = sample_episode(self.data, way=5, shot=1, query=1, seed=1)
        assert len(ep.support) == 5
        assert len(ep.query) == 5
        labels = {tuple(y) for _, y in ep.support}
        assert len(labels) == 5

    def test_seed_determinism(self):
        a = sample_episode(self.data, 5, 2, 3, seed=7)
        b = sample_episode(self.data, 5, 2, 3, seed=7)
        for (fa, ya), (fb, yb) in zip(a.support, b.support):
            assert np.array_equal(fa, fb) and np.array_equal(ya, yb)

    def test_support_query_disjoint(self):
        ep = sample_episode(self.data, 4, 3, 3, seed=3)
        sup = {f.tobytes() for f, _ in ep.support}
        qry = {f.tobytes() for f, _ in ep.query}
        assert sup.isdisjoint(qry)

    def test_insufficient_class_size(self):
        small = FeatureSet(features=np.random.default_rng(0).normal(size=(4, 3)),
                           labels=np.array([0, 0, 1, 1]))
        with pytest.raises(DataError):
            sample_episode(small, 2, 2, 2, seed=0)


class TestSparseMask:
    def test_extremes(self):
        assert not sparse_gp_mask((4, 4), 0.0, 0).any()
        assert sparse_gp_mask((4, 4), 1.0, 0).all()

    def test_density_within_binomial_bound(self):
        mask = sparse_gp_mask((1024, 1024), 0.03, 123)
        n = 1024 * 1024
        expect = 0.03 * n
        sigma = np.sqrt(n * 0.03 * 0.97)
        assert abs(mask.sum() - expect) < 3 * sigma

    def test_independent_masks_overlap_at_product_rate(self):
        a = sparse_gp_mask((1024, 1024), 0.03, 1)
        b = sparse_gp_mask((1024, 1024), 0.03, 2)
        n = 1024 * 1024
        overlap = (a & b).sum()
        expect = n * 0.03 ** 2
        sigma = np.sqrt(n * 0.03 ** 2)
        assert abs(overlap - expect) < 4 * sigma

    def test_bad_density(self):
        with pytest.raises(DataError):
            sparse_gp_mask((2, 2), 1.5, 0)


class TestSyntheticFewshot:
    def test_means_separated(self):
        fs = synthetic_fewshot(8, 16, spread=0.1, seed=0, samples_per_class=5)
        means = np.stack([fs.features[fs.labels == k].mean(axis=0)
                          for k in range(8)])
        for i in range(8):
            for j in range(i + 1, 8):
                assert np.linalg.norm(means[i] - means[j]) > 2 * 0.1

    def test_seed_determinism(self):
        a = synthetic_fewshot(4, 8, 0.05, seed=3)
        b = synthetic_fewshot(4, 8, 0.05, seed=3)
        assert np.array_equal(a.features, b.features)

    def test_nearest_class_mean_is_perfect_at_tiny_spread(self):
        fs = synthetic_fewshot(6, 12, spread=1e-4, seed=5)
        means = np.stack([fs.features[fs.labels == k].mean(axis=0)
                          for k in range(6)])
        d = np.linalg.norm(fs.features[:, None] - means[None], axis=-1)
        assert np.array_equal(np.argmin(d, axis=1), fs.labels)
