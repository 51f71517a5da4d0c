import struct

import numpy as np
import pytest

from sadp.data import (DatasetHandle, FormatError, RangeError, MetricsRow,
                       METRICS_HEADER, encode, gen_synthetic,
                       gen_synthetic_split, load_idx,
                       nearest_prototype_accuracy, read_spike_file,
                       write_metrics, write_spike_file)


def idx_bytes(dims, payload, dtype=0x08, kind=None):
    rank = len(dims)
    magic = bytes([0, 0, dtype, rank])
    return magic + struct.pack(f">{rank}I", *dims) + payload


class TestIdx:
    def test_two_image_fixture(self, tmp_path):
        payload = bytes(range(256)) * 2 + bytes(28 * 28 * 2 - 512)
        raw = idx_bytes((2, 28, 28), payload[:28 * 28 * 2])
        p = tmp_path / "imgs.idx"
        p.write_bytes(raw)
        handle = load_idx(str(p))
        assert handle.n == 2
        assert handle.input_shape == (28, 28)
        assert handle.data.max() <= 1.0 and handle.data.min() >= 0.0

    def test_with_labels(self, tmp_path):
        imgs = tmp_path / "i.idx"
        labs = tmp_path / "l.idx"
        imgs.write_bytes(idx_bytes((3, 2, 2), bytes(12)))
        labs.write_bytes(idx_bytes((3,), bytes([1, 0, 2])))
        handle = load_idx(str(imgs), str(labs))
        np.testing.assert_array_equal(handle.labels, [1, 0, 2])

    def test_wrong_dtype_byte(self, tmp_path):
        p = tmp_path / "bad.idx"
        p.write_bytes(idx_bytes((2, 2, 2), bytes(8), dtype=0x07))
        with pytest.raises(FormatError):
            load_idx(str(p))

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "short.idx"
        p.write_bytes(idx_bytes((2, 4, 4), bytes(10)))
        with pytest.raises(FormatError):
            load_idx(str(p))


class TestEncode:
    def test_direct_replicates(self):
        x = np.array([[0.2, 0.9]])
        out = encode(x, "direct", 5)
        assert out.shape == (1, 5, 2)
        for t in range(5):
            np.testing.assert_array_equal(out[:, t], x)

    def test_rate_zero_intensity_silent(self):
        out = encode(np.zeros((3, 4)), "rate", 10, seed=1)
        assert np.all(out == 0)

    def test_rate_empirical_frequency(self):
        out = encode(np.full((1, 1), 0.5), "rate", 1000, seed=2)
        assert abs(out.mean() - 0.5) <= 4 * np.sqrt(0.25 / 1000)

    def test_rate_deterministic_per_seed(self):
        x = np.random.default_rng(0).random((4, 6))
        np.testing.assert_array_equal(encode(x, "rate", 8, seed=5),
                                      encode(x, "rate", 8, seed=5))

    def test_out_of_range_rejected(self):
        with pytest.raises(RangeError):
            encode(np.array([[1.5]]), "direct", 2)


class TestSynthetic:
    def test_zero_noise_equals_prototype(self):
        h = gen_synthetic(3, 12, 4, 10, 0.0, seed=0)
        for i in range(12):
            np.testing.assert_array_equal(h.data[i], h.prototypes[h.labels[i]])

    def test_deterministic_per_seed(self):
        a = gen_synthetic(4, 20, 3, 8, 0.1, seed=7)
        b = gen_synthetic(4, 20, 3, 8, 0.1, seed=7)
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_nearest_prototype_accuracy(self):
        h = gen_synthetic(10, 500, 8, 64, 0.05, seed=3)
        assert nearest_prototype_accuracy(h) > 0.9

    def test_accuracy_decreases_with_noise(self):
        accs = [nearest_prototype_accuracy(gen_synthetic(6, 400, 6, 32, rho, seed=5))
                for rho in (0.05, 0.2, 0.35, 0.45)]
        assert all(a >= b - 0.02 for a, b in zip(accs, accs[1:]))
        assert accs[0] > accs[-1]

    def test_split_shares_prototypes(self):
        train, test = gen_synthetic_split(5, 50, 20, 4, 16, 0.1, seed=1)
        np.testing.assert_array_equal(train.prototypes, test.prototypes)
        assert train.n == 50 and test.n == 20


class TestSpikeFile:
    def test_round_trip(self, tmp_path):
        h = gen_synthetic(4, 30, 5, 12, 0.2, seed=2)
        p = tmp_path / "d.spkt"
        write_spike_file(h, str(p))
        back = read_spike_file(str(p))
        np.testing.assert_array_equal(back.data, h.data)
        np.testing.assert_array_equal(back.labels, h.labels)
        assert back.time_steps == 5

    def test_rank5_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        data = (rng.random((3, 2, 1, 4, 4)) < 0.5).astype(float)
        h = DatasetHandle(data=data, labels=np.array([0, 1, 0]), time_steps=2)
        p = tmp_path / "r5.spkt"
        write_spike_file(h, str(p))
        back = read_spike_file(str(p))
        assert back.data.shape == (3, 2, 1, 4, 4)
        np.testing.assert_array_equal(back.data, data)

    def test_corrupted_magic(self, tmp_path):
        h = gen_synthetic(2, 4, 2, 4, 0.0, seed=0)
        p = tmp_path / "c.spkt"
        write_spike_file(h, str(p))
        raw = bytearray(p.read_bytes())
        raw[:4] = b"XXXX"
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_spike_file(str(p))

    def test_truncated_payload(self, tmp_path):
        h = gen_synthetic(2, 4, 2, 4, 0.0, seed=0)
        p = tmp_path / "t.spkt"
        write_spike_file(h, str(p))
        p.write_bytes(p.read_bytes()[:20])
        with pytest.raises(FormatError):
            read_spike_file(str(p))

    def test_rejects_non_binary(self, tmp_path):
        h = DatasetHandle(data=np.array([[0.5]]), labels=np.array([0]))
        with pytest.raises(ValueError):
            write_spike_file(h, str(tmp_path / "x.spkt"))


class TestMetrics:
    def test_header_and_row_format(self, tmp_path):
        row = MetricsRow(epoch=1, ratio=0.25, processed=100, train_loss=1.5,
                         test_acc=0.75, wall_s=0.123456, gamma=0.0,
                         solver_iters=2)
        p = tmp_path / "m.csv"
        write_metrics([row], str(p))
        lines = p.read_text().splitlines()
        assert lines[0] == METRICS_HEADER
        assert lines[1] == "1,0.25,100,1.5,0.75,0.123456,0,2"
