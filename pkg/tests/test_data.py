import numpy as np
import numpy.testing as npt
import pytest

from mmfuse.data import (DataFormatError, DatasetManifest, ManifestError,
                         SyntheticConfig, UtteranceRecord, group_by_video,
                         load_dataset, make_batches, parse_manifest, read_binary,
                         read_csv, records_matrix, synth_generate, write_binary,
                         write_csv)
from mmfuse.tensor import RngState
from mmfuse.vae import ModalityFeatures


def small_records(n=6, d=(2, 3, 2), videos=2, seed=0):
    rng = RngState(seed)
    records = []
    for i in range(n):
        vid = f"vid{i % videos}"
        records.append(UtteranceRecord(
            video_id=vid, utterance_index=i // videos, label=i % 2,
            features=ModalityFeatures(rng.gaussians(d[0]), rng.gaussians(d[1]),
                                      rng.gaussians(d[2]))))
    return records


class TestManifest:
    def write(self, tmp_path, text):
        path = tmp_path / "manifest.txt"
        path.write_text(text)
        return path

    def test_parse(self, tmp_path):
        path = self.write(tmp_path, """
name = demo
d_t = 2
d_a = 3
d_v = 2
classes = 2
labels = negative, positive
train_path = train.csv
test_path = test.csv
expect_train = 6
""")
        m = parse_manifest(path)
        assert m.name == "demo"
        assert m.d_in == 7
        assert m.labels == ["negative", "positive"]
        assert m.expect_train == 6
        assert m.expect_test is None
        assert m.train_path.endswith("train.csv")

    def test_missing_keys(self, tmp_path):
        with pytest.raises(ManifestError, match="missing"):
            parse_manifest(self.write(tmp_path, "name = x\n"))

    def test_label_count_mismatch(self, tmp_path):
        with pytest.raises(ManifestError, match="labels"):
            parse_manifest(self.write(tmp_path, """
name = x
d_t = 1
d_a = 1
d_v = 1
classes = 3
labels = a, b
train_path = t.csv
test_path = s.csv
"""))


class TestCsvFormat:
    def test_round_trip(self, tmp_path):
        records = small_records()
        path = tmp_path / "feat.csv"
        write_csv(path, records, 2, 3, 2)
        loaded = read_csv(path, 2, 3, 2)
        assert len(loaded) == len(records)
        assert loaded[0].video_id == records[0].video_id
        for a, b in zip(loaded, records):
            npt.assert_allclose(a.concat(), b.concat(), atol=1e-12)

    def test_header_and_row_count(self, tmp_path):
        records = small_records()
        path = tmp_path / "feat.csv"
        write_csv(path, records, 2, 3, 2)
        lines = path.read_text().splitlines()
        assert len(lines) == len(records) + 1
        assert lines[0].startswith("video_id,utterance_index,label,t_0")

    def test_wrong_width_names_row(self, tmp_path):
        path = tmp_path / "feat.csv"
        write_csv(path, small_records(), 2, 3, 2)
        with pytest.raises(DataFormatError, match=":2:"):
            read_csv(path, 3, 3, 2)

    def test_malformed_row(self, tmp_path):
        path = tmp_path / "feat.csv"
        path.write_text("video_id,utterance_index,label,t_0\nv,0,zero,1.5\n")
        with pytest.raises(DataFormatError, match="malformed"):
            read_csv(path, 1, 0, 0)


class TestBinaryFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        records = small_records()
        path = tmp_path / "feat.mmf"
        write_binary(path, records, 2, 3, 2, 2)
        loaded, d_t, d_a, d_v, classes = read_binary(path)
        assert (d_t, d_a, d_v, classes) == (2, 3, 2, 2)
        for a, b in zip(loaded, records):
            assert a.video_id == b.video_id
            assert a.utterance_index == b.utterance_index
            assert a.label == b.label
            npt.assert_array_equal(a.concat(), b.concat())
        # a second write of the loaded records is byte-identical
        path2 = tmp_path / "feat2.mmf"
        write_binary(path2, loaded, 2, 3, 2, 2)
        assert path.read_bytes() == path2.read_bytes()

    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "feat.mmf"
        write_binary(path, small_records(), 2, 3, 2, 2)
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="magic"):
            read_binary(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "feat.mmf"
        write_binary(path, small_records(), 2, 3, 2, 2)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(DataFormatError, match="truncated"):
            read_binary(path)

    def test_empty_video_id_rejected_at_write(self, tmp_path):
        rec = small_records(1)[0]
        rec.video_id = ""
        with pytest.raises(DataFormatError, match="video_id"):
            write_binary(tmp_path / "x.mmf", [rec], 2, 3, 2, 2)


class TestLoadDataset:
    def manifest(self, tmp_path, **overrides):
        m = DatasetManifest(
            name="demo", d_t=2, d_a=3, d_v=2, classes=2,
            labels=["neg", "pos"],
            train_path=str(tmp_path / "train.csv"),
            test_path=str(tmp_path / "test.csv"),
            expect_train=6, expect_test=4)
        for k, v in overrides.items():
            setattr(m, k, v)
        return m

    def test_load_both_splits(self, tmp_path):
        write_csv(tmp_path / "train.csv", small_records(6), 2, 3, 2)
        write_csv(tmp_path / "test.csv", small_records(4, seed=1), 2, 3, 2)
        splits = load_dataset(self.manifest(tmp_path))
        assert len(splits["train"]) == 6
        assert len(splits["test"]) == 4

    def test_count_mismatch(self, tmp_path):
        write_csv(tmp_path / "train.csv", small_records(5), 2, 3, 2)
        write_csv(tmp_path / "test.csv", small_records(4, seed=1), 2, 3, 2)
        with pytest.raises(DataFormatError, match="expects 6"):
            load_dataset(self.manifest(tmp_path))

    def test_empty_file_is_count_error(self, tmp_path):
        write_csv(tmp_path / "train.csv", [], 2, 3, 2)
        write_csv(tmp_path / "test.csv", small_records(4, seed=1), 2, 3, 2)
        with pytest.raises(DataFormatError, match="0 records"):
            load_dataset(self.manifest(tmp_path))

    def test_unknown_label(self, tmp_path):
        records = small_records(6)
        records[3].label = 7
        write_csv(tmp_path / "train.csv", records, 2, 3, 2)
        write_csv(tmp_path / "test.csv", small_records(4, seed=1), 2, 3, 2)
        with pytest.raises(DataFormatError, match="unknown label 7"):
            load_dataset(self.manifest(tmp_path))

    def test_binary_sniffing(self, tmp_path):
        write_binary(tmp_path / "train.csv", small_records(6), 2, 3, 2, 2)
        write_csv(tmp_path / "test.csv", small_records(4, seed=1), 2, 3, 2)
        splits = load_dataset(self.manifest(tmp_path))
        assert len(splits["train"]) == 6

    def test_loading_is_stable(self, tmp_path):
        write_csv(tmp_path / "train.csv", small_records(6), 2, 3, 2)
        write_csv(tmp_path / "test.csv", small_records(4, seed=1), 2, 3, 2)
        a = load_dataset(self.manifest(tmp_path))["train"]
        b = load_dataset(self.manifest(tmp_path))["train"]
        assert [r.video_id for r in a] == [r.video_id for r in b]
        for x, y in zip(a, b):
            npt.assert_array_equal(x.concat(), y.concat())


class TestGroupByVideo:
    def test_single_video_order_preserved(self):
        records = small_records(3, videos=1)
        seqs = group_by_video(records)
        assert len(seqs) == 1
        assert seqs[0].n == 3

    def test_interleaved_videos(self):
        records = small_records(6, videos=2)
        seqs = group_by_video(records)
        assert len(seqs) == 2
        for seq in seqs:
            assert seq.n == 3

    def test_utterance_conservation(self):
        records = small_records(10, videos=3)
        assert sum(s.n for s in group_by_video(records)) == len(records)

    def test_out_of_order_indices_sorted(self):
        records = small_records(4, videos=1)
        shuffled = [records[2], records[0], records[3], records[1]]
        seq = group_by_video(shuffled)[0]
        npt.assert_array_equal(seq.features[:, 0], records[0].concat())
        npt.assert_array_equal(seq.features[:, 3], records[3].concat())

    def test_duplicate_index_rejected(self):
        records = small_records(2, videos=1)
        records[1].utterance_index = records[0].utterance_index
        with pytest.raises(DataFormatError, match="duplicate"):
            group_by_video(records)


class TestMakeBatches:
    def test_sizes(self):
        batches = make_batches(list(range(250)), 100, RngState(0))
        assert [len(b) for b in batches] == [100, 100, 50]

    def test_same_seed_same_composition(self):
        items = list(range(57))
        a = make_batches(items, 10, RngState(5))
        b = make_batches(items, 10, RngState(5))
        assert a == b

    def test_partition_property(self):
        items = list(range(123))
        batches = make_batches(items, 17, RngState(9))
        flat = [x for b in batches for x in b]
        assert sorted(flat) == items

    def test_invalid_batch_size(self):
        with pytest.raises(ValueError):
            make_batches([1, 2], 0, RngState(0))


class TestSynthGenerate:
    def test_deterministic(self):
        cfg = SyntheticConfig(seed=4, train_videos=5, test_videos=2)
        a_train, a_test, _ = synth_generate(cfg)
        b_train, b_test, _ = synth_generate(cfg)
        assert len(a_train) == len(b_train)
        for x, y in zip(a_train + a_test, b_train + b_test):
            assert x.video_id == y.video_id and x.label == y.label
            npt.assert_array_equal(x.concat(), y.concat())

    def test_label_balance(self):
        cfg = SyntheticConfig(seed=8, train_videos=2500, test_videos=1,
                              utterances_min=4, utterances_max=4, classes=2)
        train, _, _ = synth_generate(cfg)
        assert len(train) == 10_000
        frac = np.mean([r.label for r in train])
        assert abs(frac - 0.5) < 0.02

    def test_noiseless_features_are_affine_in_latent(self):
        cfg = SyntheticConfig(seed=12, train_videos=30, test_videos=1,
                              noise=0.0, d_t=4, d_a=4, d_v=4, latent_dim=4)
        train, _, truth = synth_generate(cfg)
        F, _ = records_matrix(train)
        U = np.stack([truth[(r.video_id, r.utterance_index)] for r in train],
                     axis=1)
        # solve F ~ A [U; 1] by least squares; residual should be ~0
        design = np.vstack([U, np.ones((1, U.shape[1]))])
        coef, *_ = np.linalg.lstsq(design.T, F.T, rcond=None)
        resid = F - coef.T @ design
        assert np.abs(resid).max() < 1e-8

    def test_context_shift_changes_labels(self):
        base = SyntheticConfig(seed=15, train_videos=40, test_videos=1,
                               utterances_min=4, utterances_max=4)
        shifted = SyntheticConfig(seed=15, train_videos=40, test_videos=1,
                                  utterances_min=4, utterances_max=4,
                                  context_shift=1)
        a, _, _ = synth_generate(base)
        b, _, _ = synth_generate(shifted)
        # features identical, labels shifted within each video
        npt.assert_array_equal(a[5].concat(), b[5].concat())
        labels_a = [r.label for r in a]
        labels_b = [r.label for r in b]
        assert labels_a != labels_b
        # within a video, label j under shift equals label j-1 without
        assert labels_b[1] == labels_a[0]

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            synth_generate(SyntheticConfig(latent_dim=9, d_t=8, d_a=8, d_v=8))
        with pytest.raises(ValueError):
            synth_generate(SyntheticConfig(noise=-0.1))
