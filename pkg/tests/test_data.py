import os

import numpy as np
import pytest

from ssda.data import (ConfigurationError, DataError, SyntheticShiftSpec,
                       batch_iterator, generate_synthetic_pair, load_image,
                       load_manifest, manifest_path, write_manifest,
                       DatasetManifest, ManifestDataset)


def _pixels(manifest, i):
    return load_image(os.path.join(manifest.root, manifest.entries[i][0]))


class TestGeneration:
    def test_zero_shift_identity(self, tmp_path):
        spec = SyntheticShiftSpec(samples_per_class=3,
                                  test_samples_per_class=2, seed=5,
                                  hue_rotation=0.0, noise_sigma=0.0,
                                  blur_radius=0.0)
        src, tgt = generate_synthetic_pair(spec, str(tmp_path))
        for i in range(len(src)):
            np.testing.assert_array_equal(_pixels(src, i), _pixels(tgt, i))

    def test_determinism(self, tmp_path):
        spec = SyntheticShiftSpec(samples_per_class=3,
                                  test_samples_per_class=2,
                                  hue_rotation=40, noise_sigma=0.1, seed=7)
        a_src, a_tgt = generate_synthetic_pair(spec, str(tmp_path / "a"))
        b_src, b_tgt = generate_synthetic_pair(spec, str(tmp_path / "b"))
        assert a_src.entries == b_src.entries
        for i in range(len(a_tgt)):
            np.testing.assert_array_equal(_pixels(a_tgt, i),
                                          _pixels(b_tgt, i))

    def test_noise_shift_separates_domains(self, tmp_path):
        spec = SyntheticShiftSpec(samples_per_class=2,
                                  test_samples_per_class=1,
                                  hue_rotation=0.0, blur_radius=0.0,
                                  noise_sigma=0.1, seed=2)
        src, tgt = generate_synthetic_pair(spec, str(tmp_path))
        diffs = [np.abs(_pixels(src, i) - _pixels(tgt, i)).mean()
                 for i in range(len(src))]
        assert min(diffs) > 0

    def test_invalid_spec(self):
        with pytest.raises(ConfigurationError):
            SyntheticShiftSpec(num_classes=1).validate()
        with pytest.raises(ConfigurationError):
            SyntheticShiftSpec(image_size=4).validate()
        with pytest.raises(ConfigurationError):
            SyntheticShiftSpec(samples_per_class=0).validate()

    def test_segmentation_labels_mark_shapes(self, tiny_seg_pair):
        src = tiny_seg_pair["source"]
        ds = ManifestDataset(src)
        lab = ds.label(0)
        assert lab.shape == (48, 48)
        assert set(np.unique(lab)) <= set(range(src.num_classes))
        assert (lab == 0).any() and (lab > 0).any()

    def test_target_labels_exist_for_eval(self, tiny_pair):
        tgt_test = load_manifest(
            manifest_path(tiny_pair["root"], "target", "test"), "test")
        assert all(isinstance(lbl, int) for _, lbl, _ in tgt_test.entries)


class TestManifest:
    def test_roundtrip_counts(self, tiny_pair):
        m = load_manifest(
            manifest_path(tiny_pair["root"], "source", "train"))
        spec = tiny_pair["spec"]
        assert len(m) == spec.num_classes * spec.samples_per_class
        assert m.task == "classification"
        assert m.num_classes == spec.num_classes

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_manifest(str(tmp_path / "nope.csv"))

    def test_empty_manifest(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("classification,4\n")
        with pytest.raises(DataError, match="empty manifest"):
            load_manifest(str(p))

    def test_label_out_of_range(self, tiny_pair, tmp_path):
        src = tiny_pair["source"]
        bad = DatasetManifest(
            [(src.entries[0][0], src.num_classes, "source")],
            src.task, src.num_classes, "train", src.root)
        p = os.path.join(src.root, "bad.csv")
        write_manifest(bad, p)
        with pytest.raises(DataError, match="label out of range"):
            load_manifest(p)

    def test_malformed_row(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("classification,4\nonly_two,fields\n")
        with pytest.raises(DataError, match="malformed row"):
            load_manifest(str(p))

    def test_unresolvable_path(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("classification,4\nmissing.png,0,source\n")
        with pytest.raises(DataError, match="does not resolve"):
            load_manifest(str(p))

    def test_row_count_preserved(self, tiny_pair, tmp_path):
        src = tiny_pair["source"]
        sub = DatasetManifest(src.entries[:10], src.task, src.num_classes,
                              "train", src.root)
        p = os.path.join(src.root, "ten.csv")
        write_manifest(sub, p)
        assert len(load_manifest(p)) == 10


class TestBatchIterator:
    def test_epoch_is_partition(self):
        batches = list(batch_iterator(10, 2, seed=0))
        assert len(batches) == 5
        seen = np.concatenate(batches)
        assert sorted(seen) == list(range(10))

    def test_seed_determinism(self):
        a = [b.tolist() for b in batch_iterator(10, 3, seed=4)]
        b = [b.tolist() for b in batch_iterator(10, 3, seed=4)]
        assert a == b

    def test_cycle_covers_everything(self):
        it = batch_iterator(3, 2, seed=1, cycle=True)
        slots = np.concatenate([next(it) for _ in range(4)])
        assert len(slots) == 8
        counts = np.bincount(slots, minlength=3)
        assert (counts >= 2).all()

    def test_batch_too_large_without_cycle(self):
        with pytest.raises(DataError):
            list(batch_iterator(3, 5, seed=0, cycle=False))

    def test_epochs_reshuffle(self):
        it = batch_iterator(20, 20, seed=0, cycle=True)
        first, second = next(it).tolist(), next(it).tolist()
        assert sorted(first) == sorted(second)
        assert first != second
