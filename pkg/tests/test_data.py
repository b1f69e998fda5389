import gzip

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cande.data import (NORMAL, NOVEL, UNLABELED, ContextScheme, ContextualSplits, Dataset, SplitSpec, SynthConfig,
                        build_contextual_dataset, load_feature_csv, load_idx, splits_from_labelled,
                        synth_contextual, write_feature_csv, write_idx)
from cande.errors import DataFormatError, SchemeError

# two 4x4 images: the first counts 0..15, the second is 255 - that
IMAGES = (bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0, 4])
          + bytes(range(16)) + bytes(255 - i for i in range(16)))
LABELS = bytes([0, 0, 8, 1, 0, 0, 0, 2, 7, 3])


def write(tmp_path, name, data):
    p = tmp_path / name
    p.write_bytes(data)
    return p


def fake_digits(per_class=20, classes=range(10), seed=0):
    rng = np.random.default_rng(seed)
    cls = np.repeat(np.array(list(classes)), per_class)
    feats = rng.uniform(size=(len(cls), 6)) + cls[:, None]
    return Dataset.from_features(feats, classes=cls)


class TestIdx:
    def test_hand_built_fixture(self, tmp_path):
        ds = load_idx(write(tmp_path, "img", IMAGES), write(tmp_path, "lab", LABELS))
        assert len(ds) == 2 and ds.dim == 16
        assert ds.classes.tolist() == [7, 3]
        for j in range(16):
            assert ds.features[0, j] == np.float32(j / 255)
            assert ds.features[1, j] == np.float32((255 - j) / 255)

    def test_gzip(self, tmp_path):
        ds = load_idx(write(tmp_path, "img.gz", gzip.compress(IMAGES)), write(tmp_path, "lab", LABELS))
        assert ds.features[1, 0] == 1.0

    def test_writer_matches_hand_bytes(self, tmp_path):
        imgs = np.stack([np.arange(16), 255 - np.arange(16)]).reshape(2, 4, 4)
        write_idx(imgs, [7, 3], tmp_path / "i", tmp_path / "l")
        assert (tmp_path / "i").read_bytes() == IMAGES
        assert (tmp_path / "l").read_bytes() == LABELS

    def test_labels_magic_on_images_file(self, tmp_path):
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(write(tmp_path, "img", LABELS), write(tmp_path, "lab", LABELS))

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_idx(write(tmp_path, "img", b""), write(tmp_path, "lab", LABELS))

    def test_truncated_payload(self, tmp_path):
        with pytest.raises(DataFormatError, match="payload"):
            load_idx(write(tmp_path, "img", IMAGES[:-1]), write(tmp_path, "lab", LABELS))

    def test_count_mismatch(self, tmp_path):
        labels = bytes([0, 0, 8, 1, 0, 0, 0, 3, 7, 3, 1])
        with pytest.raises(DataFormatError, match="2 images but 3 labels"):
            load_idx(write(tmp_path, "img", IMAGES), write(tmp_path, "lab", labels))


CSV_OK = """id,group,context,label,f0,f1,f2
a,g1,0,normal,0.1,0.2,0.3
b,g2,1,novel,1.5,-2,3e-1
"""


class TestCsv:
    def test_two_rows(self, tmp_path):
        ds = load_feature_csv(write(tmp_path, "x.csv", CSV_OK.encode()))
        assert len(ds) == 2 and ds.dim == 3
        assert ds.groups.tolist() == ["g1", "g2"]
        assert ds.ids.tolist() == ["a", "b"]
        assert ds.contexts.tolist() == [0, 1]
        assert ds.novelty.tolist() == [NORMAL, NOVEL]
        np.testing.assert_array_equal(ds.features[1], np.float32([1.5, -2.0, 0.3]))

    def test_ragged_row_reports_line(self, tmp_path):
        text = CSV_OK + "c,g3,0,normal,1,2\n"
        with pytest.raises(DataFormatError, match=r"x\.csv:4: ragged"):
            load_feature_csv(write(tmp_path, "x.csv", text.encode()))

    def test_unknown_label(self, tmp_path):
        text = CSV_OK.replace("novel", "anomalous")
        with pytest.raises(DataFormatError, match="anomalous"):
            load_feature_csv(write(tmp_path, "x.csv", text.encode()))

    def test_non_numeric(self, tmp_path):
        text = CSV_OK.replace("0.2", "abc")
        with pytest.raises(DataFormatError, match="non-numeric"):
            load_feature_csv(write(tmp_path, "x.csv", text.encode()))

    def test_missing_header(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_feature_csv(write(tmp_path, "x.csv", b"a,g1,0,normal,0.1\n"))

    def test_round_trip(self, tmp_path):
        ds = load_feature_csv(write(tmp_path, "x.csv", (CSV_OK + "c,g3,2,unlabeled,0,0,1\n").encode()))
        write_feature_csv(ds, tmp_path / "y.csv")
        back = load_feature_csv(tmp_path / "y.csv")
        assert back.novelty.tolist() == [NORMAL, NOVEL, UNLABELED]
        assert back.features.tobytes() == ds.features.tobytes()


class TestScheme:
    def test_default_scheme(self):
        s = ContextScheme.mnist_default()
        assert s.contexts == ((0, 1, 2), (3, 4, 5), (6, 7, 8)) and s.novel == (3, 6, 0)
        assert s.context_of(4) == 1 and s.context_of(9) == -1

    def test_overlap_rejected(self):
        with pytest.raises(SchemeError, match="disjoint"):
            ContextScheme(((0, 1), (1, 2)), (2, 0))

    def test_novel_in_own_context_rejected(self):
        with pytest.raises(SchemeError):
            ContextScheme(((0, 1), (2, 3)), (1, 0))

    @given(st.lists(st.sets(st.integers(0, 20), min_size=1, max_size=4), min_size=2, max_size=4))
    def test_disjointness_enforced(self, sets):
        contexts = tuple(tuple(s) for s in sets)
        novel = tuple(99 for _ in sets)
        overlap = any(a & b for i, a in enumerate(sets) for b in sets[i + 1:])
        if overlap:
            with pytest.raises(SchemeError):
                ContextScheme(contexts, novel)
        else:
            ContextScheme(contexts, novel)

    def test_dict_round_trip(self):
        s = ContextScheme.mnist_default()
        assert ContextScheme.from_dict(s.to_dict()) == s
        assert s.digest() == ContextScheme.from_dict(s.to_dict()).digest()

    @pytest.mark.parametrize("fracs", [(0.0, 0.1), (0.9, 0.2), (1.0, 0.5)])
    def test_bad_split(self, fracs):
        with pytest.raises(ValueError):
            SplitSpec(*fracs)


@pytest.fixture(scope="module")
def splits():
    return build_contextual_dataset(fake_digits(), ContextScheme.mnist_default(), SplitSpec(seed=3),
                                    test_pool=fake_digits(per_class=10, seed=1))


class TestContextualDataset:
    def test_train_val_hold_only_normal_context_classes(self, splits):
        for c, ctx in enumerate(ContextScheme.mnist_default().contexts):
            for part in ("train", "val"):
                ds = splits.get(c, part)
                assert set(ds.classes.tolist()) <= set(ctx)
                assert np.all(ds.novelty == NORMAL) and np.all(ds.contexts == c)
            assert len(splits.get(c, "train")) == 54 and len(splits.get(c, "val")) == 6

    def test_test_labels(self, splits):
        # digit 3 is novel in the first context and normal in the second
        t0 = splits.get(0, "test")
        assert set(t0.classes[t0.novelty == NOVEL].tolist()) == {3}
        assert set(t0.classes[t0.novelty == NORMAL].tolist()) == {0, 1, 2}
        assert 3 in splits.get(1, "train").classes
        assert 3 in splits.pooled("train").classes

    def test_digit_four_goes_to_second_context(self, splits):
        assert 4 in splits.get(1, "train").classes
        assert 4 not in splits.get(0, "train").classes and 4 not in splits.get(2, "train").classes

    def test_digit_nine_dropped(self, splits):
        for c in splits.context_ids:
            for part in ContextualSplits.SPLITS:
                assert 9 not in splits.get(c, part).classes

    def test_deterministic_and_seed_sensitive(self):
        args = (fake_digits(), ContextScheme.mnist_default())
        a = build_contextual_dataset(*args, SplitSpec(seed=5), test_pool=fake_digits(seed=1))
        b = build_contextual_dataset(*args, SplitSpec(seed=5), test_pool=fake_digits(seed=1))
        c = build_contextual_dataset(*args, SplitSpec(seed=6), test_pool=fake_digits(seed=1))
        assert a.get(0, "train").features.tobytes() == b.get(0, "train").features.tobytes()
        assert a.get(0, "train").features.tobytes() != c.get(0, "train").features.tobytes()

    def test_caps(self):
        s = build_contextual_dataset(fake_digits(), ContextScheme.mnist_default(), test_pool=fake_digits(seed=1),
                                     max_train_per_context=30, max_test_per_context=25)
        assert len(s.get(0, "train")) + len(s.get(0, "val")) == 30
        assert len(s.get(0, "test")) == 25

    def test_missing_class(self):
        with pytest.raises(SchemeError):
            build_contextual_dataset(fake_digits(classes=range(8)), ContextScheme.mnist_default(),
                                     test_pool=fake_digits())

    def test_holdout_without_test_pool(self):
        s = build_contextual_dataset(fake_digits(per_class=50), ContextScheme.mnist_default(), SplitSpec(0.6, 0.2))
        train_ids = {tuple(r) for r in s.get(1, "train").features.tolist()}
        test_ids = {tuple(r) for r in s.get(1, "test").features.tolist()}
        assert not train_ids & test_ids
        assert set(s.get(1, "test").classes.tolist()) == {3, 4, 5, 6}

    def test_save_load(self, splits, tmp_path):
        splits.save(tmp_path)
        back = ContextualSplits.load(tmp_path)
        assert back.scheme == splits.scheme
        for c in splits.context_ids:
            for part in ContextualSplits.SPLITS:
                assert back.get(c, part).features.tobytes() == splits.get(c, part).features.tobytes()
                assert back.get(c, part).novelty.tolist() == splits.get(c, part).novelty.tolist()

    def test_datasets_are_read_only(self, splits):
        with pytest.raises(ValueError):
            splits.get(0, "train").features[0, 0] = 5.0


class TestLabelledSplits:
    def test_csv_path(self):
        rng = np.random.default_rng(0)
        train = Dataset.from_features(rng.normal(size=(20, 3)), contexts=np.arange(20) % 2,
                                      novelty=np.full(20, UNLABELED))
        test = Dataset.from_features(rng.normal(size=(8, 3)), contexts=np.arange(8) % 2,
                                     novelty=np.arange(8) // 4, groups=np.arange(8) // 2)
        s = splits_from_labelled(train, test)
        assert s.context_ids == [0, 1]
        assert all(np.all(s.get(c, "train").novelty == NORMAL) for c in (0, 1))
        assert len(s.get(0, "train")) == 9 and len(s.get(0, "val")) == 1

    def test_novel_training_rows_rejected(self):
        ds = Dataset.from_features(np.zeros((4, 2)), contexts=[0, 0, 1, 1], novelty=[0, 1, 0, 0])
        with pytest.raises(DataFormatError):
            splits_from_labelled(ds, ds)


class TestSynth:
    def test_swap_design(self):
        data = synth_contextual(SynthConfig(seed=2))
        assert data.scheme.contexts == ((0,), (1,)) and data.scheme.novel == (1, 0)
        # context 0's novel cluster is context 1's normal cluster
        novel_mean = data.means[data.scheme.novel[0]]
        normal_mean_b = data.means[data.scheme.contexts[1][0]]
        np.testing.assert_array_equal(novel_mean, normal_mean_b)

    def test_separation(self):
        cfg = SynthConfig(num_contexts=3, seed=1)
        m = synth_contextual(cfg).means
        for i in range(3):
            for j in range(i + 1, 3):
                assert np.linalg.norm(m[i] - m[j]) == pytest.approx(cfg.separation * cfg.sigma, rel=1e-12)

    def test_deterministic(self):
        a, b = synth_contextual(SynthConfig(seed=7)), synth_contextual(SynthConfig(seed=7))
        assert a.pool.features.tobytes() == b.pool.features.tobytes()
        assert a.test_pool.features.tobytes() == b.test_pool.features.tobytes()
        assert a.pool.features.tobytes() != synth_contextual(SynthConfig(seed=8)).pool.features.tobytes()

    @pytest.mark.parametrize("kw", [{"num_contexts": 1}, {"num_contexts": 0}, {"dim": 0}])
    def test_degenerate(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 1000), st.integers(2, 4))
    def test_no_novel_rows_in_train_or_val(self, seed, k):
        data = synth_contextual(SynthConfig(num_contexts=k, n_per_context=30, n_test_per_context=10, seed=seed))
        s = build_contextual_dataset(data.pool, data.scheme, SplitSpec(seed=seed), test_pool=data.test_pool)
        for c in s.context_ids:
            assert np.all(s.get(c, "train").novelty == NORMAL)
            assert np.all(s.get(c, "val").novelty == NORMAL)
            assert set(s.get(c, "test").novelty.tolist()) == {NORMAL, NOVEL}
