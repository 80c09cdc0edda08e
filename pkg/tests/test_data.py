import json

import numpy as np
import pytest

from modules.datasets import generate_dataset, load_dataset, load_json, load_karpathy_json, read_captions
from modules.dtypes import BOS, EOS, UNK, FeatureGrid, ImageId, TokenSeq
from modules.exceptions import ConfigError, DataError, TokenRangeError
from modules.features import FeatureDirectory, decode_features, encode_features, read_features, write_features
from modules.metrics import tokenize
from modules.synthetic import (
    COLORS,
    SHAPES,
    SyntheticFeatureProvider,
    feature_dim,
    make_scene,
    scene_captions,
    scene_features,
)
from modules.vocab import Vocabulary, build_vocabulary


def karpathy_fixture(path, images):
    path.write_text(json.dumps({"images": images}), encoding="utf-8")
    return path


def entry(cocoid, split, *captions):
    return {"cocoid": cocoid, "split": split, "sentences": [{"raw": c, "tokens": c.split()} for c in captions]}


class TestSynthetic:
    def test_scenes_are_deterministic(self):
        assert make_scene(7, ImageId(3)) == make_scene(7, ImageId(3))
        np.testing.assert_array_equal(
            scene_features(make_scene(7, ImageId(3)), 7).values, scene_features(make_scene(7, ImageId(3)), 7).values
        )

    def test_scene_contents(self):
        for i in range(50):
            scene = make_scene(1, ImageId(i))
            assert 1 <= len(scene.objects) <= 2
            for obj in scene.objects:
                assert obj.shape in SHAPES
                assert obj.color in COLORS
                assert 0 <= obj.row < 3
                assert 0 <= obj.col < 3

    def test_feature_layout(self):
        scene = make_scene(2, ImageId(0))
        grid = scene_features(scene, 2)
        assert grid.values.shape == (9, feature_dim(3))
        assert feature_dim(3) == 14
        clean = np.round(grid.values)
        obj = scene.objects[0]
        cell = obj.row * 3 + obj.col
        assert clean[cell, SHAPES.index(obj.shape)] == 1.0
        assert clean[cell, 4 + COLORS.index(obj.color)] == 1.0
        np.testing.assert_array_equal(grid.values, grid.values.astype(np.float32).astype(np.float64))

    @pytest.mark.parametrize("grid_size", [2, 3, 4])
    def test_regions_carry_their_cell(self, grid_size):
        scene = make_scene(1, ImageId(3), grid_size)
        clean = np.round(scene_features(scene, 1).values)
        assert clean.shape == (grid_size * grid_size, 8 + 2 * grid_size)
        where = clean[:, 8:]
        assert len({tuple(row) for row in where}) == grid_size * grid_size
        for cell, row in enumerate(where):
            assert row[cell // grid_size] == 1.0
            assert row[grid_size + cell % grid_size] == 1.0
            assert row.sum() == 2.0

    def test_five_distinct_captions_naming_the_objects(self):
        for i in range(30):
            scene = make_scene(4, ImageId(i))
            captions = scene_captions(scene)
            assert len(set(captions)) == 5
            for caption in captions:
                for obj in scene.objects:
                    assert obj.color in caption
                    assert obj.shape in caption

    def test_provider_matches_generator(self):
        provider = SyntheticFeatureProvider(seed=5)
        scene = make_scene(5, ImageId(11))
        np.testing.assert_array_equal(provider.get(ImageId(11)).values, scene_features(scene, 5).values)
        assert (provider.n_regions, provider.feat_dim) == (9, 14)

    def test_grid_too_small(self):
        with pytest.raises(ConfigError):
            make_scene(0, ImageId(0), grid_size=1)


class TestGeneratedDataset:
    def test_counts_and_splits(self, tmp_path):
        corpus = generate_dataset(tmp_path, seed=0, n_images=100)
        assert len(corpus) == 100
        assert sum(len(item.captions) for item in corpus) == 500
        assert (len(corpus.splits.train), len(corpus.splits.val), len(corpus.splits.test)) == (80, 10, 10)
        assert len(list((tmp_path / "features").glob("*.feat"))) == 100
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["feat_dim"] == 14
        assert manifest["splits"]["val"] == list(range(80, 90))

    def test_same_seed_gives_identical_files(self, tmp_path):
        generate_dataset(tmp_path / "a", seed=3, n_images=20)
        generate_dataset(tmp_path / "b", seed=3, n_images=20)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        generate_dataset(tmp_path / "a", seed=3, n_images=10)
        generate_dataset(tmp_path / "b", seed=4, n_images=10)
        assert (tmp_path / "a" / "captions.json").read_bytes() != (tmp_path / "b" / "captions.json").read_bytes()

    def test_vocabulary_covers_every_caption(self, tmp_path):
        generate_dataset(tmp_path, seed=1, n_images=30)
        data = load_dataset(tmp_path)
        for item in data.corpus:
            for caption in item.captions:
                assert UNK not in data.vocab.encode(caption).ids

    def test_round_trip_through_disk(self, tmp_path):
        corpus = generate_dataset(tmp_path, seed=2, n_images=12)
        again = read_captions(tmp_path / "captions.json")
        assert dict(again.captions) == dict(corpus.captions)
        assert again.splits == corpus.splits

    def test_too_few_images(self, tmp_path):
        with pytest.raises(ConfigError):
            generate_dataset(tmp_path, seed=0, n_images=5)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError, match="gen-data"):
            load_dataset(tmp_path / "nothing")


class TestKarpathy:
    def test_restval_joins_train(self, tmp_path):
        path = karpathy_fixture(
            tmp_path / "dataset.json",
            [
                entry(10, "train", "A dog runs."),
                entry(11, "restval", "A cat sleeps.", "The cat naps."),
                entry(12, "val", "Two birds."),
                entry(13, "test", "A red bus."),
            ],
        )
        corpus = load_karpathy_json(path)
        assert corpus.splits.train == (10, 11)
        assert corpus.splits.val == (12,)
        assert corpus.captions[ImageId(11)].captions == ("A cat sleeps.", "The cat naps.")

    def test_imgid_fallback(self, tmp_path):
        path = karpathy_fixture(tmp_path / "d.json", [{"imgid": 4, "split": "test", "sentences": [{"raw": "x y"}]}])
        assert load_karpathy_json(path).splits.test == (4,)

    def test_missing_sentences(self, tmp_path):
        path = karpathy_fixture(tmp_path / "d.json", [{"cocoid": 1, "split": "train"}])
        with pytest.raises(DataError, match="sentences"):
            load_karpathy_json(path)

    def test_unknown_split(self, tmp_path):
        path = karpathy_fixture(tmp_path / "d.json", [entry(1, "holdout", "a b")])
        with pytest.raises(DataError, match="split"):
            load_karpathy_json(path)

    def test_malformed_json_reports_position(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"images": [\n  {"cocoid": 1,,}\n]}', encoding="utf-8")
        with pytest.raises(DataError, match=r"broken\.json:2:"):
            load_json(path)

    def test_with_feature_directory(self, tmp_path):
        path = karpathy_fixture(
            tmp_path / "d.json", [entry(1, "train", "A red bus.", "a bus"), entry(2, "val", "A blue car.")]
        )
        feats = tmp_path / "feats"
        feats.mkdir()
        for image_id in (1, 2):
            write_features(feats / f"{image_id}.feat", FeatureGrid(np.full((49, 8), float(image_id))))
        data = load_dataset(None, karpathy_json=path, features_dir=feats)
        assert data.features.get(ImageId(2)).values[0, 0] == 2.0
        assert "bus" in data.vocab
        assert "car" not in data.vocab

    def test_requires_features(self, tmp_path):
        path = karpathy_fixture(tmp_path / "d.json", [entry(1, "train", "a b")])
        with pytest.raises(ConfigError):
            load_dataset(None, karpathy_json=path)


class TestFeatures:
    def test_round_trip_is_exact_for_f32_values(self, tmp_path):
        values = np.random.default_rng(0).normal(size=(49, 512)).astype(np.float32).astype(np.float64)
        write_features(tmp_path / "1.feat", FeatureGrid(values))
        grid = read_features(tmp_path / "1.feat")
        assert (grid.n_regions, grid.feat_dim) == (49, 512)
        np.testing.assert_array_equal(grid.values, values)

    def test_header(self):
        blob = encode_features(FeatureGrid(np.zeros((2, 3))))
        assert blob[:4] == b"FEAT"
        assert len(blob) == 16 + 2 * 3 * 4

    def test_bad_magic(self):
        blob = bytearray(encode_features(FeatureGrid(np.zeros((2, 3)))))
        blob[:4] = b"JUNK"
        with pytest.raises(DataError, match="magic"):
            decode_features(bytes(blob))

    def test_size_mismatch(self):
        with pytest.raises(DataError, match="declares"):
            decode_features(encode_features(FeatureGrid(np.zeros((2, 3))))[:-4])

    def test_directory_rejects_inconsistent_shapes(self, tmp_path):
        write_features(tmp_path / "1.feat", FeatureGrid(np.zeros((4, 3))))
        write_features(tmp_path / "2.feat", FeatureGrid(np.zeros((5, 3))))
        directory = FeatureDirectory(tmp_path)
        assert directory.has(ImageId(2))
        assert not directory.has(ImageId(3))
        with pytest.raises(DataError, match="expected"):
            directory.get(ImageId(2))

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DataError):
            FeatureDirectory(tmp_path)


class TestVocabulary:
    def test_specials_come_first(self):
        vocab = Vocabulary(["cat", "dog"])
        assert vocab.tokens[:4] == ("<pad>", "<bos>", "<eos>", "<unk>")
        assert vocab.id_of("cat") == 4

    def test_encode_and_decode(self):
        vocab = build_vocabulary(["A red circle.", "a blue circle"])
        seq = vocab.encode("a red circle")
        assert seq.ids[0] == BOS
        assert seq.ids[-1] == EOS
        assert vocab.decode(seq) == ("a", "red", "circle")
        assert vocab.to_text(seq) == "a red circle"

    def test_unknown_words_map_to_unk(self):
        assert Vocabulary(["a"]).encode("a zebra").ids == (BOS, 4, UNK, EOS)

    def test_encode_truncates_to_max_len(self):
        vocab = Vocabulary(tokenize("one two three four"))
        assert vocab.encode("one two three four", max_len=3).ids == (BOS, 4, 5, EOS)

    def test_min_count(self):
        vocab = build_vocabulary(["a b", "a c"], min_count=2)
        assert "a" in vocab
        assert "b" not in vocab

    def test_word_of_out_of_range(self):
        with pytest.raises(TokenRangeError):
            Vocabulary([]).word_of(4)

    def test_decode_stops_at_eos(self):
        vocab = Vocabulary(["x", "y"])
        assert vocab.decode(TokenSeq((BOS, 4, EOS, 5))) == ("x",)

    def test_file_round_trip(self, tmp_path):
        vocab = Vocabulary(["x", "y"])
        vocab.write(tmp_path / "vocab.txt")
        assert Vocabulary.read(tmp_path / "vocab.txt").tokens == vocab.tokens

    def test_rejects_file_without_specials(self, tmp_path):
        (tmp_path / "vocab.txt").write_text("x\ny\n", encoding="utf-8")
        with pytest.raises(DataError):
            Vocabulary.read(tmp_path / "vocab.txt")
