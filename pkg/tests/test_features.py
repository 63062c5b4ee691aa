import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialground.dataio import BBox2D
from spatialground.errors import ParseError, SchemaMismatch, ValidationError
from spatialground.features import (
    EmbeddingTable,
    FeatureVector,
    GEOM2D,
    GEOM3D,
    build_pair_features,
    feat2d,
    feat3d,
    schema_length,
    with_language,
)
from spatialground.geometry import OrientedBox3D


def box(t, d=(0.1, 0.1, 0.1)):
    return OrientedBox3D.axis_aligned(t, d)


class TestFeat3d:
    def test_identity_rotation_layout(self):
        target = OrientedBox3D([0, 0, 1], np.eye(3), [0.1, 0.1, 0.1])
        reference = OrientedBox3D([0, 0, 2], np.eye(3), [0.2, 0.2, 0.2])
        v = feat3d(target, reference)
        expected = [0, 0, 1, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0.1, 0.1, 0.1,
                    0, 0, 2, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0.2, 0.2, 0.2]
        np.testing.assert_allclose(v.values, expected)
        assert v.schema_id == GEOM3D
        assert len(v) == 30

    def test_swap_exchanges_halves(self):
        a, b = box([0.3, 0, 1]), box([0, 0.4, 2], (0.3, 0.2, 0.1))
        ab, ba = feat3d(a, b), feat3d(b, a)
        np.testing.assert_array_equal(ab.values[:15], ba.values[15:])
        np.testing.assert_array_equal(ab.values[15:], ba.values[:15])

    def test_schema_property_random_boxes(self, rng):
        for _ in range(50):
            t = box(rng.uniform(-1, 1, 3) + [0, 0, 2], sorted(rng.uniform(0.05, 0.5, 3), reverse=True))
            r = box(rng.uniform(-1, 1, 3) + [0, 0, 2], sorted(rng.uniform(0.05, 0.5, 3), reverse=True))
            v = feat3d(t, r)
            assert len(v) == 30 and v.schema_id == GEOM3D
            assert np.all(np.isfinite(v.values))

    def test_deterministic(self):
        a, b = box([0.3, 0, 1]), box([0, 0.4, 2])
        assert np.array_equal(feat3d(a, b).values, feat3d(a, b).values)


class TestFeat2d:
    def test_normalized_layout(self):
        v = feat2d(BBox2D(0, 0, 10, 10), BBox2D(10, 10, 10, 10), 100, 100)
        np.testing.assert_allclose(v.values, [0.05, 0.05, 0.1, 0.1, 0.15, 0.15, 0.1, 0.1])
        assert v.schema_id == GEOM2D

    def test_identical_boxes_identical_halves(self):
        b = BBox2D(3, 7, 20, 10)
        v = feat2d(b, b, 64, 48)
        np.testing.assert_array_equal(v.values[:4], v.values[4:])

    @given(st.integers(0, 90), st.integers(0, 90), st.integers(1, 30), st.integers(1, 30))
    @settings(max_examples=100, deadline=None)
    def test_range_property(self, x, y, w, h):
        w = min(w, 100 - x)
        h = min(h, 100 - y)
        v = feat2d(BBox2D(x, y, w, h), BBox2D(x, y, w, h), 100, 100)
        assert np.all(v.values >= 0) and np.all(v.values <= 1 + 1e-9)


class TestEmbeddings:
    def test_length_and_schema_upgrade(self, embedding_table):
        base = feat3d(box([0, 0, 1]), box([0, 0, 2]))
        v = with_language(base, "mug", "table", embedding_table)
        assert len(v) == 30 + 2 * 50
        assert v.schema_id == "GEOM3D_LNG"
        assert schema_length("GEOM3D_LNG", 50) == 130

    def test_multiword_label_is_mean(self, embedding_table):
        direct = (embedding_table.entries["coffee"] + embedding_table.entries["mug"]) / 2.0
        np.testing.assert_allclose(embedding_table.embed("coffee mug"), direct)

    def test_oov_is_zero_vector(self, embedding_table):
        base = feat2d(BBox2D(0, 0, 1, 1), BBox2D(1, 1, 1, 1), 10, 10)
        v = with_language(base, "zzgloop", "mug", embedding_table)
        assert len(v) == 8 + 100
        np.testing.assert_array_equal(v.values[8:58], np.zeros(50))

    def test_oov_word_inside_multiword_counts_as_zero(self, embedding_table):
        mixed = embedding_table.embed("zzgloop mug")
        np.testing.assert_allclose(mixed, embedding_table.entries["mug"] / 2.0)

    def test_cannot_upgrade_twice(self, embedding_table):
        base = feat2d(BBox2D(0, 0, 1, 1), BBox2D(1, 1, 1, 1), 10, 10)
        v = with_language(base, "mug", "can", embedding_table)
        with pytest.raises(SchemaMismatch):
            with_language(v, "mug", "can", embedding_table)

    def test_table_file_roundtrip(self, tmp_path, embedding_table):
        path = tmp_path / "emb.txt"
        embedding_table.save(str(path))
        loaded = EmbeddingTable.load(str(path))
        assert loaded.dimension == embedding_table.dimension
        for w, vec in embedding_table.entries.items():
            np.testing.assert_array_equal(loaded.entries[w], vec)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("not a header\n")
        with pytest.raises(ParseError):
            EmbeddingTable.load(str(p))

    def test_row_length_mismatch(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("3 1\nmug 0.1 0.2\n")
        with pytest.raises(ParseError):
            EmbeddingTable.load(str(p))


class TestFeatureVector:
    def test_rejects_nan(self):
        with pytest.raises(ValidationError):
            FeatureVector(np.array([np.nan] * 8), GEOM2D)

    def test_rejects_unknown_schema(self):
        with pytest.raises(ValidationError):
            FeatureVector(np.zeros(8), "GEOM4D")


class TestBuildPairFeatures:
    def test_3d_schema_requires_boxes(self):
        with pytest.raises(ValidationError):
            build_pair_features(GEOM3D, BBox2D(0, 0, 1, 1), BBox2D(1, 1, 1, 1), None, None, 10, 10)

    def test_lng_schema_requires_table(self):
        with pytest.raises(ValidationError):
            build_pair_features(
                "GEOM2D_LNG", BBox2D(0, 0, 1, 1), BBox2D(1, 1, 1, 1), None, None, 10, 10, "a", "b", None
            )

    def test_2d_ignores_boxes(self):
        v = build_pair_features(GEOM2D, BBox2D(0, 0, 2, 2), BBox2D(2, 2, 2, 2), None, None, 10, 10)
        assert v.schema_id == GEOM2D
