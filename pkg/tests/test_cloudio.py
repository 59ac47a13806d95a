"""Format round-trips and error paths for cloud/annotation/manifest I/O."""
import numpy as np
import pytest

from pointmark.cloudio import (
    DatasetManifest,
    LandmarkSet,
    ManifestEntry,
    ParseError,
    load_manifest,
    parse_landmarks,
    parse_manifest,
    parse_ply,
    parse_xyz,
    split_dataset,
    write_landmarks,
    write_manifest,
    write_ply,
    write_xyz,
)
from pointmark.geometry import PointCloud


def random_cloud(rng, n=20, normals=True, colors=True):
    return PointCloud(
        rng.uniform(-5, 5, (n, 3)),
        normals=rng.standard_normal((n, 3)) if normals else None,
        colors=rng.integers(0, 256, (n, 3)) / 255.0 if colors else None,
    )


class TestPly:
    def test_minimal_ascii(self):
        data = (b"ply\nformat ascii 1.0\nelement vertex 1\n"
                b"property float x\nproperty float y\nproperty float z\n"
                b"end_header\n0 0 0\n")
        cloud = parse_ply(data)
        assert cloud.n == 1
        assert np.array_equal(cloud.positions, [[0.0, 0.0, 0.0]])
        assert cloud.normals is None and cloud.colors is None

    @pytest.mark.parametrize("binary", [False, True])
    @pytest.mark.parametrize("normals,colors", [(False, False), (True, False),
                                                (True, True)])
    def test_round_trip(self, binary, normals, colors):
        rng = np.random.default_rng(1 + binary)
        cloud = random_cloud(rng, normals=normals, colors=colors)
        blob = write_ply(cloud, binary=binary)
        back = parse_ply(blob)
        assert np.array_equal(back.positions, cloud.positions)
        if normals:
            assert np.array_equal(back.normals, cloud.normals)
        if colors:
            assert np.allclose(back.colors, cloud.colors, atol=1e-12)
        # byte-lossless: reserialize equals original bytes
        assert write_ply(back, binary=binary) == blob

    def test_count_mismatch(self):
        data = (b"ply\nformat ascii 1.0\nelement vertex 5\n"
                b"property float x\nproperty float y\nproperty float z\n"
                b"end_header\n0 0 0\n1 1 1\n2 2 2\n3 3 3\n")
        with pytest.raises(ParseError, match="count mismatch"):
            parse_ply(data)

    def test_big_endian_rejected(self):
        data = (b"ply\nformat binary_big_endian 1.0\nelement vertex 1\n"
                b"property float x\nproperty float y\nproperty float z\n"
                b"end_header\n" + b"\x00" * 12)
        with pytest.raises(ParseError, match="big-endian"):
            parse_ply(data)

    def test_missing_coordinate_property(self):
        data = (b"ply\nformat ascii 1.0\nelement vertex 1\n"
                b"property float x\nproperty float y\nend_header\n0 0\n")
        with pytest.raises(ParseError, match="'z'"):
            parse_ply(data)

    def test_non_finite_rejected(self):
        data = (b"ply\nformat ascii 1.0\nelement vertex 1\n"
                b"property float x\nproperty float y\nproperty float z\n"
                b"end_header\nnan 0 0\n")
        with pytest.raises(ParseError, match="non-finite"):
            parse_ply(data)

    def test_colors_scaled_to_unit(self):
        data = (b"ply\nformat ascii 1.0\nelement vertex 1\n"
                b"property float x\nproperty float y\nproperty float z\n"
                b"property uchar red\nproperty uchar green\nproperty uchar blue\n"
                b"end_header\n0 0 0 255 0 51\n")
        cloud = parse_ply(data)
        assert np.allclose(cloud.colors, [[1.0, 0.0, 0.2]])

    def test_binary_truncated_body(self):
        head = (b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
                b"property double x\nproperty double y\nproperty double z\n"
                b"end_header\n")
        with pytest.raises(ParseError, match="count mismatch"):
            parse_ply(head + b"\x00" * 25)


class TestXyz:
    def test_round_trip_with_comments(self):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng, n=7)
        blob = write_xyz(cloud)
        back = parse_xyz(b"# header comment\n" + blob)
        assert np.array_equal(back.positions, cloud.positions)
        assert np.array_equal(back.normals, cloud.normals)
        assert np.array_equal(back.colors, cloud.colors)

    def test_bad_column_count(self):
        with pytest.raises(ParseError, match="line 1"):
            parse_xyz(b"1 2\n")


class TestLandmarks:
    def test_eleven_landmark_document(self):
        marks = LandmarkSet(np.arange(33.0).reshape(11, 3))
        back = parse_landmarks(write_landmarks(marks))
        assert back.count == 11
        assert np.array_equal(back.coords, marks.coords)

    def test_round_trip_bytes(self):
        rng = np.random.default_rng(4)
        marks = LandmarkSet(rng.uniform(-2, 2, (11, 3)),
                            names=[f"lm{i}" for i in range(11)])
        blob = write_landmarks(marks)
        assert write_landmarks(parse_landmarks(blob)) == blob

    def test_empty_rejected(self):
        doc = b'{"version": 1, "landmark_count": 0, "coords": []}'
        with pytest.raises(ParseError):
            parse_landmarks(doc)

    def test_count_mismatch_rejected(self):
        doc = b'{"version": 1, "landmark_count": 2, "coords": [[0,0,0]]}'
        with pytest.raises(ParseError, match="landmark_count"):
            parse_landmarks(doc)

    def test_non_finite_rejected(self):
        doc = b'{"version": 1, "landmark_count": 1, "coords": [[0,0,Infinity]]}'
        with pytest.raises(ParseError):
            parse_landmarks(doc)


class TestManifest:
    def make(self, n=4):
        entries = [ManifestEntry(f"c{i}.ply", f"a{i}.json", f"s{i}")
                   for i in range(n)]
        return DatasetManifest(entries, landmark_count=11, feature_dimension=3)

    def test_round_trip_bytes(self):
        blob = write_manifest(self.make())
        assert write_manifest(parse_manifest(blob)) == blob

    def test_missing_file_rejected(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_bytes(write_manifest(self.make()))
        with pytest.raises(Exception, match="missing file"):
            load_manifest(path)

    def test_load_with_files_present(self, tmp_path):
        rng = np.random.default_rng(5)
        manifest = self.make(2)
        for i in range(2):
            (tmp_path / f"c{i}.ply").write_bytes(write_ply(random_cloud(rng,
                                                                        colors=False,
                                                                        normals=False)))
            (tmp_path / f"a{i}.json").write_bytes(
                write_landmarks(LandmarkSet(rng.uniform(-1, 1, (11, 3)))))
        path = tmp_path / "manifest.json"
        path.write_bytes(write_manifest(manifest))
        loaded = load_manifest(path)
        assert len(loaded) == 2
        cloud = loaded.load_cloud(0)
        marks = loaded.load_landmarks(1)
        assert cloud.n == 20 and marks.count == 11

    def test_feature_dimension_requires_channels(self, tmp_path):
        rng = np.random.default_rng(6)
        (tmp_path / "c0.ply").write_bytes(write_ply(random_cloud(rng, normals=False,
                                                                 colors=False)))
        (tmp_path / "a0.json").write_bytes(
            write_landmarks(LandmarkSet(rng.uniform(-1, 1, (11, 3)))))
        manifest = DatasetManifest([ManifestEntry("c0.ply", "a0.json", "s0")],
                                   landmark_count=11, feature_dimension=6,
                                   base_dir=tmp_path)
        with pytest.raises(Exception, match="requires normals"):
            manifest.load_cloud(0)


class TestSplit:
    def test_ten_entries(self):
        manifest = TestManifest().make(10)
        train, test = split_dataset(manifest, 0.9, seed=0)
        assert len(train) == 9 and len(test) == 1
        assert sorted(train + test) == list(range(10))

    def test_deterministic(self):
        manifest = TestManifest().make(20)
        assert split_dataset(manifest, 0.9, 7) == split_dataset(manifest, 0.9, 7)

    def test_seed_sensitive(self):
        manifest = TestManifest().make(40)
        assert split_dataset(manifest, 0.9, 1) != split_dataset(manifest, 0.9, 2)

    def test_103_entries(self):
        manifest = TestManifest().make(103)
        train, test = split_dataset(manifest, 0.9, seed=0)
        assert len(train) == 92 and len(test) == 11

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            split_dataset(TestManifest().make(4), 1.0, 0)
