import numpy as np
import pytest

from vidseg import fileio
from vidseg.scene import SceneConfig, generate_video


class TestRLE:
    def test_simple_runs(self):
        mask = np.array([0, 0, 1, 1, 1, 0], dtype=bool)
        runs = fileio.rle_encode(mask)
        assert runs.tolist() == [2, 3, 1]
        assert runs.dtype == np.uint32

    def test_leading_foreground_gets_zero_background_run(self):
        mask = np.array([1, 1, 0], dtype=bool)
        assert fileio.rle_encode(mask).tolist() == [0, 2, 1]

    def test_roundtrip_random(self):
        g = np.random.default_rng(0)
        for _ in range(50):
            mask = g.uniform(size=g.integers(1, 200)) < g.uniform()
            runs = fileio.rle_encode(mask)
            back = fileio.rle_decode(runs, mask.size)
            assert np.array_equal(back, mask)

    def test_decode_size_mismatch(self):
        with pytest.raises(ValueError):
            fileio.rle_decode(np.array([2, 1], dtype=np.uint32), 5)

    def test_empty_and_full(self):
        assert fileio.rle_encode(np.zeros(4, bool)).tolist() == [4]
        assert fileio.rle_encode(np.ones(4, bool)).tolist() == [0, 4]


class TestDatasetRoundtrip:
    def test_roundtrip_identity(self, tmp_path):
        cfg = SceneConfig(frames=10, object_count=3, occlusion_rate=0.5, swap_hazard_rate=0.5, seed=11)
        video = generate_video(cfg)
        path = tmp_path / "v.vseg"
        fileio.write_video(path, video)
        back = fileio.read_video(path)
        assert np.array_equal(back.masks, video.masks)
        assert np.array_equal(back.embeddings, video.embeddings)
        assert np.array_equal(back.solo_areas, video.solo_areas)
        assert back.classes == video.classes
        assert back.events == video.events
        assert back.hazard_pairs == video.hazard_pairs
        assert back.config == video.config

    def test_write_deterministic_bytes(self, tmp_path):
        cfg = SceneConfig(frames=6, object_count=2, seed=3)
        video = generate_video(cfg)
        p1, p2 = tmp_path / "a.vseg", tmp_path / "b.vseg"
        fileio.write_video(p1, video)
        fileio.write_video(p2, generate_video(cfg))
        assert p1.read_bytes() == p2.read_bytes()


class TestContainerErrors:
    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(fileio.FileFormatError) as e:
            fileio.read_container(p, fileio.DATASET_MAGIC)
        assert e.value.offset == 0

    def test_unknown_major_version_rejected(self, tmp_path):
        p = tmp_path / "x.bin"
        fileio.write_container(p, fileio.DATASET_MAGIC, {"k": 1}, b"")
        raw = bytearray(p.read_bytes())
        raw[4:6] = (99).to_bytes(2, "little")
        p.write_bytes(bytes(raw))
        with pytest.raises(fileio.FileFormatError) as e:
            fileio.read_container(p, fileio.DATASET_MAGIC)
        assert e.value.offset == 4
        assert "major" in str(e.value)

    def test_truncated_file(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"VS")
        with pytest.raises(fileio.FileFormatError):
            fileio.read_container(p, fileio.DATASET_MAGIC)

    def test_invalid_json_reports_offset(self, tmp_path):
        p = tmp_path / "x.bin"
        import struct

        blob = b"{not json"
        p.write_bytes(struct.pack("<4sHHQ", fileio.DATASET_MAGIC, 1, 0, len(blob)) + blob)
        with pytest.raises(fileio.FileFormatError) as e:
            fileio.read_container(p, fileio.DATASET_MAGIC)
        assert e.value.offset >= 16

    def test_header_extends_past_eof(self, tmp_path):
        p = tmp_path / "x.bin"
        import struct

        p.write_bytes(struct.pack("<4sHHQ", fileio.DATASET_MAGIC, 1, 0, 10_000))
        with pytest.raises(fileio.FileFormatError):
            fileio.read_container(p, fileio.DATASET_MAGIC)


class TestPredictionRoundtrip:
    def test_roundtrip(self, tmp_path):
        g = np.random.default_rng(5)
        tubes = [
            {
                "id": i,
                "class": int(g.integers(0, 5)),
                "score": float(g.uniform()),
                "masks": g.uniform(size=(4, 8, 8)) < 0.3,
            }
            for i in range(3)
        ]
        p = tmp_path / "pred.vseg"
        fileio.write_prediction(p, tubes, 4, (8, 8), meta={"mode": "online"})
        back, meta = fileio.read_prediction(p)
        assert meta == {"mode": "online"}
        for a, b in zip(tubes, back):
            assert a["id"] == b["id"] and a["class"] == b["class"]
            assert a["score"] == pytest.approx(b["score"])
            assert np.array_equal(a["masks"], b["masks"])
