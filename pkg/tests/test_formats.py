import numpy as np
import pytest

from s2gs import formats
from s2gs.errors import DataError


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((12, 10, 3)).astype(np.float32)
    path = tmp_path / "img.ppm"
    formats.write_ppm(path, img)
    assert path.read_bytes().startswith(b"P6\n10 12\n255\n")
    back = formats.read_ppm(path)
    assert back.shape == (12, 10, 3)
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-6


def test_pgm16_roundtrip(tmp_path):
    labels = np.array([[0, 1], [65535, 42]], dtype=np.uint32)
    path = tmp_path / "m.pgm"
    formats.write_pgm16(path, labels)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n2 2\n65535\n")
    assert raw[-8:] == bytes([0, 0, 0, 1, 255, 255, 0, 42])  # big-endian
    assert np.array_equal(formats.read_pgm16(path), labels)


def test_pgm16_range_check(tmp_path):
    with pytest.raises(DataError):
        formats.write_pgm16(tmp_path / "x.pgm", np.array([[70000]]))


def test_depth_roundtrip(tmp_path):
    depth = np.random.default_rng(1).uniform(0, 5, (7, 9)).astype(np.float32)
    path = tmp_path / "d.s2dp"
    formats.write_depth(path, depth)
    assert path.read_bytes().startswith(b"S2DP 7 9\n")
    assert np.array_equal(formats.read_depth(path), depth)


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"JUNK 1 1\n\x00\x00\x00\x00")
    with pytest.raises(DataError):
        formats.read_depth(p)
    p2 = tmp_path / "junk.ppm"
    p2.write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(DataError):
        formats.read_ppm(p2)
