"""PPM/PGM writers against golden bytes, plus roundtrips and error cases."""

import numpy as np
import pytest

from flrp import netpbm


class TestPpm:
    def test_golden_bytes(self):
        # one row, two pixels: red then blue
        img = np.zeros((3, 1, 2), dtype=np.uint8)
        img[0, 0, 0] = 255
        img[2, 0, 1] = 255
        assert netpbm.ppm_bytes(img) == b"P6\n2 1\n255\n\xff\x00\x00\x00\x00\xff"

    def test_roundtrip(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(3, 5, 7)).astype(np.uint8)
        assert np.array_equal(netpbm.parse_ppm(netpbm.ppm_bytes(img)), img)

    def test_file_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, size=(3, 4, 4)).astype(np.uint8)
        path = tmp_path / "img.ppm"
        netpbm.write_ppm(path, img)
        assert np.array_equal(netpbm.read_ppm(path), img)

    def test_reader_accepts_comments(self):
        data = b"P6\n# a comment\n2 1\n255\n" + bytes(6)
        assert netpbm.parse_ppm(data).shape == (3, 1, 2)

    def test_rejects_bad_magic(self):
        with pytest.raises(netpbm.NetpbmError, match="magic"):
            netpbm.parse_ppm(b"P5\n1 1\n255\n\x00")

    def test_rejects_truncated_payload(self):
        with pytest.raises(netpbm.NetpbmError, match="payload"):
            netpbm.parse_ppm(b"P6\n2 2\n255\n\x00\x00")

    def test_rejects_wrong_maxval(self):
        with pytest.raises(netpbm.NetpbmError, match="maxval"):
            netpbm.parse_ppm(b"P6\n1 1\n65535\n\x00\x00\x00")

    def test_rejects_wrong_shape(self):
        with pytest.raises(netpbm.NetpbmError):
            netpbm.ppm_bytes(np.zeros((1, 2, 2), dtype=np.uint8))


class TestPgm:
    def test_golden_bytes(self):
        mask = np.array([[0, 255], [255, 0]], dtype=np.uint8)
        assert netpbm.pgm_bytes(mask) == b"P5\n2 2\n255\n\x00\xff\xff\x00"

    def test_bool_maps_to_0_255(self):
        mask = np.array([[True, False]])
        assert netpbm.pgm_bytes(mask) == b"P5\n2 1\n255\n\xff\x00"

    def test_file_roundtrip(self, tmp_path):
        mask = (np.arange(12, dtype=np.uint8) * 20).reshape(3, 4)
        path = tmp_path / "mask.pgm"
        netpbm.write_pgm(path, mask)
        assert np.array_equal(netpbm.read_pgm(path), mask)
