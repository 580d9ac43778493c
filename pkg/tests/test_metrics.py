import numpy as np
import pytest

from csunfold import metrics as mt
from csunfold import pgm

import oracles


class TestPsnr:
    def test_twenty_db_closed_form(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)  # MSE = 0.01
        assert mt.psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_identical_capped_at_100(self, rng):
        a = rng.random((12, 12))
        assert mt.psnr(a, a.copy()) == mt.PSNR_CAP_DB

    def test_symmetric(self, rng):
        a, b = rng.random((9, 9)), rng.random((9, 9))
        assert mt.psnr(a, b) == pytest.approx(mt.psnr(b, a), abs=1e-9)

    def test_against_loop_oracle(self, rng):
        for _ in range(20):
            a, b = rng.random((7, 8)), rng.random((7, 8))
            assert mt.psnr(a, b) == pytest.approx(oracles.psnr_loops(a, b), abs=1e-10)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValueError, match="shape"):
            mt.psnr(rng.random((4, 4)), rng.random((4, 5)))


class TestSsim:
    def test_identical_images_one(self, rng):
        a = rng.random((16, 16))
        assert mt.ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_scores_below_one(self, rng):
        a = rng.random((16, 16))
        assert mt.ssim(a, 1.0 - a) < 1.0

    def test_against_window_oracle(self, rng):
        for _ in range(3):
            a, b = rng.random((14, 15)), rng.random((14, 15))
            assert mt.ssim(a, b) == pytest.approx(oracles.ssim_windows(a, b), abs=1e-6)

    def test_symmetric(self, rng):
        a, b = rng.random((13, 13)), rng.random((13, 13))
        assert mt.ssim(a, b) == pytest.approx(mt.ssim(b, a), abs=1e-9)

    def test_too_small_rejected(self, rng):
        with pytest.raises(ValueError, match="window"):
            mt.ssim(rng.random((10, 30)), rng.random((10, 30)))

    def test_in_valid_range(self, rng):
        for _ in range(10):
            a, b = rng.random((12, 12)), rng.random((12, 12))
            assert -1.0 <= mt.ssim(a, b) <= 1.0


class TestReport:
    def test_aggregates_are_row_means(self, rng, tmp_path):
        report = mt.ReconstructionReport(checkpoint_hash="abc", config_echo="{}")
        values = [(24.0, 0.8), (30.0, 0.9), (27.0, 0.7)]
        for i, (p, s) in enumerate(values):
            report.add(f"img{i}", 0.25, "full", "dinlm", p, s)
        assert report.mean_psnr == pytest.approx(np.mean([v[0] for v in values]))
        assert report.mean_ssim == pytest.approx(np.mean([v[1] for v in values]))
        path = tmp_path / "r.csv"
        report.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[2] == "image,rate,ssg,nl,psnr_db,ssim"
        assert lines[-1].startswith("mean,")

    def test_capped_rows_flagged(self):
        report = mt.ReconstructionReport()
        report.add("exact", 0.25, "full", "dinlm", mt.PSNR_CAP_DB, 1.0)
        report.add("noisy", 0.25, "full", "dinlm", 25.0, 0.8)
        assert report.rows[0].psnr_capped and not report.rows[1].psnr_capped


class TestPgmIo:
    def test_roundtrip_identity(self, rng, tmp_path):
        img = np.round(rng.random((20, 30)) * 255) / 255
        path = tmp_path / "img.pgm"
        pgm.write_image(path, img)
        np.testing.assert_allclose(pgm.read_image(path), img, atol=1e-12)

    def test_extremes(self, tmp_path):
        path = tmp_path / "e.pgm"
        pgm.write_image(path, np.array([[0.0, 1.0]]))
        raw = path.read_bytes()
        assert raw[-2:] == bytes([0, 255])

    def test_half_rounds_up(self, tmp_path):
        path = tmp_path / "half.pgm"
        pgm.write_image(path, np.array([[0.5]]))
        assert path.read_bytes()[-1] == 128

    def test_clamps_out_of_range(self, tmp_path):
        path = tmp_path / "c.pgm"
        pgm.write_image(path, np.array([[-0.2, 1.7]]))
        assert path.read_bytes()[-2:] == bytes([0, 255])

    def test_truncated_rejected(self, rng, tmp_path):
        path = tmp_path / "t.pgm"
        pgm.write_image(path, rng.random((8, 8)))
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ValueError, match="truncated"):
            pgm.read_image(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "b.pgm"
        path.write_bytes(b"P2\n2 2\n255\n....")
        with pytest.raises(ValueError, match="P5"):
            pgm.read_image(path)

    def test_p6_luma_weights(self, tmp_path):
        path = tmp_path / "c.ppm"
        pixels = np.zeros((1, 3, 3), dtype=np.uint8)
        pixels[0, 0] = (255, 0, 0)
        pixels[0, 1] = (0, 255, 0)
        pixels[0, 2] = (0, 0, 255)
        with open(path, "wb") as fh:
            fh.write(b"P6\n3 1\n255\n")
            fh.write(pixels.tobytes())
        img = pgm.read_image(path)
        expected = np.array([
            np.floor(0.299 * 255 + 0.5),
            np.floor(0.587 * 255 + 0.5),
            np.floor(0.114 * 255 + 0.5),
        ]) / 255
        np.testing.assert_allclose(img[0], expected, atol=1e-12)

    def test_comment_header(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 1\n255\n\x00\xff")
        np.testing.assert_allclose(pgm.read_image(path), [[0.0, 1.0]], atol=1e-12)
