import numpy as np
import pytest

from armar import evalbench as eb
from armar.ctsim import dataset as ds


@pytest.fixture
def cfg():
    return eb.MetricConfig()


class TestPsnr:
    def test_identical_hits_cap(self):
        img = np.random.default_rng(0).normal(size=(16, 16))
        assert eb.psnr(img, img, peak=2000.0) == 100.0

    def test_closed_form_20db(self):
        pred = np.zeros((10, 10))
        ref = np.full((10, 10), 0.1)          # MSE = 0.01, peak 1 -> 20 dB
        assert np.isclose(eb.psnr(pred, ref, peak=1.0), 20.0, atol=1e-9)

    def test_closed_form_zero_db(self):
        pred = np.zeros((4, 4))
        ref = np.full((4, 4), 255.0)          # MSE = 255^2, peak 255 -> 0 dB
        assert np.isclose(eb.psnr(pred, ref, peak=255.0), 0.0, atol=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
        assert eb.psnr(a, b, 10.0) == eb.psnr(b, a, 10.0)

    def test_strictly_decreasing_in_noise(self):
        rng = np.random.default_rng(2)
        ref = rng.normal(size=(32, 32))
        noise = rng.normal(size=(32, 32))
        values = [eb.psnr(ref + amp * noise, ref, 10.0) for amp in (0.1, 0.2, 0.4, 0.8)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            eb.psnr(np.zeros((2, 2)), np.zeros((3, 3)), 1.0)


class TestSsim:
    def test_identical_images_exactly_one(self):
        img = np.random.default_rng(3).normal(size=(16, 16))
        assert eb.ssim(img, img, dynamic_range=10.0) == 1.0

    def test_constant_offset_luminance_closed_form(self):
        c, rng_v = 100.0, 2000.0
        delta = rng_v / 2.0
        pred = np.full((16, 16), c)
        ref = np.full((16, 16), c + delta)
        c1 = (0.01 * rng_v) ** 2
        expected = (2 * c * (c + delta) + c1) / (c * c + (c + delta) ** 2 + c1)
        assert np.isclose(eb.ssim(pred, ref, rng_v), expected, atol=1e-9)

    def test_independent_noise_near_zero(self):
        rng = np.random.default_rng(4)
        vals = [eb.ssim(rng.normal(size=(24, 24)), rng.normal(size=(24, 24)), 2.0)
                for _ in range(200)]
        assert abs(float(np.mean(vals))) < 0.05

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(12, 12)), rng.normal(size=(12, 12))
        assert abs(eb.ssim(a, b, 4.0) - eb.ssim(b, a, 4.0)) < 1e-9

    def test_value_in_range(self):
        rng = np.random.default_rng(6)
        v = eb.ssim(rng.normal(size=(16, 16)), rng.normal(size=(16, 16)), 4.0)
        assert -1.0 <= v <= 1.0

    def test_small_images_rejected(self):
        with pytest.raises(ValueError):
            eb.ssim(np.zeros((8, 8)), np.zeros((8, 8)), 1.0)


class TestArtifactIndex:
    def test_constant_soft_tissue_zero(self):
        img = np.zeros((16, 16))
        assert eb.artifact_index(img, np.zeros((16, 16), dtype=np.uint8)) == 0.0

    def test_checkerboard_closed_form(self):
        img = np.indices((16, 16)).sum(axis=0) % 2 * 200.0 - 100.0   # +/-100 HU
        val = eb.artifact_index(img, np.zeros((16, 16), dtype=np.uint8))
        assert np.isclose(val, 100.0, atol=1e-9)

    def test_all_metal_absent(self):
        img = np.full((8, 8), 3000.0)
        assert eb.artifact_index(img, np.ones((8, 8), dtype=np.uint8)) is None

    def test_band_from_reference(self):
        pred = np.full((16, 16), 250.0)
        pred[:8] = 5000.0                     # streaks outside the ref band? no: band on ref
        ref = np.zeros((16, 16))
        ref[:8] = 500.0                       # out of band rows
        v = eb.artifact_index(pred, np.zeros((16, 16), dtype=np.uint8), ref_slice=ref)
        assert v == 0.0                       # only constant in-band rows counted

    def test_metal_dilation_excluded(self):
        img = np.zeros((16, 16))
        mask = np.zeros((16, 16), dtype=np.uint8)
        mask[8, 8] = 1
        img[8, 9] = 250.0                     # adjacent to metal: excluded by dilation
        assert eb.artifact_index(img, mask) == 0.0


class TestMetalIou:
    def test_perfect(self):
        gt = np.zeros((16, 16), dtype=np.uint8)
        gt[4:8, 4:8] = 1
        pred = np.where(gt, 3000.0, 0.0)
        assert eb.metal_iou(pred, gt, threshold=1400.0) == 1.0

    def test_disjoint(self):
        gt = np.zeros((16, 16), dtype=np.uint8)
        gt[0:4, 0:4] = 1
        pred = np.zeros((16, 16))
        pred[8:12, 8:12] = 3000.0
        assert eb.metal_iou(pred, gt, 1400.0) == 0.0

    def test_half_overlap_one_third(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[0:2, 0:4] = 1                      # 8 px
        pred = np.zeros((8, 8))
        pred[0:2, 2:6] = 3000.0               # 8 px, 4 shared -> IoU 4/12
        assert np.isclose(eb.metal_iou(pred, gt, 1400.0), 1.0 / 3.0)

    def test_both_empty_is_one(self):
        assert eb.metal_iou(np.zeros((4, 4)), np.zeros((4, 4), dtype=np.uint8), 1400.0) == 1.0

    def test_monotone_under_dilation_toward_gt(self):
        gt = np.zeros((32, 32), dtype=np.uint8)
        gt[8:24, 8:24] = 1
        vals = []
        for grow in (4, 6, 8):                # predictions growing toward gt
            pred = np.zeros((32, 32))
            pred[16 - grow:16 + grow, 16 - grow:16 + grow] = 3000.0
            vals.append(eb.metal_iou(pred, gt, 1400.0))
        assert vals[0] < vals[1] < vals[2]


def test_window_and_pgm(tmp_path):
    hu = np.linspace(-2000, 4000, 64 * 64).reshape(64, 64)
    w = eb.window_hu(hu)
    assert w.min() == -500.0 and w.max() == 1500.0
    out = tmp_path / "x.pgm"
    eb.write_pgm(hu, out)
    blob = out.read_bytes()
    assert blob.startswith(b"P5\n64 64\n255\n")
    assert len(blob) == len(b"P5\n64 64\n255\n") + 64 * 64


def test_rescale_bilinear_id_points():
    img = np.arange(16, dtype=np.float64).reshape(4, 4)
    up = eb.rescale_bilinear(img, 512)
    assert up.shape == (512, 512)
    assert np.isclose(up[0, 0], img[0, 0])
    assert np.isclose(up[-1, -1], img[-1, -1])


class TestEvaluateDirs:
    def _write_corpus(self, root, n=3, size=16):
        rng = np.random.default_rng(0)
        ref_dir = root / "ref"
        pred_dir = root / "pred"
        masks_dir = root / "masks"
        for d in (ref_dir, pred_dir, masks_dir):
            d.mkdir()
        for i in range(n):
            ref = rng.normal(0, 100, size=(size, size)).astype(np.float32)
            ds.write_raw(ref_dir / f"{i:03d}.raw", ref, "<f4")
            ds.write_raw(pred_dir / f"{i:03d}.raw", ref, "<f4")
            ds.write_raw(masks_dir / f"{i:03d}.raw", np.zeros((size, size), np.uint8), "u1")
        return pred_dir, ref_dir, masks_dir

    def test_identical_dirs_cap_scores(self, tmp_path, cfg):
        pred, ref, masks = self._write_corpus(tmp_path)
        rep = eb.evaluate_dirs(pred, ref, cfg, masks_dir=masks, method="self")
        agg = rep.aggregate()
        assert agg["psnr"] == 100.0
        assert np.isclose(agg["ssim"], 1.0)
        assert agg["metal_iou"] == 1.0
        assert agg["n_slices"] == 3

    def test_missing_slices_listed(self, tmp_path, cfg):
        pred, ref, _ = self._write_corpus(tmp_path)
        (pred / "001.raw").unlink()
        rep = eb.evaluate_dirs(pred, ref, cfg, method="gap")
        assert rep.missing == ["001.raw"]
        assert len(rep.rows) == 2

    def test_empty_reference_rejected(self, tmp_path, cfg):
        (tmp_path / "empty").mkdir()
        (tmp_path / "p").mkdir()
        from armar.errors import DataError
        with pytest.raises(DataError):
            eb.evaluate_dirs(tmp_path / "p", tmp_path / "empty", cfg)

    def test_report_files_deterministic(self, tmp_path, cfg):
        pred, ref, masks = self._write_corpus(tmp_path)
        rep = eb.evaluate_dirs(pred, ref, cfg, masks_dir=masks, method="m")
        out1 = tmp_path / "r1"
        out2 = tmp_path / "r2"
        eb.write_report(rep, out1)
        rep2 = eb.evaluate_dirs(pred, ref, cfg, masks_dir=masks, method="m")
        eb.write_report(rep2, out2)
        assert (out1 / "report.tsv").read_bytes() == (out2 / "report.tsv").read_bytes()
        assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()

    def test_rescale_512_flag(self, tmp_path):
        cfg512 = eb.MetricConfig(rescale_512=True)
        pred, ref, _ = self._write_corpus(tmp_path)
        rep = eb.evaluate_dirs(pred, ref, cfg512, method="up")
        assert rep.aggregate()["psnr"] == 100.0     # identical pairs stay identical at 512

    def test_comparison_table_rows(self, tmp_path, cfg):
        pred, ref, masks = self._write_corpus(tmp_path)
        rep = eb.evaluate_dirs(pred, ref, cfg, masks_dir=masks, method="ours")
        aggs = [dict(rep.aggregate(), method=name) for name in ("input", "li", "ours")]
        eb.write_comparison(aggs, tmp_path / "cmp.tsv")
        lines = (tmp_path / "cmp.tsv").read_text().strip().splitlines()
        assert lines[0].startswith("method\t")
        assert [ln.split("\t")[0] for ln in lines[1:]] == ["input", "li", "ours"]
