import numpy as np
import pytest

from dynsplat.evaluation import extract_tracks, masked_psnr, masked_ssim, tracking_metrics


class TestMaskedPSNR:
    def test_identical_caps(self):
        img = np.random.default_rng(0).uniform(size=(16, 16, 3))
        mask = np.ones((16, 16), bool)
        assert masked_psnr(img, img, mask) == 99.0

    def test_uniform_error_closed_form(self):
        img = np.full((8, 8, 3), 0.4)
        mask = np.random.default_rng(1).uniform(size=(8, 8)) > 0.3
        assert masked_psnr(img + 0.1, img, mask) == pytest.approx(20.0, abs=1e-9)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(12, 12, 3))
        b = rng.uniform(size=(12, 12, 3))
        mask = rng.uniform(size=(12, 12)) > 0.5
        mse = np.mean((a - b)[mask] ** 2)
        assert masked_psnr(a, b, mask) == pytest.approx(10 * np.log10(1 / mse), abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(size=(8, 8)), rng.uniform(size=(8, 8))
        mask = np.ones((8, 8), bool)
        assert masked_psnr(a, b, mask) == masked_psnr(b, a, mask)

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            masked_psnr(np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((8, 8), bool))


class TestMaskedSSIM:
    def test_identical_is_one(self):
        img = np.random.default_rng(4).uniform(size=(16, 16, 3))
        mask = np.ones((16, 16), bool)
        assert masked_ssim(img, img, mask) == pytest.approx(1.0, abs=1e-9)

    def test_mask_restricts_windows(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(size=(22, 22))
        b = a.copy()
        b[:11, :] = rng.uniform(size=(11, 22))  # corrupt the top half
        mask = np.zeros((22, 22), bool)
        mask[16:20, 8:14] = True  # windows centered well inside the clean half
        assert masked_ssim(a, b, mask) == pytest.approx(1.0, abs=1e-9)


class TestExtractTracks:
    def test_query_at_center_selects_it(self):
        t0 = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
        t1 = t0 + np.array([0.1, 0, 0])
        out = extract_tracks([t0, t1], np.array([[1.0, 0, 0]]))
        np.testing.assert_allclose(out[:, 0], [[1, 0, 0], [1.1, 0, 0]])

    def test_identity_gives_constant_tracks(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(50, 3))
        queries = rng.normal(size=(5, 3))
        out = extract_tracks([pts, pts, pts], queries)
        assert np.all(out[0] == out[1]) and np.all(out[1] == out[2])

    def test_tie_breaks_to_lowest_index(self):
        pts = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        out = extract_tracks([pts, pts], np.array([[0.0, 0, 0]]))
        np.testing.assert_allclose(out[0, 0], [1.0, 0, 0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            extract_tracks([np.zeros((0, 3))], np.zeros((1, 3)))


class TestTrackingMetrics:
    def test_exact_match(self):
        gt = np.random.default_rng(7).normal(size=(4, 6, 3))
        epe, (d5, d10) = tracking_metrics(gt, gt)
        assert epe == 0.0 and d5 == 1.0 and d10 == 1.0

    def test_uniform_offset(self):
        gt = np.random.default_rng(8).normal(size=(3, 5, 3))
        off = np.zeros_like(gt)
        off[..., 0] = 0.07
        epe, (d5, d10) = tracking_metrics(gt + off, gt)
        assert epe == pytest.approx(0.07, abs=1e-12)
        assert d5 == 0.0 and d10 == 1.0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(9)
        gt = rng.normal(size=(4, 7, 3))
        pred = gt + rng.normal(scale=0.05, size=gt.shape)
        epe, (d5, d10) = tracking_metrics(pred, gt)
        errs = []
        for t in range(4):
            for k in range(7):
                errs.append(np.sqrt(((pred[t, k] - gt[t, k]) ** 2).sum()))
        assert epe == pytest.approx(np.mean(errs), abs=1e-12)
        assert d5 == pytest.approx(np.mean(np.array(errs) < 0.05), abs=1e-12)
        assert d10 == pytest.approx(np.mean(np.array(errs) < 0.1), abs=1e-12)

    def test_delta_monotone(self):
        rng = np.random.default_rng(10)
        gt = rng.normal(size=(3, 8, 3))
        pred = gt + rng.normal(scale=0.08, size=gt.shape)
        _, deltas = tracking_metrics(pred, gt, thresholds=(0.02, 0.05, 0.1, 0.2))
        assert all(a <= b for a, b in zip(deltas, deltas[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            tracking_metrics(np.zeros((2, 3, 3)), np.zeros((2, 4, 3)))
