import numpy as np
import pytest
import torch

from dynsplat.config import LossWeights
from dynsplat.core import Camera, Gaussian3D, quat_from_axis_angle, quat_rotate
from dynsplat.losses import (NeighborGraph, bilinear_sample, canonicalize_hemisphere,
                             coarse_isometry_loss, dense_isometry_loss, depth_loss,
                             photometric_loss, reprojection_loss, rigidity_loss, ssim,
                             ssim_loss, total_loss, tracking_loss, tv_loss)

from gradcheck import fd_gradient, max_rel_error


def naive_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed SSIM oracle: explicit double loop over valid window positions."""
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w, c = a.shape
    half = 5
    coords = np.arange(11) - 5.0
    g = np.exp(-(coords**2) / (2 * 1.5**2))
    g /= g.sum()
    win = np.outer(g, g)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for ch in range(c):
        for i in range(half, h - half):
            for j in range(half, w - half):
                wa = a[i - half:i + half + 1, j - half:j + half + 1, ch]
                wb = b[i - half:i + half + 1, j - half:j + half + 1, ch]
                mx, my = (win * wa).sum(), (win * wb).sum()
                sxx = (win * wa * wa).sum() - mx * mx
                syy = (win * wb * wb).sum() - my * my
                sxy = (win * wa * wb).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * sxy + c2))
                            / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return float(np.mean(vals))


class TestSSIM:
    def test_self_similarity_is_one(self):
        x = torch.rand(16, 16, 3, dtype=torch.float64)
        assert abs(ssim(x, x).item() - 1.0) < 1e-9

    def test_checkerboard_anticorrelated(self):
        ys, xs = np.mgrid[0:16, 0:16]
        board = ((xs + ys) % 2).astype(np.float64)
        a = torch.as_tensor(board)
        assert ssim(a, 1.0 - a).item() < 0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(size=(14, 15, 3))
        b = rng.uniform(size=(14, 15, 3))
        got = ssim(torch.as_tensor(a), torch.as_tensor(b)).item()
        assert abs(got - naive_ssim(a, b)) < 1e-8

    def test_too_small_image_rejected(self):
        x = torch.rand(8, 8, dtype=torch.float64)
        with pytest.raises(ValueError):
            ssim(x, x)


class TestPhotometric:
    def test_identical_zero(self):
        x = torch.rand(12, 12, 3, dtype=torch.float64)
        assert photometric_loss(x, x).item() < 1e-9

    def test_constant_offset_l1(self):
        x = torch.rand(12, 12, 3, dtype=torch.float64) * 0.5
        y = x + 0.1
        loss = photometric_loss(x, y, lam_ssim=0.0)
        assert loss.item() == pytest.approx(0.1, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            photometric_loss(torch.rand(12, 12, 3), torch.rand(12, 13, 3))

    def test_gradient_matches_fd(self):
        # 12x12: smallest size admitting the 11x11 SSIM window
        rng = np.random.default_rng(1)
        x = torch.as_tensor(rng.uniform(0.2, 0.8, size=(12, 12, 3)))
        y = torch.as_tensor(rng.uniform(0.2, 0.8, size=(12, 12, 3)))
        xg = x.clone().requires_grad_()
        photometric_loss(xg, y).backward()

        def f(p):
            with torch.no_grad():
                return photometric_loss(p["x"], y)

        num = fd_gradient(f, {"x": x})
        assert max_rel_error(xg.grad.numpy(), num["x"]) < 1e-6


class TestTV:
    def test_constant_zero(self):
        assert tv_loss(torch.full((8, 8, 3), 0.7, dtype=torch.float64)).item() == 0.0

    def test_ramp_closed_form(self):
        w = 10
        ramp = torch.linspace(0, 1, w, dtype=torch.float64).expand(6, w)
        assert tv_loss(ramp).item() == pytest.approx(1.0 / (w - 1), abs=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(2)
        x = torch.as_tensor(rng.uniform(size=(6, 7, 2)))
        xg = x.clone().requires_grad_()
        tv_loss(xg).backward()

        def f(p):
            with torch.no_grad():
                return tv_loss(p["x"])

        num = fd_gradient(f, {"x": x})
        assert max_rel_error(xg.grad.numpy(), num["x"]) < 1e-6

    def test_masked_pairs_only(self):
        g = torch.zeros(4, 4, dtype=torch.float64)
        g[:, 2:] = 5.0  # jump between columns 1 and 2
        validity = torch.ones(4, 4)
        validity[:, 2:] = 0.0
        assert tv_loss(g, validity).item() == 0.0


class TestDepthLoss:
    def test_equal_zero(self):
        d = torch.rand(8, 8, dtype=torch.float64) + 1
        m = torch.ones(8, 8)
        assert depth_loss(d, d, m).item() == 0.0

    def test_constant_offset(self):
        d = torch.rand(8, 8, dtype=torch.float64) + 1
        m = (torch.rand(8, 8) > 0.4)
        assert depth_loss(d + 0.05, d, m).item() == pytest.approx(0.05, abs=1e-12)

    def test_empty_mask_warns(self):
        d = torch.rand(8, 8, dtype=torch.float64)
        with pytest.warns(UserWarning):
            assert depth_loss(d, d, torch.zeros(8, 8)).item() == 0.0

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        d = torch.as_tensor(rng.uniform(1, 2, size=(8, 8)))
        t = torch.as_tensor(rng.uniform(1, 2, size=(8, 8)))
        m = torch.as_tensor((rng.uniform(size=(8, 8)) > 0.3).astype(np.float64))
        dg = d.clone().requires_grad_()
        depth_loss(dg, t, m).backward()

        def f(p):
            with torch.no_grad():
                return depth_loss(p["d"], t, m)

        num = fd_gradient(f, {"d": d})
        assert max_rel_error(dg.grad.numpy(), num["d"]) < 1e-6


class TestTrackingLoss:
    def test_constant_offset_closed_form(self):
        # alpha 1 everywhere, displacement composite of exactly +(2,-1) px
        alpha = torch.ones(16, 16, dtype=torch.float64)
        ref = torch.zeros(16, 16, 2, dtype=torch.float64)
        pred = torch.zeros(16, 16, 2, dtype=torch.float64)
        pred[..., 0], pred[..., 1] = 2.0, -1.0
        q = torch.tensor([[4.5, 7.5], [10.5, 3.5]], dtype=torch.float64)
        target = q + torch.tensor([2.0, -1.0]) + torch.tensor([1.0, 1.0])
        loss, excl = tracking_loss(pred, ref, alpha, q, target)
        assert excl == 0
        assert loss.item() == pytest.approx(2.0, abs=1e-12)

    def test_low_alpha_points_excluded(self):
        alpha = torch.zeros(16, 16, dtype=torch.float64)
        alpha[8:, :] = 1.0
        maps = torch.zeros(16, 16, 2, dtype=torch.float64)
        q = torch.tensor([[4.5, 12.5], [4.5, 2.5]], dtype=torch.float64)
        loss, excl = tracking_loss(maps, maps, alpha, q, q)
        assert excl == 1
        assert loss.item() == 0.0

    def test_all_excluded_warns(self):
        alpha = torch.zeros(16, 16, dtype=torch.float64)
        maps = torch.zeros(16, 16, 2, dtype=torch.float64)
        q = torch.tensor([[4.5, 4.5]], dtype=torch.float64)
        with pytest.warns(UserWarning):
            loss, excl = tracking_loss(maps, maps, alpha, q, q)
        assert excl == 1 and loss.item() == 0.0


class TestReprojectionLoss:
    def test_identity_static(self):
        depth_map = torch.rand(16, 16, dtype=torch.float64) + 1.5
        alpha = torch.ones(16, 16, dtype=torch.float64)
        q = torch.tensor([[5.5, 5.5], [9.5, 10.5]], dtype=torch.float64)
        loss, _ = reprojection_loss(depth_map, alpha, depth_map, q, q)
        assert loss.item() < 1e-12

    def test_corrupted_motion_offset(self):
        depth_map = torch.full((16, 16), 2.0, dtype=torch.float64)
        alpha = torch.ones(16, 16, dtype=torch.float64)
        q = torch.tensor([[5.5, 5.5]], dtype=torch.float64)
        loss, _ = reprojection_loss(depth_map + 0.1, alpha, depth_map, q, q)
        assert loss.item() == pytest.approx(0.1, abs=1e-9)


def two_cluster_scene(rng, n_per=30, separation=1.0, uniform_features=True):
    pos = np.concatenate([
        rng.normal(scale=0.2, size=(n_per, 3)),
        rng.normal(scale=0.2, size=(n_per, 3)) + np.array([separation, 0, 0]),
    ])
    if uniform_features:
        feat = np.tile(np.array([1.0, 0.0]), (2 * n_per, 1))
    else:
        feat = np.zeros((2 * n_per, 2))
        feat[:n_per, 0] = 1.0
        feat[n_per:, 1] = 1.0
    return pos, feat


class TestIsometryLosses:
    def _graph(self, rng, n=60):
        pos, feat = two_cluster_scene(rng, n // 2)
        # 30% coarse sample keeps the closed-form checks well populated
        return pos, NeighborGraph.build(pos, feat, seed=0, coarse_fraction=0.3, dense_k=8)

    def test_rigid_motion_invariance(self):
        rng = np.random.default_rng(4)
        pos, graph = self._graph(rng)
        p = torch.as_tensor(pos)
        for _ in range(50):
            q = quat_from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi))
            t = rng.normal(size=3)
            moved = torch.as_tensor(np.array([quat_rotate(q, x) + t for x in pos]))
            assert coarse_isometry_loss(graph, p, moved).item() < 1e-9
            assert dense_isometry_loss(graph, p, moved).item() < 1e-9

    def test_uniform_scaling_closed_form(self):
        rng = np.random.default_rng(5)
        pos, graph = self._graph(rng)
        p = torch.as_tensor(pos)
        loss = coarse_isometry_loss(graph, p, 2.0 * p).item()
        # independent double loop over the same edges: |2d - d| = d
        src = graph.coarse_src.numpy()
        dst = graph.coarse_dst.numpy()
        w = graph.coarse_w.numpy()
        expected = sum(wi * np.linalg.norm(pos[s] - pos[d])
                       for s, d, wi in zip(src, dst, w)) / graph.n_coarse
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_dense_kernel_weight_value(self):
        pos = np.array([[0.0, 0, 0], [0.01, 0, 0]])
        feat = np.ones((2, 1))
        graph = NeighborGraph.build(pos, feat, coarse_fraction=1.0, dense_k=1)
        np.testing.assert_allclose(graph.dense_w.numpy(), np.exp(-2000 * 1e-4), rtol=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(6)
        pos, graph = self._graph(rng, n=50)
        p = torch.as_tensor(pos)
        moved = torch.as_tensor(pos + rng.normal(scale=0.05, size=pos.shape))
        mg = moved.clone().requires_grad_()
        (coarse_isometry_loss(graph, p, mg) + dense_isometry_loss(graph, p, mg)).backward()

        def f(params):
            with torch.no_grad():
                return (coarse_isometry_loss(graph, p, params["m"])
                        + dense_isometry_loss(graph, p, params["m"]))

        num = fd_gradient(f, {"m": moved})
        assert max_rel_error(mg.grad.numpy(), num["m"]) < 1e-5

    def test_too_small_subset_rejected(self):
        with pytest.raises(ValueError):
            NeighborGraph.build(np.zeros((1, 3)), np.ones((1, 1)))


class TestRigidityLoss:
    def test_constant_rotation_field_zero(self):
        rng = np.random.default_rng(7)
        pos, feat = two_cluster_scene(rng, 25)
        graph = NeighborGraph.build(pos, feat, coarse_fraction=0.3, dense_k=4)
        q = torch.as_tensor(np.tile(quat_from_axis_angle([0, 0, 1], 0.4), (pos.shape[0], 1)))
        assert rigidity_loss(graph, q).item() < 1e-12

    def test_double_cover_canonicalized(self):
        rng = np.random.default_rng(8)
        pos, feat = two_cluster_scene(rng, 25)
        graph = NeighborGraph.build(pos, feat, coarse_fraction=0.3, dense_k=4)
        base = quat_from_axis_angle([0.3, 0.2, 0.9], 1.1)
        quats = np.tile(base, (pos.shape[0], 1))
        quats[::2] *= -1.0  # same rotations, opposite hemisphere
        assert rigidity_loss(graph, torch.as_tensor(quats)).item() < 1e-12

    def test_two_part_boundary_contributes(self):
        rng = np.random.default_rng(9)
        pos, feat = two_cluster_scene(rng, 25, separation=0.5)
        graph = NeighborGraph.build(pos, feat, coarse_fraction=0.5, dense_k=4)
        qa = quat_from_axis_angle([0, 0, 1], np.deg2rad(10))
        qb = quat_from_axis_angle([0, 0, 1], -np.deg2rad(10))
        quats = np.tile(qa, (pos.shape[0], 1))
        quats[25:] = qb
        src, dst = graph.coarse_src.numpy(), graph.coarse_dst.numpy()
        crossing = ((src < 25) != (dst < 25)).sum()
        assert crossing > 0, "test scene must include boundary edges"
        loss = rigidity_loss(graph, torch.as_tensor(quats)).item()
        assert loss > 0
        # intra-part edges contribute nothing: dropping cross edges zeroes it
        intra = torch.as_tensor((src < 25) == (dst < 25))
        qc = canonicalize_hemisphere(torch.as_tensor(quats))
        intra_sum = (graph.coarse_w[intra]
                     * torch.abs(qc[graph.coarse_src[intra]]
                                 - qc[graph.coarse_dst[intra]]).sum(-1)).sum()
        assert intra_sum.item() < 1e-12


class TestTotalLoss:
    def test_all_zero(self):
        z = torch.zeros((), dtype=torch.float64)
        comps = {k: z for k in ("photo", "track", "depth", "reproj",
                                "crs_iso", "dense_iso", "rigid")}
        assert total_loss(comps, LossWeights()).item() == 0.0

    def test_depth_weight_pinned(self):
        comps = {"depth": torch.tensor(0.01, dtype=torch.float64)}
        assert total_loss(comps, LossWeights()).item() == pytest.approx(1.0, abs=1e-12)

    def test_photo_only_when_other_weights_zero(self):
        w = LossWeights(track=0, depth=0, reproj=0, crs_iso=0, dense_iso=0, rigid=0)
        photo = torch.tensor(0.37, dtype=torch.float64)
        comps = {"photo": photo, "track": torch.tensor(5.0), "depth": torch.tensor(5.0)}
        assert total_loss(comps, w).item() == pytest.approx(0.37)

    def test_unknown_component_rejected(self):
        with pytest.raises(ValueError):
            total_loss({"bogus": torch.tensor(1.0)}, LossWeights())


class TestBilinear:
    def test_integer_center_exact(self):
        g = torch.arange(16, dtype=torch.float64).reshape(4, 4)
        pts = torch.tensor([[1.5, 2.5]], dtype=torch.float64)  # pixel (1, 2)
        assert bilinear_sample(g, pts).item() == pytest.approx(9.0)

    def test_midpoint_average(self):
        g = torch.zeros(4, 4, dtype=torch.float64)
        g[1, 1], g[1, 2] = 2.0, 4.0
        pts = torch.tensor([[2.0, 1.5]], dtype=torch.float64)  # between the two
        assert bilinear_sample(g, pts).item() == pytest.approx(3.0)
