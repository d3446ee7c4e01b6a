import numpy as np
import pytest

from dartok.gradcheck import central_diff, near_kink, norm_rel_error
from dartok.partition import partition_irregular, partition_regular, uniform_partition
from dartok.resample import (
    read_patch_dump,
    resample_patch,
    resample_patches,
    resample_posembed,
    resize_image,
    sample_grid,
    stitch_regular,
    write_patch_dump,
)


def random_rect(rng, H=8, W=8):
    x0, y0 = rng.uniform(0.0, W / 2), rng.uniform(0.0, H / 2)
    return np.array([x0, x0 + rng.uniform(1.0, W / 2), y0, y0 + rng.uniform(1.0, H / 2)])


def sample_points(rect, p):
    t = (np.arange(p) + 0.5) / p
    x0, x1, y0, y1 = rect
    return np.concatenate([x0 + t * (x1 - x0), y0 + t * (y1 - y0)])


class TestResamplePatch:
    def test_constant_image(self):
        img = np.full((8, 8, 3), 7.0)
        rect = np.array([[0.7, 5.1, 1.2, 6.6]])
        out, vjp = resample_patches(img, rect, 4)
        np.testing.assert_allclose(out, 7.0, rtol=1e-15)
        drect, _ = vjp(np.ones_like(out))
        np.testing.assert_allclose(drect, 0.0, atol=1e-12)

    def test_aligned_block_exact_copy(self, rng):
        img = rng.uniform(size=(12, 12, 3))
        patch = resample_patch(img, [4.0, 8.0, 2.0, 6.0], 4)
        assert np.array_equal(patch, img[2:6, 4:8])

    def test_linear_in_image(self, rng):
        a, b = rng.uniform(size=(2, 8, 8, 3))
        rect = random_rect(rng)
        lhs = resample_patch(2.5 * a - 1.5 * b, rect, 5)
        rhs = 2.5 * resample_patch(a, rect, 5) - 1.5 * resample_patch(b, rect, 5)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_edge_clamp(self, rng):
        img = rng.uniform(size=(6, 6, 1))
        out, _ = sample_grid(img, np.array([[-3.0, 0.2]]), np.array([[2.5]]))
        np.testing.assert_array_equal(out[0, 0, :, 0], [img[2, 0, 0], img[2, 0, 0]])
        out, _ = sample_grid(img, np.array([[9.0]]), np.array([[9.0]]))
        assert out[0, 0, 0, 0] == img[5, 5, 0]

    def test_degenerate_rect(self):
        with pytest.raises(ValueError, match="degenerate rectangle 1"):
            resample_patches(np.zeros((4, 4, 1)), [[0, 1, 0, 1], [2, 2, 0, 1]], 2)

    def test_bad_patch_size(self):
        with pytest.raises(ValueError, match="patch size"):
            resample_patches(np.zeros((4, 4, 1)), [[0, 1, 0, 1]], 0)

    def test_derivatives_against_fd(self, rng):
        checked = 0
        while checked < 100:
            img = rng.uniform(size=(8, 8, 3))
            rect = random_rect(rng)[None]
            if near_kink(sample_points(rect[0], 4), offset=0.5):
                continue
            g = rng.normal(size=(1, 4, 4, 3))
            _, vjp = resample_patches(img, rect, 4)
            drect, dimg = vjp(g)
            f = lambda: np.sum(g * resample_patches(img, rect, 4)[0])
            assert norm_rel_error(drect, central_diff(f, rect)) <= 1e-5
            if checked < 10:
                assert norm_rel_error(dimg, central_diff(f, img)) <= 1e-5
            checked += 1

    def test_skip_image_grad(self, rng):
        _, vjp = resample_patches(rng.uniform(size=(4, 4, 2)), [[0.5, 3, 0.5, 3]], 2)
        assert vjp(np.ones((1, 2, 2, 2)), need_img=False)[1] is None

    def test_rectangular_patch(self, rng):
        out, _ = resample_patches(rng.uniform(size=(8, 8, 1)), [[0, 8, 0, 8]], (2, 4))
        assert out.shape == (1, 2, 4, 1)


class TestResize:
    def test_identity_copies(self, rng):
        img = rng.uniform(size=(5, 7, 3))
        out = resize_image(img, (5, 7))
        assert np.array_equal(out, img) and out is not img

    def test_downsample_by_two_averages_center(self):
        img = np.arange(16.0).reshape(4, 4, 1)
        out = resize_image(img, (2, 2))
        # sample at pixel-space (1, 1) is the mean of the 2x2 block around it
        assert out[0, 0, 0] == pytest.approx(img[:2, :2].mean())


class TestPosEmbed:
    def test_uniform_partition_q1_exact(self, rng):
        pe = rng.normal(size=(4, 4, 5))
        rects = uniform_partition(4, 4, (4, 4)).rects()
        emb, _ = resample_posembed(pe, rects, q=1)
        np.testing.assert_array_equal(emb, pe.reshape(16, 5))

    def test_uniform_partition_q4_is_smoothed(self, rng):
        # with q > 1 the averaged bilinear field is not the cell value itself
        pe = rng.normal(size=(4, 4, 5))
        emb, _ = resample_posembed(pe, uniform_partition(4, 4, (4, 4)).rects(), q=4)
        assert np.abs(emb - pe.reshape(16, 5)).max() > 1e-3

    def test_constant_grid(self):
        pe = np.full((3, 3, 2), 0.25)
        emb, _ = resample_posembed(pe, [[0.1, 2.9, 0.3, 1.7]], q=4)
        np.testing.assert_allclose(emb, 0.25, atol=1e-15)

    def test_ramp_left_half(self):
        pe = np.tile(np.arange(8.0)[None, :, None], (2, 1, 1))
        left, _ = resample_posembed(pe, [[0.0, 4.0, 0.0, 2.0]], q=4)
        whole, _ = resample_posembed(pe, [[0.0, 8.0, 0.0, 2.0]], q=4)
        assert left[0, 0] < whole[0, 0]

    def test_matches_sample_average(self, rng):
        pe = rng.normal(size=(5, 6, 4))
        rects = np.array([[0.3, 4.1, 0.2, 2.2], [1.0, 5.5, 2.5, 4.9]])
        emb, vjp = resample_posembed(pe, rects, q=3)
        samples, inner = resample_patches(pe, rects, 3)
        np.testing.assert_allclose(emb, samples.mean(axis=(1, 2)), atol=1e-14)
        g = rng.normal(size=emb.shape)
        d1 = vjp(g)
        d2 = inner(np.broadcast_to(g[:, None, None, :] / 9, samples.shape))
        np.testing.assert_allclose(d1[0], d2[0], atol=1e-13)
        np.testing.assert_allclose(d1[1], d2[1], atol=1e-13)

    def test_gradients_against_fd(self, rng):
        pe = rng.normal(size=(4, 4, 3))
        rects = np.array([[0.37, 2.71, 0.13, 1.93], [1.21, 3.77, 1.43, 3.59]])
        assert not near_kink(np.concatenate([sample_points(r, 4) for r in rects]), offset=0.5)
        g = rng.normal(size=(2, 3))
        drect, dpe = resample_posembed(pe, rects, 4)[1](g)
        f = lambda: np.sum(g * resample_posembed(pe, rects, 4)[0])
        assert norm_rel_error(drect, central_diff(f, rects)) <= 1e-5
        assert norm_rel_error(dpe, central_diff(f, pe)) <= 1e-5

    def test_shape_checks(self):
        with pytest.raises(ValueError, match="Gy, Gx, D"):
            resample_posembed(np.zeros((4, 4)), [[0, 1, 0, 1]])
        with pytest.raises(ValueError, match="sample count"):
            resample_posembed(np.zeros((4, 4, 1)), [[0, 1, 0, 1]], q=0)


class TestStitch:
    def test_uniform_reproduces_input(self, rng):
        img = rng.uniform(size=(12, 12, 3))
        part = uniform_partition(3, 3, (12, 12), mode="regular")
        patches, _ = resample_patches(img, part.rects(), 4)
        out = stitch_regular(patches, part)
        assert out.shape == (12, 12, 3)
        np.testing.assert_allclose(out, img, atol=1e-6)

    def test_nonuniform_dims_and_content(self, rng):
        img = rng.uniform(size=(16, 16, 3))
        s = rng.uniform(0.1, 1, (4, 4))
        part = partition_regular(s / s.sum(), 2, 4)
        part_px = part.__class__(y=part.y * 4, x=part.x * 4, mode="regular")
        patches, _ = resample_patches(img, part_px.rects(), 3)
        out = stitch_regular(patches, part_px)
        assert out.shape == (6, 12, 3)
        np.testing.assert_array_equal(out[3:6, 6:9], resample_patch(img, part_px.rects()[6], 3))

    def test_irregular_rejected(self, rng):
        s = rng.uniform(0.1, 1, (4, 4))
        part = partition_irregular(s / s.sum(), 2, 2)
        with pytest.raises(ValueError, match="stitching requires regular grid"):
            stitch_regular(np.zeros((4, 2, 2, 3)), part)


class TestPatchDump:
    def test_round_trip(self, tmp_path, rng):
        patches = rng.uniform(size=(6, 4, 4, 3))
        rects = rng.uniform(size=(6, 4))
        write_patch_dump(tmp_path / "p.bin", patches, rects)
        raw = (tmp_path / "p.bin").read_bytes()
        assert raw[:8] == b"DARTPAT1" and len(raw) == 20 + 4 * patches.size
        back, r = read_patch_dump(tmp_path / "p.bin")
        np.testing.assert_array_equal(back, patches.astype(np.float32))
        np.testing.assert_array_equal(r, rects)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"0" * 40)
        with pytest.raises(ValueError, match="DARTPAT1"):
            read_patch_dump(tmp_path / "x.bin")
