import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from unregscore import data
from unregscore.data import ClusterSpec, LabeledImage, PatchGrid, SynthSpec
from unregscore.errors import ConfigError, DataError, ShapeError


def small_spec(n=50, seed=0, size=32):
    return SynthSpec(image_size=size, clusters=data.default_clusters(n), seed=seed)


class TestGenerate:
    def test_same_seed_bit_identical(self):
        a = data.generate_synthetic(small_spec(seed=3))
        b = data.generate_synthetic(small_spec(seed=3))
        assert len(a) == len(b) == 100
        assert all(x.pixels.tobytes() == y.pixels.tobytes() for x, y in zip(a, b))

    def test_different_seed_differs(self):
        a = data.generate_synthetic(small_spec(seed=3))
        b = data.generate_synthetic(small_spec(seed=4))
        assert not np.array_equal(a[0].pixels, b[0].pixels)

    def test_zero_jitter_cluster_is_constant(self):
        cs = ClusterSpec(n_samples=10, level=0.3, frequencies=((1.0, 0.0),), amplitude=0.1)
        imgs = data.generate_synthetic(SynthSpec(image_size=16, clusters=(cs,)))
        assert all(np.array_equal(imgs[0].pixels, im.pixels) for im in imgs)

    def test_pixels_in_unit_range_and_normal(self):
        for im in data.generate_synthetic(small_spec()):
            assert im.pixels.min() >= 0.0 and im.pixels.max() <= 1.0
            assert im.label == data.NORMAL and im.mask is None

    def test_complexity_variance_ratio(self):
        imgs = data.generate_synthetic(small_spec(n=1000, seed=1))
        var = []
        for k in (0, 1):
            stack = np.stack([im.pixels for im in imgs if im.cluster_id == k])
            var.append(stack.var(axis=0).mean())
        assert var[1] >= 10 * var[0]

    def test_order_independent_of_generation_order(self):
        spec = small_spec(n=5, seed=9)
        imgs = data.generate_synthetic(spec)
        alone = data.render_cluster_image(spec.clusters[1], 32, data._image_rng(9, 1, 3))
        np.testing.assert_array_equal(imgs[5 + 3].pixels, alone)

    def test_rgb_switch(self):
        spec = SynthSpec(image_size=8, clusters=data.default_clusters(2), rgb=True)
        assert data.generate_synthetic(spec)[0].pixels.shape == (3, 8, 8)

    def test_degenerate_spec(self):
        with pytest.raises(ConfigError):
            SynthSpec(clusters=())


class TestErasure:
    def test_constant_image(self):
        img = LabeledImage(np.full((32, 32), 0.2))
        out = data.inject_erasure(img, 4, seed=1)
        assert np.count_nonzero(out.pixels != img.pixels) == 16
        assert out.mask.sum() == 16
        assert out.label == data.ANOMALOUS
        assert np.all(out.pixels[out.mask] == data.ERASE_FILL)

    def test_original_untouched(self):
        img = LabeledImage(np.full((8, 8), 0.2))
        data.inject_erasure(img, 4, seed=0)
        assert np.all(img.pixels == 0.2) and img.mask is None

    def test_block_always_inside(self):
        rng = np.random.default_rng(0)
        img = LabeledImage(np.zeros((32, 32)))
        for _ in range(10_000):
            out = data.inject_erasure(img, 4, rng, fill=1.0)
            rows, cols = np.nonzero(out.mask)
            assert out.mask.sum() == 16
            assert rows.max() - rows.min() == 3 and cols.max() - cols.min() == 3

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31), k=st.integers(1, 8))
    def test_only_masked_pixels_change(self, seed, k):
        rng = np.random.default_rng(seed)
        img = LabeledImage(rng.random((12, 10)))
        out = data.inject_erasure(img, k, seed)
        assert np.array_equal(out.pixels[~out.mask], img.pixels[~out.mask])
        assert out.mask.sum() == k * k

    def test_too_large(self):
        with pytest.raises(ShapeError):
            data.inject_erasure(LabeledImage(np.zeros((3, 3))), 4)


class TestSplit:
    def normals(self, n):
        return [LabeledImage(np.full((4, 4), i / n), cluster_id=i % 2, name=str(i)) for i in range(n)]

    def test_no_contamination(self):
        sp = data.make_split(self.normals(100), rho_train=0.0, n_test=20)
        assert all(im.label == 0 for im in sp.train)

    def test_test_set_balanced_and_paired(self):
        sp = data.make_split(self.normals(100), rho_train=0.01, n_test=20)
        assert len(sp.test) == 40
        assert sum(im.label for im in sp.test) == 20
        for clean, bad in zip(sp.test[::2], sp.test[1::2]):
            assert clean.label == 0 and bad.label == 1
            assert np.array_equal(clean.pixels[~bad.mask], bad.pixels[~bad.mask])

    def test_contamination_count(self):
        sp = data.make_split(self.normals(10_100), rho_train=0.01, n_test=100)
        assert len(sp.train) == 10_000
        assert sum(im.label for im in sp.train) == 100

    def test_reproducible(self):
        a = data.make_split(self.normals(60), rho_train=0.1, seed=5, n_test=10)
        b = data.make_split(self.normals(60), rho_train=0.1, seed=5, n_test=10)
        assert [im.name for im in a.train] == [im.name for im in b.train]
        assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.test, b.test))

    def test_insufficient(self):
        with pytest.raises(DataError):
            data.make_split(self.normals(5), n_test=5)

    def test_bad_rho(self):
        with pytest.raises(ConfigError):
            data.make_split(self.normals(10), rho_train=0.6)


class TestCrops:
    def test_full_crop(self):
        px = np.random.default_rng(0).random((16, 16))
        np.testing.assert_array_equal(data.random_crop(px, 16, 3), px)

    def test_crop_content_matches_window(self):
        px = np.arange(100.0).reshape(10, 10)
        crop = data.random_crop(px, 4, 7)
        r, c = divmod(int(crop[0, 0]), 10)
        np.testing.assert_array_equal(crop, px[r : r + 4, c : c + 4])

    def test_crop_origin_uniform(self):
        px = np.arange(36.0).reshape(6, 6)
        rng = np.random.default_rng(0)
        counts = np.zeros(9)
        for _ in range(100_000):
            v = int(data.random_crop(px, 4, rng)[0, 0])
            counts[(v // 6) * 3 + v % 6] += 1
        assert stats.chisquare(counts).pvalue > 0.01

    def test_crop_too_large(self):
        with pytest.raises(ShapeError):
            data.random_crop(np.zeros((4, 4)), 5)

    def test_sliding_count_large_image_geometry(self):
        grid = PatchGrid(96, 16)
        assert grid.shape(480, 640) == (25, 35)
        assert grid.shape(480, 640)[0] * grid.shape(480, 640)[1] == 875

    def test_sliding_single_patch(self):
        crops = data.sliding_crops(np.zeros((32, 32)), PatchGrid(32, 16))
        assert len(crops) == 1 and crops[0][:2] == (0, 0)

    def test_sliding_row_major_and_content(self):
        px = np.arange(64.0).reshape(8, 8)
        crops = data.sliding_crops(px, PatchGrid(4, 2))
        assert [rc[:2] for rc in crops[:4]] == [(0, 0), (0, 1), (0, 2), (1, 0)]
        np.testing.assert_array_equal(crops[4][2], px[2:6, 2:6])

    @pytest.mark.parametrize("h, w, p, s", [(32, 32, 8, 4), (20, 27, 5, 3), (17, 17, 6, 4)])
    def test_sliding_coverage(self, h, w, p, s):
        grid = PatchGrid(p, s)
        rows, cols = grid.shape(h, w)
        cover = np.zeros((h, w), dtype=int)
        for r, c, _ in data.sliding_crops(np.zeros((h, w)), grid):
            rs, cs = grid.window(r, c)
            cover[rs, cs] += 1
        assert len(data.sliding_crops(np.zeros((h, w)), grid)) == rows * cols
        inner = cover[: (rows - 1) * s + p, : (cols - 1) * s + p]
        assert inner.min() >= 1


class TestPgm:
    def test_round_trip_8bit(self, tmp_path):
        px = np.random.default_rng(0).random((7, 9))
        data.write_image(tmp_path / "a.pgm", px)
        back = data.read_image(tmp_path / "a.pgm")
        assert back.shape == (7, 9)
        assert np.max(np.abs(back - px)) <= 1 / 255

    def test_round_trip_16bit(self, tmp_path):
        px = np.random.default_rng(0).random((5, 4))
        data.write_image(tmp_path / "a.pgm", px, maxval=65535)
        assert np.max(np.abs(data.read_image(tmp_path / "a.pgm") - px)) <= 1 / 65535

    def test_deterministic_bytes(self, tmp_path):
        px = np.linspace(0, 1, 12).reshape(3, 4)
        data.write_image(tmp_path / "a.pgm", px)
        data.write_image(tmp_path / "b.pgm", px)
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()
        assert (tmp_path / "a.pgm").read_bytes()[:11] == b"P5\n4 3\n255\n"

    def test_header_comment(self):
        buf = b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255])
        np.testing.assert_array_equal(data.decode_pgm(buf), [[0.0, 1.0]])

    def test_wrong_magic(self):
        with pytest.raises(DataError, match="offset 0"):
            data.decode_pgm(b"P2\n2 1\n255\n0 255")

    def test_truncated(self):
        with pytest.raises(DataError, match="truncated"):
            data.decode_pgm(b"P5\n2 2\n255\n" + bytes([1, 2, 3]))

    def test_manifest_round_trip(self, tmp_path):
        imgs = data.generate_synthetic(SynthSpec(image_size=8, clusters=data.default_clusters(3)))
        imgs[1] = data.inject_erasure(imgs[1], 2, 0)
        manifest = data.save_images(tmp_path, "train", imgs)
        text = manifest.read_text().splitlines()
        assert text[0] == "path,label,cluster_id"
        assert text[1].startswith("train/000000.pgm,")
        back = data.load_directory(manifest)
        assert [b.label for b in back] == [i.label for i in imgs]
        assert [b.cluster_id for b in back] == [i.cluster_id for i in imgs]
        assert np.array_equal(back[1].mask, imgs[1].mask)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            data.load_directory(tmp_path / "nope.csv")
