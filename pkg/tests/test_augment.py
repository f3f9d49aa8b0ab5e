import numpy as np
import pytest
from scipy import ndimage

from oracles import central_gradient_magnitude, flood_oracle, random_instance
from pucare.augment import (
    AugmentConfig,
    augment_sample,
    build_augmented_set,
    gradient_magnitude,
    reflect_pair,
    rotate_pair,
    rotation_angle,
    watershed_enhance,
    watershed_markers,
    watershed_segment,
)
from pucare.data_io import Dataset, Sample, SyntheticSpec, generate_synthetic
from pucare.errors import DataError, ParameterError, SkipAugmentation

FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool)


def disk(size, radius, centre=None):
    cy, cx = centre if centre is not None else ((size - 1) / 2, (size - 1) / 2)
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2).astype(np.uint8)


class TestRotate:
    def test_zero_is_identity(self):
        img = np.random.default_rng(0).random((5, 6, 3))
        mask = (img[..., 0] > 0.5).astype(np.uint8)
        out_img, out_mask = rotate_pair(img, mask, 0.0)
        np.testing.assert_array_equal(out_img, img)
        np.testing.assert_array_equal(out_mask, mask)

    def test_90_on_2x2(self):
        img = np.array([[1.0, 2.0], [3.0, 4.0]])
        mask = np.array([[1, 0], [0, 0]], np.uint8)
        out_img, out_mask = rotate_pair(img, mask, 90.0)
        # counter-clockwise: the top-right value moves to the top-left
        np.testing.assert_array_equal(out_img, [[2.0, 4.0], [1.0, 3.0]])
        np.testing.assert_array_equal(out_mask, [[0, 0], [1, 0]])

    @pytest.mark.parametrize("angle", [90.0, -90.0])
    def test_quarter_turn_round_trip(self, angle):
        img = np.random.default_rng(1).random((8, 8, 3))
        mask = (img[..., 1] > 0.5).astype(np.uint8)
        a, m = rotate_pair(img, mask, angle)
        b, n = rotate_pair(a, m, -angle)
        np.testing.assert_array_equal(b, img)
        np.testing.assert_array_equal(n, mask)

    @pytest.mark.parametrize("angle", [-90, -63.5, -30, -7, 12, 45, 71.2, 90])
    def test_centred_wound_area(self, angle):
        mask = disk(64, 12)
        _, out = rotate_pair(np.zeros((64, 64, 3)), mask, angle)
        assert set(np.unique(out)) <= {0, 1}
        assert abs(int(out.sum()) - int(mask.sum())) <= 0.15 * mask.sum()

    def test_fill_value(self):
        out_img, out_mask = rotate_pair(np.ones((9, 9, 3)), np.ones((9, 9), np.uint8), 45.0, fill_value=0.25)
        assert out_img[0, 0, 0] == 0.25 and out_mask[0, 0] == 0

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            rotate_pair(np.zeros((4, 4)), np.zeros((4, 4), np.uint8), 91.0)

    def test_same_map_for_image_and_mask(self):
        # encode source coordinates in the image; bilinear reproduces them exactly
        rng = np.random.default_rng(2)
        h, w = 21, 17
        grid = np.stack(np.mgrid[0:h, 0:w], axis=-1).astype(float)
        img = np.concatenate([grid, np.zeros((h, w, 1))], axis=-1)
        mask = (rng.random((h, w)) > 0.5).astype(np.uint8)
        for angle in rng.uniform(-90, 90, 12):
            out_img, out_mask = rotate_pair(img, mask, float(angle), fill_value=-1.0)
            inside = out_img[..., 0] >= 0
            r = np.floor(out_img[..., 0] + 0.5).astype(int)
            c = np.floor(out_img[..., 1] + 0.5).astype(int)
            near_tie = (np.abs(np.mod(out_img[..., 0], 1) - 0.5) < 1e-9) | (np.abs(np.mod(out_img[..., 1], 1) - 0.5) < 1e-9)
            check = inside & ~near_tie
            np.testing.assert_array_equal(out_mask[check], mask[r[check], c[check]])
            assert not out_mask[~inside].any()


class TestReflect:
    def test_involution(self):
        img = np.random.default_rng(3).random((4, 5, 3))
        mask = (img[..., 0] > 0.5).astype(np.uint8)
        for axis in "xy":
            a, m = reflect_pair(*reflect_pair(img, mask, axis), axis)
            np.testing.assert_array_equal(a, img)
            np.testing.assert_array_equal(m, mask)

    def test_definition(self):
        img, mask = reflect_pair(np.array([[1.0, 2.0]]), np.array([[1, 0]], np.uint8), "y")
        assert img.tolist() == [[2.0, 1.0]] and mask.tolist() == [[0, 1]]

    def test_x_reverses_rows(self):
        img, _ = reflect_pair(np.array([[1.0], [2.0]]), np.array([[0], [1]], np.uint8), "x")
        assert img.tolist() == [[2.0], [1.0]]

    def test_count_preserved(self):
        mask = (np.random.default_rng(4).random((9, 7)) > 0.3).astype(np.uint8)
        for axis in "xy":
            assert reflect_pair(np.zeros((9, 7)), mask, axis)[1].sum() == mask.sum()

    def test_bad_axis(self):
        with pytest.raises(ParameterError):
            reflect_pair(np.zeros((2, 2)), np.zeros((2, 2)), "z")


class TestWatershed:
    def test_gradient_matches_reference(self):
        g = np.random.default_rng(5).random((7, 9))
        np.testing.assert_allclose(gradient_magnitude(g), central_gradient_magnitude(g), atol=1e-12)

    def test_uniform_equidistant(self):
        h, w = 15, 21
        markers = np.zeros((h, w), np.int64)
        markers[7, 3], markers[7, 17] = 1, 2
        res = watershed_segment(np.full((h, w), 0.4), markers, 0.7)
        yy, xx = np.mgrid[0:h, 0:w]
        d1 = np.abs(yy - 7) + np.abs(xx - 3)
        d2 = np.abs(yy - 7) + np.abs(xx - 17)
        clear = np.abs(d1 - d2) > 1
        np.testing.assert_array_equal(res.labels[clear], np.where(d1 < d2, 1, 2)[clear])
        assert (np.abs(d1 - d2)[res.boundary] <= 1).all()
        assert res.boundary[:, 10].all()

    def test_ridge(self):
        h, w = 24, 32
        gray = np.zeros((h, w))
        gray[:, 16] = 1.0
        markers = np.zeros((h, w), np.int64)
        markers[12, 5], markers[12, 27] = 1, 2
        res = watershed_segment(gray, markers, 0.7)
        cols = np.nonzero(res.boundary)[1]
        assert cols.size >= h
        assert np.abs(cols - 16).max() <= 1
        assert (res.labels[:, :15] == 1).all() and (res.labels[:, 18:] == 2).all()

    def test_partition_and_connectivity(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            gray, _, threshold = random_instance(rng)
            markers = np.zeros(gray.shape, np.int64)
            cells = rng.choice(gray.size, size=3, replace=False)
            markers.ravel()[cells] = [1, 2, 3]
            res = watershed_segment(gray, markers, threshold)
            assert ((res.labels > 0) ^ res.boundary).all()
            for label in (1, 2, 3):
                _, n = ndimage.label(res.labels == label, structure=FOUR)
                assert n == 1

    def test_matches_flood_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            gray, markers, threshold = random_instance(rng, size=int(rng.integers(4, 17)))
            res = watershed_segment(gray, markers, threshold)
            labels, boundary = flood_oracle(gray, markers, threshold)
            np.testing.assert_array_equal(res.labels, labels)
            np.testing.assert_array_equal(res.boundary, boundary)

    def test_needs_two_labels(self):
        markers = np.zeros((5, 5), np.int64)
        markers[1, 1] = markers[3, 3] = 1
        with pytest.raises(ParameterError):
            watershed_segment(np.zeros((5, 5)), markers)

    def test_threshold_range(self):
        markers = np.zeros((5, 5), np.int64)
        markers[0, 0], markers[4, 4] = 1, 2
        with pytest.raises(ParameterError):
            watershed_segment(np.zeros((5, 5)), markers, 1.0)


class TestWatershedEnhance:
    def setup_method(self):
        self.mask = disk(40, 9)
        self.img = np.where(self.mask[..., None], [0.8, 0.2, 0.2], [0.9, 0.75, 0.65]).astype(float)

    def test_contract(self):
        out, mask = watershed_enhance(self.img, self.mask)
        assert out.shape == self.img.shape
        np.testing.assert_array_equal(mask, self.mask)
        changed = (out != self.img).any(axis=-1)
        np.testing.assert_array_equal(out[~changed], self.img[~changed])
        np.testing.assert_allclose(out[changed], self.img[changed] * 0.5)

    def test_closed_ring(self):
        out, _ = watershed_enhance(self.img, self.mask)
        ring = (out != self.img).any(axis=-1)
        _, pieces = ndimage.label(~ring, structure=FOUR)
        assert pieces == 2  # inside and outside, separated everywhere
        # one pixel wide: removing the ring interior leaves nothing behind
        assert not ndimage.binary_erosion(ring, structure=FOUR).any()
        # and it hugs the wound edge
        edge = self.mask.astype(bool) ^ ndimage.binary_erosion(self.mask.astype(bool))
        dist = ndimage.distance_transform_edt(~edge)
        assert dist[ring].max() <= 1.5

    def test_markers(self):
        m = watershed_markers(self.mask)
        assert set(np.unique(m)) == {0, 1, 2}
        assert (self.mask[m == 1] == 1).all() and (self.mask[m == 2] == 0).all()

    @pytest.mark.parametrize("fill", [0, 1])
    def test_skip_on_trivial_mask(self, fill):
        with pytest.raises(SkipAugmentation):
            watershed_enhance(self.img, np.full((40, 40), fill, np.uint8))


def small_dataset(n=10, size=32, seed=0):
    return generate_synthetic(SyntheticSpec(n=n, domain="source", size=size, seed=seed))


class TestBuildAugmentedSet:
    def test_recipe_count_and_determinism(self):
        ds = small_dataset()
        cfg = AugmentConfig(seed=3)
        a, b = build_augmented_set(ds, cfg), build_augmented_set(ds, cfg)
        assert len(a) == 60
        assert a.ids == b.ids
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()
        assert a.meta == b.meta

    def test_closure(self):
        out = build_augmented_set(small_dataset(), AugmentConfig(seed=4))
        for s in out:
            assert set(np.unique(s.mask)) <= {0, 1}
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_provenance(self):
        out = build_augmented_set(small_dataset(n=2), AugmentConfig(seed=5))
        prov = out.meta["augmentation"]["provenance"]
        assert set(prov) == set(out.ids)
        assert all(p["parent"] in out.ids for p in prov.values())

    def test_angles_do_not_depend_on_neighbours(self):
        ds = small_dataset(n=6)
        cfg = AugmentConfig(seed=6, watershed=False)
        full = build_augmented_set(ds, cfg)
        alone = build_augmented_set(ds.subset([ds.ids[3]]), cfg)
        by_id = {s.id: s for s in full}
        for s in alone:
            np.testing.assert_array_equal(s.image, by_id[s.id].image)

    def test_seed_changes_angles(self):
        cfg1, cfg2 = AugmentConfig(seed=1), AugmentConfig(seed=2)
        assert rotation_angle(cfg1, "a", 0) != rotation_angle(cfg2, "a", 0)
        assert -90 <= rotation_angle(cfg1, "a", 0) <= 90

    def test_watershed_skipped_for_empty_mask(self):
        s = Sample("blank", np.zeros((16, 16, 3)), np.zeros((16, 16), np.uint8))
        assert len(augment_sample(s, AugmentConfig())) == 5

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            build_augmented_set(Dataset([]), AugmentConfig())

    def test_config_validation(self):
        with pytest.raises(ParameterError):
            AugmentConfig(rotation_range_deg=(-100.0, 0.0))
        with pytest.raises(ParameterError):
            AugmentConfig(watershed_threshold=0.0)
