import numpy as np
import pytest

from fedseg.data import (
    AugmentConfig,
    ClientSpec,
    CohortSpec,
    Volume,
    augment,
    client_signatures,
    desk_cohort,
    generate_phantom,
    partition_noniid,
    preprocess,
    rescale_intensity,
    resize,
    scaled_client_counts,
    split_counts,
    tiny_cohort,
    z_normalize,
)


def make_spec(**kw):
    base = dict(
        client_id=0,
        name="site0",
        sample_count=4,
        prevalence=(1.0, 1.0, 1.0),
        mean_radius=5.0,
        signature_shift=0.1,
        noise=0.03,
        seed=42,
    )
    base.update(kw)
    return ClientSpec(**base)


class TestPhantom:
    def test_bit_identical_for_same_identity(self):
        a = generate_phantom(make_spec(), 3, 24, global_seed=7)
        b = generate_phantom(make_spec(), 3, 24, global_seed=7)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.label, b.label)

    def test_different_index_differs(self):
        a = generate_phantom(make_spec(), 0, 24)
        b = generate_phantom(make_spec(), 1, 24)
        assert not np.array_equal(a.image, b.image)

    def test_zero_radius_zero_prevalence_all_background(self):
        spec = make_spec(mean_radius=0.0, prevalence=(0.0, 0.0, 0.0))
        v = generate_phantom(spec, 0, 24)
        assert np.array_equal(v.label, np.zeros_like(v.label))

    def test_radius_too_large_rejected(self):
        with pytest.raises(ValueError, match="too large"):
            generate_phantom(make_spec(mean_radius=20.0), 0, 24)

    def test_label_values_subset_and_image_finite(self):
        for idx in range(6):
            v = generate_phantom(make_spec(), idx, 24)
            assert set(np.unique(v.label)) <= {0, 1, 2, 3}
            assert np.isfinite(v.image).all()

    def test_nested_shells_line_convex(self):
        # each threshold region {label >= c} must meet every axis line in a
        # single contiguous run: inner shells cannot poke outside outer ones
        found = 0
        for idx in range(12):
            v = generate_phantom(make_spec(mean_radius=7.0), idx, 28)
            if (v.label == 3).sum() == 0:
                continue
            found += 1
            for c in (1, 2, 3):
                region = v.label >= c
                assert region.any()
                for axis in range(3):
                    moved = np.moveaxis(region, axis, -1)
                    for line in moved.reshape(-1, region.shape[axis]):
                        idxs = np.flatnonzero(line)
                        if idxs.size:
                            assert idxs[-1] - idxs[0] + 1 == idxs.size
        assert found >= 8

    def test_presence_is_hierarchical(self):
        spec = make_spec(prevalence=(1.0, 0.5, 0.5))
        seen = set()
        for idx in range(40):
            v = generate_phantom(spec, idx, 20)
            classes = set(np.unique(v.label))
            seen.add(frozenset(classes))
            if 3 in classes:
                assert 2 in classes
            if 2 in classes:
                assert 1 in classes
        assert frozenset({0, 1}) in seen  # some subjects miss core/enhancing

    def test_single_modality_is_ambiguous_but_joint_is_not(self):
        sig = client_signatures(make_spec(signature_shift=0.0))
        for m in range(4):
            vals = np.round(sig[m], 6)
            assert len(np.unique(vals)) < 4  # each single modality confuses classes
        cols = [tuple(np.round(sig[:, c], 6)) for c in range(4)]
        assert len(set(cols)) == 4  # jointly distinct

    def test_signature_patterns_differ_per_client(self):
        a = client_signatures(make_spec(client_id=0, seed=100))
        b = client_signatures(make_spec(client_id=1, seed=101))
        assert not np.array_equal(a, b)


class TestRescale:
    def test_arithmetic(self):
        img = np.array([[2.0, 4.0, 6.0]]).reshape(1, 1, 1, 3)
        out = rescale_intensity(img)
        assert np.array_equal(out.ravel(), [0.0, 0.5, 1.0])

    def test_idempotent_on_unit_range(self):
        rng = np.random.default_rng(0)
        img = rng.random((2, 3, 3, 3))
        img[0, 0, 0, 0], img[0, -1, -1, -1] = 0.0, 1.0
        img[1, 0, 0, 0], img[1, -1, -1, -1] = 0.0, 1.0
        assert np.allclose(rescale_intensity(img), img, atol=1e-15)

    def test_constant_channel_maps_to_zeros(self):
        img = np.full((1, 2, 2, 2), 5.0)
        assert np.array_equal(rescale_intensity(img), np.zeros_like(img))


class TestZNormalize:
    def test_mean_zero_unit_variance(self):
        rng = np.random.default_rng(1)
        img = rng.random((4, 4, 4, 4)) * 3 + 1
        out = z_normalize(img)
        for m in range(4):
            assert abs(out[m].mean()) < 1e-10
            assert abs(out[m].var() - 1.0) < 1e-10

    def test_affine_invariance(self):
        rng = np.random.default_rng(2)
        img = rng.random((1, 3, 3, 3))
        shifted = 2.5 * img + 7.0
        assert np.allclose(z_normalize(img), z_normalize(shifted), atol=1e-12)

    def test_two_point_case_population_std(self):
        img = np.array([1.0, 3.0]).reshape(1, 1, 1, 2)
        out = z_normalize(img)
        assert np.allclose(out.ravel(), [-1.0, 1.0], atol=1e-15)


class TestResize:
    def test_identity_is_bit_identical(self):
        v = generate_phantom(make_spec(), 0, 16)
        out = resize(v, 16)
        assert np.array_equal(out.image, v.image)
        assert np.array_equal(out.label, v.label)
        assert out.image is not v.image

    def test_constant_image_stays_constant(self):
        v = Volume(np.full((4, 8, 8, 8), 3.25), np.zeros((8, 8, 8), dtype=np.int64), "s")
        out = resize(v, 12)
        assert np.allclose(out.image, 3.25, atol=1e-12)

    def test_upscale_matches_hand_computed_trilinear_weights(self):
        # 2^3 ramp, corner-aligned: target coord j maps to j/(T-1) in [0,1]
        src = np.arange(8.0).reshape(2, 2, 2)
        v = Volume(src[None], np.zeros((2, 2, 2), dtype=np.int64), "s")
        out = resize(v, 4).image[0]
        expected = np.empty((4, 4, 4))
        for i in range(4):
            for j in range(4):
                for k in range(4):
                    x, y, z = i / 3.0, j / 3.0, k / 3.0
                    acc = 0.0
                    for di in (0, 1):
                        for dj in (0, 1):
                            for dk in (0, 1):
                                wgt = (
                                    (x if di else 1 - x)
                                    * (y if dj else 1 - y)
                                    * (z if dk else 1 - z)
                                )
                                acc += wgt * src[di, dj, dk]
                    expected[i, j, k] = acc
        assert np.abs(out - expected).max() < 1e-12

    def test_labels_never_gain_classes(self):
        v = generate_phantom(make_spec(mean_radius=4.0, prevalence=(1.0, 1.0, 0.0)), 0, 20)
        before = set(np.unique(v.label))
        for target in (11, 16, 29):
            after = set(np.unique(resize(v, target).label))
            assert after <= before

    def test_zero_target_rejected(self):
        v = generate_phantom(make_spec(), 0, 16)
        with pytest.raises(ValueError, match="positive"):
            resize(v, 0)


class TestPreprocess:
    def test_runs_exactly_once(self):
        v = generate_phantom(make_spec(), 0, 16)
        p = preprocess(v, 16)
        assert p.preprocessed
        with pytest.raises(ValueError, match="already preprocessed"):
            preprocess(p, 16)

    def test_output_is_normalized(self):
        p = preprocess(generate_phantom(make_spec(), 1, 16), 16)
        for m in range(4):
            assert abs(p.image[m].mean()) < 1e-9


def _search_seed(volume, predicate, limit=3000):
    for s in range(limit):
        out = augment(volume, np.random.default_rng(s))
        if predicate(volume, out):
            return s, out
    raise AssertionError("no seed found for requested augmentation pattern")


class TestAugment:
    @pytest.fixture()
    def vol(self):
        return preprocess(generate_phantom(make_spec(), 2, 16), 16)

    def test_noop_draws_give_identical_volume(self, vol):
        s, out = _search_seed(
            vol,
            lambda v, o: np.array_equal(v.image, o.image)
            and np.array_equal(v.label, o.label),
        )
        again = augment(vol, np.random.default_rng(s))
        assert np.array_equal(again.image, vol.image)

    def test_pure_flip_applied_twice_is_identity(self, vol):
        def is_pure_flip(v, o):
            if np.array_equal(o.label, v.label):
                return False
            for axes in ((0,), (1,), (2,), (0, 1), (0, 2), (1, 2), (0, 1, 2)):
                if np.array_equal(o.label, np.flip(v.label, axes)) and np.array_equal(
                    o.image, np.flip(v.image, tuple(a + 1 for a in axes))
                ):
                    return True
            return False

        s, once = _search_seed(vol, is_pure_flip)
        twice = augment(once, np.random.default_rng(s))
        assert np.array_equal(twice.image, vol.image)
        assert np.array_equal(twice.label, vol.label)

    def test_image_and_label_share_spatial_transform(self, vol):
        # encode the label into a spare image channel; any consistent
        # spatial transform keeps them voxelwise equal
        img = vol.image.copy()
        img[0] = vol.label.astype(np.float64)
        probe = Volume(img, vol.label.copy(), "probe", preprocessed=True)
        cfg = AugmentConfig(noise_p=0.0, bias_p=0.0)
        for s in range(8):
            out = augment(probe, np.random.default_rng(s), cfg)
            nearest_channel = np.rint(out.image[0]).astype(np.int64)
            mismatch = (nearest_channel != out.label).mean()
            assert mismatch < 0.02  # interpolation-boundary voxels only

    def test_elastic_optional_path_runs(self, vol):
        cfg = AugmentConfig(elastic=True)
        out = augment(vol, np.random.default_rng(5), cfg)
        assert set(np.unique(out.label)) <= {0, 1, 2, 3}
        assert np.isfinite(out.image).all()


class TestPartition:
    def test_desk_counts_scaled_from_reference(self):
        counts, clamped = scaled_client_counts()
        assert counts == [50, 40, 7, 4, 4, 50, 15, 10, 4]
        assert clamped == [4, 8]

    def test_split_fractions(self):
        assert split_counts(50) == (36, 7, 7)
        assert split_counts(4) == (2, 1, 1)

    def test_partition_is_deterministic_and_disjoint(self):
        cohort = tiny_cohort()
        a = partition_noniid(cohort, 9)
        b = partition_noniid(cohort, 9)
        for ca, cb in zip(a, b):
            for va, vb in zip(ca.train + ca.val + ca.test, cb.train + cb.val + cb.test):
                assert va.subject_id == vb.subject_id
                assert np.array_equal(va.image, vb.image)
            ids = [v.subject_id for v in ca.train + ca.val + ca.test]
            assert len(ids) == len(set(ids))
            assert ca.n_k == len(ca.train)

    def test_weights_sum_to_one(self):
        datasets = partition_noniid(tiny_cohort(), 3)
        total = sum(d.n_k for d in datasets)
        weights = [d.n_k / total for d in datasets]
        assert abs(sum(weights) - 1.0) < 1e-12

    def test_same_spec_different_seed_gives_different_subjects(self):
        cohort = tiny_cohort()
        a = partition_noniid(cohort, 1)
        b = partition_noniid(cohort, 2)
        assert not np.array_equal(a[0].train[0].image, b[0].train[0].image)

    def test_desk_cohort_validates_and_warns_on_clamp(self):
        with pytest.warns(UserWarning, match="clamped"):
            cohort = desk_cohort()
        cohort.validate()
        assert len(cohort.clients) == 9
        assert [c.sample_count for c in cohort.clients] == [50, 40, 7, 4, 4, 50, 15, 10, 4]

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError, match="sample_count"):
            CohortSpec(16, (make_spec(sample_count=0),)).validate()
        with pytest.raises(ValueError, match="prevalence"):
            CohortSpec(16, (make_spec(prevalence=(1.0, -0.1, 0.0)),)).validate()
