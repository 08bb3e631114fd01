"""Volume representation, MVOL I/O, SUV, windowing, and resampling."""

import numpy as np
import pytest
from scipy import ndimage

from petsynth.volume import (
    CT_WINDOW,
    SUV_WINDOW,
    AffineTransform,
    Modality,
    NonFiniteDataError,
    RasterSizeError,
    SidecarError,
    Volume3D,
    Window,
    build_alignment_transform,
    compute_suv,
    denormalize,
    load_volume,
    resample_linear,
    save_volume,
    window_and_normalize,
)


def random_volume(rng, dims=(5, 4, 3), modality=Modality.CT, lo=-100.0, hi=300.0):
    data = rng.uniform(lo, hi, size=dims).astype(np.float32)
    spacing = tuple(rng.uniform(0.5, 4.0, size=3))
    offset = tuple(rng.uniform(-50.0, 50.0, size=3))
    return Volume3D(data, spacing, offset, modality)


class TestVolume3D:
    def test_invariants(self):
        with pytest.raises(ValueError):
            Volume3D(np.zeros((2, 2, 2)), spacing=(0.0, 1.0, 1.0))
        with pytest.raises(ValueError):
            Volume3D(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            Volume3D(np.full((2, 2, 2), 0.5), modality=Modality.MASK)
        with pytest.raises(ValueError):
            Volume3D(np.full((2, 2, 2), 1.5), modality=Modality.NORMALIZED)
        # valid mask and normalized volumes construct fine
        Volume3D(np.ones((2, 2, 2)), modality=Modality.MASK)
        Volume3D(np.full((2, 2, 2), 0.25), modality=Modality.NORMALIZED)

    def test_data_stored_float32(self):
        v = Volume3D(np.arange(8, dtype=np.float64).reshape(2, 2, 2))
        assert v.data.dtype == np.float32


class TestMVolRoundTrip:
    def test_shape_from_sidecar(self, tmp_path):
        data = np.arange(32, dtype=np.float32).reshape(4, 4, 2)
        save_volume(Volume3D(data), tmp_path / "v")
        v = load_volume(tmp_path / "v")
        assert v.dims == (4, 4, 2)

    def test_round_trip_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        for modality in Modality:
            v = random_volume(rng, modality=Modality.CT)
            v = Volume3D(v.data, v.spacing, v.offset, Modality.CT)
            if modality is Modality.MASK:
                v = v.with_data((v.data > 0).astype(np.float32), modality)
            elif modality is Modality.NORMALIZED:
                v = window_and_normalize(v, CT_WINDOW)
            else:
                v = v.with_data(np.abs(v.data), modality) if modality in (
                    Modality.PET_ACTIVITY, Modality.SUV, Modality.PROB) else v
            save_volume(v, tmp_path / "rt")
            back = load_volume(tmp_path / "rt")
            np.testing.assert_array_equal(back.data, v.data)
            assert back.spacing == v.spacing
            assert back.offset == v.offset
            assert back.modality == v.modality

    def test_raster_order_x_fastest(self, tmp_path):
        data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        save_volume(Volume3D(data), tmp_path / "o")
        raw = np.fromfile(tmp_path / "o.mvol.raw", dtype="<f4")
        # x-fastest order: walking the raster increments x, then y, then z
        np.testing.assert_array_equal(raw, data.ravel(order="F"))

    def test_truncated_raster(self, tmp_path):
        save_volume(Volume3D(np.zeros((4, 4, 2), dtype=np.float32)), tmp_path / "t")
        raw = (tmp_path / "t.mvol.raw").read_bytes()
        (tmp_path / "t.mvol.raw").write_bytes(raw[:-4])
        with pytest.raises(RasterSizeError, match="raster size mismatch"):
            load_volume(tmp_path / "t")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_volume(tmp_path / "nope")

    def test_malformed_sidecar(self, tmp_path):
        save_volume(Volume3D(np.zeros((2, 2, 2))), tmp_path / "m")
        (tmp_path / "m.mvol.json").write_text("{not json")
        with pytest.raises(SidecarError):
            load_volume(tmp_path / "m")
        (tmp_path / "m.mvol.json").write_text('{"dims": [2, 2]}')
        with pytest.raises(SidecarError):
            load_volume(tmp_path / "m")

    def test_non_finite_rejected(self, tmp_path):
        data = np.zeros((2, 2, 2), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(NonFiniteDataError):
            save_volume(Volume3D(data), tmp_path / "nan")

    def test_empty_path(self, tmp_path):
        with pytest.raises(ValueError):
            save_volume(Volume3D(np.zeros((2, 2, 2))), "")


class TestComputeSuv:
    def test_direct_substitution(self):
        v = Volume3D(np.full((2, 2, 2), 5.0), modality=Modality.PET_ACTIVITY)
        suv = compute_suv(v, injected_dose_kbq=350_000.0, weight_g=70_000.0)
        np.testing.assert_allclose(suv.data, 1.0)
        assert suv.modality is Modality.SUV
        assert suv.spacing == v.spacing and suv.offset == v.offset

    def test_zero_activity(self):
        v = Volume3D(np.zeros((2, 2, 2)), modality=Modality.PET_ACTIVITY)
        assert compute_suv(v, 1000.0, 500.0).data.max() == 0.0

    def test_linear_in_activity(self):
        rng = np.random.default_rng(1)
        data = rng.uniform(0, 10, (3, 3, 3)).astype(np.float32)
        v1 = Volume3D(data, modality=Modality.PET_ACTIVITY)
        v2 = Volume3D(2 * data, modality=Modality.PET_ACTIVITY)
        s1 = compute_suv(v1, 300_000.0, 60_000.0)
        s2 = compute_suv(v2, 300_000.0, 60_000.0)
        np.testing.assert_allclose(s2.data, 2 * s1.data, rtol=1e-6)
        # inversely linear in the dose
        s3 = compute_suv(v1, 600_000.0, 60_000.0)
        np.testing.assert_allclose(s3.data, 0.5 * s1.data, rtol=1e-6)

    def test_bad_inputs(self):
        v = Volume3D(np.zeros((2, 2, 2)), modality=Modality.PET_ACTIVITY)
        with pytest.raises(ValueError):
            compute_suv(v, 0.0, 70_000.0)
        with pytest.raises(ValueError):
            compute_suv(v, 350_000.0, -1.0)
        with pytest.raises(ValueError):
            compute_suv(Volume3D(np.zeros((2, 2, 2))), 1.0, 1.0)


class TestWindowing:
    def test_ct_examples(self):
        v = Volume3D(np.array([[[300.0, 40.0]]]))
        out = window_and_normalize(v, CT_WINDOW)
        np.testing.assert_allclose(out.data[0, 0], [1.0, 0.5])
        assert out.modality is Modality.NORMALIZED

    def test_suv_clip(self):
        v = Volume3D(np.array([[[25.0]]]), modality=Modality.SUV)
        assert window_and_normalize(v, SUV_WINDOW).data[0, 0, 0] == 1.0

    def test_output_in_unit_interval(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            v = random_volume(rng, lo=-1e4, hi=1e4)
            out = window_and_normalize(v, CT_WINDOW).data
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_idempotent_after_unit_rewindow(self):
        rng = np.random.default_rng(3)
        v = random_volume(rng)
        once = window_and_normalize(v, CT_WINDOW)
        again = window_and_normalize(once, Window(0.0, 1.0))
        np.testing.assert_array_equal(once.data, again.data)

    def test_denormalize_examples(self):
        v = Volume3D(np.array([[[1.0, 0.125]]]), modality=Modality.NORMALIZED)
        out = denormalize(v, SUV_WINDOW)
        np.testing.assert_allclose(out.data[0, 0], [20.0, 2.5])
        assert out.modality is Modality.SUV

    def test_denormalize_rejects_out_of_range(self):
        v = Volume3D(np.array([[[0.5]]]), modality=Modality.PROB)
        denormalize(v, SUV_WINDOW)
        with pytest.raises(ValueError):
            denormalize(Volume3D(np.array([[[1.5]]])), SUV_WINDOW)

    def test_composition_equals_clip(self):
        rng = np.random.default_rng(4)
        v = random_volume(rng, lo=-500, hi=500)
        back = denormalize(window_and_normalize(v, CT_WINDOW), CT_WINDOW, Modality.CT)
        clipped = np.clip(v.data, CT_WINDOW.lo, CT_WINDOW.hi)
        np.testing.assert_allclose(back.data, clipped, atol=1e-4)


class TestAlignmentTransform:
    def test_clinical_scanner_spacings(self):
        a = build_alignment_transform((0.97, 0.97, 4.0), (3.0, 3.0, 4.0), (0, 0, 0))
        np.testing.assert_allclose(np.diag(a.matrix)[:3], [3.0 / 0.97, 3.0 / 0.97, 1.0],
                                   rtol=1e-12)
        np.testing.assert_allclose(a.matrix[:3, 3], 0.0)
        np.testing.assert_allclose(a.matrix[3], [0, 0, 0, 1])

    def test_equal_spacings_identity(self):
        a = build_alignment_transform((1, 1, 1), (1, 1, 1), (0, 0, 0))
        np.testing.assert_allclose(a.matrix, np.eye(4))

    def test_translation_only(self):
        a = build_alignment_transform((2, 2, 2), (2, 2, 2), (5, -3, 2))
        np.testing.assert_allclose(np.diag(a.matrix), [1, 1, 1, 1])
        np.testing.assert_allclose(a.matrix[:3, 3], [5, -3, 2])

    def test_inverse_is_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            s_ct = rng.uniform(0.5, 4.0, 3)
            s_pet = rng.uniform(0.5, 4.0, 3)
            t = rng.uniform(-20, 20, 3)
            a = build_alignment_transform(s_ct, s_pet, t)
            composed = a.matrix @ a.inverse().matrix
            np.testing.assert_allclose(composed, np.eye(4), atol=1e-9)

    def test_non_positive_spacing(self):
        with pytest.raises(ValueError):
            build_alignment_transform((1, 1, 0), (1, 1, 1), (0, 0, 0))

    def test_bad_matrix(self):
        with pytest.raises(ValueError):
            AffineTransform(np.zeros((4, 4)))


class TestResampleLinear:
    def test_identity_exact(self):
        rng = np.random.default_rng(6)
        v = random_volume(rng, dims=(6, 5, 4))
        out = resample_linear(v, AffineTransform.identity(), v.dims)
        np.testing.assert_array_equal(out.data, v.data)

    def test_midpoint(self):
        v = Volume3D(np.array([[[1.0]], [[3.0]]]))  # two voxels along x
        a = AffineTransform.from_scale_translation((1, 1, 1), (0.5, 0, 0))
        out = resample_linear(v, a, (1, 1, 1))
        np.testing.assert_allclose(out.data[0, 0, 0], 2.0)

    def test_outside_gets_pad(self):
        v = Volume3D(np.array([[[2.0, 7.0]]]) + 1.0)
        a = AffineTransform.from_scale_translation((1, 1, 1), (50, 50, 50))
        out = resample_linear(v, a, (2, 2, 2))
        np.testing.assert_allclose(out.data, v.data.min())

    def test_values_bounded_no_overshoot(self):
        rng = np.random.default_rng(7)
        v = random_volume(rng, dims=(8, 7, 5))
        a = AffineTransform.from_scale_translation(rng.uniform(0.3, 2.0, 3),
                                                   rng.uniform(-3, 3, 3))
        out = resample_linear(v, a, (10, 10, 10))
        assert out.data.min() >= v.data.min() - 1e-4
        assert out.data.max() <= v.data.max() + 1e-4

    def test_matches_scipy_map_coordinates(self):
        # independent oracle: scipy's trilinear sampling at interior coordinates
        rng = np.random.default_rng(8)
        v = random_volume(rng, dims=(9, 8, 7))
        scale = rng.uniform(0.4, 0.8, 3)
        trans = rng.uniform(0.2, 1.0, 3)
        a = AffineTransform.from_scale_translation(scale, trans)
        dims = (6, 6, 6)
        out = resample_linear(v, a, dims)
        grid = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), -1)
        coords = a.apply(grid.reshape(-1, 3).astype(float))
        interior = ((coords >= 0) & (coords <= np.array(v.dims) - 1)).all(axis=1)
        oracle = ndimage.map_coordinates(v.data.astype(np.float64), coords.T, order=1)
        np.testing.assert_allclose(out.data.reshape(-1)[interior], oracle[interior],
                                   rtol=2e-5, atol=2e-5)

    def test_singular_transform(self):
        m = np.eye(4)
        m[0, 0] = 0.0
        v = Volume3D(np.zeros((2, 2, 2)))
        with pytest.raises(np.linalg.LinAlgError):
            resample_linear(v, AffineTransform(m), (2, 2, 2))

    def test_bad_target_dims(self):
        v = Volume3D(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            resample_linear(v, AffineTransform.identity(), (0, 2, 2))
