# tests/test_core.py
import numpy as np
import pytest

from app.core import (AcquisitionParams, PropertyMap, ScaleRecord, SequenceKind, Volume, scale_to_unit,
                      unscale)


# =============================================================================
# AcquisitionParams
# =============================================================================
def test_sequence_kind_parse_aliases():
    assert SequenceKind.parse("se") is SequenceKind.SPIN_ECHO
    assert SequenceKind.parse("spin-echo") is SequenceKind.SPIN_ECHO
    assert SequenceKind.parse("FLAIR") is SequenceKind.FLAIR
    with pytest.raises(ValueError):
        SequenceKind.parse("gre")


def test_acquisition_params_valid(mprage, spin_echo):
    assert mprage.ti == pytest.approx(0.9)
    assert spin_echo.ti is None
    np.testing.assert_array_equal(spin_echo.as_vector(), [0.08, 4.0, 0.0])


@pytest.mark.parametrize("kwargs", [
    dict(sequence="se", te=0.0, tr=1.0),
    dict(sequence="se", te=2.0, tr=1.0),
    dict(sequence="se", te=0.1, tr=1.0, ti=0.5),
    dict(sequence="flair", te=0.1, tr=9.0),
    dict(sequence="mprage", te=0.003, tr=2.3, ti=2.3),
    dict(sequence="mprage", te=0.003, tr=2.3, ti=-0.1),
])
def test_acquisition_params_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        AcquisitionParams(**kwargs)


def test_spin_echo_rejects_inversion_time():
    with pytest.raises(ValueError, match="inversión"):
        AcquisitionParams("se", te=0.1, tr=1.0, ti=1.0 / 2)


def test_acquisition_params_dict_round_trip(flair):
    assert AcquisitionParams.from_dict(flair.to_dict()) == flair


# =============================================================================
# Volume / PropertyMap
# =============================================================================
def test_volume_layout_is_channel_planar_x_fastest():
    values = np.arange(2 * 3 * 2, dtype=float)
    vol = Volume.from_flat((3, 2, 1), ("a", "b"), values)
    assert vol.data.shape == (2, 1, 2, 3)
    assert vol.data[0, 0, 0, 1] == 1.0
    assert vol.data[0, 0, 1, 0] == 3.0
    assert vol.data[1, 0, 0, 0] == 6.0
    np.testing.assert_array_equal(vol.flat(), values)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_volume_rejects_non_finite(bad):
    values = np.ones(4)
    values[2] = bad
    with pytest.raises(ValueError):
        Volume.from_flat((2, 2, 1), ("s",), values)


def test_volume_rejects_length_mismatch():
    with pytest.raises(ValueError):
        Volume.from_flat((2, 2, 1), ("s",), np.ones(5))
    with pytest.raises(ValueError):
        Volume.from_flat((0, 2, 1), ("s",), np.ones(0))


def test_volume_is_read_only():
    vol = Volume.from_image(np.ones((2, 3)))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0, 0] = 5.0


def test_volume_slice_region_and_channel():
    image = np.arange(20, dtype=float).reshape(4, 5)
    vol = Volume.from_image(image, name="sig")
    sub = vol.slice_region(slice(1, 3), slice(2, 4))
    assert sub.dims == (2, 2, 1)
    np.testing.assert_array_equal(sub.channel("sig")[0], image[2:4, 1:3])


def test_property_map_invariants():
    props = PropertyMap.from_arrays(np.full((2, 2), 0.5), 1.0, 0.1)
    assert props.channel_names == ("PD", "T1", "T2")
    assert props.dims == (2, 2, 1)
    with pytest.raises(ValueError):
        PropertyMap.from_arrays(np.full((2, 2), -0.1), 1.0, 0.1)
    with pytest.raises(ValueError):
        PropertyMap.from_arrays(np.ones((2, 2)), 0.0, 0.1)


# =============================================================================
# Escalamiento
# =============================================================================
def test_scale_constant_image_maps_to_one():
    scaled, record = scale_to_unit(Volume.from_image(np.full((4, 4), 3.0)))
    assert record.p == 3.0
    np.testing.assert_array_equal(scaled.flat(), 1.0)


def test_scale_zero_maps_to_minus_one():
    image = np.linspace(0.0, 10.0, 16).reshape(4, 4)
    scaled, _ = scale_to_unit(Volume.from_image(image))
    assert scaled.flat()[0] == -1.0


def test_scale_all_zero_is_degenerate():
    with pytest.raises(ValueError, match="degenerate intensity range"):
        scale_to_unit(Volume.from_image(np.zeros((3, 3))))


def test_scale_long_tailed_matches_sorted_percentile(rng):
    values = rng.lognormal(mean=0.0, sigma=1.5, size=1000)
    scaled, record = scale_to_unit(Volume.from_image(values.reshape(25, 40)), 0.995)

    # percentil por interpolación lineal sobre la muestra ordenada
    ordered = np.sort(values)
    h = (values.size - 1) * 0.995
    lo = int(np.floor(h))
    expected_p = ordered[lo] + (h - lo) * (ordered[lo + 1] - ordered[lo])
    assert record.p == pytest.approx(expected_p, rel=1e-12)

    out = scaled.flat()
    assert out.max() == 1.0
    assert np.count_nonzero(out == 1.0) >= 5
    assert np.all(np.diff(out[np.argsort(values, kind="stable")]) >= 0)


def test_unscale_examples():
    record = ScaleRecord(0.995, 10.0)
    out = unscale(Volume.from_image(np.array([[-1.0, 1.0]])), record)
    np.testing.assert_array_equal(out.flat(), [0.0, 10.0])


def test_unscale_round_trip_below_cut(rng):
    values = rng.uniform(0.0, 100.0, size=(20, 20))
    vol = Volume.from_image(values)
    scaled, record = scale_to_unit(vol)
    restored = unscale(scaled, record).flat()
    below = vol.flat() < record.p
    np.testing.assert_allclose(restored[below], vol.flat()[below], rtol=1e-6)


def test_unscale_rejects_out_of_range_and_bad_record():
    with pytest.raises(ValueError):
        unscale(Volume.from_image(np.array([[1.5]])), ScaleRecord(0.995, 1.0))
    with pytest.raises(ValueError):
        unscale(Volume.from_image(np.array([[0.5]])), ScaleRecord(0.995, 0.0))
    with pytest.raises(ValueError):
        unscale(Volume.from_image(np.array([[0.5]])), {"p": 1.0})
