import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hail.volume import (
    NormalizationRecord,
    PatchSpec,
    Volume,
    VolumeFormatError,
    check_training_patch_size,
    crop_paired_patch,
    crop_patch,
    decode_volume,
    encode_volume,
    inverse_normalize,
    minmax_normalize,
    random_patch_spec,
    read_volume,
    resample_to_cube,
    write_volume,
)


def random_volume(rng, normalized=None):
    dims = tuple(int(n) for n in rng.integers(1, 7, 3))
    spacing = tuple(float(s) for s in rng.uniform(0.3, 3.0, 3))
    site = "".join(rng.choice(list("ABCxyzé"), size=int(rng.integers(0, 5))))
    if normalized is None:
        normalized = bool(rng.integers(2))
    if normalized:
        lo = float(rng.uniform(-100, 100))
        return Volume(rng.random(dims), spacing, site, NormalizationRecord(lo, lo + float(rng.uniform(1, 50))))
    return Volume(rng.normal(0, 100, dims), spacing, site)


def test_volume_is_read_only_float32():
    v = Volume(np.zeros((2, 3, 4), dtype=np.float64))
    assert v.data.dtype == np.float32 and v.dims == (2, 3, 4)
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_norm_record_requires_unit_range():
    with pytest.raises(ValueError):
        Volume(np.full((2, 2, 2), 1.5), norm=NormalizationRecord(0.0, 1.0))
    with pytest.raises(ValueError):
        NormalizationRecord(1.0, 1.0)


def test_roundtrip_4cube(tmp_path):
    v = Volume(np.random.default_rng(0).random((4, 4, 4)), (1.0, 1.5, 2.0), "A")
    write_volume(v, tmp_path / "v.hvol")
    back = read_volume(tmp_path / "v.hvol")
    assert back == v
    assert back.data.tobytes() == v.data.tobytes()


def test_randomized_roundtrips_are_bit_exact():
    rng = np.random.default_rng(1)
    for _ in range(100):
        v = random_volume(rng)
        buf = encode_volume(v)
        assert encode_volume(decode_volume(buf)) == buf
        assert decode_volume(buf) == v


def test_header_layout_is_little_endian():
    data = np.arange(6, dtype=np.float32).reshape(1, 2, 3) / 5.0
    v = Volume(data, (1.0, 2.0, 3.0), "B", NormalizationRecord(2, 6))
    buf = encode_volume(v)
    assert buf[:4] == b"HVOL"
    assert struct.unpack_from("<I3I3fB", buf, 4) == (1, 1, 2, 3, 1.0, 2.0, 3.0, 1)
    assert struct.unpack_from("<2fH", buf, 33) == (2.0, 6.0, 1)
    assert buf[43:44] == b"B"
    np.testing.assert_array_equal(np.frombuffer(buf[44:], "<f4"), v.data.ravel())


def test_bad_magic():
    with pytest.raises(VolumeFormatError, match="bad magic"):
        decode_volume(b"NOPE" + bytes(40))


def test_unknown_version_rejected():
    buf = bytearray(encode_volume(Volume(np.zeros((1, 1, 1)))))
    buf[4:8] = struct.pack("<I", 7)
    with pytest.raises(VolumeFormatError, match="version"):
        decode_volume(bytes(buf))


def test_truncated_payload_and_header():
    buf = encode_volume(Volume(np.zeros((2, 2, 2))))
    with pytest.raises(VolumeFormatError, match="truncated"):
        decode_volume(buf[:-4])
    with pytest.raises(VolumeFormatError, match="truncated header"):
        decode_volume(buf[:10])
    with pytest.raises(VolumeFormatError, match="mismatch"):
        decode_volume(buf + b"\0\0\0\0")


# -- normalization -------------------------------------------------------------------------
def test_minmax_example():
    v = minmax_normalize(Volume(np.array([2.0, 4.0, 6.0]).reshape(1, 1, 3)))
    np.testing.assert_array_equal(v.data.ravel(), [0.0, 0.5, 1.0])
    assert v.norm == NormalizationRecord(2.0, 6.0)
    np.testing.assert_array_equal(inverse_normalize(v).data.ravel(), [2.0, 4.0, 6.0])


def test_minmax_unit_data_unchanged():
    v = minmax_normalize(Volume(np.array([0.0, 1.0]).reshape(1, 1, 2)))
    np.testing.assert_array_equal(v.data.ravel(), [0.0, 1.0])
    assert v.norm == NormalizationRecord(0.0, 1.0)
    assert inverse_normalize(v).data.tobytes() == v.data.tobytes()


def test_minmax_errors():
    with pytest.raises(ValueError, match="constant"):
        minmax_normalize(Volume(np.ones((2, 2, 2))))
    v = minmax_normalize(Volume(np.arange(8.0).reshape(2, 2, 2)))
    with pytest.raises(ValueError, match="already"):
        minmax_normalize(v)
    with pytest.raises(ValueError):
        inverse_normalize(Volume(np.zeros((1, 1, 1))))


def test_normalize_roundtrip_random():
    rng = np.random.default_rng(2)
    for _ in range(20):
        v = random_volume(rng, normalized=False)
        if v.data.size < 2 or v.data.min() == v.data.max():
            continue
        back = inverse_normalize(minmax_normalize(v))
        scale = max(1.0, float(np.abs(v.data).max()))
        np.testing.assert_allclose(back.data, v.data, atol=1e-5 * scale)


# -- resampling ---------------------------------------------------------------------------
def test_resample_constant_and_identity():
    c = resample_to_cube(Volume(np.full((5, 7, 9), 0.3)), 12)
    assert c.dims == (12, 12, 12)
    np.testing.assert_allclose(c.data, 0.3, atol=1e-7)
    v = Volume(np.random.default_rng(3).random((10, 10, 10)))
    np.testing.assert_allclose(resample_to_cube(v, 10).data, v.data, atol=1e-6)


def test_resample_preserves_linear_ramp():
    z, y, x = np.meshgrid(np.arange(9), np.arange(13), np.arange(17), indexing="ij")
    ramp = 0.01 * z + 0.02 * y + 0.03 * x
    out = resample_to_cube(Volume(ramp, (2.0, 1.0, 0.5)), 16)
    g = np.linspace(0, 1, 16)
    gz, gy, gx = np.meshgrid(8 * g, 12 * g, 16 * g, indexing="ij")
    np.testing.assert_allclose(out.data, 0.01 * gz + 0.02 * gy + 0.03 * gx, atol=1e-4)
    np.testing.assert_allclose(out.spacing, (2.0 * 8 / 15, 12 / 15, 0.5 * 16 / 15), rtol=1e-6)


def test_resample_rejects_small_edge():
    with pytest.raises(ValueError):
        resample_to_cube(Volume(np.zeros((4, 4, 4))), 4)


# -- patches ---------------------------------------------------------------------------------
def indexed_ramp(n=4):
    return Volume(np.arange(n**3, dtype=np.float32).reshape(n, n, n))


def test_full_volume_patch():
    v = indexed_ramp()
    t = crop_patch(v, PatchSpec((0, 0, 0), 4))
    assert t.shape == (1, 1, 4, 4, 4)
    np.testing.assert_array_equal(t.numpy()[0, 0], v.data)


def test_patch_index_arithmetic():
    got = crop_patch(indexed_ramp(), PatchSpec((1, 1, 1), 2)).numpy().ravel()
    expected = [16 * z + 4 * y + x for z in (1, 2) for y in (1, 2) for x in (1, 2)]
    np.testing.assert_array_equal(got, expected)


def test_out_of_bounds_patch():
    with pytest.raises(ValueError):
        crop_patch(indexed_ramp(), PatchSpec((3, 0, 0), 2))
    with pytest.raises(ValueError):
        PatchSpec((-1, 0, 0), 2)


def test_training_patch_size_rule():
    check_training_patch_size(16)
    for bad in (4, 12, 0):
        with pytest.raises(ValueError):
            check_training_patch_size(bad)


def test_paired_patch_composition():
    rng = np.random.default_rng(4)
    a, b = Volume(rng.random((12, 12, 12))), Volume(rng.random((12, 12, 12)))
    for _ in range(10):
        spec = random_patch_spec(a.dims, 8, rng)
        pa, pb = crop_paired_patch(a, b, spec)
        np.testing.assert_array_equal(pa.numpy(), crop_patch(a, spec).numpy())
        np.testing.assert_array_equal(pb.numpy(), crop_patch(b, spec).numpy())
        qb, qa = crop_paired_patch(b, a, spec)
        np.testing.assert_array_equal(qa.numpy(), pa.numpy())
        np.testing.assert_array_equal(qb.numpy(), pb.numpy())
    same = crop_paired_patch(a, a, PatchSpec((2, 2, 2), 8))
    np.testing.assert_array_equal(same[0].numpy(), same[1].numpy())
    with pytest.raises(ValueError):
        crop_paired_patch(a, Volume(np.zeros((12, 12, 10))), PatchSpec((0, 0, 0), 8))


@settings(max_examples=50, deadline=None)
@given(st.tuples(st.integers(8, 20), st.integers(8, 20), st.integers(8, 20)), st.integers(0, 2**31))
def test_random_patch_always_fits(dims, seed):
    spec = random_patch_spec(dims, 8, np.random.default_rng(seed))
    assert spec.fits(dims)
