"""3D volumes, the HVOL container, min-max normalization, resampling and patches."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .autodiff import Tensor

MAGIC = b"HVOL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI3I3fB")
_NORM = struct.Struct("<2f")
_U16 = struct.Struct("<H")


class VolumeFormatError(ValueError):
    """Raised when an HVOL file cannot be decoded."""


@dataclass(frozen=True)
class NormalizationRecord:
    """Intensity range of a volume before min-max scaling to [0, 1]."""

    original_min: float
    original_max: float

    def __post_init__(self):
        # persisted as f32
        object.__setattr__(self, "original_min", float(np.float32(self.original_min)))
        object.__setattr__(self, "original_max", float(np.float32(self.original_max)))
        if not self.original_max > self.original_min:
            raise ValueError(
                f"normalization record needs max > min, got ({self.original_min}, {self.original_max})"
            )


@dataclass(frozen=True, eq=False)
class Volume:
    """A z-major float32 image with spacing (mm), site label and optional
    normalization record. The voxel array is read-only."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    site_id: str = ""
    norm: NormalizationRecord | None = None

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, order="C")
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3-D array, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        # spacing is persisted as f32; keep it exactly representable
        object.__setattr__(self, "spacing", tuple(float(np.float32(s)) for s in self.spacing))
        if len(self.spacing) != 3:
            raise ValueError("spacing needs three entries (sz, sy, sx)")
        if self.norm is not None and arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("a volume carrying a normalization record must lie in [0, 1]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, **changes) -> "Volume":
        return replace(self, data=data, **changes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.site_id == other.site_id
            and self.norm == other.norm
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


# -- file format ------------------------------------------------------------
def encode_volume(volume: Volume) -> bytes:
    nz, ny, nx = volume.dims
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, nz, ny, nx, *volume.spacing, int(volume.norm is not None))
    ]
    if volume.norm is not None:
        parts.append(_NORM.pack(volume.norm.original_min, volume.norm.original_max))
    site = volume.site_id.encode("utf-8")
    parts.append(_U16.pack(len(site)) + site)
    parts.append(volume.data.astype("<f4").tobytes())
    return b"".join(parts)


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise VolumeFormatError("bad magic: not an HVOL file")
    if len(buf) < _HEADER.size:
        raise VolumeFormatError("truncated header")
    _, version, nz, ny, nx, sz, sy, sx, flag = _HEADER.unpack_from(buf, 0)
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"unsupported HVOL version {version}")
    if flag not in (0, 1):
        raise VolumeFormatError(f"invalid normalization flag {flag}")
    pos = _HEADER.size
    norm = None
    if flag:
        if len(buf) < pos + _NORM.size:
            raise VolumeFormatError("truncated header")
        lo, hi = _NORM.unpack_from(buf, pos)
        norm = NormalizationRecord(lo, hi)
        pos += _NORM.size
    if len(buf) < pos + _U16.size:
        raise VolumeFormatError("truncated header")
    (n_site,) = _U16.unpack_from(buf, pos)
    pos += _U16.size
    if len(buf) < pos + n_site:
        raise VolumeFormatError("truncated header")
    site = buf[pos : pos + n_site].decode("utf-8")
    pos += n_site
    expected = 4 * nz * ny * nx
    payload = len(buf) - pos
    if payload < expected:
        raise VolumeFormatError(
            f"truncated payload: dims {nz}x{ny}x{nx} need {expected} bytes, found {payload}"
        )
    if payload > expected:
        raise VolumeFormatError(
            f"dims/length mismatch: dims {nz}x{ny}x{nx} need {expected} bytes, found {payload}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=nz * ny * nx, offset=pos).reshape(nz, ny, nx)
    return Volume(data.astype(np.float32), (sz, sy, sx), site, norm)


def write_volume(volume: Volume, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_volume(volume))


def read_volume(path: str | os.PathLike) -> Volume:
    with open(path, "rb") as fh:
        return decode_volume(fh.read())


# -- intensity normalization -------------------------------------------------
def minmax_normalize(volume: Volume) -> Volume:
    """Rescale to [0, 1] and remember the original range for the inverse."""
    if volume.norm is not None:
        raise ValueError("volume is already normalized")
    lo = float(volume.data.min())
    hi = float(volume.data.max())
    if not hi > lo:
        raise ValueError(f"cannot normalize a constant volume (value {lo})")
    scaled = (volume.data.astype(np.float64) - lo) / (hi - lo)
    return volume.with_data(np.clip(scaled, 0.0, 1.0), norm=NormalizationRecord(lo, hi))


def inverse_normalize(volume: Volume) -> Volume:
    if volume.norm is None:
        raise ValueError("volume has no normalization record to invert")
    lo, hi = volume.norm.original_min, volume.norm.original_max
    restored = volume.data.astype(np.float64) * (hi - lo) + lo
    return volume.with_data(restored, norm=None)


def resample_to_cube(volume: Volume, edge: int) -> Volume:
    """Trilinear resampling onto an edge^3 grid.

    The first and last voxel centres of every axis stay fixed, so the grid
    spans the same physical extent and spacing becomes s * (n - 1) / (edge - 1).
    """
    if edge < 8:
        raise ValueError(f"edge must be >= 8, got {edge}")
    if volume.dims == (edge, edge, edge):
        return volume.with_data(volume.data.copy())
    axes = [np.linspace(0.0, n - 1, edge) for n in volume.dims]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    out = ndimage.map_coordinates(volume.data.astype(np.float64), coords, order=1, mode="nearest")
    spacing = tuple(
        s * (n - 1) / (edge - 1) if n > 1 else s * n / edge for s, n in zip(volume.spacing, volume.dims)
    )
    if volume.norm is not None:
        out = np.clip(out, 0.0, 1.0)
    return volume.with_data(out, spacing=spacing)


# -- patches -------------------------------------------------------------------
@dataclass(frozen=True)
class PatchSpec:
    """Cubic sub-block given by its corner ``origin`` (z, y, x) and edge ``size``."""

    origin: tuple[int, int, int]
    size: int

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))
        if len(self.origin) != 3 or min(self.origin) < 0:
            raise ValueError(f"patch origin must be three non-negative ints, got {self.origin}")
        if self.size < 1:
            raise ValueError(f"patch size must be positive, got {self.size}")

    def fits(self, dims: tuple[int, int, int]) -> bool:
        return all(o + self.size <= n for o, n in zip(self.origin, dims))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + self.size) for o in self.origin)


def check_training_patch_size(size: int) -> None:
    """Network patches must be even, >= 8 and divisible by 8 (three poolings)."""
    if size < 8 or size % 8:
        raise ValueError(f"patch size must be a multiple of 8 and >= 8, got {size}")


def random_patch_spec(dims: tuple[int, int, int], size: int, rng: np.random.Generator) -> PatchSpec:
    """Origin drawn uniformly over all positions that keep the patch inside."""
    if any(size > n for n in dims):
        raise ValueError(f"patch size {size} does not fit in volume {dims}")
    origin = tuple(int(rng.integers(0, n - size + 1)) for n in dims)
    return PatchSpec(origin, size)


def crop_patch(volume: Volume, spec: PatchSpec) -> Tensor:
    if not spec.fits(volume.dims):
        raise ValueError(f"patch {spec.origin}+{spec.size} lies outside volume {volume.dims}")
    block = volume.data[spec.slices()]
    return Tensor(block.reshape((1, 1) + block.shape).copy())


def crop_paired_patch(input_vol: Volume, target_vol: Volume, spec: PatchSpec) -> tuple[Tensor, Tensor]:
    """Crop the same location from two co-registered volumes."""
    if input_vol.dims != target_vol.dims:
        raise ValueError(f"paired volumes differ in dims: {input_vol.dims} vs {target_vol.dims}")
    return crop_patch(input_vol, spec), crop_patch(target_vol, spec)
