"""3D volumes and label masks: I/O, resampling, affine warping, normalization.

Volumes are dense scalar grids with physical voxel spacing in mm. Data is
held as a numpy array of shape (nx, ny, nz); on disk the layout is
x-fastest (Fortran order), matching NIfTI-1.

Two file formats are supported:
  * a minimal NIfTI-1 subset (single-file .nii, optionally .nii.gz):
    datatypes uint8 / int16 / float32, dim, pixdim, scl_slope / scl_inter
    applied on read;
  * a raw format: little-endian array plus a JSON sidecar header
    ``<path>.json`` holding {dims, spacing, dtype}.
"""

from __future__ import annotations

import gzip
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class VolumeError(Exception):
    """Unreadable file, unsupported datatype, or inconsistent header."""


class DegenerateDimensionWarning(UserWarning):
    """A resampled axis would have collapsed to zero voxels and was clamped to 1."""


@dataclass(frozen=True)
class Volume3D:
    """Scalar intensity grid with physical spacing (mm per voxel)."""

    data: np.ndarray  # float array, shape (nx, ny, nz)
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"expected 3D grid, got shape {data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be positive, got {self.spacing}")
        if not np.isfinite(data).all():
            raise VolumeError("volume contains non-finite intensities")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LabelMask:
    """Integer class grid aligned to a Volume3D (0 = background)."""

    data: np.ndarray  # int array, shape (nx, ny, nz)

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise VolumeError(f"mask dtype must be integer, got {data.dtype}")
        object.__setattr__(self, "data", data.astype(np.int32))
        if data.ndim != 3:
            raise VolumeError(f"expected 3D mask, got shape {data.shape}")
        if data.min(initial=0) < 0:
            raise VolumeError("mask labels must be >= 0")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class AffineTransform:
    """4x4 homogeneous transform in mm coordinates, mapping input space to output space."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", m)
        if m.shape != (4, 4):
            raise VolumeError(f"affine must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise VolumeError("last affine row must be (0,0,0,1)")
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise VolumeError("affine upper-left 3x3 is singular")

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    @classmethod
    def translation(cls, tx: float, ty: float, tz: float) -> "AffineTransform":
        m = np.eye(4)
        m[:3, 3] = (tx, ty, tz)
        return cls(m)


# ---------------------------------------------------------------------------
# NIfTI-1 subset

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_NIFTI_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16}
_HDR_SIZE = 348
_VOX_OFFSET = 352.0


def _read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HDR_SIZE:
        raise VolumeError(f"{path}: truncated NIfTI header")
    sizeof_hdr = struct.unpack_from("<i", blob, 0)[0]
    if sizeof_hdr != _HDR_SIZE:
        raise VolumeError(f"{path}: not a little-endian NIfTI-1 file")
    dim = struct.unpack_from("<8h", blob, 40)
    datatype = struct.unpack_from("<h", blob, 70)[0]
    pixdim = struct.unpack_from("<8f", blob, 76)
    vox_offset = struct.unpack_from("<f", blob, 108)[0]
    scl_slope, scl_inter = struct.unpack_from("<2f", blob, 112)
    magic = struct.unpack_from("<4s", blob, 344)[0]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeError(f"{path}: bad NIfTI magic {magic!r}")
    if dim[0] < 3:
        raise VolumeError(f"{path}: expected >= 3 dimensions, got {dim[0]}")
    if any(d != 1 for d in dim[4 : dim[0] + 1]):
        raise VolumeError(f"{path}: time/vector dimensions are not supported")
    if datatype not in _NIFTI_DTYPES:
        raise VolumeError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = _NIFTI_DTYPES[datatype]
    nx, ny, nz = dim[1], dim[2], dim[3]
    n = nx * ny * nz
    offset = int(vox_offset) if vox_offset else _HDR_SIZE + 4
    raw = blob[offset : offset + n * np.dtype(dtype).itemsize]
    if len(raw) != n * np.dtype(dtype).itemsize:
        raise VolumeError(f"{path}: data size does not match header dims")
    arr = np.frombuffer(raw, dtype=dtype).reshape((nx, ny, nz), order="F")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        arr = arr.astype(np.float32) * slope + scl_inter
    spacing = (float(pixdim[1]) or 1.0, float(pixdim[2]) or 1.0, float(pixdim[3]) or 1.0)
    return arr, spacing


def _write_nifti(path: Path, arr: np.ndarray, spacing: tuple[float, float, float]) -> None:
    dtype = np.dtype(arr.dtype)
    if dtype not in _NIFTI_CODES:
        raise VolumeError(f"cannot write dtype {dtype} to NIfTI subset")
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *arr.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _NIFTI_CODES[dtype])
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, _VOX_OFFSET)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    payload = bytes(hdr) + b"\x00" * 4 + arr.tobytes(order="F")
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(payload)


# ---------------------------------------------------------------------------
# Raw format: <path> holds the array, <path>.json the header.


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _read_raw(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    try:
        header = json.loads(_sidecar(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeError(f"{path}: cannot read sidecar header: {exc}") from exc
    dims = tuple(int(d) for d in header["dims"])
    spacing = tuple(float(s) for s in header["spacing"])
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    raw = path.read_bytes()
    if len(raw) != int(np.prod(dims)) * dtype.itemsize:
        raise VolumeError(f"{path}: data size does not match sidecar dims")
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    return arr, spacing


def _write_raw(path: Path, arr: np.ndarray, spacing: tuple[float, float, float]) -> None:
    dtype = np.dtype(arr.dtype).newbyteorder("<")
    path.write_bytes(np.ascontiguousarray(arr.astype(dtype)).tobytes(order="F"))
    header = {
        "dims": list(arr.shape),
        "spacing": [float(s) for s in spacing],
        "dtype": dtype.str,
    }
    _sidecar(path).write_text(json.dumps(header, indent=2) + "\n")


def _is_nifti(path: Path) -> bool:
    name = path.name
    return name.endswith(".nii") or name.endswith(".nii.gz")


def load_volume(path) -> Volume3D:
    """Load an intensity volume from NIfTI or raw format."""
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"no such file: {path}")
    arr, spacing = _read_nifti(path) if _is_nifti(path) else _read_raw(path)
    return Volume3D(data=arr.astype(np.float32), spacing=spacing)


def load_mask(path) -> LabelMask:
    """Load a label mask; the file must hold integer data."""
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"no such file: {path}")
    arr, _ = _read_nifti(path) if _is_nifti(path) else _read_raw(path)
    if not np.issubdtype(arr.dtype, np.integer):
        raise VolumeError(f"{path}: mask file holds non-integer data ({arr.dtype})")
    return LabelMask(data=arr.astype(np.int32))


def save_volume(vol, path) -> None:
    """Write a Volume3D (float32) or LabelMask (uint8/int16) to NIfTI or raw format."""
    path = Path(path)
    if isinstance(vol, Volume3D):
        arr = vol.data.astype(np.float32)
        spacing = vol.spacing
    elif isinstance(vol, LabelMask):
        arr = vol.data
        arr = arr.astype(np.uint8) if arr.max(initial=0) < 256 else arr.astype(np.int16)
        spacing = (1.0, 1.0, 1.0)
    else:
        raise VolumeError(f"cannot save object of type {type(vol).__name__}")
    path.parent.mkdir(parents=True, exist_ok=True)
    if _is_nifti(path):
        _write_nifti(path, arr, spacing)
    else:
        _write_raw(path, arr, spacing)


# ---------------------------------------------------------------------------
# Resampling and warping


def _iso_dims(dims, spacing, target: float) -> tuple[int, int, int]:
    out = []
    for n, s in zip(dims, spacing):
        d = int(np.floor(n * s / target))
        if d < 1:
            warnings.warn(
                f"axis with extent {n}x{s}mm collapses at {target}mm; clamped to 1 voxel",
                DegenerateDimensionWarning,
            )
            d = 1
        out.append(d)
    return tuple(out)


def _iso_coords(out_dims, spacing, target: float) -> list[np.ndarray]:
    grids = np.meshgrid(
        *[np.arange(d, dtype=np.float64) for d in out_dims], indexing="ij"
    )
    return [g * (target / s) for g, s in zip(grids, spacing)]


def resample_isotropic(vol: Volume3D, target_spacing: float) -> Volume3D:
    """Resample to isotropic spacing with trilinear interpolation.

    Output dims per axis: floor(n * s / target), clamped to >= 1 (with a
    DegenerateDimensionWarning when clamping fires).
    """
    if target_spacing <= 0:
        raise VolumeError("target spacing must be positive")
    out_dims = _iso_dims(vol.dims, vol.spacing, target_spacing)
    coords = _iso_coords(out_dims, vol.spacing, target_spacing)
    out = ndimage.map_coordinates(
        vol.data.astype(np.float64), coords, order=1, mode="nearest"
    )
    return Volume3D(data=out.astype(np.float32), spacing=(target_spacing,) * 3)


def resample_isotropic_mask(
    mask: LabelMask, spacing: tuple[float, float, float], target_spacing: float
) -> LabelMask:
    """Nearest-neighbor variant for label masks; never invents new labels."""
    if target_spacing <= 0:
        raise VolumeError("target spacing must be positive")
    out_dims = _iso_dims(mask.dims, spacing, target_spacing)
    coords = _iso_coords(out_dims, spacing, target_spacing)
    out = ndimage.map_coordinates(mask.data, coords, order=0, mode="nearest")
    return LabelMask(data=out.astype(np.int32))


def _affine_coords(t: AffineTransform, ref: Volume3D, spacing) -> list[np.ndarray]:
    inv = np.linalg.inv(t.matrix)
    grids = np.meshgrid(
        *[np.arange(d, dtype=np.float64) for d in ref.dims], indexing="ij"
    )
    phys = [g * s for g, s in zip(grids, ref.spacing)]  # mm in output space
    src = [
        inv[i, 0] * phys[0] + inv[i, 1] * phys[1] + inv[i, 2] * phys[2] + inv[i, 3]
        for i in range(3)
    ]
    return [p / s for p, s in zip(src, spacing)]  # voxel indices in input space


def apply_affine(vol: Volume3D, t: AffineTransform, ref: Volume3D) -> Volume3D:
    """Warp onto the reference grid by inverse mapping + trilinear interpolation.

    Voxels sampled outside the input field of view are set to 0.
    """
    coords = _affine_coords(t, ref, vol.spacing)
    out = ndimage.map_coordinates(
        vol.data.astype(np.float64), coords, order=1, mode="constant", cval=0.0
    )
    return Volume3D(data=out.astype(np.float32), spacing=ref.spacing)


def apply_affine_mask(
    mask: LabelMask, spacing: tuple[float, float, float], t: AffineTransform, ref: Volume3D
) -> LabelMask:
    """Nearest-neighbor warp for label masks."""
    coords = _affine_coords(t, ref, spacing)
    out = ndimage.map_coordinates(mask.data, coords, order=0, mode="constant", cval=0)
    return LabelMask(data=out.astype(np.int32))


def normalize_intensity(vol: Volume3D) -> Volume3D:
    """Zero-mean unit-variance normalization over nonzero voxels.

    Zero voxels (padded background) are left at zero, which makes the
    operation idempotent. Constant volumes map to all-zeros.
    """
    data = vol.data.astype(np.float64)
    nz = data != 0
    if not nz.any():
        return Volume3D(data=np.zeros_like(vol.data), spacing=vol.spacing)
    mean = data[nz].mean()
    sd = data[nz].std()
    if sd < 1e-12:
        out = np.zeros_like(data)
    else:
        out = np.where(nz, (data - mean) / sd, 0.0)
    return Volume3D(data=out.astype(np.float32), spacing=vol.spacing)
