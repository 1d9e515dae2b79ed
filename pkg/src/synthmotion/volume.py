"""Volume container, NIfTI-1 I/O, affine resampling, cropping and normalization.

Arrays are indexed ``data[i, j, k]`` with ``i`` along x. The on-disk layout
of NIfTI is x-fastest; reading reorders into this logical indexing.
"""

from __future__ import annotations

import gzip
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import ndimage

__all__ = [
    "Volume3D",
    "RigidTransform",
    "NiftiFormatError",
    "UnsupportedDatatypeError",
    "CorruptFileError",
    "read_volume",
    "write_volume",
    "resample_affine",
    "crop_roi",
    "normalize_intensity",
    "world_center",
]

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype char
_DATATYPES = {2: "u1", 4: "i2", 16: "f4"}
_DTYPE_TAGS = {2: "uint8", 4: "int16", 16: "float32"}


class NiftiFormatError(ValueError):
    """Header is not a NIfTI-1 header."""


class UnsupportedDatatypeError(ValueError):
    """Valid header, but a datatype this reader does not handle."""


class CorruptFileError(ValueError):
    """Payload shorter than the header promises."""


@dataclass
class Volume3D:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None
    dtype_tag: str = "float32"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        self.data = data
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        if self.affine is None:
            self.affine = np.diag([*self.spacing, 1.0])
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if abs(np.linalg.det(self.affine[:3, :3])) == 0:
            raise ValueError("affine 3x3 block is singular")
        if not np.isfinite(self.data).all():
            raise ValueError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return Volume3D(data, self.spacing, self.affine.copy(), self.dtype_tag)


def world_center(v: Volume3D) -> np.ndarray:
    """World coordinates (mm) of the geometric center of the voxel grid."""
    idx = (np.asarray(v.dims, dtype=np.float64) - 1.0) / 2.0
    return v.affine[:3, :3] @ idx + v.affine[:3, 3]


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (intrinsic XYZ Euler angles, degrees) plus translation (mm).

    The rotation acts about ``center`` in world coordinates. ``center=None``
    means "the center of whatever volume the transform is applied to"; it is
    resolved by :meth:`matrix` callers.
    """

    rotation_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] | None = None

    def rotation_matrix(self) -> np.ndarray:
        ax, ay, az = (math.radians(a) for a in self.rotation_deg)
        return _rx(ax) @ _ry(ay) @ _rz(az)

    def matrix(self, center: Sequence[float] | None = None) -> np.ndarray:
        """4x4 homogeneous world-space matrix.

        ``center`` overrides the stored center; if both are None the rotation
        is about the world origin.
        """
        c = center if center is not None else self.center
        c = np.zeros(3) if c is None else np.asarray(c, dtype=np.float64)
        r = self.rotation_matrix()
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = c - r @ c + np.asarray(self.translation_mm, dtype=np.float64)
        return m

    def inverse(self) -> "RigidTransform":
        r = self.rotation_matrix()
        rinv = r.T
        t = np.asarray(self.translation_mm, dtype=np.float64)
        rot = euler_from_matrix(rinv)
        return RigidTransform(rot, tuple(-(rinv @ t)), self.center)

    @property
    def is_identity(self) -> bool:
        return not any(self.rotation_deg) and not any(self.translation_mm)

    @classmethod
    def from_matrix(cls, m: np.ndarray, center: Sequence[float] | None = None) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        r = m[:3, :3]
        c = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
        t = m[:3, 3] - (c - r @ c)
        return cls(euler_from_matrix(r), tuple(float(x) for x in t),
                   None if center is None else tuple(float(x) for x in c))


def euler_from_matrix(r: np.ndarray) -> tuple[float, float, float]:
    """Intrinsic XYZ angles (degrees) of ``r = Rx @ Ry @ Rz``."""
    sy = float(np.clip(r[0, 2], -1.0, 1.0))
    ay = math.asin(sy)
    if abs(sy) < 1.0 - 1e-12:
        ax = math.atan2(-r[1, 2], r[2, 2])
        az = math.atan2(-r[0, 1], r[0, 0])
    else:
        # gimbal lock: only ax + az (or ax - az) is determined
        ax = math.atan2(r[2, 1], r[1, 1])
        az = 0.0
    return (math.degrees(ax), math.degrees(ay), math.degrees(az))


# --------------------------------------------------------------------------
# NIfTI-1
# --------------------------------------------------------------------------

def _open_bytes(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise CorruptFileError(f"{path}: broken gzip stream ({exc})") from exc
    return raw


def _detect_endian(hdr: bytes) -> str:
    for end in ("<", ">"):
        ndim = struct.unpack_from(end + "h", hdr, 40)[0]
        if 1 <= ndim <= 7:
            return end
    raise NiftiFormatError("dim[0] out of range for both byte orders")


def _quaternion_affine(hdr: bytes, end: str, pixdim) -> np.ndarray:
    b, c, d, qx, qy, qz = struct.unpack_from(end + "6f", hdr, 256)
    a = 1.0 - (b * b + c * c + d * d)
    a = math.sqrt(a) if a > 1e-7 else 0.0
    r = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    m = np.eye(4)
    m[:3, :3] = r * zooms
    m[:3, 3] = (qx, qy, qz)
    return m


def _matrix_to_quaternion(r: np.ndarray) -> tuple[float, float, float, float]:
    # Shepperd's method on a proper rotation
    tr = np.trace(r)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        w, x, y, z = 0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        w, x, y, z = (r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        w, x, y, z = (r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        w, x, y, z = (r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s
    if w < 0:
        w, x, y, z = -w, -x, -y, -z
    return w, x, y, z


def read_volume(path: Union[str, Path]) -> Volume3D:
    """Read a NIfTI-1 file (``.nii`` or ``.nii.gz``) into a float32 volume.

    Supports uint8, int16 and float32 payloads. ``scl_slope``/``scl_inter``
    are applied when the slope is nonzero.
    """
    path = Path(path)
    buf = _open_bytes(path)
    if len(buf) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: file shorter than a NIfTI-1 header")
    hdr = buf[:HEADER_SIZE]
    end = _detect_endian(hdr)
    sizeof_hdr = struct.unpack_from(end + "i", hdr, 0)[0]
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiFormatError(f"{path}: sizeof_hdr={sizeof_hdr}, expected 348")
    magic = hdr[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise NiftiFormatError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")

    dim = struct.unpack_from(end + "8h", hdr, 40)
    ndim = dim[0]
    shape = [dim[i] if i <= ndim else 1 for i in (1, 2, 3)]
    if any(n < 1 for n in shape):
        raise NiftiFormatError(f"{path}: nonpositive dimension {shape}")
    if ndim > 3 and any(dim[i] > 1 for i in range(4, ndim + 1)):
        raise UnsupportedDatatypeError(f"{path}: only 3D volumes are supported, dim={dim}")

    datatype = struct.unpack_from(end + "h", hdr, 70)[0]
    if datatype not in _DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype}")
    dt = np.dtype(end + _DATATYPES[datatype]) if datatype != 2 else np.dtype("u1")

    pixdim = struct.unpack_from(end + "8f", hdr, 76)
    vox_offset = int(struct.unpack_from(end + "f", hdr, 108)[0])
    slope, inter = struct.unpack_from(end + "2f", hdr, 112)
    qform_code, sform_code = struct.unpack_from(end + "2h", hdr, 252)

    n = shape[0] * shape[1] * shape[2]
    need = vox_offset + n * dt.itemsize
    if len(buf) < need:
        raise CorruptFileError(f"{path}: payload truncated ({len(buf)} < {need} bytes)")
    flat = np.frombuffer(buf, dtype=dt, count=n, offset=vox_offset)
    data = flat.reshape(shape, order="F").astype(np.float32)
    if slope != 0 and not (slope == 1 and inter == 0):
        data = (data.astype(np.float64) * slope + inter).astype(np.float32)

    spacing = tuple(abs(float(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    if sform_code > 0:
        srows = struct.unpack_from(end + "12f", hdr, 280)
        affine = np.eye(4)
        affine[:3, :] = np.asarray(srows, dtype=np.float64).reshape(3, 4)
    elif qform_code > 0:
        affine = _quaternion_affine(hdr, end, pixdim)
    else:
        affine = np.diag([*spacing, 1.0])
    return Volume3D(np.ascontiguousarray(data), spacing, affine, _DTYPE_TAGS[datatype])


def _header_bytes(v: Volume3D) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    nx, ny, nz = v.dims
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)

    aff = v.affine
    r = aff[:3, :3] / np.linalg.norm(aff[:3, :3], axis=0)
    qfac = 1.0
    if np.linalg.det(r) < 0:
        qfac = -1.0
        r = r.copy()
        r[:, 2] *= -1
    struct.pack_into("<8f", hdr, 76, qfac, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 1, 1)
    _, qb, qc, qd = _matrix_to_quaternion(r)
    struct.pack_into("<6f", hdr, 256, qb, qc, qd, *aff[:3, 3])
    struct.pack_into("<12f", hdr, 280, *aff[:3, :].ravel())
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_volume(v: Volume3D, path: Union[str, Path], compress: bool | None = None) -> None:
    """Write ``v`` as a single-file NIfTI-1 with a float32 payload.

    Gzip is used when ``compress`` is true or, if unset, when the path ends
    in ``.gz``. The gzip stream carries no timestamp or filename, so equal
    volumes produce equal bytes.
    """
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    payload = _header_bytes(v) + b"\x00" * 4 + np.asarray(v.data, dtype="<f4").tobytes(order="F")
    if compress:
        bio = io.BytesIO()
        with gzip.GzipFile(fileobj=bio, mode="wb", mtime=0, filename="", compresslevel=6) as gz:
            gz.write(payload)
        payload = bio.getvalue()
    path.write_bytes(payload)


# --------------------------------------------------------------------------
# Geometry
# --------------------------------------------------------------------------

def resample_affine(
    v: Volume3D,
    t: Union[RigidTransform, np.ndarray],
    interpolation: str = "trilinear",
    fill: float = 0.0,
) -> Volume3D:
    """Apply a world-space transform, sampling the result on ``v``'s grid.

    Each output voxel at world position ``x`` takes the value of ``v`` at
    ``T^-1 x``. A ``RigidTransform`` without a center rotates about the
    volume center.
    """
    if isinstance(t, RigidTransform):
        m = t.matrix(center=t.center if t.center is not None else world_center(v))
    else:
        m = np.asarray(t, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError("transform must be 4x4")
    if abs(np.linalg.det(m[:3, :3])) < 1e-12:
        raise ValueError("transform is singular")
    order = {"trilinear": 1, "linear": 1, "nearest": 0}.get(interpolation)
    if order is None:
        raise ValueError(f"unknown interpolation {interpolation!r}")

    # output voxel -> source voxel: A^-1 T^-1 A
    vox = np.linalg.inv(v.affine) @ np.linalg.inv(m) @ v.affine
    # trig round-off (cos 90deg = 6e-17) would push edge samples just outside the grid
    near = np.abs(vox - np.round(vox)) < 1e-9
    vox[near] = np.round(vox[near])
    if np.allclose(vox, np.eye(4), rtol=0, atol=1e-12):
        return v.with_data(v.data.copy())
    out = ndimage.affine_transform(
        v.data, vox[:3, :3], offset=vox[:3, 3], order=order,
        mode="constant", cval=fill, prefilter=False, output=np.float32,
    )
    return v.with_data(out)


def crop_roi(v: Volume3D, roi: Sequence[int]) -> Volume3D:
    """Center crop (or symmetrically zero-pad) to ``roi`` voxels.

    World coordinates of retained voxels are unchanged.
    """
    roi = tuple(int(r) for r in roi)
    if len(roi) != 3 or min(roi) < 1:
        raise ValueError(f"roi must be 3 positive ints, got {roi}")
    starts = [(n - r) // 2 for n, r in zip(v.dims, roi)]
    out = np.zeros(roi, dtype=np.float32)
    src, dst = [], []
    for n, r, s in zip(v.dims, roi, starts):
        lo = max(s, 0)
        hi = min(s + r, n)
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[tuple(dst)] = v.data[tuple(src)]
    affine = v.affine.copy()
    affine[:3, 3] = v.affine[:3, :3] @ np.asarray(starts, dtype=np.float64) + v.affine[:3, 3]
    return Volume3D(out, v.spacing, affine, v.dtype_tag)


def normalize_intensity(v: Volume3D, lo_pct: float = 1.0, hi_pct: float = 99.0) -> Volume3D:
    """Map the ``lo_pct``/``hi_pct`` percentiles to 0/1 and clamp to [0, 1]."""
    if not 0 <= lo_pct < hi_pct <= 100:
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 100, got {lo_pct}, {hi_pct}")
    lo, hi = np.percentile(v.data, [lo_pct, hi_pct])
    if not hi > lo:
        return v.with_data(np.zeros(v.dims, dtype=np.float32))
    scaled = (v.data.astype(np.float64) - lo) / (hi - lo)
    return v.with_data(np.clip(scaled, 0.0, 1.0).astype(np.float32))
