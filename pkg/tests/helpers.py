"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import gzip
import itertools

import numpy as np

# NIfTI-1 header as a numpy record, laid out field by field from the format
# definition; deliberately independent of the struct code under test.
NIFTI1_HEADER = np.dtype([
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", "i4"),
    ("session_error", "i2"), ("regular", "S1"), ("dim_info", "u1"), ("dim", "i2", (8,)),
    ("intent_p1", "f4"), ("intent_p2", "f4"), ("intent_p3", "f4"), ("intent_code", "i2"),
    ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"), ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"), ("scl_slope", "f4"), ("scl_inter", "f4"), ("slice_end", "i2"),
    ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", "f4"), ("cal_min", "f4"),
    ("slice_duration", "f4"), ("toffset", "f4"), ("glmax", "i4"), ("glmin", "i4"),
    ("descrip", "S80"), ("aux_file", "S24"), ("qform_code", "i2"), ("sform_code", "i2"),
    ("quatern_b", "f4"), ("quatern_c", "f4"), ("quatern_d", "f4"),
    ("qoffset_x", "f4"), ("qoffset_y", "f4"), ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)), ("srow_y", "f4", (4,)), ("srow_z", "f4", (4,)),
    ("intent_name", "S16"), ("magic", "S4"),
])
assert NIFTI1_HEADER.itemsize == 348

DTYPE_CODES = {np.dtype("u1"): (2, 8), np.dtype("i2"): (4, 16), np.dtype("f4"): (16, 32), np.dtype("f8"): (64, 64)}


def make_nifti_bytes(data: np.ndarray, spacing=(1.0, 1.0, 1.0), affine=None, endian="<",
                     slope=0.0, inter=0.0, sform=True, magic=b"n+1\0", vox_offset=352) -> bytes:
    """Serialize ``data`` (x fastest on disk) into a single-file NIfTI-1 image."""
    hdr = np.zeros((), dtype=NIFTI1_HEADER.newbyteorder(endian))
    code, bitpix = DTYPE_CODES[np.dtype(data.dtype).newbyteorder("=")]
    hdr["sizeof_hdr"] = 348
    hdr["dim"][:4] = (3, *data.shape)
    hdr["dim"][4:] = 1
    hdr["datatype"] = code
    hdr["bitpix"] = bitpix
    hdr["pixdim"][:4] = (1.0, *spacing)
    hdr["vox_offset"] = vox_offset
    hdr["scl_slope"] = slope
    hdr["scl_inter"] = inter
    hdr["magic"] = magic
    if affine is not None and sform:
        hdr["sform_code"] = 1
        hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = affine[0], affine[1], affine[2]
    payload = np.asarray(data, dtype=np.dtype(data.dtype).newbyteorder(endian)).tobytes(order="F")
    head = hdr.tobytes() + b"\0" * (vox_offset - 348)
    return head + payload


def parse_header(raw: bytes) -> np.void:
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    little = np.frombuffer(raw[:348], dtype=NIFTI1_HEADER)[0]
    if little["sizeof_hdr"] == 348:
        return little
    return np.frombuffer(raw[:348], dtype=NIFTI1_HEADER.newbyteorder(">"))[0]


def quaternion_to_matrix(b: float, c: float, d: float) -> np.ndarray:
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])


def direct_dft3(x: np.ndarray) -> np.ndarray:
    """O(N^2) 3D DFT as an explicit sum, X[k] = sum_n x[n] exp(-2 pi i k.n / N)."""
    out = np.zeros(x.shape, dtype=np.complex128)
    n0, n1, n2 = x.shape
    for k in itertools.product(range(n0), range(n1), range(n2)):
        acc = 0j
        for n in itertools.product(range(n0), range(n1), range(n2)):
            phase = k[0] * n[0] / n0 + k[1] * n[1] / n1 + k[2] * n[2] / n2
            acc += x[n] * complex(np.cos(-2 * np.pi * phase), np.sin(-2 * np.pi * phase))
        out[k] = acc
    return out


def monte_carlo_rms(m: np.ndarray, radius: float, n: int, rng: np.random.Generator, center=(0.0, 0.0, 0.0)) -> float:
    """sqrt of the mean squared displacement |M p - p|^2 over points uniform in a ball."""
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    p = np.asarray(center) + d * r
    q = p @ m[:3, :3].T + m[:3, 3]
    return float(np.sqrt(np.mean(np.sum((q - p) ** 2, axis=1))))


def brute_confusion(truth, pred, k):
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(truth, pred):
        cm[t][p] += 1
    return cm


def brute_balanced_accuracy(truth, pred, k):
    from fractions import Fraction
    recalls = []
    for c in range(k):
        idx = [i for i, t in enumerate(truth) if t == c]
        if idx:
            recalls.append(Fraction(sum(1 for i in idx if pred[i] == c), len(idx)))
    return sum(recalls) / len(recalls)


def brute_f1(truth, pred, k):
    from fractions import Fraction
    out = []
    for c in range(k):
        tp = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(truth, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(truth, pred) if t == c and p != c)
        out.append(Fraction(2 * tp, 2 * tp + fp + fn) if tp else Fraction(0))
    return out
