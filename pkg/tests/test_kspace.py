import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import direct_dft3
from synthmotion.kspace import (
    MotionParams,
    MotionTrace,
    corrupt_with_motion,
    fft3,
    ifft3,
    sample_motion_trace,
    segment_slices,
)
from synthmotion.labels import trace_score
from synthmotion.phantom import gaussian_blob, head_phantom
from synthmotion.volume import RigidTransform, Volume3D, resample_affine


def rel_rms(a, b):
    return float(np.sqrt(np.mean((a - b) ** 2)) / np.sqrt(np.mean(b ** 2)))


# --------------------------------------------------------------------------
# FFT
# --------------------------------------------------------------------------

@pytest.mark.parametrize("shape", [(1, 1, 1), (2, 3, 1), (5, 6, 7), (8, 7, 6)])
def test_fft_matches_direct_dft(shape):
    rng = np.random.default_rng(sum(shape))
    x = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    ref = direct_dft3(x)
    np.testing.assert_allclose(fft3(x), ref, rtol=0, atol=1e-9 * max(1.0, np.abs(ref).max()))


def test_ifft_matches_direct_inverse():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 5, 3)) + 1j * rng.normal(size=(4, 5, 3))
    ref = np.conj(direct_dft3(np.conj(x))) / x.size
    np.testing.assert_allclose(ifft3(x), ref, atol=1e-12)


@pytest.mark.parametrize("shape", [(5, 6, 7), (16, 15, 9), (64, 64, 64)])
def test_fft_roundtrip_and_parseval(shape):
    rng = np.random.default_rng(0)
    x = rng.normal(size=shape)
    big = fft3(x)
    back = ifft3(big)
    assert np.linalg.norm(back - x) / np.linalg.norm(x) <= 1e-6
    lhs = np.sum(np.abs(x) ** 2)
    rhs = np.sum(np.abs(big) ** 2) / x.size
    assert abs(lhs - rhs) / lhs <= 1e-6


def test_fft_of_impulse_is_flat():
    x = np.zeros((4, 6, 5))
    x[0, 0, 0] = 1.0
    np.testing.assert_allclose(np.abs(fft3(x)), 1.0, atol=1e-12)


# --------------------------------------------------------------------------
# motion traces
# --------------------------------------------------------------------------

def test_trace_is_deterministic():
    p = MotionParams(10, 10)
    assert sample_motion_trace(p, 64, 123) == sample_motion_trace(p, 64, 123)
    assert sample_motion_trace(p, 64, 123) != sample_motion_trace(p, 64, 124)


def test_zero_ranges_give_identity():
    t = sample_motion_trace(MotionParams(0, 0), 32, 5)
    assert all(x.is_identity for x in t.transforms)
    assert trace_score(t) == 0.0


def test_extent_too_small():
    with pytest.raises(ValueError):
        sample_motion_trace(MotionParams(n_transforms_range=(8, 8)), 8, 0)


@given(st.integers(0, 2 ** 63 - 1), st.integers(10, 200))
@settings(max_examples=60)
def test_boundaries_partition_extent(seed, extent):
    t = sample_motion_trace(MotionParams(), extent, seed)
    assert 1 <= t.n_transforms <= 8
    assert len(t.boundaries) == t.n_transforms + 1
    assert t.boundaries[-1] == extent and t.boundaries[0] > 0
    assert all(b > a for a, b in zip(t.boundaries, t.boundaries[1:]))
    segs = segment_slices(t)
    assert len(segs) == t.n_transforms + 1
    np.testing.assert_array_equal(np.concatenate(segs), np.arange(extent))


def test_angle_distribution_mean():
    """|U(-10, 10)| has mean 5."""
    p = MotionParams(10.0, 10.0, (1, 8))
    angles = np.concatenate([np.abs([t.rotation_deg for t in sample_motion_trace(p, 128, s).transforms]).ravel()
                             for s in range(10_000)])
    assert abs(angles.mean() - 5.0) / 5.0 < 0.02


def test_transform_count_is_uniform():
    p = MotionParams(n_transforms_range=(1, 8))
    counts = np.bincount([sample_motion_trace(p, 64, s).n_transforms for s in range(8000)], minlength=9)[1:]
    # chi-square against uniform, 7 dof; 99.9% quantile is 24.3
    exp = 1000.0
    assert np.sum((counts - exp) ** 2 / exp) < 24.3


def test_random_phase_axis_needs_dims():
    p = MotionParams(phase_axis="random")
    with pytest.raises(ValueError):
        sample_motion_trace(p, 64, 0)
    axes = {sample_motion_trace(p, (20, 30, 40), s).phase_axis for s in range(50)}
    assert axes == {0, 1, 2}


def test_trace_json_roundtrip():
    t = sample_motion_trace(MotionParams(5, 5), 40, 77)
    d = json.loads(json.dumps(t.to_dict()))
    assert set(d) == {"seed", "phase_axis", "boundaries", "transforms"}
    assert set(d["transforms"][0]) == {"rot_deg", "trans_mm"}
    assert MotionTrace.from_dict(d) == t


@pytest.mark.parametrize("bounds", [(0, 5), (3, 3), (4, 2)])
def test_trace_rejects_bad_boundaries(bounds):
    with pytest.raises(ValueError):
        MotionTrace((RigidTransform(),), bounds)


# --------------------------------------------------------------------------
# corruption
# --------------------------------------------------------------------------

def composite_oracle(v: Volume3D, trace: MotionTrace) -> np.ndarray:
    """Assemble the corrupted spectrum with per-line masks from numpy's FFT."""
    axis = trace.phase_axis
    n = v.dims[axis]
    owner = np.searchsorted(np.asarray(trace.boundaries), np.arange(n), side="right")
    spectra = [np.fft.fftn(v.data.astype(np.float64))]
    for t in trace.transforms:
        spectra.append(np.fft.fftn(resample_affine(v, t).data.astype(np.float64)))
    shape = [1, 1, 1]
    shape[axis] = n
    owner = owner.reshape(shape)
    k = np.zeros(v.dims, dtype=np.complex128)
    for i, s in enumerate(spectra):
        k = np.where(owner == i, s, k)
    return np.abs(np.fft.ifftn(k))


@pytest.fixture(scope="module")
def phantom64():
    return head_phantom((64, 64, 64), (3.0, 3.0, 3.0), seed=1)


def test_identity_trace_is_neutral(phantom64):
    t = MotionTrace((RigidTransform(), RigidTransform()), (20, 40, 64), 1)
    out = corrupt_with_motion(phantom64, t).data
    assert rel_rms(out, phantom64.data) <= 1e-5


def test_one_line_reference_matches_resample():
    # motion within the default ranges; the residual is the reference line's
    # share, (1/N) times the difference of projections along the phase axis
    v = gaussian_blob((64, 64, 64), (3.0, 3.0, 3.0))
    tf = RigidTransform((2.0, -1.5, 1.0), (1.5, -1.0, 0.5))
    out = corrupt_with_motion(v, MotionTrace((tf,), (1, 64), 1)).data
    ref = resample_affine(v, tf).data
    assert np.abs(out - ref).max() <= 0.02


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_matches_mask_assembly_oracle(phantom64, axis):
    trace = sample_motion_trace(MotionParams(4, 4, (3, 3), axis), 64, 11)
    ours = corrupt_with_motion(phantom64, trace).data
    np.testing.assert_allclose(ours, composite_oracle(phantom64, trace), atol=2e-5)


def test_rotation_creates_ghosting_along_phase_axis():
    # off-center, so rotations about the volume center move it
    v = gaussian_blob((48, 48, 48), (2.0, 2.0, 2.0), sigma_mm=8.0, offset_mm=(12.0, 8.0, -6.0))
    t = MotionTrace((RigidTransform((10, 0, 0)), RigidTransform((0, 0, 10))), (8, 30, 48), 1)
    out = corrupt_with_motion(v, t).data
    assert rel_rms(out, v.data) > 0.01
    # energy outside the blob's support
    support = v.data > 1e-3
    outside_clean = float(np.sum(v.data[~support] ** 2))
    outside_moved = float(np.sum(out[~support] ** 2))
    assert outside_moved > outside_clean


def test_corruption_grows_with_angle():
    v = gaussian_blob((40, 40, 40), (2.0, 2.0, 2.0), sigma_mm=10.0, offset_mm=(8.0, -6.0, 4.0))
    errs = []
    for alpha in (0.0, 0.5, 1.0, 2.0):
        t = MotionTrace((RigidTransform((3 * alpha, -2 * alpha, 4 * alpha)),
                         RigidTransform((-2 * alpha, 5 * alpha, alpha))), (6, 25, 40), 1)
        errs.append(rel_rms(corrupt_with_motion(v, t).data, v.data))
    assert errs[0] <= 1e-5
    assert all(b >= a for a, b in zip(errs, errs[1:]))


def test_corruption_is_bitwise_deterministic(phantom64):
    t = sample_motion_trace(MotionParams(5, 5), 64, 3)
    a = corrupt_with_motion(phantom64, t).data
    b = corrupt_with_motion(phantom64, t).data
    assert a.tobytes() == b.tobytes()
    assert a.dtype == np.float32 and a.shape == phantom64.dims


def test_corruption_rejects_bad_input(phantom64):
    with pytest.raises(ValueError):
        corrupt_with_motion(phantom64, MotionTrace((RigidTransform(),), (3, 50), 1))
    d = phantom64.data.copy()
    d[0, 0, 0] = np.inf
    bad = Volume3D.__new__(Volume3D)
    object.__setattr__(bad, "__dict__", dict(phantom64.__dict__, data=d))
    with pytest.raises(ValueError):
        corrupt_with_motion(bad, MotionTrace((RigidTransform(),), (3, 64), 1))
