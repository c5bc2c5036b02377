import csv
from collections import Counter

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from ctcascade.data import (DatasetManifest, Patient, PatchStream, SlicePair, build_patch_stream, denormalize,
                            extract_patches, gaussian_window, grid_positions, load_dataset, minibatch_iter,
                            mlp_aggregate, mlp_extract, normalize, save_dataset, shuffle_within_patient,
                            write_patch_audit)
from ctcascade.errors import ContractError, FormatError, ParameterError, ShapeError

from oracles import gaussian_aggregate


# ---------------------------------------------------------------- manifests

def pair(pid, k, shape=(8, 8), seed=0):
    r = np.random.default_rng(seed + k)
    n = r.standard_normal(shape).astype(np.float32)
    return SlicePair(pid, k, n, n + 1, 0.7, [seed, k])


def test_manifest_invariants():
    with pytest.raises(ShapeError):
        SlicePair("a", 0, np.zeros((4, 4)), np.zeros((4, 5)), 1.0)
    with pytest.raises(ParameterError):
        DatasetManifest([Patient("a", "train"), Patient("a", "test")])
    with pytest.raises(ParameterError):
        DatasetManifest([Patient("a", "validation")])


def test_dataset_round_trip(tmp_path):
    ds = DatasetManifest([Patient("p00", "train", [pair("p00", 0), pair("p00", 1)]),
                          Patient("p01", "test", [pair("p01", 0)])], seed=4, n_angles=12)
    save_dataset(ds, tmp_path / "d")
    assert (tmp_path / "d" / "p00" / "s001_low.ten").exists()
    back = load_dataset(tmp_path / "d")
    assert back.metadata() == ds.metadata()
    for a, b in zip(ds.slices(), back.slices()):
        assert np.array_equal(a.normal, b.normal) and np.array_equal(a.low, b.low)
        assert (a.patient_id, a.index, a.spacing, list(a.seed)) == (b.patient_id, b.index, b.spacing, b.seed)
    (tmp_path / "d" / "p01" / "s000_low.ten").unlink()
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "d")
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "nowhere")


# ---------------------------------------------------------------- normalization

def test_normalize_examples():
    assert normalize(np.float32(512)) == 1.0
    assert normalize(np.float32(0)) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(-4096, 4096, width=32))
def test_normalize_round_trip_exact(v):
    # dividing by a power of two is exact unless the result goes subnormal
    assume(v == 0 or abs(v) >= 1e-30)
    x = np.float32(v)
    assert denormalize(normalize(x)) == x
    assert normalize(denormalize(x / np.float32(512))) == x / np.float32(512)


# ---------------------------------------------------------------- patches

def test_extract_patches_shapes_and_containment(rng):
    img = rng.standard_normal((2, 512, 512)).astype(np.float32)
    tgt = rng.standard_normal((512, 512)).astype(np.float32)
    xs, ys, corners = extract_patches(img, tgt, 150, 40, rng)
    assert xs.shape == (150, 2, 40, 40) and ys.shape == (150, 1, 40, 40)
    assert np.all(corners >= 0) and np.all(corners <= 512 - 40)
    y, x = corners[7]
    assert np.array_equal(xs[7], img[:, y:y + 40, x:x + 40])
    assert np.array_equal(ys[7, 0], tgt[y:y + 40, x:x + 40])


def test_extract_patches_seeded_and_errors(rng):
    img = rng.standard_normal((1, 50, 50))
    a = extract_patches(img, img[0], 20, 40, np.random.default_rng(3))
    b = extract_patches(img, img[0], 20, 40, np.random.default_rng(3))
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    with pytest.raises(ParameterError):
        extract_patches(img, img[0], 1, 51, rng)


def test_shuffle_keeps_patient_blocks(rng):
    ids = ["A"] * 100 + ["B"] * 50
    order = shuffle_within_patient(ids, rng)
    assert sorted(order[:100]) == list(range(100))
    assert sorted(order[100:]) == list(range(100, 150))
    assert not np.array_equal(order[:100], np.arange(100))
    with pytest.raises(ContractError):
        shuffle_within_patient(["A", "B", "A"], rng)


def test_single_patient_shuffle_is_uniform():
    counts = np.zeros((4, 4))
    for seed in range(4000):
        order = shuffle_within_patient(["A"] * 4, np.random.default_rng(seed))
        counts[np.arange(4), order] += 1
    assert np.all(np.abs(counts / 4000 - 0.25) < 0.04)


def small_stream(n_slices=3, per_slice=5, size=4, pids=("a", "a", "b"), seed=0):
    r = np.random.default_rng(seed)
    inputs = r.standard_normal((n_slices, 2, 10, 10)).astype(np.float32)
    targets = r.standard_normal((n_slices, 1, 10, 10)).astype(np.float32)
    return build_patch_stream(inputs, targets, list(pids), per_slice, size, r)


def test_patch_stream_preserves_multiset_and_blocks():
    stream = small_stream()
    assert len(stream) == 15
    assert stream.patient_ids == ["a"] * 10 + ["b"] * 5
    assert Counter(stream.slice_index.tolist()) == {0: 5, 1: 5, 2: 5}
    xb, yb = stream.crop([0, 14])
    s, (y, x) = stream.slice_index[14], stream.corners[14]
    assert np.array_equal(xb[1], stream.inputs[s, :, y:y + 4, x:x + 4])
    assert np.array_equal(yb[1], stream.targets[s, :, y:y + 4, x:x + 4])


def test_patch_audit_csv(tmp_path):
    stream = small_stream()
    write_patch_audit(stream, [10, 11, 12], tmp_path / "a.csv")
    with open(tmp_path / "a.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["patient", "slice", "y", "x"]
    assert len(rows) == 16
    assert rows[1][0] == "a" and int(rows[1][1]) in (10, 11)


def test_minibatch_carry_over():
    n = 250
    x = np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1)
    stream = PatchStream(x, x.copy(), np.arange(n), np.zeros((n, 2), dtype=np.int64), ["p"] * n, 1)
    batches = list(minibatch_iter(stream, 100, n_batches=4))
    firsts = [b[0][:, 0, 0, 0] for b in batches]
    assert all(b[0].shape == (100, 1, 1, 1) for b in batches)
    assert np.array_equal(firsts[0], np.arange(100))
    assert np.array_equal(firsts[2], np.r_[200:250, 0:50])
    assert np.array_equal(firsts[3], np.arange(50, 150))
    with pytest.raises(ParameterError):
        next(minibatch_iter(PatchStream(x[:0], x[:0], np.arange(0), np.zeros((0, 2)), [], 1), 4))


def test_full_scale_epoch_arithmetic():
    assert abs(90_000 * 100 / (3_933 * 150) - 15) < 0.3


def test_minibatch_shape_full_scale():
    r = np.random.default_rng(0)
    stream = build_patch_stream(r.standard_normal((2, 2, 64, 64)).astype(np.float32),
                                r.standard_normal((2, 1, 64, 64)).astype(np.float32), ["a", "b"], 150, 40, r)
    xb, yb = next(minibatch_iter(stream, 100))
    assert xb.shape == (100, 2, 40, 40) and yb.shape == (100, 1, 40, 40)


# ---------------------------------------------------------------- MLP tiling

def test_grid_count_512():
    g = grid_positions(512, 13, 3)
    assert len(g) == 168 and g[-1] == 499 and g[0] == 0
    patches, _ = mlp_extract(np.zeros((512, 512), np.float32))
    assert patches.shape == (168 * 168, 1, 13, 13)


def test_gaussian_window_properties():
    w = gaussian_window(13)
    assert np.all(w > 0)
    assert np.array_equal(w, np.rot90(w)) and np.array_equal(w, w.T)
    assert w[6, 7] / w[6, 6] == pytest.approx(np.exp(-1 / (2 * (13 / 3) ** 2)))


@pytest.mark.parametrize("shape", [(13, 13), (14, 20), (37, 29), (64, 64)])
def test_identity_aggregation(shape, rng):
    img = rng.standard_normal(shape) * 100
    patches, corners = mlp_extract(img)
    out = mlp_aggregate(patches, corners, shape)
    assert np.max(np.abs(out - img)) < 1e-5
    assert np.allclose(out, gaussian_aggregate(img, 13, 3, 13 / 3))


@settings(max_examples=20, deadline=None)
@given(st.integers(13, 40), st.integers(13, 40), st.floats(-1e3, 1e3))
def test_constant_field_aggregation(h, w, c):
    _, corners = mlp_extract(np.zeros((h, w)))
    out = mlp_aggregate(np.full((len(corners), 13, 13), c), corners, (h, w))
    assert np.max(np.abs(out - c)) <= 1e-6 * max(1.0, abs(c))


def test_mlp_extract_too_small():
    with pytest.raises(ParameterError):
        mlp_extract(np.zeros((12, 20)))
