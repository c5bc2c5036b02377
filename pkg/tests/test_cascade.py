import numpy as np
import pytest

from ctcascade.cascade import (CascadeChain, denoise_chain, input_channels, load_chain, make_cascade_input,
                               save_chain, train_cascade, zero_chain)
from ctcascade.data import DatasetManifest, Patient, PatchConfig, SlicePair, checksum_arrays, normalize
from ctcascade.errors import FormatError, ParameterError, ShapeError
from ctcascade.metrics import psnr
from ctcascade.models import NetworkSpec
from ctcascade.optim import TrainConfig

SMALL = NetworkSpec("dncnn", depth_modules=1, feature_channels=8)


def toy_dataset(n_train=2, n_test=1, slices=3, size=24, noise=40.0, clean_on_clean=False, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size] / size
    patients = []
    for p in range(n_train + n_test):
        pid = f"p{p:02d}"
        pairs = []
        for k in range(slices):
            normal = (200 * np.sin(6 * xx + p) * np.cos(4 * yy + k) - 100).astype(np.float32)
            low = normal if clean_on_clean else (normal + noise * rng.standard_normal(normal.shape)).astype(np.float32)
            pairs.append(SlicePair(pid, k, normal, low.copy(), 1.0, [seed, p, k]))
        patients.append(Patient(pid, "train" if p < n_train else "test", pairs))
    return DatasetManifest(patients, seed=seed, size=size)


def fast_config(iters=30, lr=1e-3, seed=0):
    return TrainConfig(learning_rate=lr, minibatch=4, total_iterations=iters, seed=seed, log_every=10)


# ---------------------------------------------------------------- stacking

def test_make_cascade_input_channels(rng):
    xl = rng.standard_normal((6, 6)).astype(np.float32)
    assert make_cascade_input(xl, None, 1).shape == (1, 6, 6)
    same = make_cascade_input(xl, xl, 2)
    assert same.shape == (2, 6, 6) and np.array_equal(same[0], same[1])
    prev = rng.standard_normal((6, 6)).astype(np.float32)
    third = make_cascade_input(xl, prev, 3)
    assert third.shape == (2, 6, 6) and np.array_equal(third[1], prev)
    assert make_cascade_input(xl, prev, 3, history=[xl, prev], policy="all").shape == (3, 6, 6)
    assert [input_channels(k) for k in (1, 2, 3)] == [1, 2, 2]


def test_make_cascade_input_errors(rng):
    xl = np.zeros((6, 6), np.float32)
    with pytest.raises(ShapeError):
        make_cascade_input(xl, np.zeros((6, 7), np.float32), 2)
    with pytest.raises(ParameterError):
        make_cascade_input(xl, xl, 1)
    with pytest.raises(ParameterError):
        make_cascade_input(xl, None, 2)
    with pytest.raises(ParameterError):
        make_cascade_input(xl, xl, 0)


# ---------------------------------------------------------------- inference

def test_zero_chain_is_identity(rng):
    xl = (rng.standard_normal((20, 20)) * 300).astype(np.float32)
    final, inter = denoise_chain(zero_chain(3), xl)
    assert len(inter) == 3
    assert all(np.array_equal(x, normalize(xl) * np.float32(512)) for x in inter)
    assert np.max(np.abs(final - xl)) <= 1e-3


def test_empty_chain_rejected():
    with pytest.raises(ParameterError):
        denoise_chain(CascadeChain(), np.zeros((8, 8)))


def test_chain_invariants():
    chain = zero_chain(3)
    assert [n.spec.in_channels for n in chain.networks] == [1, 2, 2]
    assert len({(n.spec.kind, n.spec.depth_modules) for n in chain.networks}) == 1
    with pytest.raises(ParameterError):
        CascadeChain([], "growing")


# ---------------------------------------------------------------- training

def test_single_cascade_and_patch_count():
    ds = toy_dataset()
    chain, records = train_cascade(ds, 1, SMALL, fast_config(), patches=PatchConfig(per_slice=5, size=12))
    assert len(chain) == 1 and len(records) == 1
    assert records[0].n_patches == 5 * 6 and records[0].cascade_index == 1
    assert chain.networks[0].spec.in_channels == 1
    with pytest.raises(ParameterError):
        train_cascade(ds, 0, SMALL, fast_config())


def test_default_patch_count_is_150_per_slice():
    ds = toy_dataset(n_train=1, slices=2, size=48)
    _, records = train_cascade(ds, 1, SMALL, fast_config(iters=1))
    assert records[0].n_patches == 150 * 2


def test_earlier_cascades_untouched_and_checksums_reproducible():
    ds = toy_dataset()
    cfg = fast_config(iters=20)
    patches = PatchConfig(per_slice=4, size=12)
    chain1, rec1 = train_cascade(ds, 1, SMALL, cfg, patches=patches)
    frozen = [p.value.copy() for p in chain1.networks[0].parameters()]
    chain2, rec2 = train_cascade(ds, 1, SMALL, cfg, patches=patches, chain=chain1)
    assert len(chain2) == 2 and chain2.networks[1].spec.in_channels == 2
    assert all(np.array_equal(a, p.value) for a, p in zip(frozen, chain2.networks[0].parameters()))
    full, rec_full = train_cascade(ds, 2, SMALL, cfg, patches=patches)
    assert [r.denoised_checksum for r in rec_full] == [rec1[0].denoised_checksum, rec2[0].denoised_checksum]
    # cascade 1 trains on the raw low-dose images
    train = ds.slices("train")
    assert rec1[0].denoised_checksum == checksum_arrays([normalize(s.low) for s in train])


def test_cascade_two_patches_come_from_whole_image_outputs():
    ds = toy_dataset()
    cfg = fast_config(iters=15)
    chain, records = train_cascade(ds, 2, SMALL, cfg, patches=PatchConfig(per_slice=3, size=12))
    expected = [normalize(denoise_chain(chain.prefix(1), s.low)[0]) for s in ds.slices("train")]
    # whole-image outputs of f1, recomputed independently, give the recorded checksum
    assert checksum_arrays(expected) == records[1].denoised_checksum


def test_clean_on_clean_learns_identity():
    ds = toy_dataset(clean_on_clean=True, size=32)
    # ADAM keeps jittering weights by ~lr, so the residual needs a few thousand steps to settle
    cfg = fast_config(iters=4000, lr=1e-3)
    chain, _ = train_cascade(ds, 1, SMALL, cfg, patches=PatchConfig(per_slice=20, size=16))
    for s in ds.slices("test"):
        out, _ = denoise_chain(chain, s.low)
        assert psnr(out, s.low) > 60.0


def test_mlp_chain_trains_and_runs():
    ds = toy_dataset(n_train=1, slices=2)
    spec = NetworkSpec("mlp", hidden=16)
    chain, _ = train_cascade(ds, 2, spec, fast_config(iters=5), patches=PatchConfig(per_slice=4, size=13))
    assert [n.spec.in_channels for n in chain.networks] == [1, 2]
    final, inter = denoise_chain(chain, ds.slices("test")[0].low)
    assert final.shape == (24, 24) and len(inter) == 2 and np.all(np.isfinite(final))


# ---------------------------------------------------------------- checkpoints

def test_chain_round_trip(tmp_path, rng):
    ds = toy_dataset()
    chain, _ = train_cascade(ds, 2, SMALL, fast_config(iters=5, seed=11), patches=PatchConfig(per_slice=2, size=12))
    save_chain(chain, tmp_path / "c")
    back = load_chain(tmp_path / "c")
    for a, b in zip(chain.networks, back.networks):
        assert all(np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), b.parameters()))
        for x, y in zip(a.bn_layers(), b.bn_layers()):
            assert np.array_equal(x.state.running_mean, y.state.running_mean)
            assert np.array_equal(x.state.running_var, y.state.running_var)
    assert back.provenance == chain.provenance and back.provenance[0]["seed"] == 11
    xl = ds.slices("test")[0].low
    assert np.array_equal(denoise_chain(chain, xl)[0], denoise_chain(back, xl)[0])


def test_truncated_blob_fails_whole_load(tmp_path):
    save_chain(zero_chain(2), tmp_path / "c")
    blob = tmp_path / "c" / "cascade_02" / "conv1.weight.ten"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_chain(tmp_path / "c")
    meta = tmp_path / "c" / "chain.json"
    meta.write_text(meta.read_text().replace('"format_version": 1', '"format_version": 9'))
    with pytest.raises(FormatError):
        load_chain(tmp_path / "c")
