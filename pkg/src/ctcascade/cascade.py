"""Cascaded training and chained inference.

Cascade ``k`` sees the low-dose image and the output of cascade ``k - 1``
stacked as channels, and (for the residual CNN) predicts the noise left in
that output::

    x_D(0) = x_L
    x_D(k) = x_D(k-1) - f_k([x_L, x_D(k-1)])        (k = 1: input is [x_L])

Each f_k is trained on whole-image outputs of f_1..f_{k-1} over the
training set and earlier networks are never touched again.
"""
from dataclasses import asdict, dataclass, field
import json
import logging
import os
import time

import numpy as np

from .data import (PatchConfig, build_patch_stream, checksum_arrays, denormalize, minibatch_iter,
                   mlp_aggregate, mlp_extract, normalize, write_patch_audit)
from .errors import FormatError, ParameterError, ShapeError
from .models import NetworkSpec, build_network, load_network, predict_denoised, save_network
from .optim import TrainConfig, training_loop

log = logging.getLogger(__name__)

CHAIN_VERSION = 1
POLICIES = ("latest", "all")
MLP_BATCH = 4096


@dataclass
class CascadeChain:
    """Trained networks f_1..f_K and how their inputs are stacked.

    ``stacking_policy`` "latest" feeds [x_L, x_D(k-1)] to every k >= 2;
    "all" feeds [x_L, x_D(1), ..., x_D(k-1)].
    """

    networks: list = field(default_factory=list)
    stacking_policy: str = "latest"
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        if self.stacking_policy not in POLICIES:
            raise ParameterError(f"unknown stacking policy {self.stacking_policy!r}")

    def __len__(self):
        return len(self.networks)

    def prefix(self, k):
        return CascadeChain(self.networks[:k], self.stacking_policy, self.provenance[:k])

    @property
    def kind(self):
        return self.networks[0].spec.kind if self.networks else None


@dataclass
class CascadeTrainRecord:
    cascade_index: int
    trace: list
    denoised_checksum: str
    n_patches: int
    wall_seconds: float


def input_channels(k, policy="latest"):
    if k == 1:
        return 1
    return 2 if policy == "latest" else k


def make_cascade_input(x_low, x_prev, k, history=None, policy="latest"):
    """Stack the network input for cascade ``k`` as (C, H, W).

    k = 1 takes ``x_low`` alone and ``x_prev`` must be absent. For k >= 2
    channel 0 is ``x_low`` and channel 1 the latest intermediate; with the
    "all" policy ``history`` (x_D(1)..x_D(k-1)) replaces the latter.
    """
    if k < 1:
        raise ParameterError(f"cascade index must be >= 1, got {k}")
    x_low = np.asarray(x_low)
    if k == 1:
        if x_prev is not None:
            raise ParameterError("cascade 1 takes only the low-dose image")
        return x_low[None].copy()
    if x_prev is None:
        raise ParameterError(f"cascade {k} needs the previous intermediate")
    x_prev = np.asarray(x_prev)
    if x_prev.shape != x_low.shape:
        raise ShapeError(f"intermediate {x_prev.shape} and low-dose {x_low.shape} differ in extents")
    if policy == "latest":
        return np.stack([x_low, x_prev])
    if history is None or len(history) != k - 1:
        raise ParameterError(f"the 'all' policy needs {k - 1} intermediates for cascade {k}")
    return np.stack([x_low, *history])


def _apply_dncnn(network, stacked, prev):
    return predict_denoised(network, prev, stacked[None])


def _apply_mlp(network, stacked):
    patch = network.spec.patch
    patches, corners = mlp_extract(stacked, patch=patch, stride=3)
    preds = np.concatenate([
        network.forward(np.ascontiguousarray(patches[i:i + MLP_BATCH]), training=False)
        for i in range(0, len(patches), MLP_BATCH)
    ])
    return mlp_aggregate(preds, corners, stacked.shape[-2:]).astype(np.float32)


def apply_stage(network, x_low_n, prev_n, k, history_n=None, policy="latest"):
    """One cascade step on a whole normalized image; returns the next intermediate."""
    stacked = make_cascade_input(x_low_n, None if k == 1 else prev_n, k, history_n, policy)
    if network.spec.kind == "mlp":
        return _apply_mlp(network, stacked)
    return _apply_dncnn(network, stacked, prev_n)


def denoise_chain(chain, x_low):
    """Run the chain on one HU slice; returns (final, [x_D(1), ..., x_D(K)]) in HU."""
    if len(chain) == 0:
        raise ParameterError("cannot denoise with an empty chain")
    x_low = np.asarray(x_low, dtype=np.float32)
    if not np.all(np.isfinite(x_low)):
        raise ParameterError("low-dose slice contains non-finite values")
    xl = normalize(x_low)
    prev = xl
    history = []
    out = []
    for k, net in enumerate(chain.networks, start=1):
        prev = apply_stage(net, xl, prev, k, history, chain.stacking_policy)
        history.append(prev)
        out.append(denormalize(prev))
    return out[-1], out


# --------------------------------------------------------------------------
# training

def _training_arrays(lows_n, prevs_n, normals_n, k, kind, histories=None, policy="latest"):
    inputs = np.stack([
        make_cascade_input(xl, None if k == 1 else xp, k, h, policy)
        for xl, xp, h in zip(lows_n, prevs_n, histories or [None] * len(lows_n))
    ])
    if kind == "mlp":
        targets = np.stack(normals_n)[:, None]
    else:
        targets = (np.stack(prevs_n) - np.stack(normals_n))[:, None]
    return np.ascontiguousarray(inputs, dtype=np.float32), np.ascontiguousarray(targets, dtype=np.float32)


def train_cascade(dataset, n_cascades, spec_template, config, patches=None, policy="latest",
                  chain=None, on_cascade=None, audit_dir=None):
    """Train ``n_cascades`` networks on the dataset's training split.

    Before cascade ``k`` the whole training images are passed through
    f_1..f_{k-1}; fresh patch positions are then drawn from the stacked
    inputs and residual targets. ``chain`` continues an existing chain.
    ``on_cascade(k, chain, record)`` is called after each cascade. With
    ``audit_dir`` every sampled patch position is logged to
    ``patches_cascade_XX.csv`` there. Returns (chain, records).
    """
    if n_cascades < 1:
        raise ParameterError(f"cascade count must be >= 1, got {n_cascades}")
    if patches is None:
        patches = PatchConfig(per_slice=500, size=13) if spec_template.kind == "mlp" else PatchConfig()
    train = dataset.split("train")
    if not train or not any(p.slices for p in train):
        raise ParameterError("dataset has no training slices")
    slices = [s for p in train for s in p.slices]
    pids = [s.patient_id for s in slices]
    lows_n = [normalize(s.low) for s in slices]
    normals_n = [normalize(s.normal) for s in slices]

    chain = chain if chain is not None else CascadeChain([], policy, [])
    prevs_n = list(lows_n)
    histories = [[] for _ in slices]
    for k, net in enumerate(chain.networks, start=1):
        prevs_n = [apply_stage(net, xl, xp, k, h, chain.stacking_policy)
                   for xl, xp, h in zip(lows_n, prevs_n, histories)]
        for h, xp in zip(histories, prevs_n):
            h.append(xp)

    records = []
    start = len(chain) + 1
    for k in range(start, start + n_cascades):
        t0 = time.perf_counter()
        checksum = checksum_arrays(prevs_n)
        inputs, targets = _training_arrays(lows_n, prevs_n, normals_n, k, spec_template.kind,
                                           [list(h) for h in histories], chain.stacking_policy)
        rng = np.random.default_rng([config.seed, k, 1])
        stream = build_patch_stream(inputs, targets, pids, patches.per_slice, patches.size, rng)
        if audit_dir is not None:
            os.makedirs(audit_dir, exist_ok=True)
            write_patch_audit(stream, [s.index for s in slices],
                              os.path.join(audit_dir, f"patches_cascade_{k:02d}.csv"))
        spec = spec_template.with_channels(input_channels(k, chain.stacking_policy))
        net = build_network(spec, np.random.default_rng([config.seed, k, 0]), seed=config.seed)
        log.info("cascade %d: %d patches, %s", k, len(stream), net)
        result = training_loop(net, minibatch_iter(stream, config.minibatch), config)
        chain.networks.append(net)
        chain.provenance.append({
            "cascade": k,
            "seed": config.seed,
            "config": config.to_dict(),
            "patches": patches.to_dict(),
            "n_patches": len(stream),
            "denoised_checksum": checksum,
        })
        # whole-image denoising of the training set for the next cascade
        prevs_n = [apply_stage(net, xl, xp, k, h, chain.stacking_policy)
                   for xl, xp, h in zip(lows_n, prevs_n, histories)]
        for h, xp in zip(histories, prevs_n):
            h.append(xp)
        record = CascadeTrainRecord(k, result.trace, checksum, len(stream), time.perf_counter() - t0)
        records.append(record)
        if on_cascade is not None:
            on_cascade(k, chain, record)
    return chain, records


# --------------------------------------------------------------------------
# checkpoints

def _cascade_dir(path, k):
    return os.path.join(path, f"cascade_{k:02d}")


def save_chain(chain, path):
    os.makedirs(path, exist_ok=True)
    for k, net in enumerate(chain.networks, start=1):
        save_network(net, _cascade_dir(path, k))
    meta = {
        "format_version": CHAIN_VERSION,
        "n_cascades": len(chain),
        "stacking_policy": chain.stacking_policy,
        "provenance": chain.provenance,
    }
    with open(os.path.join(path, "chain.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_chain(path):
    """Load a chain; nothing is returned unless every cascade loads cleanly."""
    try:
        with open(os.path.join(path, "chain.json")) as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read chain metadata in {path}: {exc}") from exc
    if meta.get("format_version") != CHAIN_VERSION:
        raise FormatError(f"unsupported chain version {meta.get('format_version')!r}")
    networks = [load_network(_cascade_dir(path, k)) for k in range(1, meta["n_cascades"] + 1)]
    chain = CascadeChain(networks, meta["stacking_policy"], meta.get("provenance", []))
    for k, net in enumerate(networks, start=1):
        if net.spec.in_channels != input_channels(k, chain.stacking_policy):
            raise FormatError(f"cascade {k} has {net.spec.in_channels} input channels")
    return chain


def write_records(records, path):
    with open(path, "w") as fh:
        json.dump([asdict(r) for r in records], fh, indent=2)
        fh.write("\n")


def zero_network(spec, seed=0):
    """A network whose output is identically zero (all final-layer parameters zero)."""
    net = build_network(spec, np.random.default_rng(seed), seed=seed)
    for p in net.layers[-1].parameters():
        p.value[...] = 0
    return net


def zero_chain(n_cascades, spec_template=None, policy="latest"):
    spec_template = spec_template or NetworkSpec(depth_modules=1, feature_channels=4)
    nets = []
    for k in range(1, n_cascades + 1):
        net = zero_network(spec_template.with_channels(input_channels(k, policy)), seed=k)
        for bn in net.bn_layers():
            bn.state.running_mean = np.zeros(bn.state.channels, dtype=np.float32)
            bn.state.running_var = np.ones(bn.state.channels, dtype=np.float32)
        nets.append(net)
    return CascadeChain(nets, policy, [{"cascade": k} for k in range(1, n_cascades + 1)])

