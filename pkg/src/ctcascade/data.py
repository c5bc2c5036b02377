"""Datasets, patch sampling, normalization and MLP patch tiling.

Images are kept in Hounsfield units on disk and in manifests; networks see
them divided by 512 (:func:`normalize`).
"""
from dataclasses import asdict, dataclass, field
import csv
import hashlib
import json
import os

import numpy as np

from . import kernels
from .errors import ContractError, FormatError, ParameterError, ShapeError
from .tensor import load_ten, save_ten

HU_SCALE = 512.0
MANIFEST_VERSION = 1


# --------------------------------------------------------------------------
# manifests

@dataclass
class SlicePair:
    """Co-registered normal- and low-dose slices (HU, float32, 2-D)."""

    patient_id: str
    index: int
    normal: np.ndarray = field(repr=False)
    low: np.ndarray = field(repr=False)
    spacing: float
    seed: list = field(default_factory=list)

    def __post_init__(self):
        if self.normal.shape != self.low.shape:
            raise ShapeError(f"normal {self.normal.shape} and low {self.low.shape} slices differ in shape")

    @property
    def stem(self):
        return f"{self.patient_id}/s{self.index:03d}"


@dataclass
class Patient:
    patient_id: str
    split: str
    slices: list = field(default_factory=list)


@dataclass
class DatasetManifest:
    """Patient-grouped slice pairs with split labels and provenance."""

    patients: list
    seed: int = 0
    dose_fraction: float = 0.25
    incident_photons: float = 1e5
    mu_water: float = 0.02
    size: int = 64
    n_angles: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise ParameterError(f"patient ids are not unique: {ids}")
        for p in self.patients:
            if p.split not in ("train", "test"):
                raise ParameterError(f"patient {p.patient_id} has unknown split {p.split!r}")

    def split(self, name):
        return [p for p in self.patients if p.split == name]

    def slices(self, split=None):
        return [s for p in self.patients if split is None or p.split == split for s in p.slices]

    def metadata(self):
        return {
            "format_version": MANIFEST_VERSION,
            "seed": self.seed,
            "dose_fraction": self.dose_fraction,
            "incident_photons": self.incident_photons,
            "mu_water": self.mu_water,
            "size": self.size,
            "n_angles": self.n_angles,
            "extra": self.extra,
        }


def save_dataset(dataset, path):
    """Write ``manifest.json`` and per-slice ``.ten`` files (HU) under ``path``."""
    os.makedirs(path, exist_ok=True)
    patients = []
    for p in dataset.patients:
        os.makedirs(os.path.join(path, p.patient_id), exist_ok=True)
        entries = []
        for s in p.slices:
            normal_rel = f"{s.stem}_normal.ten"
            low_rel = f"{s.stem}_low.ten"
            save_ten(os.path.join(path, normal_rel), s.normal)
            save_ten(os.path.join(path, low_rel), s.low)
            entries.append({"index": s.index, "normal": normal_rel, "low": low_rel,
                            "spacing": s.spacing, "seed": list(s.seed)})
        patients.append({"patient_id": p.patient_id, "split": p.split, "slices": entries})
    manifest = {**dataset.metadata(), "patients": patients}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path):
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read dataset manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"unsupported dataset manifest version {manifest.get('format_version')!r}")
    patients = []
    for p in manifest["patients"]:
        slices = []
        for e in p["slices"]:
            try:
                normal = load_ten(os.path.join(path, e["normal"]))
                low = load_ten(os.path.join(path, e["low"]))
            except OSError as exc:
                raise FormatError(f"missing slice file for patient {p['patient_id']}: {exc}") from exc
            slices.append(SlicePair(p["patient_id"], e["index"], normal, low, e["spacing"], e.get("seed", [])))
        patients.append(Patient(p["patient_id"], p["split"], slices))
    return DatasetManifest(
        patients,
        seed=manifest["seed"],
        dose_fraction=manifest["dose_fraction"],
        incident_photons=manifest["incident_photons"],
        mu_water=manifest["mu_water"],
        size=manifest["size"],
        n_angles=manifest["n_angles"],
        extra=manifest.get("extra", {}),
    )


def checksum_arrays(arrays):
    """SHA-256 over the float32 bytes of ``arrays`` in order."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float32).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# normalization

def normalize(hu):
    return np.asarray(hu) / np.float32(HU_SCALE)


def denormalize(x):
    return np.asarray(x) * np.float32(HU_SCALE)


# --------------------------------------------------------------------------
# patch sampling

def sample_patch_corners(shape, n, size, rng):
    """``n`` top-left corners uniform over fully contained positions (with replacement)."""
    h, w = shape[-2:]
    if size > h or size > w:
        raise ParameterError(f"patch size {size} exceeds slice extents {h}x{w}")
    ys = rng.integers(0, h - size + 1, size=n)
    xs = rng.integers(0, w - size + 1, size=n)
    return np.stack([ys, xs], axis=1)


def extract_patches(stacked_input, target, n, size, rng):
    """Crop ``n`` (input, target) patch pairs at identical random positions.

    ``stacked_input`` is (C, H, W) and ``target`` (1, H, W) or (H, W).
    Returns (inputs (n, C, s, s), targets (n, 1, s, s), corners (n, 2)).
    """
    stacked_input = np.asarray(stacked_input)
    if stacked_input.ndim == 2:
        stacked_input = stacked_input[None]
    target = np.asarray(target).reshape(1, *target.shape[-2:])
    if stacked_input.shape[-2:] != target.shape[-2:]:
        raise ShapeError(f"input {stacked_input.shape} and target {target.shape} differ in extents")
    corners = sample_patch_corners(stacked_input.shape, n, size, rng)
    inputs = np.stack([stacked_input[:, y:y + size, x:x + size] for y, x in corners])
    targets = np.stack([target[:, y:y + size, x:x + size] for y, x in corners])
    return inputs, targets, corners


def shuffle_within_patient(patient_ids, rng):
    """Permutation that shuffles each patient's contiguous block independently.

    ``patient_ids`` lists the owner of each stream element and must be
    grouped (all of a patient's elements adjacent). Block order is kept.
    """
    patient_ids = list(patient_ids)
    order = []
    start = 0
    seen = set()
    while start < len(patient_ids):
        pid = patient_ids[start]
        if pid in seen:
            raise ContractError(f"patch stream is not grouped by patient: {pid!r} appears in two blocks")
        seen.add(pid)
        stop = start
        while stop < len(patient_ids) and patient_ids[stop] == pid:
            stop += 1
        order.extend(start + rng.permutation(stop - start))
        start = stop
    return np.asarray(order, dtype=np.int64)


@dataclass
class PatchStream:
    """Patch references into a stack of whole slices, cropped on demand.

    ``inputs`` is (S, C, H, W) and ``targets`` (S, 1, H, W), both normalized.
    Row ``k`` of the stream is the ``size`` x ``size`` crop of slice
    ``slice_index[k]`` at ``corners[k]``.
    """

    inputs: np.ndarray = field(repr=False)
    targets: np.ndarray = field(repr=False)
    slice_index: np.ndarray
    corners: np.ndarray
    patient_ids: list
    size: int

    def __len__(self):
        return len(self.slice_index)

    def reorder(self, order):
        return PatchStream(self.inputs, self.targets, self.slice_index[order], self.corners[order],
                           [self.patient_ids[i] for i in order], self.size)

    def crop(self, rows):
        s = self.size
        c = self.inputs.shape[1]
        xb = np.empty((len(rows), c, s, s), dtype=self.inputs.dtype)
        yb = np.empty((len(rows), 1, s, s), dtype=self.targets.dtype)
        for k, r in enumerate(rows):
            i = self.slice_index[r]
            y, x = self.corners[r]
            xb[k] = self.inputs[i, :, y:y + s, x:x + s]
            yb[k] = self.targets[i, :, y:y + s, x:x + s]
        return xb, yb

    def audit_rows(self, slice_labels):
        """Rows of ``patient,slice,y,x`` for the patch audit log."""
        return [(self.patient_ids[k], slice_labels[self.slice_index[k]], int(y), int(x))
                for k, (y, x) in enumerate(self.corners)]


def write_patch_audit(stream, slice_labels, path):
    """CSV of ``patient,slice,y,x`` for every patch, in stream order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient", "slice", "y", "x"])
        writer.writerows(stream.audit_rows(slice_labels))


def build_patch_stream(inputs, targets, patient_ids, per_slice, size, rng):
    """Sample ``per_slice`` patch positions on every slice, in slice order.

    Slices must be grouped by patient; the result is then shuffled within
    each patient block only.
    """
    inputs = np.asarray(inputs)
    n_slices = inputs.shape[0]
    corners = np.concatenate([sample_patch_corners(inputs.shape, per_slice, size, rng) for _ in range(n_slices)]) \
        if n_slices else np.empty((0, 2), dtype=np.int64)
    slice_index = np.repeat(np.arange(n_slices), per_slice)
    pids = [patient_ids[i] for i in slice_index]
    stream = PatchStream(inputs, np.asarray(targets), slice_index, corners, pids, size)
    return stream.reorder(shuffle_within_patient(pids, rng))


def minibatch_iter(stream, minibatch, n_batches=None):
    """Yield consecutive (inputs, targets) batches, cycling the stream in order.

    A batch that runs off the end of the stream wraps around to its start,
    so every batch has exactly ``minibatch`` rows. Stops after ``n_batches``
    when given, otherwise never.
    """
    n = len(stream)
    if n == 0:
        raise ParameterError("cannot iterate minibatches over an empty patch stream")
    pos = 0
    produced = 0
    while n_batches is None or produced < n_batches:
        rows = (pos + np.arange(minibatch)) % n
        pos = (pos + minibatch) % n
        produced += 1
        yield stream.crop(rows)


# --------------------------------------------------------------------------
# MLP tiling

def grid_positions(extent, patch, stride):
    """Top-left offsets at ``stride``, with a final one clamped to the border."""
    if extent < patch:
        raise ParameterError(f"extent {extent} is smaller than patch {patch}")
    pos = list(range(0, extent - patch + 1, stride))
    if pos[-1] != extent - patch:
        pos.append(extent - patch)
    return np.asarray(pos, dtype=np.int64)


def mlp_extract(image, patch=13, stride=3):
    """Tile ``image`` ((H, W) or (C, H, W)) into overlapping patches.

    Returns (patches (P, C, patch, patch), corners (P, 2)).
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    _, h, w = image.shape
    ys = grid_positions(h, patch, stride)
    xs = grid_positions(w, patch, stride)
    corners = np.array([(y, x) for y in ys for x in xs], dtype=np.int64)
    patches = np.stack([image[:, y:y + patch, x:x + patch] for y, x in corners])
    return patches, corners


def gaussian_window(patch=13, sigma=None):
    sigma = patch / 3.0 if sigma is None else sigma
    r = np.arange(patch, dtype=np.float64) - (patch - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return np.outer(g, g)


def mlp_aggregate(patches, corners, shape, weights=None):
    """Gaussian-weighted average of overlapping patch predictions.

    ``patches`` is (P, patch, patch) or (P, 1, patch, patch); ``shape`` the
    (H, W) output extents. Every output pixel must be covered.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim == 4:
        patches = patches[:, 0]
    if weights is None:
        weights = gaussian_window(patches.shape[-1])
    acc, wsum = kernels.aggregate_patches(np.ascontiguousarray(patches), corners, tuple(shape),
                                          np.ascontiguousarray(weights, dtype=np.float64))
    if np.any(wsum <= 0):
        raise ContractError("some pixels are not covered by any patch")
    return acc / wsum


@dataclass
class PatchConfig:
    """Sampling parameters for one cascade's training set."""

    per_slice: int = 150
    size: int = 40

    def to_dict(self):
        return asdict(self)
