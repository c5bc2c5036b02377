"""Synthetic CT data: ellipse phantoms, parallel-beam projection, Poisson
dose reduction and filtered backprojection.

Geometry is in pixel units internally. Row ``r`` and column ``c`` of an
``N x N`` image sit at ``y = r - (N-1)/2``, ``x = c - (N-1)/2``; a ray at
angle ``theta`` and detector offset ``t`` is the line
``x cos(theta) + y sin(theta) = t``. Attenuation is per mm and line
integrals are dimensionless, so ``radon`` multiplies by the pixel spacing
and ``fbp`` divides by the detector spacing.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from . import kernels
from .data import DatasetManifest, Patient, SlicePair
from .errors import ParameterError

MU_WATER = 0.02  # per mm
DEFAULT_I0 = 1e5
RAY_STEP = 0.5  # pixels between samples along a ray


# --------------------------------------------------------------------------
# phantoms

@dataclass
class Ellipse:
    """Ellipse in normalized coordinates (the image spans [-1, 1] on both axes).

    ``value`` is an absolute attenuation painted over what lies beneath,
    unless ``additive`` is set (Shepp-Logan style).
    """

    cx: float
    cy: float
    a: float
    b: float
    angle: float = 0.0  # degrees
    value: float = 0.0
    label: str = ""
    additive: bool = False
    delta: float = 0.0  # lesions: attenuation offset from the host tissue


@dataclass
class Phantom:
    attenuation: np.ndarray = field(repr=False)
    pixel_spacing: float
    ellipses: list = field(default_factory=list)

    @property
    def lesions(self):
        return [e for e in self.ellipses if e.label == "lesion"]


def rasterize(ellipses, size, supersample=4):
    """Paint ellipses onto a ``size`` x ``size`` grid with sub-pixel averaging."""
    ss = max(1, int(supersample))
    n = size * ss
    coords = (np.arange(n, dtype=np.float64) + 0.5) / n * 2.0 - 1.0
    ys, xs = np.meshgrid(-coords, coords, indexing="ij")  # y up, first row at the top
    fine = np.zeros((n, n), dtype=np.float64)
    for e in ellipses:
        th = math.radians(e.angle)
        dx, dy = xs - e.cx, ys - e.cy
        u = (dx * math.cos(th) + dy * math.sin(th)) / e.a
        v = (-dx * math.sin(th) + dy * math.cos(th)) / e.b
        inside = u * u + v * v <= 1.0
        if e.additive:
            fine[inside] += e.value
        else:
            fine[inside] = e.value
    return fine.reshape(size, ss, size, ss).mean(axis=(1, 3))


# modified Shepp-Logan (Toft): (value, a, b, cx, cy, angle)
_SHEPP_LOGAN = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
]


def shepp_logan(size, supersample=4):
    """The modified Shepp-Logan head phantom, values in [0, 1]."""
    ellipses = [Ellipse(cx, cy, a, b, ang, v, "head", additive=True)
                for v, a, b, cx, cy, ang in _SHEPP_LOGAN]
    return rasterize(ellipses, size, supersample)


def disc(size, radius, value=1.0, supersample=8):
    """Centered uniform disc; ``radius`` as a fraction of the half-width."""
    return rasterize([Ellipse(0.0, 0.0, radius, radius, 0.0, value)], size, supersample)


@dataclass
class PhantomSpec:
    """What to put in an abdominal phantom.

    ``z`` in [0, 1] is the slice position; anatomy drawn from the same
    generator state varies smoothly with it. An empty spec
    (``PhantomSpec.empty()``) yields an all-zero map.
    """

    body: bool = True
    organs: bool = True
    max_lesions: int = 3
    lesion_contrast: tuple = (0.01, 0.05)
    fov_mm: float = 380.0
    z: float = 0.5
    mu_water: float = MU_WATER
    supersample: int = 4

    @classmethod
    def empty(cls):
        return cls(body=False, organs=False, max_lesions=0)


def _hu(mu_water, hu):
    return mu_water * (1.0 + hu / 1000.0)


def make_phantom(size, rng, spec=None):
    """Abdominal ellipse phantom with 0-3 low-contrast lesions.

    All random draws describe the patient (organ layout, lesion positions and
    their extent along z); ``spec.z`` then selects the cross-section, so the
    same generator seed with neighbouring ``z`` gives neighbouring anatomy.
    """
    if size < 32:
        raise ParameterError("phantom size must be >= 32")
    spec = PhantomSpec() if spec is None else spec
    mw = spec.mu_water
    z = float(spec.z)
    u = rng.uniform  # all draws happen unconditionally so the stream is layout-independent

    body_a, body_b = u(0.80, 0.90), u(0.58, 0.68)
    fat = u(0.05, 0.09)
    liver = (u(-0.45, -0.30), u(0.00, 0.15), u(0.30, 0.40), u(0.25, 0.35), u(-25, 5))
    spleen = (u(0.40, 0.55), u(-0.05, 0.15), u(0.10, 0.16), u(0.14, 0.20), u(-30, 30))
    kidney = (u(0.22, 0.30), u(-0.25, -0.15), u(0.07, 0.10), u(0.10, 0.14))
    stomach = (u(0.10, 0.30), u(0.20, 0.35), u(0.10, 0.18), u(0.08, 0.13))
    gas = (u(-0.1, 0.3), u(0.0, 0.3), u(0.02, 0.05))
    lesion_draws = [
        (u(0.0, 1.0), u(0.15, 0.35), u(-0.8, 0.8), u(-0.8, 0.8), u(0.05, 0.12),
         u(*spec.lesion_contrast), rng.choice([-1.0, 1.0]))
        for _ in range(3)
    ]

    ellipses = []
    if spec.body:
        s = 1.0 + 0.05 * math.sin(math.pi * z)
        ellipses.append(Ellipse(0.0, 0.0, body_a * s, body_b * s, 0.0, _hu(mw, -90), "fat"))
        ellipses.append(Ellipse(0.0, 0.0, (body_a - fat) * s, (body_b - fat) * s, 0.0, _hu(mw, 40), "soft"))
    if spec.organs:
        lx, ly, la, lb, lang = liver
        grow = 0.6 + 0.4 * math.cos(math.pi * (z - 0.3))
        ellipses.append(Ellipse(lx, ly, la * grow, lb * grow, lang, _hu(mw, 60), "liver"))
        sx, sy, sa, sb, sang = spleen
        ellipses.append(Ellipse(sx, sy, sa * (0.7 + 0.3 * z), sb, sang, _hu(mw, 45), "spleen"))
        gx, gy, ga, gb = stomach
        ellipses.append(Ellipse(gx, gy + 0.1 * z, ga, gb * (1.2 - 0.4 * z), 0.0, _hu(mw, 20), "stomach"))
        ellipses.append(Ellipse(gas[0], gas[1], gas[2], gas[2] * 0.7, 0.0, _hu(mw, -900), "gas"))
        if z > 0.35:
            kscale = min(1.0, (z - 0.35) / 0.3)
            kx, ky, ka, kb = kidney
            for side in (-1.0, 1.0):
                ellipses.append(Ellipse(side * kx, ky, ka * kscale, kb * kscale, side * 20.0, _hu(mw, 30), "kidney"))
        ellipses.append(Ellipse(0.0, -0.12, 0.05, 0.05, 0.0, _hu(mw, 150), "aorta"))
        ellipses.append(Ellipse(0.0, -0.42, 0.13, 0.11, 0.0, _hu(mw, 700), "bone"))
        ellipses.append(Ellipse(0.0, -0.42, 0.08, 0.065, 0.0, _hu(mw, 250), "marrow"))
    if spec.organs and spec.max_lesions > 0:
        lx, ly, la, lb, lang = liver
        grow = 0.6 + 0.4 * math.cos(math.pi * (z - 0.3))
        for zc, zr, px, py, radius, contrast, sign in lesion_draws[:spec.max_lesions]:
            frac = 1.0 - ((z - zc) / zr) ** 2
            if frac <= 0:
                continue
            r = radius * math.sqrt(frac) * la * grow
            # lesions sit inside the liver, host attenuation = liver
            cx = lx + px * (la * grow - r) * 0.8
            cy = ly + py * (lb * grow - r) * 0.8
            delta = sign * contrast * mw
            ellipses.append(Ellipse(cx, cy, r, r, 0.0, _hu(mw, 60) + delta, "lesion", delta=delta))

    pixel_spacing = spec.fov_mm / size
    if not ellipses:
        return Phantom(np.zeros((size, size), dtype=np.float64), pixel_spacing, [])
    att = rasterize(ellipses, size, spec.supersample)
    np.maximum(att, 0.0, out=att)
    return Phantom(att, pixel_spacing, ellipses)


# --------------------------------------------------------------------------
# projection

@dataclass
class Sinogram:
    values: np.ndarray = field(repr=False)  # (angles, detectors)
    angles: np.ndarray = field(repr=False)
    detector_spacing: float
    image_size: int

    @property
    def n_angles(self):
        return self.values.shape[0]

    @property
    def n_detectors(self):
        return self.values.shape[1]

    def detector_positions(self):
        """Detector centers in pixel units."""
        d = self.n_detectors
        return np.arange(d, dtype=np.float64) - (d - 1) / 2.0


def default_detectors(size):
    return int(math.ceil(size * math.sqrt(2.0))) + 2


def projection_angles(n_angles):
    return np.arange(n_angles, dtype=np.float64) * (math.pi / n_angles)


def radon(image, n_angles, n_detectors=None, pixel_spacing=1.0):
    """Parallel-beam line integrals by bilinear sampling every half pixel."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ParameterError(f"radon needs a square image, got {image.shape}")
    if n_angles < 1:
        raise ParameterError("n_angles must be >= 1")
    size = image.shape[0]
    diag = size * math.sqrt(2.0)
    if n_detectors is None:
        n_detectors = default_detectors(size)
    if n_detectors < diag:
        raise ParameterError(f"need at least {math.ceil(diag)} detectors for a {size}-pixel image")
    angles = projection_angles(n_angles)
    det = np.arange(n_detectors, dtype=np.float64) - (n_detectors - 1) / 2.0
    half = diag / 2.0 + 1.0
    n_ray = int(math.ceil(2 * half / RAY_STEP)) + 1
    ray = (np.arange(n_ray, dtype=np.float64) - (n_ray - 1) / 2.0) * RAY_STEP
    sums = kernels.radon_project(image, np.cos(angles), np.sin(angles), det, ray, (size - 1) / 2.0)
    return Sinogram(sums * (RAY_STEP * pixel_spacing), angles, float(pixel_spacing), size)


@dataclass
class DoseModel:
    incident_photons: float = DEFAULT_I0
    dose_fraction: float = 1.0

    def __post_init__(self):
        if self.incident_photons < 1:
            raise ParameterError("incident_photons must be >= 1")
        if not 0 < self.dose_fraction <= 1:
            raise ParameterError("dose_fraction must lie in (0, 1]")


def apply_poisson_dose(sinogram, dose, rng):
    """Replace line integrals by their Beer-Lambert Poisson re-estimate.

    counts ~ Poisson(I0 * f * exp(-p)); p_hat = ln(I0 * f / max(counts, 1)).
    """
    p = np.asarray(sinogram.values, dtype=np.float64)
    blank = dose.incident_photons * dose.dose_fraction
    counts = rng.poisson(blank * np.exp(-p))
    noisy = np.log(blank / np.maximum(counts, 1))
    return Sinogram(noisy, sinogram.angles.copy(), sinogram.detector_spacing, sinogram.image_size)


def ramp_filter(n_detectors):
    """Frequency response of the band-limited Ram-Lak kernel, zero-padded.

    Built from the spatial kernel (1/4 at 0, -1/(pi n)^2 at odd n) so the
    DC gain is exactly zero after padding.
    """
    padded = max(64, 1 << int(math.ceil(math.log2(2 * n_detectors))))
    n = np.concatenate([np.arange(0, padded // 2 + 1), np.arange(-padded // 2 + 1, 0)]).astype(np.float64)
    h = np.zeros(padded, dtype=np.float64)
    h[0] = 0.25
    odd = n % 2 == 1
    h[odd] = -1.0 / (math.pi * n[odd]) ** 2
    return np.real(np.fft.fft(h)), padded


def filter_projections(values):
    values = np.asarray(values, dtype=np.float64)
    response, padded = ramp_filter(values.shape[1])
    spectrum = np.fft.fft(values, n=padded, axis=1) * response
    return np.real(np.fft.ifft(spectrum, axis=1))[:, :values.shape[1]]


def fbp(sinogram, size=None):
    """Ram-Lak filtered backprojection, weighted by pi / n_angles."""
    size = sinogram.image_size if size is None else size
    filtered = filter_projections(sinogram.values)
    det = sinogram.detector_positions()
    angles = sinogram.angles
    image = kernels.backproject(filtered, np.cos(angles), np.sin(angles), det[0], 1.0, size, (size - 1) / 2.0)
    return image * (math.pi / len(angles)) / sinogram.detector_spacing


def mu_to_hu(mu, mu_water=MU_WATER):
    if mu_water <= 0:
        raise ParameterError("mu_water must be positive")
    return 1000.0 * (np.asarray(mu) - mu_water) / mu_water


def hu_to_mu(hu, mu_water=MU_WATER):
    if mu_water <= 0:
        raise ParameterError("mu_water must be positive")
    return mu_water * (1.0 + np.asarray(hu) / 1000.0)


# --------------------------------------------------------------------------
# datasets

def default_angles(size):
    return max(16, int(round(1.5 * size)))


def _slice_rng(seed, patient, index, stream):
    return np.random.default_rng([seed, patient, index, stream])


def simulate_slice(phantom, n_angles, dose, rng, mu_water=MU_WATER):
    """Reconstruct ``phantom`` at one dose level; returns HU float32."""
    sino = radon(phantom.attenuation, n_angles, pixel_spacing=phantom.pixel_spacing)
    noisy = apply_poisson_dose(sino, dose, rng)
    return mu_to_hu(fbp(noisy), mu_water).astype(np.float32)


def generate_dataset(n_patients, slices_per_patient, size, dose_fraction, seed,
                     n_train=None, incident_photons=DEFAULT_I0, mu_water=MU_WATER,
                     n_angles=None, fov_mm=380.0):
    """Simulate a patient-grouped dataset of normal/low-dose slice pairs.

    Each patient's anatomy comes from one generator seed; slices sample it
    at evenly spaced ``z``. Normal dose uses ``dose_fraction = 1`` with a
    finite photon count, so normal-dose slices are noisy too. The first
    ``n_train`` patients form the training split.
    """
    if n_patients < 1 or slices_per_patient < 1:
        raise ParameterError("n_patients and slices_per_patient must be >= 1")
    if n_train is None:
        n_train = n_patients if n_patients == 1 else max(1, int(round(0.7 * n_patients)))
    if not 0 <= n_train <= n_patients:
        raise ParameterError(f"n_train={n_train} is outside [0, {n_patients}]")
    full = DoseModel(incident_photons, 1.0)
    low = DoseModel(incident_photons, dose_fraction)
    n_angles = default_angles(size) if n_angles is None else n_angles
    patients = []
    for p in range(n_patients):
        pid = f"p{p:02d}"
        slices = []
        for k in range(slices_per_patient):
            z = (k + 0.5) / slices_per_patient
            spec = PhantomSpec(z=z, fov_mm=fov_mm, mu_water=mu_water)
            phantom = make_phantom(size, _slice_rng(seed, p, 0, 0), spec)
            normal = simulate_slice(phantom, n_angles, full, _slice_rng(seed, p, k, 1), mu_water)
            lowd = simulate_slice(phantom, n_angles, low, _slice_rng(seed, p, k, 2), mu_water)
            slices.append(SlicePair(pid, k, normal, lowd, phantom.pixel_spacing, [seed, p, k]))
        patients.append(Patient(pid, "train" if p < n_train else "test", slices))
    return DatasetManifest(
        patients, seed=seed, dose_fraction=dose_fraction, incident_photons=incident_photons,
        mu_water=mu_water, size=size, n_angles=n_angles,
        extra={"fov_mm": fov_mm, "n_train": n_train},
    )
