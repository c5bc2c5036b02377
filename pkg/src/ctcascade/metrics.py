"""PSNR, windowed SSIM, blending and per-cascade evaluation reports."""
import csv
from dataclasses import dataclass, field
import math
import os

import numpy as np
from scipy import ndimage

from .cascade import denoise_chain
from .errors import ParameterError, ShapeError

RAW_OFFSET = 1024.0
RAW_MAX = 4095.0  # 12-bit
SSIM_WINDOW_HU = (-160.0, 240.0)
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_SIGMA = 1.5
SSIM_SIZE = 11


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    return a, b


def to_raw12(hu):
    return np.clip(np.asarray(hu, dtype=np.float64) + RAW_OFFSET, 0.0, RAW_MAX)


def psnr(a, b):
    """PSNR in dB on the 12-bit raw scale (HU + 1024 clamped to [0, 4095]).

    Identical images give ``inf``.
    """
    a, b = _same_shape(a, b)
    diff = to_raw12(a) - to_raw12(b)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(RAW_MAX * RAW_MAX / mse)


def window01(hu, window=SSIM_WINDOW_HU):
    lo, hi = window
    return (np.clip(np.asarray(hu, dtype=np.float64), lo, hi) - lo) / (hi - lo)


def _gaussian_kernel1d(size=SSIM_SIZE, sigma=SSIM_SIGMA):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _local_mean(img, g):
    # separable filter, then keep only fully-supported window positions
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    r = (len(g) - 1) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b, window=SSIM_WINDOW_HU):
    """Mean SSIM over all 11x11 Gaussian (sigma 1.5) windows inside the image.

    Both images are clamped to the HU display window and mapped to [0, 1]
    (dynamic range L = 1). Every term is computed symmetrically in ``a`` and
    ``b``, so swapping the arguments gives a bitwise-identical result.
    """
    a, b = _same_shape(a, b)
    if min(a.shape) < SSIM_SIZE:
        raise ShapeError(f"SSIM needs images of at least {SSIM_SIZE}x{SSIM_SIZE}, got {a.shape}")
    x = window01(a, window)
    y = window01(b, window)
    g = _gaussian_kernel1d()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_x = _local_mean(x, g)
    mu_y = _local_mean(y, g)
    xx = _local_mean(x * x, g) - mu_x * mu_x
    yy = _local_mean(y * y, g) - mu_y * mu_y
    xy = _local_mean(x * y, g) - mu_x * mu_y
    num = (2.0 * (mu_x * mu_y) + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def blend(denoised, low_dose, alpha=0.7):
    """``alpha * denoised + (1 - alpha) * low_dose`` in HU."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"blend fraction must lie in [0, 1], got {alpha}")
    d = np.asarray(denoised)
    l = np.asarray(low_dose)
    if d.shape != l.shape:
        raise ShapeError(f"images differ in shape: {d.shape} vs {l.shape}")
    return alpha * d + (1.0 - alpha) * l


def to_uint8_window(hu, window=SSIM_WINDOW_HU):
    """Map HU linearly to 0-255 under the display window."""
    return np.round(window01(hu, window) * 255.0).astype(np.uint8)


def export_png(hu, path, window=SSIM_WINDOW_HU):
    from PIL import Image

    Image.fromarray(to_uint8_window(hu, window), mode="L").save(path)


# --------------------------------------------------------------------------
# reports

@dataclass
class EvalRow:
    cascade: int
    psnr_db: float
    ssim: float
    n_slices: int


@dataclass
class EvalReport:
    variant: str
    rows: list = field(default_factory=list)
    blend_fraction: float = 1.0


def mean_metrics(pairs):
    """Mean PSNR and SSIM over ``(estimate, reference)`` pairs, in order."""
    ps = [psnr(e, r) for e, r in pairs]
    ss = [ssim(e, r) for e, r in pairs]
    return float(np.mean(ps)), float(np.mean(ss))


def evaluate_intermediates(intermediates, lows, normals, blend_alpha=0.7):
    """Build (original, blended) reports from per-slice cascade outputs.

    ``intermediates[s][k]`` is slice ``s`` after ``k + 1`` cascades.
    """
    if not intermediates:
        raise ParameterError("no slices to evaluate")
    n_cascades = len(intermediates[0])
    original = EvalReport("original", [], 1.0)
    blended = EvalReport("blended", [], blend_alpha)
    for k in range(n_cascades):
        outs = [inter[k] for inter in intermediates]
        p, s = mean_metrics(list(zip(outs, normals)))
        original.rows.append(EvalRow(k + 1, p, s, len(outs)))
        mixed = [blend(o, l, blend_alpha) for o, l in zip(outs, lows)]
        p, s = mean_metrics(list(zip(mixed, normals)))
        blended.rows.append(EvalRow(k + 1, p, s, len(outs)))
    return original, blended


def write_report_csv(reports, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "cascade", "psnr_db", "ssim", "n_slices"])
        for report in reports:
            for row in report.rows:
                writer.writerow([report.variant, row.cascade, f"{row.psnr_db:.6f}", f"{row.ssim:.6f}", row.n_slices])


def read_report_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def export_slices(images, directory, stem):
    os.makedirs(directory, exist_ok=True)
    for name, img in images.items():
        export_png(img, os.path.join(directory, f"{stem}_{name}.png"))


def evaluate_chain(chain, dataset, blend_alpha=0.7, split="test", export_dir=None):
    """Denoise every slice of ``split`` and report per-cascade PSNR/SSIM.

    Returns (original, blended, baseline) where ``baseline`` is the
    (psnr, ssim) of the low-dose input itself.
    """
    slices = dataset.slices(split)
    if not slices:
        raise ParameterError(f"dataset has no {split} slices to evaluate")
    inters = []
    for s in slices:
        _, steps = denoise_chain(chain, s.low)
        inters.append(steps)
        if export_dir is not None:
            images = {"low": s.low, "normal": s.normal}
            images.update({f"cascade{k:02d}": img for k, img in enumerate(steps, start=1)})
            export_slices(images, os.path.join(export_dir, s.patient_id), f"s{s.index:03d}")
    lows = [s.low for s in slices]
    normals = [s.normal for s in slices]
    original, blended = evaluate_intermediates(inters, lows, normals, blend_alpha)
    baseline = mean_metrics(list(zip(lows, normals)))
    return original, blended, baseline
