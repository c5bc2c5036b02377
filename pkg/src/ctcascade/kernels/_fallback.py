"""Pure-numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
The two must agree to floating-point rounding; im2col, col2im and
backproject agree bitwise because they accumulate in the same order.
"""
import numpy as np


def im2col(x, kh, kw):
    """Unfold ``x`` (N, C, H, W) into columns (N, C*kh*kw, H*W).

    Zero padding of (kh-1)/2, (kw-1)/2 keeps the spatial extents. Row
    ``c*kh*kw + i*kw + j`` of the column matrix holds the input shifted by
    (i - ph, j - pw).
    """
    n, c, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    padded[:, :, ph:ph + h, pw:pw + w] = x
    cols = np.empty((n, c, kh, kw, h, w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = padded[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * kh * kw, h * w)


def col2im(cols, shape, kh, kw):
    """Adjoint of :func:`im2col`: scatter-add columns back into (N, C, H, W)."""
    n, c, h, w = shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    cols6 = cols.reshape(n, c, kh, kw, h, w)
    padded = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + h, j:j + w] += cols6[:, :, i, j]
    return np.ascontiguousarray(padded[:, :, ph:ph + h, pw:pw + w])


def _bilinear(image, rows, cols):
    """Sample ``image`` at fractional (row, col) positions, zero outside."""
    h, w = image.shape
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    out = np.zeros(rows.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = r0 + dr
            cc = c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.zeros(rows.shape, dtype=np.float64)
            vals[ok] = image[rr[ok], cc[ok]]
            out += wr * wc * vals
    return out


def radon_project(image, cos_t, sin_t, det_pos, ray_pos, center):
    """Line integrals (angles, detectors) by bilinear sampling along rays.

    Positions are in pixel units relative to ``center``; a ray at detector
    offset ``t`` and angle ``theta`` visits ``x = t*cos - s*sin``,
    ``y = t*sin + s*cos`` for every ``s`` in ``ray_pos``. The returned
    values are plain sums; the caller scales by the step length.
    """
    image = np.asarray(image, dtype=np.float64)
    n_angles = cos_t.shape[0]
    out = np.empty((n_angles, det_pos.shape[0]), dtype=np.float64)
    t = det_pos[:, None]
    s = ray_pos[None, :]
    for a in range(n_angles):
        xs = t * cos_t[a] - s * sin_t[a]
        ys = t * sin_t[a] + s * cos_t[a]
        out[a] = _bilinear(image, ys + center, xs + center).sum(axis=1)
    return out


def backproject(filtered, cos_t, sin_t, det_start, det_step, size, center):
    """Smear each filtered projection back over a ``size`` x ``size`` grid.

    Linear interpolation between detector bins, zero beyond the array.
    Angles are accumulated in order so the result matches the compiled
    kernel bitwise.
    """
    filtered = np.asarray(filtered, dtype=np.float64)
    n_det = filtered.shape[1]
    coords = np.arange(size, dtype=np.float64) - center
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    image = np.zeros((size, size), dtype=np.float64)
    for a in range(cos_t.shape[0]):
        pos = (xs * cos_t[a] + ys * sin_t[a] - det_start) / det_step
        i0 = np.floor(pos)
        frac = pos - i0
        i0 = i0.astype(np.int64)
        i1 = i0 + 1
        row = filtered[a]
        v0 = np.where((i0 >= 0) & (i0 < n_det), row[np.clip(i0, 0, n_det - 1)], 0.0)
        v1 = np.where((i1 >= 0) & (i1 < n_det), row[np.clip(i1, 0, n_det - 1)], 0.0)
        image += (1.0 - frac) * v0 + frac * v1
    return image


def aggregate_patches(patches, corners, shape, weights):
    """Weighted overlap-add of (P, ph, pw) patches at top-left ``corners``.

    Returns the accumulator divided by the summed weights per pixel; pixels
    no patch covers are left at zero weight and must not exist for a valid
    corner grid.
    """
    ph, pw = weights.shape
    acc = np.zeros(shape, dtype=np.float64)
    wsum = np.zeros(shape, dtype=np.float64)
    for p in range(corners.shape[0]):
        y, x = corners[p]
        acc[y:y + ph, x:x + pw] += weights * patches[p]
        wsum[y:y + ph, x:x + pw] += weights
    return acc, wsum
