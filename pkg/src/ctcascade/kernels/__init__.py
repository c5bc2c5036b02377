"""Hot kernels with a compiled backend and a pure-numpy fallback.

The compiled extension is used when it imports; set ``CTCASCADE_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active choice. Both modules stay
importable for comparison through :func:`get_backend`.
"""
import os

import numpy as np

from . import _fallback

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

if _ckernels is not None and os.environ.get("CTCASCADE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    _active = _ckernels
    BACKEND = "compiled"
else:
    _active = _fallback
    BACKEND = "python"


def get_backend(name=None):
    """Return the kernel module for ``name`` ('compiled' or 'python')."""
    if name is None:
        return _active
    if name == "python":
        return _fallback
    if name == "compiled":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def compiled_available():
    return _ckernels is not None


def im2col(x, kh, kw):
    return _active.im2col(np.ascontiguousarray(x), kh, kw)


def col2im(cols, shape, kh, kw):
    return _active.col2im(np.ascontiguousarray(cols), tuple(shape), kh, kw)


def radon_project(image, cos_t, sin_t, det_pos, ray_pos, center):
    return _active.radon_project(image, cos_t, sin_t, det_pos, ray_pos, float(center))


def backproject(filtered, cos_t, sin_t, det_start, det_step, size, center):
    return _active.backproject(filtered, cos_t, sin_t, float(det_start), float(det_step),
                               int(size), float(center))


def aggregate_patches(patches, corners, shape, weights):
    # the compiled loop does no bounds checks, so validate here for both backends
    patches = np.asarray(patches)
    corners = np.asarray(corners, dtype=np.int64).reshape(-1, 2)
    weights = np.asarray(weights)
    if patches.ndim != 3 or patches.shape[1:] != weights.shape or corners.shape[0] != patches.shape[0]:
        raise ValueError(f"patches {patches.shape}, corners {corners.shape} and weights {weights.shape} disagree")
    if corners.size and (corners.min() < 0 or corners[:, 0].max() + weights.shape[0] > shape[0]
                         or corners[:, 1].max() + weights.shape[1] > shape[1]):
        raise ValueError(f"patch corners fall outside the {tuple(shape)} image")
    return _active.aggregate_patches(patches, corners, tuple(shape), weights)
