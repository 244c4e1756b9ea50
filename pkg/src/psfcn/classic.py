"""Classical least-squares photometric stereo and intensity normalisation."""

import numpy as np

from .data import NormalMap
from .errors import LightsCoplanarError, ShapeError, ValidationError

MAX_CONDITION = 1e6


def normalize_by_intensity(images, intensities):
    """Divide image i (q, H, W, 3) by its light's RGB intensity (q, 3) or scalar (q,)."""
    images = np.asarray(images, dtype=np.float32)
    ints = np.asarray(intensities, dtype=np.float64)
    if ints.ndim == 1:
        ints = np.repeat(ints[:, None], 3, axis=1)
    if ints.shape != (images.shape[0], 3):
        raise ShapeError("one intensity triple per image required", {"q": (ints.shape[0], images.shape[0])})
    if np.any(ints <= 0) or not np.all(np.isfinite(ints)):
        raise ValidationError("light intensities must be positive and finite")
    return (images / ints[:, None, None, :].astype(np.float32)).astype(np.float32)


def l2_solve(images, lights, mask, intensities=None):
    """Per-pixel least squares min_b ||I - L b||^2 on the grey observations.

    RGB observations are averaged to grey after intensity normalisation; no
    shadow or highlight trimming is applied. Returns (NormalMap, albedo).
    Pixels whose observations are all zero get the normal (0, 0, 1).
    """
    images = np.asarray(images, dtype=np.float32)
    if intensities is not None:
        images = normalize_by_intensity(images, intensities)
    gray = images.mean(axis=3, dtype=np.float64) if images.ndim == 4 else images.astype(np.float64)
    lights = np.asarray(lights, dtype=np.float64).reshape(-1, 3)
    mask = np.asarray(mask, dtype=bool)
    q, h, w = gray.shape
    if lights.shape[0] != q:
        raise ShapeError("image and light counts differ", {"q": (q, lights.shape[0])})
    if q < 3:
        raise ValidationError(f"least-squares photometric stereo needs >= 3 images, got {q}")
    if not mask.any():
        raise ValidationError("no valid pixels")
    gram = lights.T @ lights
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise LightsCoplanarError(f"lights coplanar (condition number {cond:.3g})")
    pinv = np.linalg.inv(gram) @ lights.T  # (3, q)
    obs = gray[:, mask]  # (q, p)
    b = pinv @ obs  # (3, p)
    albedo_p = np.linalg.norm(b, axis=0)
    safe = albedo_p > 0
    n = np.zeros((3, b.shape[1]))
    n[:, safe] = b[:, safe] / albedo_p[safe]
    n[2, ~safe] = 1.0
    normals = np.zeros((h, w, 3))
    normals[mask] = n.T
    albedo = np.zeros((h, w))
    albedo[mask] = albedo_p
    return NormalMap(normals.astype(np.float32), mask), albedo


class L2Solver:
    """Adapter so the least-squares baseline plugs into the evaluation harness."""

    label = "L2"

    def __call__(self, sample):
        return l2_solve(sample.images, sample.lights, sample.mask)[0]
