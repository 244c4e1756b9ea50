"""Readers and writers for the native sample layout and DiLiGenT-style folders.

Native layout, one directory per sample::

    img_000.png ...   8-bit RGB observations
    lights.txt        q lines "lx ly lz" (6 decimals)
    normal.png        16-bit RGB, v = round((n + 1) / 2 * 65535), background (0, 0, 0)
    mask.png          8-bit, 255 = foreground

DiLiGenT-style layout: ``filenames.txt``, ``light_directions.txt``,
``light_intensities.txt`` (1 or 3 values per line), ``mask.png`` and,
optionally, ground truth converted to the ``normal.png`` encoding above.
"""

import glob
import logging
import os

import cv2
import numpy as np

from .classic import normalize_by_intensity
from .data import NormalMap, Sample
from .errors import DataError, ShapeError, ValidationError

log = logging.getLogger(__name__)

NORMAL_SCALE = 65535.0


# --------------------------------------------------------------------------
# PNG codecs
# --------------------------------------------------------------------------

def _encode_png(arr):
    if arr.ndim == 3:
        arr = arr[..., ::-1]  # RGB -> BGR
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(arr))
    if not ok:
        raise DataError("PNG encoding failed")
    return buf.tobytes()


def _decode_png(data):
    arr = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise DataError("malformed PNG data")
    if arr.ndim == 3:
        arr = arr[..., 2::-1] if arr.shape[2] >= 3 else arr[..., :1]
    return arr


def encode_rgb8_png(rgb):
    """(H, W, 3) uint8 RGB array -> PNG bytes."""
    return _encode_png(np.asarray(rgb, dtype=np.uint8))


def encode_image_8bit(image):
    """(H, W, 3) floats -> 8-bit PNG bytes; values are clipped to [0, 1]."""
    q = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    return _encode_png(q)


def decode_image(data):
    """PNG bytes (8 or 16 bit, gray or colour) -> (H, W, 3) float32 in [0, 1]."""
    arr = _decode_png(data)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    img = arr.astype(np.float32) / np.float32(scale)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    elif img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def encode_normal_png(nmap):
    n = np.clip(nmap.normals.astype(np.float64), -1.0, 1.0)
    v = np.round((n + 1.0) / 2.0 * NORMAL_SCALE).astype(np.uint16)
    v[~nmap.mask] = 0
    return _encode_png(v)


def decode_normal_png(data):
    arr = _decode_png(data)
    if arr.dtype != np.uint16 or arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"normal PNG must be 16-bit RGB, got {arr.dtype} with shape {arr.shape}")
    mask = np.any(arr != 0, axis=2)
    n = 2.0 * arr.astype(np.float64) / NORMAL_SCALE - 1.0
    return NormalMap.from_vectors(n, mask)


def encode_mask_png(mask):
    return _encode_png(np.where(mask, 255, 0).astype(np.uint8))


def decode_mask_png(data):
    arr = _decode_png(data)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return arr > 0


# --------------------------------------------------------------------------
# text files
# --------------------------------------------------------------------------

def _read_rows(path, widths=(3,)):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in widths:
                raise DataError(f"{path}:{lineno}: expected {' or '.join(map(str, widths))} values, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return rows


def _normalize_lights(lights, source):
    lights = np.asarray(lights, dtype=np.float64).reshape(-1, 3)
    norms = np.linalg.norm(lights, axis=1)
    if np.any(norms == 0):
        raise DataError(f"{source}: zero-length light direction")
    if np.any(np.abs(norms - 1.0) > 1e-3):
        log.warning("%s: light directions off unit length by up to %.3g; renormalising", source, np.abs(norms - 1).max())
    return lights / norms[:, None]


def write_lights(path, lights):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for l in np.asarray(lights, dtype=np.float64).reshape(-1, 3):
            fh.write(f"{l[0]:.6f} {l[1]:.6f} {l[2]:.6f}\n")


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def _write_bytes(path, data):
    with open(path, "wb") as fh:
        fh.write(data)


# --------------------------------------------------------------------------
# native layout
# --------------------------------------------------------------------------

def write_native_sample(sample, directory):
    os.makedirs(directory, exist_ok=True)
    for i, img in enumerate(sample.images):
        _write_bytes(os.path.join(directory, f"img_{i:03d}.png"), encode_image_8bit(img))
    write_lights(os.path.join(directory, "lights.txt"), sample.lights)
    _write_bytes(os.path.join(directory, "mask.png"), encode_mask_png(sample.mask))
    if sample.normals is not None:
        _write_bytes(os.path.join(directory, "normal.png"), encode_normal_png(NormalMap(sample.normals, sample.mask)))


def load_native_sample(directory):
    name = os.path.basename(os.path.normpath(directory))
    images_paths = sorted(glob.glob(os.path.join(directory, "img_*.png")))
    missing = [f for f in ("lights.txt", "mask.png") if not os.path.exists(os.path.join(directory, f))]
    if not images_paths:
        missing.append("img_*.png")
    if missing:
        raise DataError(f"sample {name}: missing {', '.join(missing)}")
    lights = _read_rows(os.path.join(directory, "lights.txt"))
    if len(lights) != len(images_paths):
        raise DataError(f"sample {name}: count mismatch, {len(images_paths)} images but {len(lights)} lights")
    lights = _normalize_lights(lights, os.path.join(directory, "lights.txt"))
    images = []
    for p in images_paths:
        try:
            images.append(decode_image(_read_bytes(p)))
        except DataError as exc:
            raise DataError(f"sample {name}: {os.path.basename(p)}: {exc}") from exc
    mask = decode_mask_png(_read_bytes(os.path.join(directory, "mask.png")))
    normals = None
    npath = os.path.join(directory, "normal.png")
    if os.path.exists(npath):
        normals = decode_normal_png(_read_bytes(npath)).normals
    try:
        return Sample(np.stack(images), lights, mask, normals, name)
    except ShapeError as exc:
        raise DataError(f"sample {name}: {exc}") from exc


def list_native_samples(root):
    """Sample directories under ``root`` (those holding a lights.txt), sorted."""
    return sorted(os.path.dirname(p) for p in glob.glob(os.path.join(root, "*", "lights.txt")))


def load_native_dataset(root, limit=None):
    dirs = list_native_samples(root)
    if not dirs:
        raise DataError(f"no samples found under {root}")
    if limit is not None:
        dirs = dirs[:limit]
    return [load_native_sample(d) for d in dirs]


# --------------------------------------------------------------------------
# DiLiGenT-style layout
# --------------------------------------------------------------------------

DILIGENT_FILES = ("filenames.txt", "light_directions.txt", "light_intensities.txt", "mask.png")


def write_diligent_dir(sample, directory, intensities=None):
    """Write a sample in DiLiGenT layout; images are multiplied by ``intensities``
    and stored as 16-bit PNG (k/255 values map exactly to k*257)."""
    os.makedirs(directory, exist_ok=True)
    q = sample.q
    ints = np.ones((q, 3)) if intensities is None else np.asarray(intensities, dtype=np.float64).reshape(q, -1)
    if ints.shape[1] == 1:
        ints = np.repeat(ints, 3, axis=1)
    names = []
    for i, img in enumerate(sample.images):
        fname = f"{i + 1:03d}.png"
        scaled = np.clip(img.astype(np.float64) * ints[i], 0.0, 1.0)
        _write_bytes(os.path.join(directory, fname), _encode_png(np.round(scaled * 65535.0).astype(np.uint16)))
        names.append(fname)
    with open(os.path.join(directory, "filenames.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(n + "\n" for n in names))
    write_lights(os.path.join(directory, "light_directions.txt"), sample.lights)
    with open(os.path.join(directory, "light_intensities.txt"), "w", encoding="utf-8", newline="\n") as fh:
        for row in ints:
            fh.write(" ".join(f"{v:.6f}" for v in row) + "\n")
    _write_bytes(os.path.join(directory, "mask.png"), encode_mask_png(sample.mask))
    if sample.normals is not None:
        _write_bytes(os.path.join(directory, "normal.png"), encode_normal_png(NormalMap(sample.normals, sample.mask)))


def load_diligent_dir(directory):
    """Load a DiLiGenT-style object folder; images come back divided by the light intensities."""
    name = os.path.basename(os.path.normpath(directory))
    missing = [f for f in DILIGENT_FILES if not os.path.exists(os.path.join(directory, f))]
    if missing:
        raise DataError(f"{name}: missing {', '.join(missing)}")
    with open(os.path.join(directory, "filenames.txt"), encoding="utf-8") as fh:
        filenames = [line.strip() for line in fh if line.strip()]
    lights = _read_rows(os.path.join(directory, "light_directions.txt"))
    ints = _read_rows(os.path.join(directory, "light_intensities.txt"), widths=(1, 3))
    if not (len(filenames) == len(lights) == len(ints)):
        raise DataError(
            f"{name}: count mismatch, {len(filenames)} filenames, {len(lights)} directions, {len(ints)} intensities"
        )
    absent = [f for f in filenames if not os.path.exists(os.path.join(directory, f))]
    if absent:
        raise DataError(f"{name}: missing image files {', '.join(absent)}")
    ints = np.array([r * 3 if len(r) == 1 else r for r in ints], dtype=np.float64)
    if np.any(ints <= 0):
        raise DataError(f"{name}: light intensities must be positive")
    images = np.stack([decode_image(_read_bytes(os.path.join(directory, f))) for f in filenames])
    try:
        images = normalize_by_intensity(images, ints)
    except ValidationError as exc:
        raise DataError(f"{name}: {exc}") from exc
    lights = _normalize_lights(lights, os.path.join(directory, "light_directions.txt"))
    mask = decode_mask_png(_read_bytes(os.path.join(directory, "mask.png")))
    normals = None
    npath = os.path.join(directory, "normal.png")
    if os.path.exists(npath):
        normals = decode_normal_png(_read_bytes(npath)).normals
    try:
        return Sample(images, lights, mask, normals, name, ints)
    except ShapeError as exc:
        raise DataError(f"{name}: {exc}") from exc
