"""Depth from normals by frequency-domain projection onto integrable surfaces.

Axis convention matches the rest of the package: x runs along columns, y
runs up (against the row index), depth z points toward the viewer. The
gradient fields are p = dz/dx and q = dz/dy in pixel units.
"""

from dataclasses import dataclass

import cv2
import numpy as np

from .errors import DataError, NumericalError, ShapeError, ValidationError

NZ_EPSILON = 1e-3
DEPTH_MAGIC = b"PSDZ"


@dataclass
class DepthMap:
    depth: np.ndarray  # (H, W) float64
    mask: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.depth.shape


# --------------------------------------------------------------------------
# radix-2 FFT
# --------------------------------------------------------------------------

def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


def next_pow2(n):
    return 1 << max(0, int(n - 1).bit_length())


def _bit_reverse_indices(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x, axis=-1, inverse=False):
    """Iterative Cooley-Tukey transform along ``axis``; the length must be a power of two.

    Uses the numpy sign convention; the inverse includes the 1/n factor.
    """
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    n = x.shape[-1]
    if not _is_pow2(n):
        raise ShapeError(f"FFT length must be a power of two, got {n}")
    a = x[..., _bit_reverse_indices(n)].copy()
    sign = 1.0 if inverse else -1.0
    half = 1
    while half < n:
        twiddle = np.exp(sign * 1j * np.pi * np.arange(half) / half)
        blocks = a.reshape(a.shape[:-1] + (n // (2 * half), 2, half))
        even = blocks[..., 0, :].copy()
        odd = blocks[..., 1, :] * twiddle
        blocks[..., 0, :] = even + odd
        blocks[..., 1, :] = even - odd
        half *= 2
    if inverse:
        a /= n
    return np.moveaxis(a, -1, axis)


def dft(x, axis=-1, inverse=False):
    """Discrete Fourier transform of any length.

    Powers of two go straight to :func:`fft`. Other lengths use Bluestein's
    chirp factorisation, which turns the transform into a circular
    convolution evaluated with zero-padded radix-2 FFTs.
    """
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    n = x.shape[-1]
    if n < 1:
        raise ShapeError("cannot transform an empty axis")
    if _is_pow2(n):
        return np.moveaxis(fft(x, inverse=inverse), -1, axis)
    if inverse:
        return np.moveaxis(np.conj(dft(np.conj(x))) / n, -1, axis)
    k = np.arange(n)
    # k^2 reduced mod 2n keeps the chirp phase exact for large k
    chirp = np.exp(1j * np.pi * ((k * k) % (2 * n)) / n)
    m = next_pow2(2 * n - 1)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * np.conj(chirp)
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = chirp
    b[m - n + 1 :] = chirp[1:][::-1]
    conv = fft(fft(a) * fft(b), inverse=True)[..., :n]
    return np.moveaxis(conv * np.conj(chirp), -1, axis)


def fft2(x, inverse=False):
    return dft(dft(x, axis=-1, inverse=inverse), axis=-2, inverse=inverse)


# --------------------------------------------------------------------------
# normals -> gradients -> depth
# --------------------------------------------------------------------------

def normals_to_gradients(nmap, epsilon=NZ_EPSILON):
    """(p, q) = (-nx/nz, -ny/nz) on the mask, zero elsewhere."""
    n = nmap.normals.astype(np.float64)
    mask = nmap.mask
    steep = mask & (n[..., 2] <= epsilon)
    if steep.any():
        raise NumericalError(
            f"{int(steep.sum())} masked pixels have nz <= {epsilon}; too steep for height-field integration"
        )
    nz = np.where(mask, n[..., 2], 1.0)
    p = np.where(mask, -n[..., 0] / nz, 0.0)
    q = np.where(mask, -n[..., 1] / nz, 0.0)
    return p, q


def _mirror_gradients(p, q):
    """Gradients of the even reflection of z over a (2h, 2w) period.

    Reflecting z across a column boundary flips the sign of p there (and q
    across a row boundary), so each field is padded with its own sign pattern.
    The reflected surface is continuous across every seam of the period.
    """
    h, w = p.shape

    def fold(n):
        r = np.arange(2 * n)
        flipped = r >= n
        return np.where(flipped, 2 * n - 1 - r, r), np.where(flipped, -1.0, 1.0)

    ri, rs = fold(h)
    ci, cs = fold(w)
    p_ext = p[np.ix_(ri, ci)] * cs[None, :]
    q_ext = q[np.ix_(ri, ci)] * rs[:, None]
    return p_ext, q_ext


def frankot_chellappa(p, q, mask=None):
    """Least-squares integrable depth for the gradient field (p, q).

    Both fields are mirror-extended to twice their size, integrated with the
    spectral derivative, cropped back and shifted to zero mean (over
    ``mask`` when given).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2:
        raise ShapeError("p and q must be 2-D fields of the same shape", {"shape": (p.shape, q.shape)})
    h, w = p.shape
    if h < 2 or w < 2:
        raise ValidationError(f"gradient field of size {h}x{w} is too small to integrate")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise NumericalError("gradient field contains non-finite values")
    mask = np.ones((h, w), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)

    H, W = 2 * h, 2 * w
    p_ext, q_ext = _mirror_gradients(p, q)
    # array axes: column derivative is p, row derivative is -q (y points up)
    d_col, d_row = p_ext, -q_ext
    wx = 2.0 * np.pi * np.fft.fftfreq(W)[None, :]
    wy = 2.0 * np.pi * np.fft.fftfreq(H)[:, None]
    denom = wx**2 + wy**2
    denom[0, 0] = 1.0
    Z = (-1j * wx * fft2(d_col) - 1j * wy * fft2(d_row)) / denom
    Z[0, 0] = 0.0
    z = fft2(Z, inverse=True).real[:h, :w]
    if mask.any():
        z = z - z[mask].mean()
    return DepthMap(z, mask)


def depth_from_normals(nmap, epsilon=NZ_EPSILON):
    p, q = normals_to_gradients(nmap, epsilon)
    d = frankot_chellappa(p, q, nmap.mask)
    return DepthMap(np.where(nmap.mask, d.depth, 0.0), nmap.mask)


# --------------------------------------------------------------------------
# output formats
# --------------------------------------------------------------------------

def encode_depth(dmap):
    """b"PSDZ <H> <W>\\n" followed by H*W little-endian float32 values (NaN off-mask)."""
    h, w = dmap.shape
    vals = np.where(dmap.mask, dmap.depth, np.nan).astype("<f4")
    return DEPTH_MAGIC + f" {h} {w}\n".encode("ascii") + vals.tobytes()


def decode_depth(buf):
    buf = bytes(buf)
    end = buf.find(b"\n")
    if not buf.startswith(DEPTH_MAGIC) or end < 0:
        raise DataError("not a PSDZ depth file")
    try:
        _, h, w = buf[:end].split()
        h, w = int(h), int(w)
    except ValueError as exc:
        raise DataError(f"malformed PSDZ header {buf[:end]!r}") from exc
    body = buf[end + 1 :]
    if len(body) != 4 * h * w:
        raise DataError(f"PSDZ body holds {len(body)} bytes, expected {4 * h * w}")
    depth = np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64)
    mask = np.isfinite(depth)
    return DepthMap(np.where(mask, depth, 0.0), mask)


def depth_preview_png(dmap):
    """8-bit grey PNG, near = bright, background black."""
    d = dmap.depth
    img = np.zeros(d.shape, dtype=np.uint8)
    if dmap.mask.any():
        lo, hi = d[dmap.mask].min(), d[dmap.mask].max()
        span = hi - lo if hi > lo else 1.0
        img[dmap.mask] = np.round(20 + 235 * (d[dmap.mask] - lo) / span).astype(np.uint8)
    ok, buf = cv2.imencode(".png", img)
    if not ok:
        raise DataError("PNG encoding failed")
    return buf.tobytes()


def depth_to_obj(dmap):
    """Grid triangulation of the masked depth as Wavefront OBJ text (x right, y up)."""
    h, w = dmap.shape
    index = -np.ones((h, w), dtype=np.int64)
    lines = []
    count = 0
    for r in range(h):
        for c in range(w):
            if dmap.mask[r, c]:
                count += 1
                index[r, c] = count
                lines.append(f"v {c - w / 2:.3f} {h / 2 - r:.3f} {dmap.depth[r, c]:.5f}")
    for r in range(h - 1):
        for c in range(w - 1):
            a, b, d, e = index[r, c], index[r, c + 1], index[r + 1, c], index[r + 1, c + 1]
            # counter-clockwise seen from +z
            if a > 0 and d > 0 and b > 0:
                lines.append(f"f {a} {d} {b}")
            if b > 0 and d > 0 and e > 0:
                lines.append(f"f {b} {d} {e}")
    return "\n".join(lines) + "\n"
