"""Hot numeric kernels: im2col / col2im, direct convolution, shadow ray-marching.

Every kernel exists twice: a loop version compiled with numba and a
vectorised numpy version. The module-level names (``im2col``, ``col2im``,
``march_shadows``) point at the numba path when numba is importable and not
disabled through ``PSFCN_DISABLE_NUMBA``; otherwise at numpy.

Column layout used by im2col/col2im: row ``(c*k + ki)*k + kj``, column
``(n*ho + oh)*wo + ow``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import HAVE_NUMBA, njit


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------

def im2col_numpy(x, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, c, ho, wo, k, k) -> (c, k, k, n, ho, wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * ho * wo)


def col2im_numpy(cols, shape, k, stride, pad):
    n, c, h, w = shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    # the padded buffer must hold every window, even ones reaching past h + 2*pad
    hp = max(h + 2 * pad, (ho - 1) * stride + k)
    wp = max(w + 2 * pad, (wo - 1) * stride + k)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, n, ho, wo)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += cols[:, ki, kj].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out[:, :, pad : pad + h, pad : pad + w])


def _bilinear_numpy(depth, x, y):
    h, w = depth.shape
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
    fx = x - x0
    fy = y - y0
    top = depth[y0, x0] * (1 - fx) + depth[y0, x0 + 1] * fx
    bot = depth[y0 + 1, x0] * (1 - fx) + depth[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def march_shadows_numpy(depth, mask, light, step=0.5, bias=1e-2):
    h, w = depth.shape
    shadow = np.zeros((h, w), dtype=bool)
    lx, ly, lz = float(light[0]), float(light[1]), float(light[2])
    horiz = np.hypot(lx, ly)
    if horiz < 1e-9 or h < 2 or w < 2:
        return shadow
    dt = step / horiz
    # image columns follow +x, image rows follow -y
    dx, dy, dz = lx * dt, -ly * dt, lz * dt
    zmax = float(depth.max())
    rows, cols = np.nonzero(mask)
    px = cols.astype(np.float64)
    py = rows.astype(np.float64)
    pz = depth[rows, cols].astype(np.float64)
    hit = np.zeros(px.shape, dtype=bool)
    live = np.arange(px.size)
    k = 1
    while live.size:
        x = px[live] + k * dx
        y = py[live] + k * dy
        z = pz[live] + k * dz
        inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1) & (z <= zmax)
        live, x, y, z = live[inside], x[inside], y[inside], z[inside]
        if not live.size:
            break
        blocked = _bilinear_numpy(depth, x, y) > z + bias
        hit[live[blocked]] = True
        live = live[~blocked]
        k += 1
    shadow[rows[hit], cols[hit]] = True
    return shadow


def conv2d_direct_numpy(x, weight, stride, pad):
    n, c, h, w = x.shape
    cout, _, k, _ = weight.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))).astype(np.float64)
    out = np.zeros((n, cout, ho, wo))
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
            out += np.einsum("nchw,oc->nohw", patch, weight[:, :, ki, kj].astype(np.float64))
    return out.astype(x.dtype)


# --------------------------------------------------------------------------
# loop path (numba)
# --------------------------------------------------------------------------

@njit(cache=True)
def _im2col_loops(x, k, stride, pad, ho, wo):
    n, c, h, w = x.shape
    cols = np.zeros((c * k * k, n * ho * wo), dtype=x.dtype)
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for b in range(n):
                    for oh in range(ho):
                        ih = oh * stride - pad + ki
                        if ih < 0 or ih >= h:
                            continue
                        base = (b * ho + oh) * wo
                        for ow in range(wo):
                            iw = ow * stride - pad + kj
                            if 0 <= iw < w:
                                cols[row, base + ow] = x[b, ci, ih, iw]
    return cols


@njit(cache=True)
def _col2im_loops(cols, n, c, h, w, k, stride, pad, ho, wo):
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                row = (ci * k + ki) * k + kj
                for b in range(n):
                    for oh in range(ho):
                        ih = oh * stride - pad + ki
                        if ih < 0 or ih >= h:
                            continue
                        base = (b * ho + oh) * wo
                        for ow in range(wo):
                            iw = ow * stride - pad + kj
                            if 0 <= iw < w:
                                out[b, ci, ih, iw] += cols[row, base + ow]
    return out


@njit(cache=True)
def _conv2d_direct_loops(x, weight, stride, pad):
    n, c, h, w = x.shape
    cout, _, k, _ = weight.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(cout):
            for oh in range(ho):
                for ow in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(k):
                            ih = oh * stride - pad + ki
                            if ih < 0 or ih >= h:
                                continue
                            for kj in range(k):
                                iw = ow * stride - pad + kj
                                if 0 <= iw < w:
                                    acc += x[b, ci, ih, iw] * weight[o, ci, ki, kj]
                    out[b, o, oh, ow] = acc
    return out


@njit(cache=True)
def _march_shadows_loops(depth, mask, lx, ly, lz, step, bias):
    h, w = depth.shape
    shadow = np.zeros((h, w), dtype=np.bool_)
    horiz = np.sqrt(lx * lx + ly * ly)
    if horiz < 1e-9 or h < 2 or w < 2:
        return shadow
    dt = step / horiz
    dx = lx * dt
    dy = -ly * dt
    dz = lz * dt
    zmax = depth.max()
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            z0 = depth[i, j]
            k = 1
            while True:
                x = j + k * dx
                y = i + k * dy
                z = z0 + k * dz
                if x < 0 or x > w - 1 or y < 0 or y > h - 1 or z > zmax:
                    break
                x0 = min(max(int(np.floor(x)), 0), w - 2)
                y0 = min(max(int(np.floor(y)), 0), h - 2)
                fx = x - x0
                fy = y - y0
                top = depth[y0, x0] * (1 - fx) + depth[y0, x0 + 1] * fx
                bot = depth[y0 + 1, x0] * (1 - fx) + depth[y0 + 1, x0 + 1] * fx
                if top * (1 - fy) + bot * fy > z + bias:
                    shadow[i, j] = True
                    break
                k += 1
    return shadow


def im2col_loops(x, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    return _im2col_loops(np.ascontiguousarray(x), k, stride, pad, ho, wo)


def col2im_loops(cols, shape, k, stride, pad):
    n, c, h, w = shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    return _col2im_loops(np.ascontiguousarray(cols), n, c, h, w, k, stride, pad, ho, wo)


def conv2d_direct_loops(x, weight, stride, pad):
    return _conv2d_direct_loops(np.ascontiguousarray(x), np.ascontiguousarray(weight), stride, pad)


def march_shadows_loops(depth, mask, light, step=0.5, bias=1e-2):
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    return _march_shadows_loops(depth, mask, float(light[0]), float(light[1]), float(light[2]), float(step), float(bias))


if HAVE_NUMBA:
    BACKEND = "numba"
    im2col = im2col_loops
    col2im = col2im_loops
    conv2d_direct = conv2d_direct_loops
    march_shadows = march_shadows_loops
else:
    BACKEND = "numpy"
    im2col = im2col_numpy
    col2im = col2im_numpy
    conv2d_direct = conv2d_direct_numpy
    march_shadows = march_shadows_numpy
