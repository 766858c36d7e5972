"""Hot inner loops, each with a numba kernel and a pure-numpy twin.

The public functions dispatch on :data:`ssfl._accel.USE_NUMBA`. Both paths
are exact (no floating-point reassociation), so results are bit-identical
regardless of backend.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = [
    "min_filter",
    "fill_holes",
    "im2col",
    "col2im",
    "min_filter_numpy",
    "min_filter_numba",
    "fill_holes_numpy",
    "fill_holes_numba",
    "im2col_numpy",
    "im2col_numba",
    "col2im_numpy",
    "col2im_numba",
]


# --------------------------------------------------------------------------
# k x k minimum filter, edge replication

def min_filter_numpy(img, k):
    r = k // 2
    if r == 0:
        return img.copy()
    padded = np.pad(img, r, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view
    rows = win(padded, k, axis=1).min(axis=-1)
    return win(rows, k, axis=0).min(axis=-1)


@njit(cache=True)
def _min_filter_nb(img, k):
    h, w = img.shape
    r = k // 2
    tmp = np.empty_like(img)
    for i in range(h):
        for j in range(w):
            m = img[i, j]
            for dj in range(-r, r + 1):
                jj = min(max(j + dj, 0), w - 1)
                if img[i, jj] < m:
                    m = img[i, jj]
            tmp[i, j] = m
    out = np.empty_like(img)
    for i in range(h):
        for j in range(w):
            m = tmp[i, j]
            for di in range(-r, r + 1):
                ii = min(max(i + di, 0), h - 1)
                if tmp[ii, j] < m:
                    m = tmp[ii, j]
            out[i, j] = m
    return out


def min_filter_numba(img, k):
    return _min_filter_nb(np.ascontiguousarray(img), k)


def min_filter(img, k):
    """Minimum over the ``k x k`` window centred at each pixel (edge replicated)."""
    if USE_NUMBA:
        return min_filter_numba(img, k)
    return min_filter_numpy(img, k)


# --------------------------------------------------------------------------
# hole filling: grow the border-connected background by 4-neighbour
# dilation constrained to the background, then complement

def fill_holes_numpy(mask):
    bg = ~mask
    reach = np.zeros_like(bg)
    reach[0, :] = bg[0, :]
    reach[-1, :] = bg[-1, :]
    reach[:, 0] = bg[:, 0]
    reach[:, -1] = bg[:, -1]
    while True:
        grown = reach.copy()
        grown[1:, :] |= reach[:-1, :]
        grown[:-1, :] |= reach[1:, :]
        grown[:, 1:] |= reach[:, :-1]
        grown[:, :-1] |= reach[:, 1:]
        grown &= bg
        if np.array_equal(grown, reach):
            return ~reach
        reach = grown


@njit(cache=True)
def _fill_holes_nb(mask):
    # Flood the background from the border with an explicit stack; each
    # pixel is pushed at most once, so this is linear in the image size.
    h, w = mask.shape
    reach = np.zeros((h, w), dtype=np.bool_)
    stack = np.empty(h * w, dtype=np.int64)
    top = 0
    for i in range(h):
        for j in range(w):
            if not mask[i, j] and (i == 0 or j == 0 or i == h - 1 or j == w - 1):
                reach[i, j] = True
                stack[top] = i * w + j
                top += 1
    while top > 0:
        top -= 1
        i, j = divmod(stack[top], w)
        for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ii, jj = i + di, j + dj
            if 0 <= ii < h and 0 <= jj < w and not mask[ii, jj] and not reach[ii, jj]:
                reach[ii, jj] = True
                stack[top] = ii * w + jj
                top += 1
    out = np.empty((h, w), dtype=np.bool_)
    for i in range(h):
        for j in range(w):
            out[i, j] = not reach[i, j]
    return out


def fill_holes_numba(mask):
    return _fill_holes_nb(np.ascontiguousarray(mask, dtype=np.bool_))


def fill_holes(mask):
    """Return ``mask`` plus every background region not 4-connected to the border."""
    mask = np.asarray(mask, dtype=bool)
    if USE_NUMBA:
        return fill_holes_numba(mask)
    return fill_holes_numpy(mask)


# --------------------------------------------------------------------------
# im2col / col2im for square kernels with zero padding
#
# x: (B, C, H, W)  ->  cols: (B, C, k, k, Ho, Wo)

def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col_numpy(x, k, stride, pad):
    b, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, ho, wo), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride]
    return cols


@njit(cache=True)
def _im2col_nb(x, k, stride, pad, ho, wo):
    b, c, h, w = x.shape
    cols = np.zeros((b, c, k, k, ho, wo), dtype=x.dtype)
    for n in range(b):
        for ch in range(c):
            for di in range(k):
                for dj in range(k):
                    for oi in range(ho):
                        ii = oi * stride + di - pad
                        if ii < 0 or ii >= h:
                            continue
                        for oj in range(wo):
                            jj = oj * stride + dj - pad
                            if 0 <= jj < w:
                                cols[n, ch, di, dj, oi, oj] = x[n, ch, ii, jj]
    return cols


def im2col_numba(x, k, stride, pad):
    h, w = x.shape[2:]
    return _im2col_nb(np.ascontiguousarray(x), k, stride, pad,
                      _out_size(h, k, stride, pad), _out_size(w, k, stride, pad))


def col2im_numpy(cols, shape, k, stride, pad):
    b, c, h, w = shape
    ho, wo = cols.shape[4:]
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            xp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += cols[:, :, di, dj]
    return xp[:, :, pad:pad + h, pad:pad + w].copy()


@njit(cache=True)
def _col2im_nb(cols, b, c, h, w, k, stride, pad):
    ho, wo = cols.shape[4], cols.shape[5]
    # padded scratch keeps the accumulation order identical to the numpy path
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for n in range(b):
        for ch in range(c):
            for di in range(k):
                for dj in range(k):
                    for oi in range(ho):
                        for oj in range(wo):
                            xp[n, ch, oi * stride + di, oj * stride + dj] += cols[n, ch, di, dj, oi, oj]
    return xp[:, :, pad:pad + h, pad:pad + w].copy()


def col2im_numba(cols, shape, k, stride, pad):
    b, c, h, w = shape
    return _col2im_nb(np.ascontiguousarray(cols), b, c, h, w, k, stride, pad)


def im2col(x, k, stride, pad):
    if USE_NUMBA:
        return im2col_numba(x, k, stride, pad)
    return im2col_numpy(x, k, stride, pad)


def col2im(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the image grid."""
    if USE_NUMBA:
        return col2im_numba(cols, shape, k, stride, pad)
    return col2im_numpy(cols, shape, k, stride, pad)
