"""Pure numpy implementations of the hot per-pixel kernels.

These are the fallback for ``_ckernels`` and share its exact signatures:
float64 C-contiguous inputs with a leading batch axis.
"""
import numpy as np


def consistency_error(f_lr, f_rl):
    """Per-pixel ``|f_lr(p) + f_rl(p + f_lr(p))|`` for (N, H, W, 2) flows."""
    n, h, w, _ = f_lr.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    tx = np.clip(xs + f_lr[..., 0], 0.0, w - 1.0)
    ty = np.clip(ys + f_lr[..., 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(tx).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(ty).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (tx - x0)[..., None]
    wy = (ty - y0)[..., None]
    b = np.arange(n)[:, None, None]
    top = (1.0 - wx) * f_rl[b, y0, x0] + wx * f_rl[b, y0, x1]
    bot = (1.0 - wx) * f_rl[b, y1, x0] + wx * f_rl[b, y1, x1]
    s = (1.0 - wy) * top + wy * bot
    return np.sqrt(np.sum((f_lr + s) ** 2, axis=-1))


def hwarp(img, disp):
    """Bilinear horizontal resampling ``out[y, x] = img[y, x + disp[y, x]]``.

    img is (N, H, W, C), disp is (N, H, W). Taps outside the row read zero;
    ``valid`` is 1 where the sample column lies in [0, W - 1].
    """
    n, h, w, c = img.shape
    x = np.arange(w, dtype=np.float64)[None, None, :] + disp
    valid = ((x >= 0.0) & (x <= w - 1.0)).astype(np.uint8)
    x0f = np.floor(x)
    frac = (x - x0f)[..., None]
    x0 = x0f.astype(np.int64)
    x1 = x0 + 1
    in0 = ((x0 >= 0) & (x0 < w))[..., None]
    in1 = ((x1 >= 0) & (x1 < w))[..., None]
    b = np.arange(n)[:, None, None]
    r = np.arange(h)[None, :, None]
    a = np.where(in0, img[b, r, np.clip(x0, 0, w - 1)], 0.0)
    bb = np.where(in1, img[b, r, np.clip(x1, 0, w - 1)], 0.0)
    out = (1.0 - frac) * a + frac * bb
    return out, valid


def median3(img):
    """3x3 median with edge replication on (N, H, W) planes."""
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = img.shape[1:]
    taps = [padded[:, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)]
    return np.median(np.stack(taps, axis=0), axis=0)
