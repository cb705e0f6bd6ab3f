"""Pure numpy fallback for the shift-window cross-covariance kernel."""
import numpy as np


def xcov_window(sig, idl, dy_min, dy_max, dx_min, dx_max):
    """out[dy - dy_min, dx - dx_min] = sum_{y,x} sig[y+dy, x+dx] * idl[y, x]

    over the pixels where both images overlap.
    """
    h, w = sig.shape
    out = np.zeros((dy_max - dy_min + 1, dx_max - dx_min + 1))
    for dy in range(dy_min, dy_max + 1):
        ys = slice(max(dy, 0), h + min(dy, 0))
        yi = slice(max(-dy, 0), h - max(dy, 0))
        for dx in range(dx_min, dx_max + 1):
            xs = slice(max(dx, 0), w + min(dx, 0))
            xi = slice(max(-dx, 0), w - max(dx, 0))
            out[dy - dy_min, dx - dx_min] = np.einsum("ij,ij->", sig[ys, xs], idl[yi, xi])
    return out
