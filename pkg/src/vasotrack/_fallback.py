"""Pure-numpy twins of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def _better(v, s, best_v, best_s, maximize):
    if maximize:
        return (v > best_v) | ((v == best_v) & (s < best_s))
    return (v < best_v) | ((v == best_v) & (s < best_s))


def window_extreme(x, offsets, inner_max, outer_max):
    x = np.ascontiguousarray(x)
    offsets = np.asarray(offsets, dtype=np.int32)
    Z, Y, X = x.shape
    r = int(np.abs(offsets).max()) if offsets.size else 0
    xp = np.pad(x, r, mode="edge")
    ip = np.pad(np.arange(Z * Y * X, dtype=np.int64).reshape(Z, Y, X), r, mode="edge")

    def shifted(a, o):
        dz, dy, dx = int(o[0]) + r, int(o[1]) + r, int(o[2]) + r
        return a[dz:dz + Z, dy:dy + Y, dx:dx + X]

    out_v = out_s = None
    for element in offsets:
        in_v = in_s = None
        for o in element:
            v, s = shifted(xp, o), shifted(ip, o)
            if in_v is None:
                in_v, in_s = v.copy(), s.copy()
                continue
            take = _better(v, s, in_v, in_s, inner_max)
            in_v[take] = v[take]
            in_s[take] = s[take]
        if out_v is None:
            out_v, out_s = in_v, in_s
            continue
        take = _better(in_v, in_s, out_v, out_s, outer_max)
        out_v[take] = in_v[take]
        out_s[take] = in_s[take]
    return out_v, out_s


def scatter_add(src, grad, n):
    return np.bincount(src, weights=grad, minlength=n).astype(np.float64, copy=False)
