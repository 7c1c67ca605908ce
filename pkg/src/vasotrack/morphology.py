"""Differentiable 3D morphological layers and exact binary oracles.

The structuring set is nine 3x3x3 planar masks through the cube centre:
the three axis-aligned planes and the six diagonal planes. All layers use
replicate padding, and their gradients are routed to the single voxel each
output value was taken from.
"""
import numpy as np

from . import autodiff as ad


def make_elements():
    """Return the nine structuring elements as a ``(9, 3, 3, 3)`` boolean array."""
    B = np.zeros((9, 3, 3, 3), dtype=bool)
    r = np.arange(3)
    B[0][1, :, :] = True  # z = centre
    B[1][:, 1, :] = True  # y = centre
    B[2][:, :, 1] = True  # x = centre
    B[3][:, r, r] = True  # y = x
    B[4][:, r, 2 - r] = True  # y = -x
    B[5][r, :, r] = True  # z = x
    B[6][r, :, 2 - r] = True  # z = -x
    B[7][r, r, :] = True  # z = y
    B[8][r, 2 - r, :] = True  # z = -y
    return B


ELEMENTS = make_elements()


def element_offsets(elements=None):
    """Offsets of each element relative to the centre, shape ``(E, K, 3)``."""
    elements = ELEMENTS if elements is None else np.asarray(elements, dtype=bool)
    counts = {int(e.sum()) for e in elements}
    if len(counts) != 1:
        raise ValueError("all elements must have the same number of voxels")
    return np.stack([np.argwhere(e) - 1 for e in elements]).astype(np.int32)


_PLANES = element_offsets()
_UNION = element_offsets(ELEMENTS.any(axis=0)[None])


def _as_tensor(x):
    return x if isinstance(x, ad.Tensor) else ad.Tensor(x)


def mask_pool(x, B):
    """Max of ``x`` over the support of ``B`` around every voxel."""
    return ad.masked_window_max(_as_tensor(x), B)


def si(x):
    """Sup of the nine plane erosions: ``max_B -MaskPool(-x, B)``."""
    return ad.morph_reduce(_as_tensor(x), _PLANES, inner_max=False, outer_max=True)


def is_(x):
    """Inf of the nine plane dilations: ``min_B MaskPool(x, B)``."""
    return ad.morph_reduce(_as_tensor(x), _PLANES, inner_max=True, outer_max=False)


def erosion(x):
    """``min_B -MaskPool(-x, B)``; the minimum over the union support."""
    return ad.morph_reduce(_as_tensor(x), _UNION, inner_max=False, outer_max=False)


def dilation(x):
    """``max_B MaskPool(x, B)``; the maximum over the union support."""
    return ad.morph_reduce(_as_tensor(x), _UNION, inner_max=True, outer_max=True)


def open_(x):
    return dilation(erosion(x))


def si_composed(x):
    """Reference composition of :func:`si` out of per-element ops."""
    x = _as_tensor(x)
    return ad.stack_reduce_max([ad.neg(mask_pool(ad.neg(x), B)) for B in ELEMENTS])


def is_composed(x):
    """Reference composition of :func:`is_` out of per-element ops."""
    x = _as_tensor(x)
    return ad.stack_reduce_min([mask_pool(x, B) for B in ELEMENTS])


# -- classical binary morphology (oracles) -------------------------------------

def _check_binary(x):
    x = np.asarray(x)
    if not np.isin(x, (0, 1)).all():
        raise ValueError("binary morphology needs a strictly 0/1 volume")
    return x.astype(bool)


def _shifted_views(x, B):
    """Yield ``x[clamp(p + o)]`` for each offset ``o`` in ``B``, as full volumes."""
    xp = np.pad(x, 1, mode="edge")
    Z, Y, X = x.shape
    for dz, dy, dx in np.argwhere(B):
        yield xp[dz:dz + Z, dy:dy + Y, dx:dx + X]


def binary_erode(x, B):
    """``{p : p + B is inside x}`` with the border replicated."""
    x = _check_binary(x)
    out = np.ones_like(x)
    for v in _shifted_views(x, B):
        out &= v
    return out


def binary_dilate(x, B):
    """``{p : p + B meets x}`` with the border replicated (``B`` is symmetric)."""
    x = _check_binary(x)
    out = np.zeros_like(x)
    for v in _shifted_views(x, B):
        out |= v
    return out


def binary_open(x, B):
    return binary_dilate(binary_erode(x, B), B)


def binary_si(x, elements=ELEMENTS):
    out = np.zeros(np.shape(x), dtype=bool)
    for B in elements:
        out |= binary_erode(x, B)
    return out


def binary_is(x, elements=ELEMENTS):
    out = np.ones(np.shape(x), dtype=bool)
    for B in elements:
        out &= binary_dilate(x, B)
    return out


def union_element(elements=ELEMENTS):
    return np.asarray(elements, dtype=bool).any(axis=0)
