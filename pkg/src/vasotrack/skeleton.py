"""Differentiable iterative skeletonization.

Starting from ``Z_0 = S``, each step keeps the erosion of the current set
together with its opening residue::

    Z_n = erosion(Z_{n-1})  ∪  (Z_{n-1} \\ open(Z_{n-1}))

Union is a pointwise max and the set difference is the clamped subtraction
``max(Q - open(Q), 0)``, which equals the set difference on binary inputs
and stays inside [0, 1] for soft ones.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .morphology import (_as_tensor, binary_dilate, binary_erode, dilation, erosion,
                         union_element)


@dataclass
class SkeletonConfig:
    n: int = 5
    pre_threshold: Optional[float] = None

    def __post_init__(self):
        if self.n < 0:
            raise ValueError(f"skeleton iteration count must be >= 0, got {self.n}")
        if self.pre_threshold is not None and not 0 < self.pre_threshold < 1:
            raise ValueError("pre_threshold must lie in (0, 1)")


def residue(q):
    """``clamp_min(q - open(q), 0)``."""
    q = _as_tensor(q)
    return ad.clamp_min(ad.sub(q, dilation(erosion(q))), 0.0)


def skeleton_step(z):
    z = _as_tensor(z)
    eroded = erosion(z)
    opened = dilation(eroded)
    res = ad.clamp_min(ad.sub(z, opened), 0.0)
    return ad.maximum(eroded, res)


def skeletonize(s, cfg=None):
    """Apply ``cfg.n`` skeleton steps to ``s``.

    With ``cfg.pre_threshold`` set, ``s`` is hard-binarized first, which
    cuts the gradient; leave it unset for the differentiable layer.
    """
    cfg = cfg or SkeletonConfig()
    z = _as_tensor(s)
    if cfg.pre_threshold is not None:
        z = ad.Tensor((z.data >= cfg.pre_threshold).astype(z.dtype))
    for _ in range(cfg.n):
        z = skeleton_step(z)
    return z


def classical_skeleton(x, n):
    """The same recursion with exact set arithmetic on a binary volume."""
    x = np.asarray(x)
    if not np.isin(x, (0, 1)).all():
        raise ValueError("classical_skeleton needs a strictly 0/1 volume")
    U = union_element()
    z = x.astype(bool)
    for _ in range(n):
        eroded = binary_erode(z, U)
        opened = binary_dilate(eroded, U)
        z = eroded | (z & ~opened)
    return z
