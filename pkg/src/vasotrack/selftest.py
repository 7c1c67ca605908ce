"""Oracle suites shared by ``vasotrack selftest`` and the test-suite.

Each check compares a differentiable layer against an independent reference:
binary set morphology, the classical skeleton recursion, or central finite
differences.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from . import losses as L
from .morphology import (ELEMENTS, binary_dilate, binary_erode, binary_is, binary_open,
                         binary_si, dilation, erosion, is_, open_, si, union_element)
from .skeleton import SkeletonConfig, classical_skeleton, skeletonize


def random_binary_volumes(count, size=8, seed=0, density=(0.2, 0.8)):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        p = rng.uniform(*density)
        yield (rng.random((size, size, size)) < p).astype(np.float32)


def morphology_mismatches(volume):
    """Names of the soft operators whose output differs from the binary oracle on ``volume``."""
    U = union_element()
    pairs = {
        "si": (si, lambda v: binary_si(v)),
        "is": (is_, lambda v: binary_is(v)),
        "erosion": (erosion, lambda v: binary_erode(v, U)),
        "dilation": (dilation, lambda v: binary_dilate(v, U)),
        "open": (open_, lambda v: binary_open(v, U)),
    }
    bad = []
    for name, (soft, oracle) in pairs.items():
        got = soft(ad.Tensor(volume)).data
        if not np.array_equal(got.astype(bool), oracle(volume)) or not np.isin(got, (0, 1)).all():
            bad.append(name)
    return bad


def morphology_oracle(count=200, size=8, seed=0):
    failures = 0
    for vol in random_binary_volumes(count, size, seed):
        failures += bool(morphology_mismatches(vol))
    return failures == 0, failures


def canonical_shapes(size=12):
    """Binary line, L, tube and ball volumes."""
    shapes = {}
    line = np.zeros((size,) * 3, np.float32)
    line[2:size - 2, size // 2, size // 2] = 1
    shapes["line"] = line
    ell = np.zeros_like(line)
    ell[2:size - 2, 3, 3] = 1
    ell[size - 3, 3:size - 2, 3] = 1
    shapes["L"] = ell
    zz, yy, xx = np.meshgrid(*(np.arange(size),) * 3, indexing="ij")
    c = (size - 1) / 2
    tube = ((yy - c) ** 2 + (xx - c) ** 2 <= 2.5 ** 2).astype(np.float32)
    shapes["tube"] = tube
    ball = ((zz - c) ** 2 + (yy - c) ** 2 + (xx - c) ** 2 <= 3.5 ** 2).astype(np.float32)
    shapes["ball"] = ball
    return shapes


def skeleton_matches(volume, n):
    got = skeletonize(ad.Tensor(volume), SkeletonConfig(n=n)).data
    return np.isin(got, (0, 1)).all() and np.array_equal(got.astype(bool), classical_skeleton(volume, n))


def skeleton_oracle(count=100, size=8, seed=0, n_max=5):
    failures = 0
    for k, vol in enumerate(random_binary_volumes(count, size, seed)):
        failures += not skeleton_matches(vol, k % (n_max + 1))
    for vol in canonical_shapes().values():
        for n in range(n_max + 1):
            failures += not skeleton_matches(vol, n)
    return failures == 0, failures


def line_is_fixed_point(n=5):
    line = canonical_shapes()["line"]
    return np.array_equal(skeletonize(ad.Tensor(line), SkeletonConfig(n=n)).data, line)


# -- gradient checks -------------------------------------------------------------

def _weights(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def gradcheck_cases(shape=(4, 4, 4), seed=0) -> List[Tuple[str, Callable, np.ndarray, float]]:
    """``(name, f, x, tol)``: smooth ops get 1e-4, piecewise ones 1e-3.

    Each ``f`` maps a tensor to a scalar through a fixed random projection so
    every output coordinate contributes.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.05, 0.95, size=shape)
    w = _weights(shape, seed + 1)
    other = rng.uniform(0.05, 0.95, size=shape)

    def proj(t):
        return ad.sum(ad.mul(t, w if t.shape == shape else _weights(t.shape, seed + 2)))

    smooth, kinky = 1e-4, 1e-3
    ker = _weights((3, 3, 3, 1, 2), seed + 3) * 0.3
    ker2 = _weights((3, 3, 3, 1, 2), seed + 4) * 0.3
    cases = [
        ("add", lambda t: proj(ad.add(t, other)), x, smooth),
        ("sub", lambda t: proj(ad.sub(other, t)), x, smooth),
        ("mul", lambda t: proj(ad.mul(t, t)), x, smooth),
        ("div", lambda t: proj(ad.div(other, ad.add(t, 1.0))), x, smooth),
        ("neg", lambda t: proj(ad.neg(t)), x, smooth),
        ("square", lambda t: proj(ad.square(t)), x, smooth),
        ("exp", lambda t: proj(ad.exp(t)), x, smooth),
        ("log", lambda t: proj(ad.log(t)), x, smooth),
        ("sigmoid", lambda t: proj(ad.sigmoid(ad.mul(t, 4.0))), x, smooth),
        ("sum", lambda t: ad.mul(ad.sum(t), ad.sum(t)), x, smooth),
        ("mean", lambda t: ad.square(ad.mean(ad.mul(t, w))), x, smooth),
        ("reshape", lambda t: proj(ad.reshape(ad.reshape(t, (-1,)), shape)), x, smooth),
        ("abs", lambda t: proj(ad.abs(ad.sub(t, 0.5))), x, kinky),
        ("relu", lambda t: proj(ad.relu(ad.sub(t, 0.5))), x, kinky),
        ("clamp_min", lambda t: proj(ad.clamp_min(ad.sub(t, 0.4), 0.0)), x, kinky),
        ("clamp", lambda t: proj(ad.clamp(t, 0.3, 0.7)), x, kinky),
        ("where", lambda t: proj(ad.where(x > 0.5, ad.square(t), ad.exp(t))), x, smooth),
        ("maximum", lambda t: proj(ad.maximum(t, other)), x, kinky),
        ("stack_reduce_max", lambda t: proj(ad.stack_reduce_max([t, ad.as_tensor(other), ad.mul(t, 0.8)])), x, kinky),
        ("stack_reduce_min", lambda t: proj(ad.stack_reduce_min([t, ad.as_tensor(other), ad.mul(t, 1.2)])), x, kinky),
        ("spatial_gradient_l1", lambda t: proj(ad.spatial_gradient_l1(t)), x, kinky),
        ("masked_window_max", lambda t: proj(ad.masked_window_max(t, ELEMENTS[3])), x, kinky),
        ("si", lambda t: proj(si(t)), x, kinky),
        ("is", lambda t: proj(is_(t)), x, kinky),
        ("erosion", lambda t: proj(erosion(t)), x, kinky),
        ("dilation", lambda t: proj(dilation(t)), x, kinky),
        ("open", lambda t: proj(open_(t)), x, kinky),
        ("skeletonize", lambda t: proj(skeletonize(t, SkeletonConfig(n=2))), x, kinky),
        ("conv3d", lambda t: proj(ad.conv3d(ad.reshape(t, shape + (1,)), ad.as_tensor(ker))), x, smooth),
        ("conv3d_stride2", lambda t: proj(ad.conv3d(ad.reshape(t, shape + (1,)), ad.as_tensor(ker2), stride=2)), x, smooth),
        ("conv3d_weight", lambda k: proj(ad.conv3d(ad.as_tensor(x[..., None]), k)),
         ker, smooth),
        ("upsample_nearest2x", lambda t: proj(ad.upsample_nearest2x(ad.reshape(t, shape + (1,)))), x, smooth),
        ("concat", lambda t: proj(ad.concat([ad.reshape(t, shape + (1,)), ad.reshape(ad.square(t), shape + (1,))])), x, smooth),
    ]
    return cases


def loss_cases(shape=(4, 4, 4), seed=0):
    """Compound and temporal losses as functions of the soft mask."""
    rng = np.random.default_rng(seed)
    i = rng.uniform(0, 1, size=shape)
    s_bar = rng.uniform(0.1, 0.9, size=shape)
    i_rec = rng.uniform(0.1, 0.9, size=shape)
    anchor = (rng.random(shape) < 0.3).astype(np.float64)
    w = L.LossWeights(lambda3=1e-3)
    cases = [
        ("compound_wrt_s", lambda s: L.compound(i, s_bar, s, i_rec, w), s_bar, 1e-3),
        ("compound_wrt_s_bar", lambda sb: L.compound(i, sb, s_bar, i_rec, w), s_bar, 1e-3),
        ("compound_wrt_i_rec", lambda r: L.compound(i, s_bar, s_bar, r, w), i_rec, 1e-3),
        ("temporal_wrt_s", lambda s: L.temporal_loss(i, s_bar, s, i_rec, anchor, w, SkeletonConfig(n=2)),
         s_bar, 1e-3),
    ]
    return cases


def gradcheck_suite(shape=(4, 4, 4), seed=0, max_points=100):
    reports = {}
    for name, f, x, tol in gradcheck_cases(shape, seed) + loss_cases(shape, seed):
        h = 1e-5 if tol <= 1e-4 else 1e-3  # smaller steps keep truncation error off smooth ops
        reports[name] = ad.grad_check(f, x, h=h, tol=tol, max_points=max_points, seed=seed)
    return reports


def run(verbose=True, seed=0, count=50):
    results: Dict[str, bool] = {}
    ok, fails = morphology_oracle(count, seed=seed)
    results["morphology"] = ok
    if verbose:
        print(f"{'PASS' if ok else 'FAIL'} morphology oracle ({count} volumes, {fails} mismatches)")
    ok, fails = skeleton_oracle(count, seed=seed)
    ok = ok and line_is_fixed_point()
    results["skeleton"] = ok
    if verbose:
        print(f"{'PASS' if ok else 'FAIL'} skeleton oracle ({count} volumes + canonical shapes, {fails} mismatches)")
    for name, rep in gradcheck_suite(seed=seed, max_points=32).items():
        results[f"grad:{name}"] = rep.passed
        if verbose:
            print(f"{rep} grad:{name}")
    all_ok = all(results.values())
    if verbose:
        print(f"selftest {'PASS' if all_ok else 'FAIL'} ({sum(results.values())}/{len(results)})")
    return all_ok
