"""Active-contour loss terms, their weighted compound, and the temporal skeleton loss."""
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

from . import autodiff as ad
from .autodiff import EPS
from .skeleton import SkeletonConfig, skeletonize

TERMS = ("l_ac", "l_rank", "l_tight", "l_rec", "l_mv", "l_me")
LOSS_CSV_HEADER = "step,l_total,l_ac,l_rank,l_tight,l_rec,l_mv,l_me,l_skel"


@dataclass
class LossWeights:
    """Weights of the compound loss.

    ``lambda3`` (tightness) is the one unnormalized term; ``None`` means
    ``tightness_coeff / voxel_count`` resolved at evaluation time, which keeps
    the per-voxel pressure independent of volume size. ``mv_sign=-1``
    selects the variance-rewarding variant ``exp(-Var S)``.
    """
    alpha: float = 1.0
    beta: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: Optional[float] = None
    tightness_coeff: float = 1e-4
    lambda4: float = 1.0
    lambda5: float = 1.0
    lambda6: float = 1.0
    lambda_skel: float = 1.0
    epsilon: float = EPS
    mv_sign: int = 1

    def __post_init__(self):
        for name, v in asdict(self).items():
            if name in ("mv_sign", "lambda3") or v is None:
                continue
            if v < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {v}")
        if self.lambda3 is not None and self.lambda3 < 0:
            raise ValueError(f"loss weight lambda3 must be >= 0, got {self.lambda3}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.mv_sign not in (1, -1):
            raise ValueError("mv_sign must be +1 or -1")

    def tightness_weight(self, voxel_count):
        return self.tightness_coeff / voxel_count if self.lambda3 is None else self.lambda3

    def term_weights(self, voxel_count):
        return (self.lambda1, self.lambda2, self.tightness_weight(voxel_count),
                self.lambda4, self.lambda5, self.lambda6)


class RegionMeans(NamedTuple):
    c1: ad.Tensor
    c2: ad.Tensor


def _t(x):
    return x if isinstance(x, ad.Tensor) else ad.Tensor(x)


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def region_means(i, s, eps=EPS):
    """Mean intensity inside (``c1``) and outside (``c2``) the soft mask ``s``."""
    i, s = _t(i), _t(s)
    _check_same(i, s, "region_means")
    inside = ad.sum(s)
    outside = ad.sum(ad.sub(1.0, s))
    c1 = ad.div(ad.sum(ad.mul(i, s)), ad.add(inside, eps))
    c2 = ad.div(ad.sum(ad.mul(i, ad.sub(1.0, s))), ad.add(outside, eps))
    return RegionMeans(c1, c2)


def gamma_energy(i, s_bar, means, w=None):
    """Per-voxel ``|grad s_bar|_1 * (alpha (I - c1)^2 - beta (I - c2)^2)``."""
    w = w or LossWeights()
    i, s_bar = _t(i), _t(s_bar)
    _check_same(i, s_bar, "gamma_energy")
    inner = ad.mul(w.alpha, ad.square(ad.sub(i, means.c1)))
    outer = ad.mul(w.beta, ad.square(ad.sub(i, means.c2)))
    return ad.mul(ad.spatial_gradient_l1(s_bar), ad.sub(inner, outer))


def l_ac(gamma, s):
    """Voxel mean of ``exp(G S)`` where ``G <= 0`` and ``exp(-G (1 - S))`` where ``G > 0``."""
    gamma, s = _t(gamma), _t(s)
    _check_same(gamma, s, "l_ac")
    nonpos = gamma.data <= 0
    inside = ad.exp(ad.mul(gamma, s))
    outside = ad.exp(ad.neg(ad.mul(gamma, ad.sub(1.0, s))))
    return ad.mean(ad.where(nonpos, inside, outside))


def l_rank(means):
    return ad.exp(ad.sub(means.c2, means.c1))


def l_rec(i, i_rec):
    i, i_rec = _t(i), _t(i_rec)
    _check_same(i, i_rec, "l_rec")
    return ad.mean(ad.add(ad.square(ad.sub(i_rec, i)), ad.spatial_gradient_l1(i_rec)))


def l_tight(s):
    return ad.sum(_t(s))


def l_mv(s, sign=1):
    """``exp(sign * (E[S^2] - E[S]^2))``; ``sign=+1`` is the form as written."""
    s = _t(s)
    m = ad.mean(s)
    var = ad.sub(ad.mean(ad.square(s)), ad.square(m))
    return ad.exp(var if sign > 0 else ad.neg(var))


def l_me(s, eps=EPS):
    s = _t(s)
    return ad.mean(ad.neg(ad.mul(s, ad.log(s, eps))))


def loss_terms(i, s_bar, s, i_rec, w=None):
    """All six compound-loss terms as a dict of scalar tensors."""
    w = w or LossWeights()
    i, s_bar, s = _t(i), _t(s_bar), _t(s)
    means = region_means(i, s, w.epsilon)
    gamma = gamma_energy(i, s_bar, means, w)
    return {
        "l_ac": l_ac(gamma, s),
        "l_rank": l_rank(means),
        "l_tight": l_tight(s),
        "l_rec": l_rec(i, i_rec),
        "l_mv": l_mv(s, w.mv_sign),
        "l_me": l_me(s, w.epsilon),
    }


def weighted_total(terms, w, voxel_count):
    total = None
    for name, lam in zip(TERMS, w.term_weights(voxel_count)):
        part = ad.mul(lam, terms[name])
        total = part if total is None else ad.add(total, part)
    return total


def compound(i, s_bar, s, i_rec, w=None, return_terms=False):
    """``sum_k lambda_k L_k`` over the six active-contour terms."""
    w = w or LossWeights()
    terms = loss_terms(i, s_bar, s, i_rec, w)
    total = weighted_total(terms, w, _t(s).size)
    return (total, terms) if return_terms else total


def skeleton_alignment(k_anchor, k_t):
    """``E_p |K(p) - K_t(p)|``."""
    k_anchor, k_t = _t(k_anchor), _t(k_t)
    if k_anchor.shape != k_t.shape:
        raise ValueError(f"anchor skeleton dims {k_anchor.shape} do not match frame dims {k_t.shape}")
    return ad.mean(ad.abs(ad.sub(k_anchor, k_t)))


def temporal_loss(i_t, s_bar_t, s_t, i_rec_t, k_anchor, w=None, skel_cfg=None,
                  return_terms=False):
    """Compound loss on frame ``t`` plus the skeleton alignment to the anchor."""
    w = w or LossWeights()
    s_t, k_anchor = _t(s_t), _t(k_anchor)
    if k_anchor.shape != s_t.shape:
        raise ValueError(f"anchor skeleton dims {k_anchor.shape} do not match frame dims {s_t.shape}")
    total, terms = compound(i_t, s_bar_t, s_t, i_rec_t, w, return_terms=True)
    k_t = skeletonize(s_t, skel_cfg or SkeletonConfig())
    terms["l_skel"] = skeleton_alignment(k_anchor, k_t)
    total = ad.add(total, ad.mul(w.lambda_skel, terms["l_skel"]))
    return (total, terms) if return_terms else total
