"""Encoder with two decoders and a morphological smoothing head.

Topology at any width: a stride-2 stem, ``len(stage_channels)`` residual
stages (stride 2 between stages), and per decoder one nearest-x2 upsampling
block per stride-2 step. The stage outputs other than the deepest one are
the skip taps, consumed deepest first. The segmentation decoder ends in a
sigmoid, the reconstruction decoder in a [0, 1] clamp.
"""
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .morphology import is_, si

ModelParams = Dict[str, np.ndarray]


@dataclass
class ModelConfig:
    stage_channels: List[int] = field(default_factory=lambda: [8, 16, 32])
    blocks_per_stage: int = 2
    mu: int = 3
    threshold: float = 0.5
    head_channels: int = 4
    foreground_prior: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if len(self.stage_channels) < 2:
            raise ValueError("need at least two encoder stages for the skip taps")
        if any(c < 1 for c in self.stage_channels) or self.head_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0 < self.foreground_prior < 1:
            raise ValueError("foreground_prior must lie in (0, 1)")

    @property
    def total_stride(self):
        return 2 ** len(self.stage_channels)


class SegmentationResult(NamedTuple):
    s_bar: ad.Tensor
    s: ad.Tensor
    i_rec: Optional[ad.Tensor]
    binary: np.ndarray


def _shapes(cfg):
    """Parameter name -> shape, in a fixed order."""
    ch = cfg.stage_channels
    shapes = {}
    shapes["enc.stem.w"] = (3, 3, 3, 1, ch[0])
    shapes["enc.stem.scale"] = (ch[0],)
    shapes["enc.stem.shift"] = (ch[0],)
    cin = ch[0]
    for s, c in enumerate(ch):
        for b in range(cfg.blocks_per_stage):
            p = f"enc.s{s}.b{b}"
            shapes[f"{p}.conv1.w"] = (3, 3, 3, cin, c)
            shapes[f"{p}.aff1.scale"] = (c,)
            shapes[f"{p}.aff1.shift"] = (c,)
            shapes[f"{p}.conv2.w"] = (3, 3, 3, c, c)
            shapes[f"{p}.aff2.scale"] = (c,)
            shapes[f"{p}.aff2.shift"] = (c,)
            if b == 0 and (s > 0 or cin != c):
                shapes[f"{p}.proj.w"] = (1, 1, 1, cin, c)
            cin = c
    for dec in ("seg", "rec"):
        for k in range(len(ch) - 1):
            c_in, c_out = ch[-1 - k], ch[-2 - k]
            shapes[f"{dec}.up{k}.conv1.w"] = (3, 3, 3, c_in, c_out)
            shapes[f"{dec}.up{k}.conv1.b"] = (c_out,)
            shapes[f"{dec}.up{k}.conv2.w"] = (3, 3, 3, 2 * c_out, c_out)
            shapes[f"{dec}.up{k}.conv2.b"] = (c_out,)
        k = len(ch) - 1
        shapes[f"{dec}.up{k}.conv1.w"] = (3, 3, 3, ch[0], cfg.head_channels)
        shapes[f"{dec}.up{k}.conv1.b"] = (cfg.head_channels,)
        shapes[f"{dec}.head.w"] = (1, 1, 1, cfg.head_channels, 1)
        shapes[f"{dec}.head.b"] = (1,)
    return shapes


def param_shapes(cfg):
    return _shapes(cfg)


def init_params(cfg, seed=None):
    """Fan-in scaled uniform kernels, unit affine scales, zero shifts and biases.

    The segmentation head bias starts at ``logit(foreground_prior)`` so the
    initial soft mask sits below the entropy term's 1/e turning point;
    starting at 0.5 lets that term drive the whole volume to 1.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in _shapes(cfg).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[:4]))
            bound = np.sqrt(3.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        elif name.endswith(".scale"):
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    prior = cfg.foreground_prior
    params["seg.head.b"][:] = np.log(prior / (1 - prior))
    return params


def _p(params, name):
    v = params[name]
    return v if isinstance(v, ad.Tensor) else ad.as_tensor(v)


def _conv_aff(x, params, prefix, conv, aff, stride=1):
    y = ad.conv3d(x, _p(params, f"{prefix}.{conv}.w"), stride=stride)
    return ad.add(ad.mul(y, _p(params, f"{prefix}.{aff}.scale")), _p(params, f"{prefix}.{aff}.shift"))


def _basic_block(x, params, prefix, stride):
    h = ad.relu(_conv_aff(x, params, prefix, "conv1", "aff1", stride))
    h = _conv_aff(h, params, prefix, "conv2", "aff2")
    if f"{prefix}.proj.w" in params:
        short = ad.conv3d(x, _p(params, f"{prefix}.proj.w"), stride=stride)
    else:
        short = x
    return ad.relu(ad.add(h, short))


def check_input_dims(dims, cfg):
    stride = cfg.total_stride
    if any(d % stride for d in dims):
        raise ValueError(f"volume dims {tuple(dims)} must be divisible by the encoder stride {stride}")


def encode(i, params, cfg):
    """Return ``(skips, bottleneck)``; skips are the shallow stage outputs, shallowest first."""
    i = i if isinstance(i, ad.Tensor) else ad.Tensor(i)
    if i.ndim != 3:
        raise ValueError(f"encoder expects a (Z, Y, X) volume, got {i.shape}")
    check_input_dims(i.shape, cfg)
    x = ad.reshape(i, i.shape + (1,))
    x = ad.relu(_stem(x, params))
    taps = []
    for s in range(len(cfg.stage_channels)):
        for b in range(cfg.blocks_per_stage):
            x = _basic_block(x, params, f"enc.s{s}.b{b}", 2 if (b == 0 and s > 0) else 1)
        taps.append(x)
    return taps[:-1], taps[-1]


def _stem(x, params):
    y = ad.conv3d(x, _p(params, "enc.stem.w"), stride=2)
    return ad.add(ad.mul(y, _p(params, "enc.stem.scale")), _p(params, "enc.stem.shift"))


def _decode(skips, bottleneck, params, cfg, dec):
    x = bottleneck
    for k, skip in enumerate(reversed(skips)):
        x = ad.upsample_nearest2x(x)
        x = ad.relu(ad.conv3d(x, _p(params, f"{dec}.up{k}.conv1.w"), _p(params, f"{dec}.up{k}.conv1.b")))
        if x.shape != skip.shape:
            raise ValueError(f"skip junction mismatch at {dec}.up{k}: {x.shape} vs {skip.shape}")
        x = ad.concat([x, skip])
        x = ad.relu(ad.conv3d(x, _p(params, f"{dec}.up{k}.conv2.w"), _p(params, f"{dec}.up{k}.conv2.b")))
    k = len(skips)
    x = ad.upsample_nearest2x(x)
    x = ad.relu(ad.conv3d(x, _p(params, f"{dec}.up{k}.conv1.w"), _p(params, f"{dec}.up{k}.conv1.b")))
    x = ad.conv3d(x, _p(params, f"{dec}.head.w"), _p(params, f"{dec}.head.b"))
    return ad.reshape(x, x.shape[:3])


def decode_seg(features, params, cfg):
    skips, bottleneck = features
    return ad.sigmoid(_decode(skips, bottleneck, params, cfg, "seg"))


def decode_rec(features, params, cfg):
    skips, bottleneck = features
    return ad.clamp(_decode(skips, bottleneck, params, cfg, "rec"), 0.0, 1.0)


def smooth(s_bar, mu):
    """``(SI o IS)^mu``, innermost IS first."""
    s = s_bar if isinstance(s_bar, ad.Tensor) else ad.Tensor(s_bar)
    for _ in range(mu):
        s = si(is_(s))
    return s


def binarize(s, threshold):
    data = s.data if isinstance(s, ad.Tensor) else np.asarray(s)
    return data >= threshold


def forward(i, params, cfg, with_rec=True):
    features = encode(i, params, cfg)
    s_bar = decode_seg(features, params, cfg)
    s = smooth(s_bar, cfg.mu)
    i_rec = decode_rec(features, params, cfg) if with_rec else None
    return SegmentationResult(s_bar, s, i_rec, binarize(s, cfg.threshold))
