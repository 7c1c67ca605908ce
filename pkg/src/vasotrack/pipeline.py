"""Two-stage training, movie inference and parameter checkpoints.

Stage one fits the network to the time-collapsed movie and derives the
anchor skeleton ``K`` from its smoothed segmentation. Stage two retrains on
the individual sparse frames with the skeleton alignment term added.
"""
from __future__ import annotations

import csv
import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .losses import LOSS_CSV_HEADER, TERMS, LossWeights, compound, temporal_loss
from .model import ModelConfig, check_input_dims, forward, init_params
from .skeleton import SkeletonConfig, skeletonize
from .volume import Movie4D, Volume3D, time_collapse, z_moving_average

ModelParams = Dict[str, np.ndarray]

CHECKPOINT_MAGIC = b"V4DP"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step, stage):
        super().__init__(f"{stage} training diverged: non-finite loss at step {step}")
        self.step = step
        self.stage = stage


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    steps_static: int = 2000
    steps_temporal: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    crop_size: Optional[List[int]] = None
    voxel_budget: int = 32 * 64 * 64
    temporal_mode: str = "joint"
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    skeleton: SkeletonConfig = field(default_factory=SkeletonConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.skeleton, dict):
            self.skeleton = SkeletonConfig(**self.skeleton)
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.steps_static < 0 or self.steps_temporal < 0:
            raise ValueError("step counts must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.temporal_mode not in ("joint", "per_frame"):
            raise ValueError("temporal_mode must be 'joint' or 'per_frame'")
        if self.voxel_budget < 1:
            raise ValueError("voxel_budget must be positive")


def stage_rng(seed, stage):
    """Independent generator for a named stage, derived from the run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(stage.encode())])


class Adam:
    """Adaptive-moment gradient descent with bias correction."""

    def __init__(self, params: ModelParams, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[k] = (params[k] - update).astype(params[k].dtype)


def stretch(x):
    """Min-max stretch to [0, 1]; a constant volume maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


def collapsed_input(movie: Movie4D):
    """The stage-one training volume: time-collapsed and stretched to [0, 1]."""
    return stretch(time_collapse(movie).data)


def _crop_box(dims, cfg: TrainConfig, model_cfg: ModelConfig, rng):
    """A random crop origin/size when the volume exceeds the voxel budget, else the full volume."""
    if int(np.prod(dims)) <= cfg.voxel_budget and cfg.crop_size is None:
        return None
    size = cfg.crop_size
    if size is None:
        raise ValueError(f"volume of {int(np.prod(dims))} voxels exceeds the voxel budget "
                         f"{cfg.voxel_budget}; set crop_size")
    size = [min(int(s), d) for s, d in zip(size, dims)]
    check_input_dims(size, model_cfg)
    start = [int(rng.integers(0, d - s + 1)) for s, d in zip(size, dims)]
    return tuple(slice(a, a + s) for a, s in zip(start, size))


def _step_loss(volume, params, model_cfg, cfg, anchor=None):
    tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
    res = forward(volume, tensors, model_cfg, with_rec=True)
    if anchor is None:
        total, terms = compound(volume, res.s_bar, res.s, res.i_rec, cfg.loss, return_terms=True)
    else:
        total, terms = temporal_loss(volume, res.s_bar, res.s, res.i_rec, anchor, cfg.loss,
                                     cfg.skeleton, return_terms=True)
    return tensors, total, terms


def _log_row(step, total, terms):
    row = {"step": step, "l_total": float(total.data)}
    for name in TERMS:
        row[name] = float(terms[name].data)
    row["l_skel"] = float(terms["l_skel"].data) if "l_skel" in terms else None
    return row


def _gradient_step(volume, params, model_cfg, cfg, opt, step, stage, anchor=None):
    tensors, total, terms = _step_loss(volume, params, model_cfg, cfg, anchor)
    if not np.isfinite(total.data):
        raise TrainingDiverged(step, stage)
    ad.backward(total)
    grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDiverged(step, stage)
    opt.step(params, grads)
    return _log_row(step, total, terms)


@dataclass
class StaticResult:
    params: ModelParams
    segmentation: "object"
    anchor: np.ndarray
    log: List[dict]


def segment_volume(volume, params, model_cfg, with_rec=False):
    tensors = {k: ad.as_tensor(v) for k, v in params.items()}
    return forward(np.asarray(volume, dtype=np.float32), tensors, model_cfg, with_rec=with_rec)


def train_static(movie: Movie4D, cfg: TrainConfig, model_cfg: ModelConfig,
                 params: Optional[ModelParams] = None, callback=None) -> StaticResult:
    """Fit the compound loss on the time-collapsed movie, then derive the anchor skeleton."""
    volume = collapsed_input(movie)
    check_input_dims(volume.shape if cfg.crop_size is None else cfg.crop_size, model_cfg)
    rng = stage_rng(cfg.seed, "static")
    params = init_params(model_cfg, seed=int(rng.integers(2**31))) if params is None else \
        {k: v.copy() for k, v in params.items()}
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    log = []
    for step in range(cfg.steps_static):
        box = _crop_box(volume.shape, cfg, model_cfg, rng)
        vol = volume if box is None else volume[box]
        log.append(_gradient_step(vol, params, model_cfg, cfg, opt, step, "static"))
        if callback is not None:
            callback(step, params, log[-1])
    seg = segment_volume(volume, params, model_cfg)
    anchor = skeletonize(seg.s, cfg.skeleton).data.copy()
    return StaticResult(params, seg, anchor, log)


def frame_inputs(movie: Movie4D):
    """Per-frame training volumes, each stretched to [0, 1]."""
    return [stretch(movie.data[t]) for t in range(movie.n_frames)]


def _visit_order(n_frames, steps, rng):
    order = []
    while len(order) < steps:
        order.extend(rng.permutation(n_frames).tolist())
    return order[:steps]


def train_temporal(movie: Movie4D, anchor, init: ModelParams, cfg: TrainConfig,
                   model_cfg: ModelConfig, callback=None):
    """Retrain on individual frames with the skeleton alignment term.

    ``joint`` mode updates one shared model, visiting frames in a fresh
    random order each epoch; ``steps_temporal`` counts visits. ``per_frame``
    mode fine-tunes an independent copy of ``init`` on every frame for
    ``steps_temporal`` steps and returns a list of parameter sets.
    Returns ``(params, log)``.
    """
    anchor = np.asarray(anchor.data if hasattr(anchor, "data") else anchor, dtype=np.float32)
    if anchor.shape != tuple(movie.dims):
        raise ValueError(f"anchor skeleton dims {anchor.shape} do not match movie dims {movie.dims}")
    check_input_dims(movie.dims, model_cfg)
    frames = frame_inputs(movie)
    rng = stage_rng(cfg.seed, "temporal")
    log = []
    if cfg.temporal_mode == "joint":
        params = {k: v.copy() for k, v in init.items()}
        opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        for step, t in enumerate(_visit_order(len(frames), cfg.steps_temporal, rng)):
            row = _gradient_step(frames[t], params, model_cfg, cfg, opt, step, "temporal", anchor)
            row["frame"] = t
            log.append(row)
            if callback is not None:
                callback(step, params, row)
        return params, log
    per_frame = []
    step = 0
    for t, frame in enumerate(frames):
        params = {k: v.copy() for k, v in init.items()}
        opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
        for _ in range(cfg.steps_temporal):
            row = _gradient_step(frame, params, model_cfg, cfg, opt, step, "temporal", anchor)
            row["frame"] = t
            log.append(row)
            step += 1
        per_frame.append(params)
    return per_frame, log


@dataclass
class MovieSegmentation:
    s: Movie4D
    skeletons: Optional[Movie4D] = None


def segment_movie(movie: Movie4D, params: Union[ModelParams, Sequence[ModelParams]],
                  model_cfg: ModelConfig, skel_cfg: Optional[SkeletonConfig] = None,
                  z_average=False, with_skeletons=False, threads=1, train_dims=None):
    """Per-frame smoothed segmentations ``S_t`` (optionally z-averaged) and skeletons ``K_t``."""
    if train_dims is not None and tuple(train_dims) != tuple(movie.dims):
        raise ValueError(f"movie dims {tuple(movie.dims)} do not match the checkpoint's "
                         f"training dims {tuple(train_dims)}")
    check_input_dims(movie.dims, model_cfg)
    per_frame = not isinstance(params, dict)
    if per_frame and len(params) != movie.n_frames:
        raise ValueError(f"{len(params)} per-frame parameter sets for {movie.n_frames} frames")
    skel_cfg = skel_cfg or SkeletonConfig()

    def run(t):
        p = params[t] if per_frame else params
        res = segment_volume(stretch(movie.data[t]), p, model_cfg)
        k = skeletonize(res.s, skel_cfg).data if with_skeletons else None
        return res.s.data, k

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(run, range(movie.n_frames)))
    else:
        out = [run(t) for t in range(movie.n_frames)]
    s = movie.with_data(np.stack([o[0] for o in out]).astype(np.float32))
    if z_average:
        s = z_moving_average(s)
    k = movie.with_data(np.stack([o[1] for o in out]).astype(np.float32)) if with_skeletons else None
    return MovieSegmentation(s, k)


def write_loss_csv(log, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_CSV_HEADER.split(","))
        for row in log:
            vals = [row["step"], row["l_total"], *(row[n] for n in TERMS), row["l_skel"]]
            w.writerow([vals[0]] + ["" if v is None else f"{v:.9g}" for v in vals[1:]])


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(params: ModelParams, path, model_cfg: Optional[ModelConfig] = None,
                    train_dims=None):
    """Binary layout: magic, u16 version, u16 reserved, u32 metadata length,
    metadata JSON, u32 tensor count, per-tensor name and shape, float32
    payloads, and a trailing CRC32 of everything before it."""
    meta = {"model": asdict(model_cfg) if model_cfg is not None else None,
            "train_dims": list(map(int, train_dims)) if train_dims is not None else None}
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HHI", CHECKPOINT_VERSION, 0, len(meta_bytes)),
             meta_bytes, struct.pack("<I", len(params))]
    names = sorted(params)
    for name in names:
        arr = np.asarray(params[name])
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
                     + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in names:
        parts.append(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


@dataclass
class Checkpoint:
    params: ModelParams
    model_cfg: Optional[ModelConfig]
    train_dims: Optional[tuple]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, _, meta_len = struct.unpack_from("<HHI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: corrupt or truncated payload (checksum mismatch)")
    off = 12
    meta = json.loads(body[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        table.append((name, shape))
    params = {}
    for name, shape in table:
        n = int(np.prod(shape))
        params[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} unexpected trailing bytes")
    model_cfg = ModelConfig(**meta["model"]) if meta.get("model") else None
    dims = tuple(meta["train_dims"]) if meta.get("train_dims") else None
    return Checkpoint(params, model_cfg, dims)
