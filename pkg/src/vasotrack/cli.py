"""Command-line entry point: ``vasotrack <subcommand>``.

Every stage reads one JSON run config; ``--set key.path=value`` and the
dedicated flags override it. The resolved config is written next to the
outputs. Failures print one JSON line on stderr and exit with 2 (usage or
config), 3 (data) or 4 (numeric divergence).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import analysis as an
from . import phantom as ph
from . import pipeline as pl
from .losses import LossWeights
from .model import ModelConfig
from .skeleton import SkeletonConfig
from .volume import (Movie4D, V4DError, DegenerateInputError, downsample_to_rate, load_rois,
                     load_v4d, normalize, save_rois, save_v4d)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


class UsageError(Exception):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DataError(Exception):
    pass


# -- run config ----------------------------------------------------------------

@dataclass
class Paths:
    input: Optional[str] = None
    rois: Optional[str] = None
    output_dir: str = "out"


@dataclass
class TrainSection:
    learning_rate: float = 1e-4
    steps_static: int = 2000
    steps_temporal: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    crop_size: Optional[List[int]] = None
    voxel_budget: int = 32 * 64 * 64
    temporal_mode: str = "joint"


@dataclass
class OnsetSection:
    kappa: float = 2.0
    fraction: float = 0.2
    min_rel_threshold: float = 0.05
    baseline_tol: Optional[float] = 0.5


@dataclass
class AnalysisSection:
    cutoff_hz: float = 1.0
    z_max: List[object] = field(default_factory=lambda: ["max"])
    n: List[int] = field(default_factory=lambda: [5])
    kinds: List[str] = field(default_factory=lambda: ["dilation", "constriction"])
    threshold: float = 0.5
    onset: OnsetSection = field(default_factory=OnsetSection)


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    paths: Paths = field(default_factory=Paths)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    skeleton: SkeletonConfig = field(default_factory=SkeletonConfig)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def train_config(self):
        return pl.TrainConfig(seed=self.seed, loss=self.loss, skeleton=self.skeleton,
                              **asdict(self.train))

    def model_config(self):
        return ModelConfig(**{**asdict(self.model), "seed": self.seed})


_NUMERIC = (int, float)


def _check_type(value, default, key):
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, _NUMERIC):
        ok = isinstance(value, _NUMERIC) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            ok = value.is_integer()
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise UsageError(f"expected {type(default).__name__}, got {type(value).__name__}", key)


def build_section(cls, data, prefix=""):
    """Instantiate dataclass ``cls`` from a dict, reporting the key path of any problem."""
    if not isinstance(data, dict):
        raise UsageError("expected an object", prefix.rstrip(".") or "<root>")
    names = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in names:
            raise UsageError("unknown key", prefix + key)
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = build_section(type(default), value, f"{prefix}{name}.")
        else:
            _check_type(value, default, prefix + name)
            if isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
                value = int(value)
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc), prefix.rstrip(".") or "<root>") from None


def _set_path(tree, dotted, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise UsageError("cannot descend into a non-object", dotted)
    node[keys[-1]] = value


def load_config(path=None, overrides=()):
    """Defaults < config file < ``--set`` overrides."""
    tree = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            tree = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"invalid JSON: {exc}", str(path)) from None
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override must look like key.path=value, got {item!r}", item)
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(tree, key, value)
    return build_section(RunConfig, tree)


def config_dict(cfg: RunConfig):
    return asdict(cfg)


def echo_config(cfg: RunConfig, out_dir, name="resolved_config.json"):
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / name).write_text(json.dumps(config_dict(cfg), indent=2, sort_keys=True) + "\n")


def _threads(args, cfg=None):
    if getattr(args, "threads", None) is not None:
        n = args.threads
    elif os.environ.get("V4D_THREADS"):
        try:
            n = int(os.environ["V4D_THREADS"])
        except ValueError:
            raise UsageError("V4D_THREADS must be an integer", "V4D_THREADS") from None
    else:
        n = cfg.threads if cfg is not None else 1
    if n < 1:
        raise UsageError("thread count must be >= 1", "threads")
    return n


def _require_file(path, what):
    if path is None:
        raise UsageError(f"no {what} given", what)
    if not Path(path).is_file():
        raise DataError(f"{what} not found: {path}")
    return path


def _load_movie(path, what="input movie"):
    return load_v4d(_require_file(path, what))


def _out_dir(args, cfg):
    out = Path(getattr(args, "out_dir", None) or cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _common_config(args):
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "out_dir", None) is not None:
        overrides.append(f"paths.output_dir={json.dumps(str(args.out_dir))}")
    cfg = load_config(getattr(args, "config", None), overrides)
    cfg.threads = _threads(args, cfg)
    return cfg


# -- subcommands ---------------------------------------------------------------

def cmd_phantom(args):
    spec_path = _require_file(args.spec, "phantom spec")
    try:
        spec = ph.PhantomSpec.from_json(spec_path)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(str(exc), "spec") from None
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    noisy, truth = ph.generate(spec)
    save_v4d(noisy, out / "noisy.v4d")
    save_v4d(truth.mask, out / "mask.v4d")
    ph.write_truth_csv(truth, spec, out / "truth.csv")
    ph.write_onset_truth_csv(truth, out / "onsets_truth.csv")
    save_rois(ph.phantom_rois(spec), out / "rois.json")
    (out / "spec_resolved.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps({"noisy": str(out / "noisy.v4d"), "mask": str(out / "mask.v4d")}))


def cmd_preprocess(args):
    movie = _load_movie(args.input)
    normed, record = normalize(movie)
    out = normed if args.target_hz is None else downsample_to_rate(normed, args.target_hz, args.mode)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_v4d(out, args.out)
    print(json.dumps({"frames": out.n_frames, "frame_rate": out.frame_rate, **asdict(record)}))


def cmd_train_static(args):
    cfg = _common_config(args)
    if args.input is not None:
        cfg.paths.input = args.input
    out = _out_dir(args, cfg)
    echo_config(cfg, out)
    movie = _load_movie(cfg.paths.input)
    model_cfg = cfg.model_config()
    try:
        res = pl.train_static(movie, cfg.train_config(), model_cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    pl.save_checkpoint(res.params, out / "checkpoint.v4dp", model_cfg, movie.dims)
    meta = dict(frame_rate=1.0, voxel_size=movie.voxel_size, origin_depth=movie.origin_depth)
    save_v4d(Movie4D(res.segmentation.s.data[None].astype(np.float32), **meta), out / "s_static.v4d")
    save_v4d(Movie4D(res.anchor[None].astype(np.float32), **meta), out / "k_anchor.v4d")
    pl.write_loss_csv(res.log, out / "loss.csv")
    print(json.dumps({"checkpoint": str(out / "checkpoint.v4dp"), "steps": len(res.log)}))


def _load_ckpt(path):
    try:
        return pl.load_checkpoint(_require_file(path, "checkpoint"))
    except pl.CheckpointError as exc:
        raise DataError(str(exc)) from None


def cmd_train_temporal(args):
    cfg = _common_config(args)
    if args.input is not None:
        cfg.paths.input = args.input
    out = _out_dir(args, cfg)
    echo_config(cfg, out, "resolved_config_temporal.json")
    movie = _load_movie(cfg.paths.input)
    anchor = _load_movie(args.anchor, "anchor skeleton").data[0]
    ckpt = _load_ckpt(args.init or out / "checkpoint.v4dp")
    model_cfg = ckpt.model_cfg or cfg.model_config()
    _check_dims(ckpt, movie)
    try:
        params, log = pl.train_temporal(movie, anchor, ckpt.params, cfg.train_config(), model_cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    if isinstance(params, dict):
        pl.save_checkpoint(params, out / "checkpoint_t.v4dp", model_cfg, movie.dims)
    else:
        for t, p in enumerate(params):
            pl.save_checkpoint(p, out / f"checkpoint_t_{t:04d}.v4dp", model_cfg, movie.dims)
    pl.write_loss_csv(log, out / "loss_temporal.csv")
    print(json.dumps({"steps": len(log)}))


def _check_dims(ckpt, movie):
    if ckpt.train_dims is not None and tuple(ckpt.train_dims) != tuple(movie.dims):
        raise DataError(f"movie dims {tuple(movie.dims)} do not match checkpoint training dims "
                        f"{tuple(ckpt.train_dims)}")


def cmd_segment(args):
    cfg = _common_config(args)
    movie = _load_movie(args.input or cfg.paths.input)
    ckpt = _load_ckpt(args.checkpoint)
    _check_dims(ckpt, movie)
    model_cfg = ckpt.model_cfg or cfg.model_config()
    try:
        seg = pl.segment_movie(movie, ckpt.params, model_cfg, cfg.skeleton, z_average=args.z_average,
                               with_skeletons=args.skeletons, threads=cfg.threads)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_v4d(seg.s, out)
    if seg.skeletons is not None:
        save_v4d(seg.skeletons, out.with_name(out.stem + "_skeletons.v4d"))
    print(json.dumps({"segmentation": str(out), "frames": seg.s.n_frames}))


def _named_paths(items, flag):
    """``label=path`` pairs (a bare path gets its file stem as label)."""
    named = {}
    for item in items or []:
        label, _, path = item.rpartition("=")
        named[label or Path(path).stem] = path
    if not named:
        raise UsageError(f"at least one {flag} is required", flag)
    return named


def _rois(path, dims):
    rois = load_rois(_require_file(path, "ROI file"))
    for r in rois:
        try:
            r.check_bounds(dims)
        except ValueError as exc:
            raise DataError(str(exc)) from None
    return rois


def cmd_analyze(args):
    cfg = _common_config(args)
    out = _out_dir(args, cfg)
    a = cfg.analysis
    kind = args.what
    if kind == "diameter":
        s1, s2 = _load_movie(args.seg_x1, "x1 segmentation"), _load_movie(args.seg_x2, "x2 segmentation")
        r1, r2 = _rois(args.rois_x1, s1.dims), _rois(args.rois_x2, s2.dims)
        vol1 = s1.data.mean(axis=0)
        vol2 = s2.data.mean(axis=0)
        try:
            summary = an.diameter_ratio(vol1, vol2, r1, r2, threshold=a.threshold)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        with open(out / "diameter_ratio.csv", "w") as fh:
            fh.write("vessel_id,ratio\n")
            for vid, ratio in sorted(summary.per_vessel.items()):
                fh.write(f"{vid},{ratio:.9g}\n")
        print(json.dumps({"mean": summary.mean, "std": summary.std}))
        return
    segs = _named_paths(args.seg, "--seg")
    intensity = _load_movie(args.intensity, "intensity movie") if args.intensity else None
    reports = {}
    onset_rows = []
    event_base = 0
    for label, path in segs.items():
        seg = _load_movie(path, "segmentation")
        rois = _rois(args.rois or cfg.paths.rois, seg.dims)
        for roi in rois:
            try:
                traces = an.vessel_trace(seg, roi, intensity)
            except ValueError as exc:
                raise DataError(str(exc)) from None
            tag = f"{label}_v{roi.vessel_id}"
            if kind == "traces":
                an.write_traces_csv(traces, out / f"traces_{tag}.csv")
                (out / f"traces_{tag}.svg").write_text(an.svg_traces(traces))
                continue
            needs_filter = kind in ("lowpass", "onsets") or args.filtered
            try:
                filtered = an.lowpass_traces(traces, a.cutoff_hz) if needs_filter else None
            except ValueError as exc:
                raise DataError(str(exc)) from None
            if kind == "lowpass":
                an.write_traces_csv(filtered, out / f"traces_lowpass_{tag}.csv")
                (out / f"traces_lowpass_{tag}.svg").write_text(an.svg_traces(filtered))
            elif kind == "correlation":
                source = filtered if args.filtered else traces
                rep = an.correlation_report(source, a.z_max, a.n)
                reports[tag] = rep
                an.write_matrix_csv(rep, out / f"correlation_matrix_{tag}.csv")
                (out / f"correlation_matrix_{tag}.svg").write_text(an.svg_matrix(rep))
            elif kind == "onsets":
                params = an.OnsetParams(**asdict(a.onset))
                for k in a.kinds:
                    table = an.detect_onsets(filtered, k, params)
                    for ev in table.events:
                        ev.event_id += event_base
                    event_base += len(table.events)
                    onset_rows.extend(table.rows())
                    (out / f"onsets_{tag}_{k}.svg").write_text(an.svg_onsets(table))
    if kind == "correlation":
        an.write_correlation_table(reports, out / "correlation_table.csv")
        print(json.dumps({tag: {f"{zm};{n}": v for (zm, n), v in rep.averages.items()}
                          for tag, rep in reports.items()}))
    elif kind == "onsets":
        with open(out / "onsets.csv", "w") as fh:
            fh.write("event_id,kind,z_um,onset_s\n")
            for event_id, k, z_um, t in onset_rows:
                fh.write(f"{event_id},{k},{z_um:.9g},{t:.9g}\n")
        print(json.dumps({"events": event_base}))


def cmd_selftest(args):
    from . import selftest
    ok = selftest.run(verbose=True, seed=args.seed or 0)
    if not ok:
        raise SystemExit(EXIT_FAIL)


# -- parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("usage", message, EXIT_USAGE)
        raise SystemExit(EXIT_USAGE)


def _emit_error(kind, message, code, key=None):
    line = {"error": kind, "message": message, "exit_code": code}
    if key is not None:
        line["key"] = key
    print(json.dumps(line), file=sys.stderr)


def _add_common(p, config=True):
    if config:
        p.add_argument("--config", help="run config JSON file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted path, JSON value); repeatable")
        p.add_argument("--out-dir", dest="out_dir", help="output directory (overrides paths.output_dir)")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--threads", type=int, help="worker threads (default 1, or $V4D_THREADS)")


def build_parser():
    parser = _Parser(prog="vasotrack", description="Temporal vessel segmentation for sparse 4D two-photon movies.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="render a synthetic phantom movie with truth tables")
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="normalize a movie and downsample it in time")
    p.add_argument("--in", dest="input", required=True, help="input V4D movie")
    p.add_argument("--target-hz", type=float, help="target frame rate (omit to keep the rate)")
    p.add_argument("--mode", choices=("average", "decimate"), default="average",
                   help="downsampling mode (default: average)")
    p.add_argument("--out", required=True, help="output V4D path")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train-static", help="stage one: fit on the time-collapsed movie")
    p.add_argument("--in", dest="input", help="preprocessed movie (overrides paths.input)")
    _add_common(p)
    p.set_defaults(func=cmd_train_static)

    p = sub.add_parser("train-temporal", help="stage two: retrain on frames with the skeleton loss")
    p.add_argument("--anchor", required=True, help="anchor skeleton V4D from train-static")
    p.add_argument("--init", help="initial checkpoint (default: <output_dir>/checkpoint.v4dp)")
    p.add_argument("--in", dest="input", help="preprocessed movie (overrides paths.input)")
    _add_common(p)
    p.set_defaults(func=cmd_train_temporal)

    p = sub.add_parser("segment", help="segment every frame of a movie")
    p.add_argument("--checkpoint", required=True, help="parameter checkpoint (.v4dp)")
    p.add_argument("--in", dest="input", help="movie to segment (overrides paths.input)")
    p.add_argument("--out", required=True, help="output V4D path for S_t")
    p.add_argument("--skeletons", action="store_true", help="also write per-frame skeletons K_t")
    p.add_argument("--z-average", action="store_true", help="apply the z moving average to S_t")
    _add_common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("analyze", help="traces, correlation, low-pass, onsets or diameter ratio")
    p.add_argument("what", choices=("traces", "correlation", "lowpass", "onsets", "diameter"),
                   help="which analysis to run")
    p.add_argument("--seg", action="append", metavar="[LABEL=]PATH",
                   help="segmentation movie; repeat with labels to compare methods")
    p.add_argument("--rois", help="ROI JSON (overrides paths.rois)")
    p.add_argument("--intensity", help="multiply segmentations by this intensity movie")
    p.add_argument("--filtered", action="store_true", help="correlate low-passed traces")
    p.add_argument("--seg-x1", help="x1 magnification segmentation (diameter)")
    p.add_argument("--seg-x2", help="x2 magnification segmentation (diameter)")
    p.add_argument("--rois-x1", help="x1 ROI JSON (diameter)")
    p.add_argument("--rois-x2", help="x2 ROI JSON (diameter)")
    _add_common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("selftest", help="run the morphology, skeleton and gradient oracles")
    _add_common(p, config=False)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        _emit_error("config", str(exc), EXIT_USAGE, exc.key)
        return EXIT_USAGE
    except (DataError, V4DError, DegenerateInputError, FileNotFoundError) as exc:
        _emit_error("data", str(exc), EXIT_DATA)
        return EXIT_DATA
    except pl.TrainingDiverged as exc:
        _emit_error("diverged", str(exc), EXIT_DIVERGED)
        return EXIT_DIVERGED
    except SystemExit as exc:
        return int(exc.code or 0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
