"""Command-line entry point: synth, segment, eval, loss, and bench verbs.

Configuration precedence is flags > ``--config`` key=value file > defaults.
Every command is deterministic given its flags and seed (wall-clock timing
fields aside) and exits 0 iff no error path fired.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import backend
from .bench import (
    BenchError,
    interval_rows_to_csv,
    interval_rows_to_table,
    run_interval_bench,
    run_sampling_bench,
)
from .contrastive import (
    ProjectionHead,
    contrastive_loss,
    downsample_labels,
    gradient_check,
    merge_feature_sets,
    object_feature_sets,
    project,
    sample_anchor_set,
)
from .matching import MatchConfig, keyframe_schedule
from .metrics import evaluate
from .pipeline import segment_video
from .tensor_io import (
    VideoSequence,
    load_feature_map,
    load_label_map,
    save_feature_map,
    save_label_map,
    synthesize_video,
)

MANIFEST_NAME = "manifest.txt"


class UsageError(Exception):
    """Bad flag or config value; exits with status 2."""


# ---------------------------------------------------------------------------
# Flag parsing helpers
# ---------------------------------------------------------------------------


def _odd_window(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid window {text!r}")
    if value < 1 or value % 2 == 0:
        raise argparse.ArgumentTypeError("window must be odd")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"value must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError(f"value must be >= 0, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number {text!r}")
    if value <= 0:
        raise argparse.ArgumentTypeError(f"value must be > 0, got {value}")
    return value


def _nonneg_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError(f"value must be >= 0, got {value}")
    return value


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}")
    return (_positive_int(parts[0]), _positive_int(parts[1]))


def _parse_geometry(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"geometry must look like 64x64x64, got {text!r}")
    return (_positive_int(parts[0]), _positive_int(parts[1]), _positive_int(parts[2]))


def _parse_motion(text: str) -> list[tuple[int, int]]:
    steps = []
    for chunk in text.split(";"):
        parts = chunk.split(",")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"motion must look like 'dy,dx[;dy,dx...]', got {text!r}")
        try:
            steps.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid motion step {chunk!r}")
    return steps


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated integer list, got {text!r}")


def _parse_id_set(text: str) -> set[int]:
    return set(_parse_int_list(text))


# ---------------------------------------------------------------------------
# RunConfig: flags > config file > defaults
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    k: int = 15
    r: int = 6
    mode: str = "guided"
    top_t: int = 1
    coarse_patch: int = 4
    tau: float = 0.1
    seed: int = 0
    noise: float = 0.05
    tolerance: int | None = None
    out: str | None = None

    def match_config(self) -> MatchConfig:
        return MatchConfig(
            window=self.k,
            reference_mode=self.mode,
            top_t=self.top_t,
            keyframe_interval=self.r,
            coarse_patch=self.coarse_patch,
        )


_CONFIG_PARSERS = {
    "k": _odd_window,
    "r": _positive_int,
    "mode": str,
    "top_t": _positive_int,
    "coarse_patch": _positive_int,
    "tau": _positive_float,
    "seed": _nonneg_int,
    "noise": _nonneg_float,
    "tolerance": _nonneg_int,
    "out": str,
}


def _load_config_file(path: str) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_PARSERS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _CONFIG_PARSERS[key](value.strip())
        except argparse.ArgumentTypeError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}")
    if "mode" in values and values["mode"] not in ("aligned", "guided"):
        raise UsageError(f"{path}: mode must be 'aligned' or 'guided'")
    return values


def merge_run_config(args: argparse.Namespace) -> RunConfig:
    merged = {f.name: f.default for f in fields(RunConfig)}
    config_path = getattr(args, "config", None)
    if config_path:
        merged.update(_load_config_file(config_path))
    for name in merged:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            merged[name] = flag_value
    return RunConfig(**merged)


def _add_shared_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--k", type=_odd_window, default=None, help="local sampling window (odd)")
    sub.add_argument("--r", type=_positive_int, default=None, help="keyframe interval")
    sub.add_argument("--mode", choices=("aligned", "guided"), default=None, help="reference-point mode")
    sub.add_argument("--top-t", dest="top_t", type=_positive_int, default=None, help="reference points per query (guided)")
    sub.add_argument("--coarse-patch", dest="coarse_patch", type=_positive_int, default=None, help="patch side for the coarse search")
    sub.add_argument("--tau", type=_positive_float, default=None, help="contrastive temperature")
    sub.add_argument("--seed", type=_nonneg_int, default=None, help="RNG seed")
    sub.add_argument("--noise", type=_nonneg_float, default=None, help="synthetic noise amplitude")
    sub.add_argument("--tolerance", type=_nonneg_int, default=None, help="boundary match tolerance in pixels")
    sub.add_argument("--out", default=None, help="output directory or file")
    sub.add_argument("--config", default=None, help="key=value config file (flags override it)")


# ---------------------------------------------------------------------------
# Dataset directory helpers
# ---------------------------------------------------------------------------


def _read_manifest(data_dir: Path) -> list[Path]:
    manifest = data_dir / MANIFEST_NAME
    if not manifest.is_file():
        raise ValueError(f"missing manifest: {manifest}")
    entries = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    if not entries:
        raise ValueError(f"{manifest}: manifest is empty")
    return [data_dir / entry for entry in entries]


def _mask_path_for(frame_path: Path) -> Path:
    return frame_path.with_suffix(".mask")


def _load_video(data_dir: Path, first_mask: Path | None = None) -> tuple[VideoSequence, list[Path]]:
    frame_paths = _read_manifest(data_dir)
    frames = [load_feature_map(p) for p in frame_paths]
    mask_path = first_mask if first_mask is not None else _mask_path_for(frame_paths[0])
    if not mask_path.is_file():
        raise ValueError(f"missing first-frame mask: {mask_path}")
    mask = load_label_map(mask_path)
    video = VideoSequence(frames=tuple(frames), first_frame_mask=mask)
    return video, frame_paths


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = Path(cfg.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    video = synthesize_video(
        height=args.size[0],
        width=args.size[1],
        channels=args.channels,
        frames=args.frames,
        objects=args.objects,
        motion=_parse_motion(args.motion) if args.motion else None,
        seed=cfg.seed,
        noise=cfg.noise,
    )
    names = []
    for t, (frame, gt) in enumerate(zip(video.frames, video.ground_truth), start=1):
        stem = f"frame_{t:04d}"
        save_feature_map(frame, out_dir / f"{stem}.fmap")
        save_label_map(gt, out_dir / f"{stem}.mask")
        names.append(f"{stem}.fmap")
    (out_dir / MANIFEST_NAME).write_text("\n".join(names) + "\n")
    print(f"wrote {len(names)} frames (+masks) and {MANIFEST_NAME} to {out_dir}")
    return 0


def cmd_segment(args: argparse.Namespace, cfg: RunConfig) -> int:
    data_dir = Path(args.data)
    out_dir = Path(cfg.out) if cfg.out else data_dir / "pred"
    out_dir.mkdir(parents=True, exist_ok=True)
    first_mask = Path(args.first_mask) if args.first_mask else None
    video, frame_paths = _load_video(data_dir, first_mask)
    result = segment_video(video, cfg.match_config())
    for path, mask in zip(frame_paths, result.labels):
        save_label_map(mask, out_dir / _mask_path_for(path).name)
    t = result.timing
    print(
        f"segmented {len(frame_paths)} frames: sampling={t.sampling:.3f}s "
        f"affinity={t.affinity:.3f}s aggregation={t.aggregation:.3f}s total={t.total:.3f}s"
    )
    return 0


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    gt_dir = Path(args.gt)
    pred_dir = Path(args.pred)
    frame_paths = _read_manifest(gt_dir)
    gt_masks = []
    predictions = []
    for path in frame_paths:
        gt_path = _mask_path_for(path)
        if not gt_path.is_file():
            gt_masks.append(None)
            predictions.append(None)
            continue
        gt_masks.append(load_label_map(gt_path))
        pred_path = pred_dir / gt_path.name
        if not pred_path.is_file():
            raise ValueError(f"missing prediction for annotated frame: {pred_path}")
        predictions.append(load_label_map(pred_path))
    seen = args.seen
    if seen is not None and args.unseen is not None and seen & args.unseen:
        raise UsageError("--seen and --unseen overlap")
    if seen is None and args.unseen is not None:
        raise UsageError("--unseen requires --seen")
    report = evaluate(predictions, gt_masks, seen_ids=seen, tolerance=cfg.tolerance)
    print(report.to_table())
    if cfg.out:
        Path(cfg.out).write_text(report.to_csv())
        print(f"wrote {cfg.out}")
    return 0


def cmd_loss(args: argparse.Namespace, cfg: RunConfig) -> int:
    data_dir = Path(args.data)
    frame_paths = _read_manifest(data_dir)
    if len(frame_paths) < 2:
        raise ValueError("loss needs at least two frames (keyframes + query)")
    frames = [load_feature_map(p) for p in frame_paths]
    masks = []
    for p in frame_paths:
        mask_path = _mask_path_for(p)
        if not mask_path.is_file():
            raise ValueError(f"missing label file: {mask_path}")
        masks.append(load_label_map(mask_path))

    head = ProjectionHead.random(
        frames[0].channels, output_channels=args.proj_dim, seed=cfg.seed, normalize=True
    )

    def sets_for(index: int):
        fmap, mask = frames[index], masks[index]
        if (mask.height, mask.width) != (fmap.height, fmap.width):
            mask = downsample_labels(mask, fmap.height, fmap.width)
        return object_feature_sets(project(fmap, head), mask)

    query_index = len(frames) - 1
    key_indices = [
        t - 1 for t in range(1, len(frames)) if keyframe_schedule(t, cfg.r)
    ]
    anchor_sets = sets_for(query_index)
    keyframe_sets = merge_feature_sets([sets_for(i) for i in key_indices])
    batch = sample_anchor_set(anchor_sets, keyframe_sets, seed=cfg.seed, temperature=cfg.tau)
    value, grads = contrastive_loss(batch)

    counts = " ".join(f"{o}={c}" for o, c in sorted(batch.anchor_counts_per_object().items()))
    grad_max = float(np.linalg.norm(grads, axis=1).max()) if grads.size else 0.0
    print(f"L_c = {value:.6f}")
    print(f"anchors per object: {counts}")
    print(f"gradient max-norm = {grad_max:.6e}")
    if args.grad_check:
        err = gradient_check(batch, step=1e-4, max_coords=args.grad_check_coords, seed=cfg.seed)
        status = "PASS" if err < 1e-4 else "FAIL"
        print(f"grad check max relative error = {err:.3e} ({status})")
        if err >= 1e-4:
            return 1
    return 0


def cmd_bench(args: argparse.Namespace, cfg: RunConfig) -> int:
    backends = args.backends.split(",") if args.backends else None
    if backends:
        for be in backends:
            if be not in ("numpy", "numba"):
                raise UsageError(f"unknown backend {be!r}")
    if args.sweep == "r":
        h, w, d = args.sizes[0] if args.sizes else (32, 32, 8)
        rows = run_interval_bench(
            intervals=args.r_list,
            frames=args.frames,
            height=h,
            width=w,
            channels=d,
            window=cfg.k,
            mode=cfg.mode,
            seed=cfg.seed,
        )
        print(interval_rows_to_table(rows))
        out_path = Path(cfg.out or "bench.csv")
        out_path.write_text(interval_rows_to_csv(rows))
        print(f"wrote {out_path}")
        return 0
    report = run_sampling_bench(
        sizes=args.sizes,
        windows=args.k_list,
        repetitions=args.reps,
        backends=backends,
        seed=cfg.seed,
    )
    print(report.to_table())
    out_path = Path(cfg.out or "bench.csv")
    out_path.write_text(report.to_csv())
    print(f"wrote {out_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="localmatch",
        description="Local-matching engine for memory-based few-shot video object segmentation",
    )
    parser.add_argument(
        "--backend",
        choices=("numpy", "numba"),
        default=None,
        help="kernel backend for this invocation (default: LOCALMATCH_BACKEND or auto)",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic feature video + ground truth")
    p_synth.add_argument("--frames", type=_positive_int, required=True)
    p_synth.add_argument("--size", type=_parse_size, required=True, help="HxW, e.g. 64x64")
    p_synth.add_argument("--channels", type=_positive_int, required=True)
    p_synth.add_argument("--objects", type=_positive_int, required=True)
    p_synth.add_argument("--motion", default=None, help="per-frame step 'dy,dx' or 'dy,dx;dy,dx;...'")
    _add_shared_flags(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_seg = sub.add_parser("segment", help="propagate the first-frame mask through a video")
    p_seg.add_argument("--data", required=True, help="directory with manifest + FMAP/MASK files")
    p_seg.add_argument("--first-mask", default=None, help="override the first-frame mask path")
    _add_shared_flags(p_seg)
    p_seg.set_defaults(func=cmd_segment)

    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    p_eval.add_argument("--pred", required=True, help="directory with predicted MASK files")
    p_eval.add_argument("--gt", required=True, help="directory with manifest + ground-truth masks")
    p_eval.add_argument("--seen", type=_parse_id_set, default=None, help="comma-separated seen ids")
    p_eval.add_argument("--unseen", type=_parse_id_set, default=None, help="comma-separated unseen ids")
    _add_shared_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_loss = sub.add_parser("loss", help="contrastive loss over a feature+label directory")
    p_loss.add_argument("--data", required=True, help="directory with manifest + FMAP/MASK files")
    p_loss.add_argument("--proj-dim", dest="proj_dim", type=_positive_int, default=128)
    p_loss.add_argument("--grad-check", dest="grad_check", action="store_true")
    p_loss.add_argument(
        "--grad-check-coords",
        dest="grad_check_coords",
        type=_positive_int,
        default=500,
        help="max coordinates checked by finite differences",
    )
    _add_shared_flags(p_loss)
    p_loss.set_defaults(func=cmd_loss)

    p_bench = sub.add_parser("bench", help="sampling kernel and keyframe-interval benchmarks")
    p_bench.add_argument(
        "--sizes",
        type=lambda t: [_parse_geometry(p) for p in t.split(",")],
        default=[(64, 64, 64)],
        help="comma-separated HxWxD geometries",
    )
    p_bench.add_argument("--k-list", dest="k_list", type=_parse_int_list, default=[15])
    p_bench.add_argument("--reps", type=_positive_int, default=5)
    p_bench.add_argument("--backends", default=None, help="comma-separated: numpy,numba")
    p_bench.add_argument("--sweep", choices=("sampling", "r"), default="sampling")
    p_bench.add_argument("--r-list", dest="r_list", type=_parse_int_list, default=[1, 2, 3, 5, 6, 8, 10])
    p_bench.add_argument("--frames", type=_positive_int, default=31, help="video length for the r sweep")
    _add_shared_flags(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.backend:
            backend.use(args.backend)
        cfg = merge_run_config(args)
        for name, check in (("k", _odd_window), ("r", _positive_int), ("tau", _positive_float)):
            check(str(getattr(cfg, name)))
        start = time.perf_counter()
        status = args.func(args, cfg)
        if status == 0:
            print(f"done in {time.perf_counter() - start:.2f}s")
        return status
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except argparse.ArgumentTypeError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except BenchError as exc:
        print(f"bench aborted: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
