"""Benchmark harness for the sampling kernels and the keyframe-interval sweep.

Every timed run is gated on bit-equality against the gather oracle first; a
mismatching implementation aborts the whole bench with the first differing
index.  Timing wraps the sampling call only, after one discarded warm-up run
(which doubles as the equality check), so JIT compilation never pollutes the
numbers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import backend
from .matching import MatchConfig
from .pipeline import segment_video
from .sampling import aligned_references, make_direction_set, sample_gather, sample_shift
from .tensor_io import FeatureMap, synthesize_video

IMPLEMENTATIONS = {
    "gather-oracle": sample_gather,
    "direction-shift": sample_shift,
}


class BenchError(RuntimeError):
    """An implementation's output diverged from the oracle."""


@dataclass(frozen=True)
class BenchRow:
    implementation: str
    height: int
    width: int
    channels: int
    window: int
    repetitions: int
    mean_seconds: float
    std_seconds: float
    throughput: float
    matches_oracle: bool


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[BenchRow, ...]

    CSV_HEADER = (
        "implementation,height,width,channels,window,repetitions,"
        "mean_seconds,std_seconds,throughput,matches_oracle"
    )

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.implementation},{r.height},{r.width},{r.channels},{r.window},"
                f"{r.repetitions},{r.mean_seconds:.6e},{r.std_seconds:.6e},"
                f"{r.throughput:.6e},{str(r.matches_oracle).lower()}"
            )
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        header = (
            f"{'implementation':>28} {'geometry':>12} {'k':>3} {'reps':>4} "
            f"{'mean s':>10} {'std s':>10} {'elem/s':>12} {'ok':>3}"
        )
        lines = [header]
        for r in self.rows:
            geom = f"{r.height}x{r.width}x{r.channels}"
            lines.append(
                f"{r.implementation:>28} {geom:>12} {r.window:>3d} {r.repetitions:>4d} "
                f"{r.mean_seconds:>10.4e} {r.std_seconds:>10.4e} {r.throughput:>12.4e} "
                f"{'yes' if r.matches_oracle else 'NO':>3}"
            )
        return "\n".join(lines)


def _verify_against(reference, candidate, label: str) -> None:
    if not np.array_equal(reference.data, candidate.data):
        diff = np.argwhere(reference.data != candidate.data)[0]
        raise BenchError(
            f"{label} diverges from the gather oracle at (query={diff[0]}, "
            f"direction={diff[1]}, channel={diff[2]})"
        )
    if not np.array_equal(reference.valid, candidate.valid):
        diff = np.argwhere(reference.valid != candidate.valid)[0]
        raise BenchError(
            f"{label} validity mask diverges at (query={diff[0]}, direction={diff[1]})"
        )


def run_sampling_bench(
    sizes: list[tuple[int, int, int]],
    windows: list[int],
    repetitions: int = 5,
    backends: list[str] | None = None,
    seed: int = 0,
) -> BenchReport:
    """Time gather-oracle vs direction-shift over sizes x windows x backends.

    Throughput is query elements per second.  Rows are only emitted after the
    implementation's output matched the oracle bit for bit.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    if not sizes or not windows:
        raise ValueError("need at least one geometry and one window size")
    backends = backends or [backend.active()]
    rng = np.random.default_rng(seed)

    rows: list[BenchRow] = []
    for h, w, d in sizes:
        fmap = FeatureMap(rng.standard_normal((h, w, d)).astype(np.float32))
        refs = aligned_references(h, w)
        for k in windows:
            dirs = make_direction_set(k)
            with backend.override("numpy"):
                reference = sample_gather(fmap, refs, dirs)
            for be in backends:
                for name, fn in IMPLEMENTATIONS.items():
                    label = f"{name}[{be}]"
                    with backend.override(be):
                        # Warm-up run, discarded; doubles as the equality gate.
                        candidate = fn(fmap, refs, dirs)
                        _verify_against(reference, candidate, label)
                        samples = []
                        for _ in range(repetitions):
                            t0 = time.perf_counter()
                            fn(fmap, refs, dirs)
                            samples.append(time.perf_counter() - t0)
                    mean = float(np.mean(samples))
                    rows.append(
                        BenchRow(
                            implementation=label,
                            height=h,
                            width=w,
                            channels=d,
                            window=k,
                            repetitions=repetitions,
                            mean_seconds=mean,
                            std_seconds=float(np.std(samples)),
                            throughput=(h * w) / mean if mean > 0 else float("inf"),
                            matches_oracle=True,
                        )
                    )
    return BenchReport(rows=tuple(rows))


@dataclass(frozen=True)
class IntervalRow:
    interval: int
    frames: int
    final_memory_entries: int
    mean_candidates_per_query: float
    matching_seconds: float
    total_seconds: float


def interval_rows_to_csv(rows: list[IntervalRow]) -> str:
    lines = ["interval,frames,final_memory_entries,mean_candidates_per_query,matching_seconds,total_seconds"]
    for r in rows:
        lines.append(
            f"{r.interval},{r.frames},{r.final_memory_entries},"
            f"{r.mean_candidates_per_query:.3f},{r.matching_seconds:.6e},{r.total_seconds:.6e}"
        )
    return "\n".join(lines) + "\n"


def interval_rows_to_table(rows: list[IntervalRow]) -> str:
    lines = [
        f"{'r':>4} {'frames':>6} {'entries':>7} {'cand/query':>11} {'match s':>10} {'total s':>10}"
    ]
    for r in rows:
        lines.append(
            f"{r.interval:>4d} {r.frames:>6d} {r.final_memory_entries:>7d} "
            f"{r.mean_candidates_per_query:>11.1f} {r.matching_seconds:>10.4e} {r.total_seconds:>10.4e}"
        )
    return "\n".join(lines)


def run_interval_bench(
    intervals: list[int],
    frames: int = 31,
    height: int = 32,
    width: int = 32,
    channels: int = 8,
    window: int = 9,
    mode: str = "aligned",
    seed: int = 0,
) -> list[IntervalRow]:
    """Segment one synthetic video per keyframe interval and report the
    per-query candidate load plus matching (sampling + affinity) time."""
    video = synthesize_video(
        height=height, width=width, channels=channels, frames=frames, objects=2,
        motion=None, seed=seed,
    )
    rows: list[IntervalRow] = []
    for r in intervals:
        config = MatchConfig(window=window, reference_mode=mode, keyframe_interval=r)
        t0 = time.perf_counter()
        result = segment_video(video, config)
        total = time.perf_counter() - t0
        later = result.candidate_slots[1:]
        entries_final = later[-1] // (window * window * config.top_t) if later else 0
        rows.append(
            IntervalRow(
                interval=r,
                frames=frames,
                final_memory_entries=entries_final,
                mean_candidates_per_query=float(np.mean(later)) if later else 0.0,
                matching_seconds=result.timing.sampling + result.timing.affinity,
                total_seconds=total,
            )
        )
    return rows
