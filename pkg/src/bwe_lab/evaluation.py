"""Objective evaluation and timing of extension pipelines.

The scoring surface is deliberately narrow: a pipeline is anything that
maps a low-band AudioBuffer (plus the clip's reference pitch, which it
may ignore) to a full-band AudioBuffer. evaluate() renders manifest
entries, scores each output against the full-band original with the
log-spectral distance, and exports per-clip records; bench_inference()
times the same callable against the audio duration.
"""

from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioBuffer
from .bwe import FFT_SIZE, HOP
from .data import render_clip
from .dsp import lowpass, stft
from .errors import NumericError, UsageError

__all__ = [
    "BenchResult",
    "EvalSummary",
    "MetricRecord",
    "bench_inference",
    "evaluate",
    "lsd",
    "write_metrics_csv",
    "write_metrics_jsonl",
]

LOG_FLOOR = 1e-7

METRIC_FIELDS = ("clip_id", "model", "lsd", "runtime_ms", "realtime_pct")


def lsd(y: AudioBuffer, y_hat: AudioBuffer, literal: bool = False) -> float:
    """Log-spectral distance between two equal-length signals.

    Frame-averaged root mean square of the difference of log10 power
    spectra (1024/256 analysis, magnitudes floored at 1e-7). With
    literal=True the inner square is dropped, reproducing a formula
    sometimes printed without it; the root of the then possibly negative
    mean can be NaN, which is returned as is.
    """
    if len(y) != len(y_hat):
        raise UsageError(f"length mismatch: {len(y)} vs {len(y_hat)}")
    log_y = _log_power(y)
    log_h = _log_power(y_hat)
    diff = log_y - log_h
    if not literal:
        diff = diff**2
    with np.errstate(invalid="ignore"):
        per_frame = np.sqrt(diff.mean(axis=1))
    return float(per_frame.mean())


def _log_power(x: AudioBuffer) -> np.ndarray:
    mag = stft(x, FFT_SIZE, HOP).magnitude()
    return 2.0 * np.log10(np.maximum(mag, LOG_FLOOR))


@dataclass(frozen=True)
class MetricRecord:
    """One clip scored by one model."""

    clip_id: str
    model: str
    lsd: float
    runtime_ms: float
    realtime_pct: float

    def __post_init__(self) -> None:
        if not self.lsd >= 0.0:
            raise UsageError(f"lsd must be >= 0, got {self.lsd}")
        if not self.runtime_ms > 0.0:
            raise UsageError(f"runtime_ms must be > 0, got {self.runtime_ms}")

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_FIELDS}


@dataclass(frozen=True)
class EvalSummary:
    model: str
    records: tuple
    mean_lsd: float
    std_lsd: float

    def __len__(self) -> int:
        return len(self.records)


def evaluate(fn, clips, *, model_id: str, cutoff_hz: float = 2000.0,
             out_dir=None) -> EvalSummary:
    """Score a pipeline on manifest entries against their full-band audio.

    fn is called as fn(x_lb, pitch) where x_lb is the low-passed clip and
    pitch is the rendered reference pitch (PitchTrack, MultiPitchTrack, or
    None for ingested audio); pipelines that estimate their own pitch
    simply ignore the second argument. Only the fn call is timed. With
    out_dir set, metrics.csv and metrics.jsonl are written there.
    """
    clips = tuple(clips)
    if not clips:
        raise UsageError("evaluation split is empty")
    records = []
    for entry in clips:
        audio, pitch = render_clip(entry)
        x_lb = lowpass(audio, cutoff_hz)
        t0 = time.perf_counter()
        y_hat = fn(x_lb, pitch)
        wall = time.perf_counter() - t0
        records.append(MetricRecord(
            clip_id=entry.clip_id,
            model=model_id,
            lsd=lsd(audio, y_hat),
            runtime_ms=1e3 * wall,
            realtime_pct=100.0 * wall / audio.duration_s,
        ))
    values = np.array([r.lsd for r in records])
    summary = EvalSummary(model=model_id, records=tuple(records),
                          mean_lsd=float(values.mean()),
                          std_lsd=float(values.std()))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(records, out / "metrics.csv")
        write_metrics_jsonl(records, out / "metrics.jsonl")
    return summary


def write_metrics_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for r in records:
            writer.writerow([r.clip_id, r.model, repr(r.lsd),
                             repr(r.runtime_ms), repr(r.realtime_pct)])


def write_metrics_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.as_dict()) + "\n")


@dataclass(frozen=True)
class BenchResult:
    model: str
    repetitions: int
    realtime_pcts: tuple
    median_realtime_pct: float
    iqr_realtime_pct: float
    environment: dict = field(compare=False)


def environment_fingerprint() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
    }


def bench_inference(fn, clips, *, model_id: str, repetitions: int = 5,
                    warmup: int = 1, cutoff_hz: float = 2000.0) -> BenchResult:
    """Wall-time the pipeline relative to audio duration.

    Each repetition runs every clip once; its figure is 100 * total wall
    time / total audio duration. Warmup repetitions run first and are
    discarded (imports, allocator, cache effects). Reported: median and
    interquartile range over the measured repetitions.
    """
    if repetitions < 1:
        raise UsageError("repetitions must be >= 1")
    if warmup < 0:
        raise UsageError("warmup must be >= 0")
    clips = tuple(clips)
    if not clips:
        raise UsageError("no clips to benchmark")
    rendered = []
    total_s = 0.0
    for entry in clips:
        audio, pitch = render_clip(entry)
        rendered.append((lowpass(audio, cutoff_hz), pitch))
        total_s += audio.duration_s

    def one_pass() -> float:
        t0 = time.perf_counter()
        for x_lb, pitch in rendered:
            fn(x_lb, pitch)
        return time.perf_counter() - t0

    for _ in range(warmup):
        one_pass()
    pcts = tuple(100.0 * one_pass() / total_s for _ in range(repetitions))
    q25, q50, q75 = np.percentile(pcts, [25.0, 50.0, 75.0])
    return BenchResult(model=model_id, repetitions=repetitions,
                       realtime_pcts=pcts, median_realtime_pct=float(q50),
                       iqr_realtime_pct=float(q75 - q25),
                       environment=environment_fingerprint())
