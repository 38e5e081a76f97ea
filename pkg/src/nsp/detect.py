"""Absolute-threshold spike detection and two-sample feature extraction.

Everything downstream of threshold estimation is integer arithmetic on int8
samples: the detector compares |v| against the threshold, cuts a fixed
32-sample window around the crossing, and reduces it to two int8 features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._util import atomic_write_text
from .synthdata import WINDOW_LEN, PayloadError

MAD_SCALE = 1.4826  # MAD -> sigma for Gaussian noise
DEFAULT_K = 4.0
DEFAULT_PRE = 4
MIN_SEGMENT = 1000


class SegmentTooShort(ValueError):
    """Threshold estimation needs at least MIN_SEGMENT samples."""


@dataclass(frozen=True)
class FeatureSpec:
    """How a 32-sample window is reduced to two int8 features.

    mode "peak-trough" takes (max, min) of the window; mode "indexed" takes
    the samples at two fixed offsets.
    """

    mode: str = "peak-trough"
    idx_a: int = 0
    idx_b: int = 0

    def __post_init__(self):
        if self.mode not in ("peak-trough", "indexed"):
            raise ValueError(f"unknown feature mode {self.mode!r}")
        if self.mode == "indexed":
            for idx in (self.idx_a, self.idx_b):
                if not (0 <= idx < WINDOW_LEN):
                    raise ValueError(f"feature index {idx} outside 0..{WINDOW_LEN - 1}")

    def to_json(self) -> dict:
        return {"mode": self.mode, "idx_a": self.idx_a, "idx_b": self.idx_b}

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureSpec":
        return cls(mode=obj["mode"], idx_a=int(obj.get("idx_a", 0)),
                   idx_b=int(obj.get("idx_b", 0)))


@dataclass
class SpikeWindow:
    """One detected spike: window start sample, channel, 32 int8 samples."""

    t0: int
    channel: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.int8)
        if self.samples.shape != (WINDOW_LEN,):
            raise ValueError(f"window must hold exactly {WINDOW_LEN} samples")


@dataclass(frozen=True)
class SpikeToken:
    """Detected spike reduced to the pair of features that travel downstream."""

    t: int
    channel: int
    f1: int
    f2: int


def estimate_threshold(segment: np.ndarray, k: float = DEFAULT_K) -> float:
    """Noise-robust threshold: k * 1.4826 * median(|v - median(v)|), floored at 1 LSB.

    The median absolute deviation ignores the sparse spike samples that would
    inflate a plain standard deviation estimate.
    """
    segment = np.asarray(segment)
    if segment.size < MIN_SEGMENT:
        raise SegmentTooShort(
            f"need >= {MIN_SEGMENT} samples to estimate noise, got {segment.size}")
    v = segment.astype(np.float64)
    mad = np.median(np.abs(v - np.median(v)))
    return max(1.0, k * MAD_SCALE * mad)


def detect_spikes(channel_trace: np.ndarray, threshold: float,
                  pre_samples: int = DEFAULT_PRE, channel: int = 0) -> list:
    """Scan one channel and return the list of SpikeWindow detections.

    A window opens at the first sample with |v| >= threshold while the
    detector is idle and spans [t - pre_samples, t - pre_samples + 31]; the
    detector then stays busy for 32 samples, so window starts are always at
    least 32 samples apart. A crossing earlier than pre_samples clamps the
    window start to sample 0; a window that cannot complete before the end of
    the trace is dropped.
    """
    if not (0 <= pre_samples <= 8):
        raise ValueError("pre_samples must be in 0..8")
    trace = np.asarray(channel_trace, dtype=np.int8)
    n = trace.size
    out = []
    hot = np.flatnonzero(np.abs(trace.astype(np.int16)) >= threshold)
    rearm = 0  # first sample index at which the detector is idle again
    for t in hot:
        if t < rearm:
            continue
        t0 = max(0, int(t) - pre_samples)
        if t0 + WINDOW_LEN > n:
            break  # window cannot complete; drop and stop (detector stays busy past EOT)
        out.append(SpikeWindow(t0=t0, channel=channel,
                               samples=trace[t0:t0 + WINDOW_LEN].copy()))
        # busy until a new crossing could not produce an overlapping window;
        # equals t + 32 except when the window start was clamped to 0
        rearm = t0 + WINDOW_LEN + pre_samples
    return out


def extract_features(window: SpikeWindow, spec: FeatureSpec = FeatureSpec()) -> SpikeToken:
    """Reduce a window to a SpikeToken carrying two int8 features."""
    s = window.samples
    if spec.mode == "peak-trough":
        f1, f2 = int(s.max()), int(s.min())
    else:
        f1, f2 = int(s[spec.idx_a]), int(s[spec.idx_b])
    return SpikeToken(t=window.t0, channel=window.channel, f1=f1, f2=f2)


def detect_trace(trace, thresholds, pre_samples: int = DEFAULT_PRE,
                 spec: FeatureSpec = FeatureSpec()):
    """Run detection + feature extraction over all channels of a RawTrace.

    *thresholds* is a scalar or a per-channel sequence. Returns (windows,
    tokens) with both lists ordered by (channel, time).
    """
    thr = np.broadcast_to(np.asarray(thresholds, dtype=np.float64),
                          (trace.n_channels,))
    windows, tokens = [], []
    for ch in range(trace.n_channels):
        ws = detect_spikes(trace.data[ch], float(thr[ch]), pre_samples, channel=ch)
        windows.extend(ws)
        tokens.extend(extract_features(w, spec) for w in ws)
    return windows, tokens


# --- token / window stream files (JSONL) -----------------------------------


def store_tokens(tokens, path: str) -> None:
    lines = [json.dumps({"t": tok.t, "ch": tok.channel, "f1": tok.f1, "f2": tok.f2},
                        separators=(",", ":")) for tok in tokens]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_tokens(path: str) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(SpikeToken(t=int(obj["t"]), channel=int(obj["ch"]),
                                      f1=int(obj["f1"]), f2=int(obj["f2"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise PayloadError(f"{path}:{lineno}: bad token record: {exc}") from exc
    return out


def store_windows(windows, path: str) -> None:
    lines = [json.dumps({"t": w.t0, "ch": w.channel,
                         "s": [int(x) for x in w.samples]}, separators=(",", ":"))
             for w in windows]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_windows(path: str) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(SpikeWindow(t0=int(obj["t"]), channel=int(obj["ch"]),
                                       samples=np.array(obj["s"], dtype=np.int8)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise PayloadError(f"{path}:{lineno}: bad window record: {exc}") from exc
    return out
