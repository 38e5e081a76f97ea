"""Synthetic benchmark data for the spike-processing pipeline.

Two generator families:

* extracellular-style raw traces: int8 multi-channel recordings built from
  per-neuron spike templates, Poisson event times and additive white noise,
  together with ground-truth spike labels;
* center-out reach sessions: binned 2-D hand velocities with cosine-tuned
  Poisson unit counts, used to train and evaluate intention decoders.

The module also owns the on-disk dataset formats (binary trace, JSONL labels,
CSV session + JSON sidecar) and their loaders.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from ._util import atomic_write_bytes, atomic_write_text, canonical_json

WINDOW_LEN = 32  # samples per spike waveform everywhere in the pipeline

TRACE_MAGIC = b"NSPT"
TRACE_VERSION = 1
_HEADER = struct.Struct("<4sHHIQ")  # magic, version, n_channels, sample_rate, n_samples


class DatasetFormatError(Exception):
    """Base class for malformed dataset files."""


class HeaderError(DatasetFormatError):
    """Magic bytes or header fields are not recognizable."""


class VersionError(DatasetFormatError):
    """File declares a format version this code does not speak."""


class PayloadError(DatasetFormatError):
    """Header parsed fine but the payload is truncated or inconsistent."""


class ClippingError(ValueError):
    """Requested SNR cannot be realized inside the 8-bit sample range."""


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------


@dataclass
class RawTrace:
    """Multi-channel int8 recording, shape (n_channels, n_samples)."""

    data: np.ndarray
    sample_rate: int = 30000
    clipped_samples: int = 0  # samples that hit the int8 rails during synthesis

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int8)
        if self.data.ndim != 2:
            raise ValueError("trace data must be 2-D (channels x samples)")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass
class GroundTruthLabels:
    """Spike events as an (n, 3) int64 array of (sample index, channel, unit id).

    Events are sorted by time; events on one channel are at least WINDOW_LEN
    samples apart and use at most 4 distinct unit ids.
    """

    events: np.ndarray

    def __post_init__(self):
        ev = np.asarray(self.events, dtype=np.int64)
        if ev.size == 0:
            ev = ev.reshape(0, 3)
        if ev.ndim != 2 or ev.shape[1] != 3:
            raise ValueError("labels must be an (n, 3) array of (t, ch, nid)")
        self.events = ev[np.argsort(ev[:, 0], kind="stable")]

    @property
    def t(self) -> np.ndarray:
        return self.events[:, 0]

    @property
    def ch(self) -> np.ndarray:
        return self.events[:, 1]

    @property
    def nid(self) -> np.ndarray:
        return self.events[:, 2]

    def __len__(self) -> int:
        return self.events.shape[0]

    def for_channel(self, channel: int) -> np.ndarray:
        return self.events[self.events[:, 1] == channel]

    def validate(self) -> None:
        for channel in np.unique(self.ch):
            sub = self.for_channel(int(channel))
            if len(sub) > 1 and np.diff(sub[:, 0]).min() < WINDOW_LEN:
                raise ValueError(f"channel {channel}: events closer than {WINDOW_LEN} samples")
            if len(np.unique(sub[:, 2])) > 4:
                raise ValueError(f"channel {channel}: more than 4 unit ids")


@dataclass
class TuningCurve:
    """Cosine tuning: rate = baseline + gain * speed * cos(theta - preferred)."""

    baseline_hz: float
    gain_hz_per_mm_s: float
    preferred_rad: float


@dataclass
class TrialInfo:
    target_rad: float
    start_bin: int
    end_bin: int  # exclusive


@dataclass
class ReachSession:
    """Binned center-out session: per-bin velocity plus per-unit spike counts."""

    velocity: np.ndarray           # (n_bins, 2) float64, mm/s
    counts: np.ndarray             # (n_bins, n_units) int64
    bin_ms: int
    trials: list                   # list[TrialInfo]
    tuning: list                   # list[TuningCurve]
    unit_channels: list            # channel index per unit column
    meta: dict = field(default_factory=dict)

    @property
    def n_bins(self) -> int:
        return self.velocity.shape[0]

    @property
    def n_units(self) -> int:
        return self.counts.shape[1]

    def trial_bins(self, trial_index: int) -> np.ndarray:
        tr = self.trials[trial_index]
        return np.arange(tr.start_bin, tr.end_bin)


# ---------------------------------------------------------------------------
# spike templates and raw traces
# ---------------------------------------------------------------------------


@dataclass
class TraceConfig:
    n_channels: int = 96
    duration_s: float = 1.0
    sample_rate: int = 30000
    neurons_per_channel: int = 3       # 2..4
    firing_rate_hz: float = 30.0       # total event rate per channel
    snr_db: float = 15.0               # template extremum over noise sigma, in dB
    amp_spread: tuple = (0.55, 1.0)    # per-unit amplitude fractions of the budget
    shape_similarity: float = 0.0      # 0 = independent waveforms, 1 = amplitude-only

    def validate(self) -> None:
        if not (2 <= self.neurons_per_channel <= 4):
            raise ValueError("neurons_per_channel must be in 2..4")
        if self.n_channels < 1 or self.duration_s <= 0:
            raise ValueError("need at least one channel and positive duration")
        if self.firing_rate_hz < 0:
            raise ValueError("firing_rate_hz must be >= 0")
        if not (0.0 <= self.shape_similarity <= 1.0):
            raise ValueError("shape_similarity must be in [0, 1]")


def snr_amplitude_budget(snr_db: float) -> float:
    """Largest template extremum (LSB) such that signal + 4 sigma of noise fits int8.

    Noise sigma is derived from the extremum: sigma = amp / 10**(snr_db / 20).
    """
    if math.isinf(snr_db) and snr_db > 0:
        return 110.0
    atten = 10.0 ** (-snr_db / 20.0)
    return min(110.0, 127.0 / (1.0 + 4.0 * atten))


def _draw_shape_params(rng: np.random.Generator) -> np.ndarray:
    """Five waveform parameters: trough center/width, peak delay/width, peak ratio."""
    return np.array([
        rng.uniform(5.0, 8.0),      # trough center
        rng.uniform(1.2, 2.2),      # trough width
        rng.uniform(6.0, 11.0),     # trough-to-peak delay
        rng.uniform(2.5, 5.0),      # peak width
        rng.uniform(0.25, 0.6),     # peak/trough amplitude ratio
    ])


def make_template(rng: np.random.Generator, amplitude: float,
                  params: np.ndarray | None = None) -> np.ndarray:
    """One biphasic 32-sample waveform: depolarization trough, repolarization
    peak, slow relaxation tail. Returned as float64; rounding happens at render
    time so noise and signal are quantized together."""
    i = np.arange(WINDOW_LEN, dtype=np.float64)
    if params is None:
        params = _draw_shape_params(rng)
    c_t, w_t, gap, w_p, ratio = params
    trough = -np.exp(-0.5 * ((i - c_t) / w_t) ** 2)
    peak = ratio * np.exp(-0.5 * ((i - c_t - gap) / w_p) ** 2)
    tail = -0.06 * ratio * np.exp(-0.5 * ((i - c_t - 2.2 * gap) / (1.8 * w_p)) ** 2)
    shape = trough + peak + tail
    return amplitude * shape / np.max(np.abs(shape))


def make_channel_templates(rng: np.random.Generator, n_units: int, snr_db: float,
                           amp_spread: tuple = (0.55, 1.0),
                           shape_similarity: float = 0.0) -> np.ndarray:
    """Distinct per-unit templates for one channel, (n_units, 32) float64.

    *shape_similarity* pulls every unit's waveform parameters toward a shared
    per-channel anchor: 0 leaves the draws independent, 1 makes the units
    amplitude-scaled copies of one waveform. Raises ClippingError when the SNR
    leaves no usable amplitude headroom.
    """
    budget = snr_amplitude_budget(snr_db)
    if budget < 16.0:
        raise ClippingError(
            f"snr_db={snr_db:g} leaves an amplitude budget of {budget:.1f} LSB; "
            "templates would clip or vanish inside the 8-bit range"
        )
    lo, hi = amp_spread
    fractions = np.linspace(lo, hi, n_units) if n_units > 1 else np.array([hi])
    fractions = fractions * rng.uniform(0.97, 1.03, size=n_units)
    anchor = _draw_shape_params(rng)
    out = []
    for f in fractions:
        params = anchor + (1.0 - shape_similarity) * (_draw_shape_params(rng) - anchor)
        out.append(make_template(rng, budget * f, params))
    return np.stack(out)


def poisson_event_times(rng: np.random.Generator, rate_hz: float, n_samples: int,
                        sample_rate: int, refractory: int = WINDOW_LEN) -> np.ndarray:
    """Poisson arrival samples on [0, n_samples - WINDOW_LEN], thinned so that
    consecutive events are at least *refractory* samples apart."""
    if rate_hz <= 0:
        return np.zeros(0, dtype=np.int64)
    mean_gap = sample_rate / rate_hz
    # draw enough exponential gaps to cover the trace with margin
    n_draw = max(16, int(1.5 * n_samples / mean_gap) + 16)
    times = []
    t = 0.0
    last = -refractory
    while True:
        gaps = rng.exponential(mean_gap, size=n_draw)
        for g in gaps:
            t += g
            if t >= n_samples - WINDOW_LEN:
                return np.array(times, dtype=np.int64)
            ti = int(t)
            if ti - last >= refractory:
                times.append(ti)
                last = ti


def render_trace(events: np.ndarray, templates_by_channel: dict, n_channels: int,
                 n_samples: int, noise_sigma: float, rng: np.random.Generator,
                 sample_rate: int = 30000) -> RawTrace:
    """Deposit templates at labeled event times, add white noise, quantize to int8.

    *events* is an (n, 3) array of (t, ch, nid); *templates_by_channel* maps a
    channel index to its (n_units, 32) template stack.
    """
    signal = np.zeros((n_channels, n_samples), dtype=np.float64)
    for t, ch, nid in np.asarray(events, dtype=np.int64).reshape(-1, 3):
        signal[ch, t:t + WINDOW_LEN] += templates_by_channel[int(ch)][int(nid)]
    if noise_sigma > 0:
        signal += rng.normal(0.0, noise_sigma, size=signal.shape)
    rounded = np.round(signal)
    clipped = int(np.count_nonzero((rounded > 127) | (rounded < -128)))
    data = np.clip(rounded, -128, 127).astype(np.int8)
    return RawTrace(data=data, sample_rate=sample_rate, clipped_samples=clipped)


def gen_spike_trace(config: TraceConfig, seed: int):
    """Generate (RawTrace, GroundTruthLabels) for the given configuration.

    Event times per channel follow a Poisson process at the channel's total
    rate with a WINDOW_LEN-sample refractory gap; each event is assigned one
    of the channel's units uniformly at random.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n_samples = int(round(config.duration_s * config.sample_rate))

    templates = {
        ch: make_channel_templates(rng, config.neurons_per_channel, config.snr_db,
                                   config.amp_spread, config.shape_similarity)
        for ch in range(config.n_channels)
    }
    rows = []
    for ch in range(config.n_channels):
        times = poisson_event_times(rng, config.firing_rate_hz, n_samples,
                                    config.sample_rate)
        units = rng.integers(0, config.neurons_per_channel, size=len(times))
        for t, u in zip(times, units):
            rows.append((t, ch, u))
    events = np.array(rows, dtype=np.int64).reshape(-1, 3)

    if math.isinf(config.snr_db) and config.snr_db > 0:
        sigma = 0.0
    else:
        mean_extremum = float(np.mean([np.max(np.abs(tpl)) for tpl in templates.values()]))
        sigma = mean_extremum * 10.0 ** (-config.snr_db / 20.0)

    trace = render_trace(events, templates, config.n_channels, n_samples, sigma, rng,
                         config.sample_rate)
    labels = GroundTruthLabels(events)
    labels.validate()
    return trace, labels


def tier_config(tier: str, n_channels: int = 1, duration_s: float = 10.0,
                firing_rate_hz: float = 30.0) -> TraceConfig:
    """Difficulty presets: unit count, SNR and template spacing per tier."""
    presets = {
        "easy": dict(neurons_per_channel=2, snr_db=25.0, amp_spread=(0.5, 1.0),
                     shape_similarity=0.0),
        "medium": dict(neurons_per_channel=3, snr_db=24.0, amp_spread=(0.5, 1.0),
                       shape_similarity=0.0),
        # hard for sorting, not for detection: four templates on a compressed
        # amplitude ladder with partially shared waveform shape. Amplitudes stay
        # far above the 4-sigma detection threshold so difficulty comes from
        # cluster proximity rather than missed events.
        "hard": dict(neurons_per_channel=4, snr_db=28.0, amp_spread=(0.35, 1.0),
                     shape_similarity=0.2),
    }
    if tier not in presets:
        raise ValueError(f"unknown tier {tier!r}; expected one of {sorted(presets)}")
    return TraceConfig(n_channels=n_channels, duration_s=duration_s,
                       firing_rate_hz=firing_rate_hz, **presets[tier])


# ---------------------------------------------------------------------------
# reach sessions
# ---------------------------------------------------------------------------

N_TARGETS = 8


@dataclass
class SessionConfig:
    n_units: int = 30
    trials_per_target: int = 5
    bin_ms: int = 100
    bins_per_phase: int = 10           # out and back, each
    reach_distance_mm: float = 100.0
    units_per_channel: int = 3
    baseline_range: tuple = (5.0, 15.0)
    gain_range: tuple = (0.04, 0.12)
    untuned_fraction: float = 0.0      # fraction of units firing at baseline only
    tuning: list | None = None         # explicit list[TuningCurve] overrides the draw

    def validate(self) -> None:
        if self.n_units < 1 or self.trials_per_target < 1:
            raise ValueError("need at least one unit and one trial per target")
        if self.bins_per_phase < 2:
            raise ValueError("bins_per_phase must be >= 2")
        if not (0.0 <= self.untuned_fraction <= 1.0):
            raise ValueError("untuned_fraction must be in [0, 1]")


def min_jerk_speed(tau: np.ndarray, distance: float, duration_s: float) -> np.ndarray:
    """Bell-shaped speed of a minimum-jerk point-to-point movement, mm/s."""
    tau = np.clip(tau, 0.0, 1.0)
    return distance * (30 * tau**2 - 60 * tau**3 + 30 * tau**4) / duration_s


def draw_tuning(rng: np.random.Generator, n_units: int, baseline_range: tuple,
                gain_range: tuple, untuned_fraction: float = 0.0) -> list:
    """Random cosine tuning; an *untuned_fraction* of units gets gain 0.

    Sorted populations always contain units that fire but carry no kinematic
    information; they still load the full-population observation model.
    """
    prefs = rng.uniform(0.0, 2.0 * math.pi, size=n_units)
    baselines = rng.uniform(*baseline_range, size=n_units)
    gains = rng.uniform(*gain_range, size=n_units)
    gains[rng.random(n_units) < untuned_fraction] = 0.0
    return [TuningCurve(float(b), float(g), float(p))
            for b, g, p in zip(baselines, gains, prefs)]


def gen_reach_session(config: SessionConfig, seed: int) -> ReachSession:
    """Simulate an 8-target center-out-reach-and-return session.

    Every trial is one outward reach followed by the return movement, each
    spanning ``bins_per_phase`` bins with a minimum-jerk speed profile. Unit
    counts are Poisson draws from cosine-tuned rates, clamped at zero before
    the draw.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    tuning = config.tuning if config.tuning is not None else draw_tuning(
        rng, config.n_units, config.baseline_range, config.gain_range,
        config.untuned_fraction)
    if len(tuning) != config.n_units:
        raise ValueError("tuning list length must match n_units")

    bin_s = config.bin_ms / 1000.0
    phase_s = config.bins_per_phase * bin_s
    # speed evaluated at bin centers of one movement phase
    centers = (np.arange(config.bins_per_phase) + 0.5) / config.bins_per_phase
    speed = min_jerk_speed(centers, config.reach_distance_mm, phase_s)

    baselines = np.array([tc.baseline_hz for tc in tuning])
    gains = np.array([tc.gain_hz_per_mm_s for tc in tuning])
    prefs = np.array([tc.preferred_rad for tc in tuning])

    vel_rows, count_rows, trials = [], [], []
    bin_cursor = 0
    for _ in range(config.trials_per_target):
        for k in range(N_TARGETS):
            theta = 2.0 * math.pi * k / N_TARGETS
            start = bin_cursor
            for direction in (theta, theta + math.pi):
                vx = speed * math.cos(direction)
                vy = speed * math.sin(direction)
                rates = baselines[None, :] + gains[None, :] * speed[:, None] \
                    * np.cos(direction - prefs)[None, :]
                rates = np.clip(rates, 0.0, None)
                counts = rng.poisson(rates * bin_s)
                vel_rows.append(np.column_stack([vx, vy]))
                count_rows.append(counts)
            bin_cursor += 2 * config.bins_per_phase
            trials.append(TrialInfo(target_rad=theta, start_bin=start, end_bin=bin_cursor))

    velocity = np.concatenate(vel_rows, axis=0)
    counts = np.concatenate(count_rows, axis=0).astype(np.int64)
    unit_channels = [j // config.units_per_channel for j in range(config.n_units)]
    meta = {"seed": seed, "n_targets": N_TARGETS,
            "trials_per_target": config.trials_per_target,
            "bins_per_phase": config.bins_per_phase}
    return ReachSession(velocity=velocity, counts=counts, bin_ms=config.bin_ms,
                        trials=trials, tuning=list(tuning),
                        unit_channels=unit_channels, meta=meta)


def split_trials(session: ReachSession, fraction: float, seed: int) -> tuple:
    """Random trial-level split; no bin is shared across the two sides.

    Returns (train_trial_ids, test_trial_ids), each sorted, together covering
    every trial exactly once. Both sides are non-empty.
    """
    n = len(session.trials)
    if n < 2:
        raise ValueError("need at least 2 trials to split")
    if not (0.0 < fraction < 1.0):
        raise ValueError("train fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(n * fraction)), 1), n - 1)
    train = sorted(int(i) for i in order[:n_train])
    test = sorted(int(i) for i in order[n_train:])
    return train, test


def trials_to_bins(session: ReachSession, trial_ids) -> np.ndarray:
    """Sorted bin indices covered by the given trials."""
    if not len(trial_ids):
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate([session.trial_bins(i) for i in trial_ids]))


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def store_trace(trace: RawTrace, path: str) -> None:
    header = _HEADER.pack(TRACE_MAGIC, TRACE_VERSION, trace.n_channels,
                          trace.sample_rate, trace.n_samples)
    # sample-major interleave: frame of all channels per sample tick
    payload = np.ascontiguousarray(trace.data.T).tobytes()
    atomic_write_bytes(path, header + payload)


def load_trace(path: str) -> RawTrace:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise HeaderError(f"{path}: file shorter than the trace header")
    magic, version, n_channels, sample_rate, n_samples = _HEADER.unpack_from(blob)
    if magic != TRACE_MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r}")
    if version != TRACE_VERSION:
        raise VersionError(f"{path}: version {version}, expected {TRACE_VERSION}")
    expected = n_channels * n_samples
    payload = blob[_HEADER.size:]
    if len(payload) != expected:
        raise PayloadError(f"{path}: payload has {len(payload)} bytes, header "
                           f"promises {expected}")
    data = np.frombuffer(payload, dtype=np.int8).reshape(n_samples, n_channels).T
    return RawTrace(data=data.copy(), sample_rate=sample_rate)


def store_labels(labels: GroundTruthLabels, path: str) -> None:
    lines = [json.dumps({"t": int(t), "ch": int(c), "nid": int(n)},
                        separators=(",", ":"))
             for t, c, n in labels.events]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_labels(path: str) -> GroundTruthLabels:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rows.append((int(obj["t"]), int(obj["ch"]), int(obj["nid"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise PayloadError(f"{path}:{lineno}: bad label record: {exc}") from exc
    return GroundTruthLabels(np.array(rows, dtype=np.int64).reshape(-1, 3))


def store_session(session: ReachSession, path: str) -> None:
    n_units = session.n_units
    header = "bin,vx,vy," + ",".join(f"c{j}" for j in range(n_units))
    lines = [header]
    for i in range(session.n_bins):
        vx, vy = (float(v) for v in session.velocity[i])
        counts = ",".join(str(int(c)) for c in session.counts[i])
        lines.append(f"{i},{vx!r},{vy!r},{counts}")
    atomic_write_text(path, "\n".join(lines) + "\n")
    sidecar = {
        "bin_ms": session.bin_ms,
        "trials": [{"target_rad": tr.target_rad, "start_bin": tr.start_bin,
                    "end_bin": tr.end_bin} for tr in session.trials],
        "tuning": [asdict(tc) for tc in session.tuning],
        "unit_channels": list(session.unit_channels),
        "meta": session.meta,
    }
    atomic_write_text(path + ".json", canonical_json(sidecar) + "\n")


def load_session(path: str) -> ReachSession:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("bin,vx,vy"):
        raise HeaderError(f"{path}: missing 'bin,vx,vy,...' header row")
    n_units = len(lines[0].split(",")) - 3
    vel, counts = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 3 + n_units:
            raise PayloadError(f"{path}:{lineno}: expected {3 + n_units} columns, "
                               f"got {len(parts)}")
        try:
            vel.append((float(parts[1]), float(parts[2])))
            counts.append([int(c) for c in parts[3:]])
        except ValueError as exc:
            raise PayloadError(f"{path}:{lineno}: {exc}") from exc
    try:
        with open(path + ".json", "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError:
        raise PayloadError(f"{path}: sidecar {path}.json is missing")
    except json.JSONDecodeError as exc:
        raise PayloadError(f"{path}.json: {exc}") from exc
    trials = [TrialInfo(tr["target_rad"], tr["start_bin"], tr["end_bin"])
              for tr in sidecar.get("trials", [])]
    tuning = [TuningCurve(**tc) for tc in sidecar.get("tuning", [])]
    return ReachSession(
        velocity=np.array(vel, dtype=np.float64).reshape(-1, 2),
        counts=np.array(counts, dtype=np.int64).reshape(-1, n_units),
        bin_ms=int(sidecar["bin_ms"]),
        trials=trials, tuning=tuning,
        unit_channels=list(sidecar.get("unit_channels", [])),
        meta=dict(sidecar.get("meta", {})),
    )


def store_dataset(obj, path: str) -> None:
    """Type-dispatched store for the three dataset kinds."""
    if isinstance(obj, RawTrace):
        store_trace(obj, path)
    elif isinstance(obj, GroundTruthLabels):
        store_labels(obj, path)
    elif isinstance(obj, ReachSession):
        store_session(obj, path)
    else:
        raise TypeError(f"cannot store object of type {type(obj).__name__}")


def load_dataset(path: str):
    """Content-sniffing loader: trace by magic, session by .csv, labels otherwise."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == TRACE_MAGIC:
        return load_trace(path)
    if path.endswith(".csv"):
        return load_session(path)
    return load_labels(path)
