"""Cycle-driven simulator of the 96-channel processing fabric.

Per-channel detectors complete one 32-sample window at a time and hand tokens
to a per-group conveyor ring; one sorter per group classifies at most one
token per cycle; sorted events contend for a single bounded decoder buffer
feeding the per-bin ensemble accumulator. Everything is a deterministic state
machine: identical inputs give identical counters and outputs.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np

from .decode import EnsembleModel
from .detect import (DEFAULT_K, DEFAULT_PRE, FeatureSpec, detect_spikes,
                     estimate_threshold, extract_features)
from .sort_offline import ChannelSorterModel, classify_spike
from .synthdata import PayloadError, RawTrace, WINDOW_LEN

SAMPLE_BITS = 8


class ConfigMismatchError(ValueError):
    """Trace shape and simulator configuration disagree."""


@dataclass
class SimConfig:
    n_channels: int = 96
    group_size: int = 32
    conveyor_slots: int = 32
    decoder_buffer_depth: int = 4
    clock_hz: int = 30000
    bin_ms: int = 100
    output_width_bits: int = 16
    channel_gating: bool = True
    pre_samples: int = DEFAULT_PRE

    def validate(self) -> None:
        if self.n_channels < 1 or self.group_size < 1:
            raise ValueError("n_channels and group_size must be positive")
        if self.n_channels % self.group_size != 0:
            raise ValueError("n_channels must be divisible by group_size")
        if self.conveyor_slots < self.group_size:
            raise ValueError("conveyor_slots must be >= group_size (one tap per channel)")
        if self.decoder_buffer_depth < 1:
            raise ValueError("decoder_buffer_depth must be >= 1")
        if self.clock_hz < 1 or self.bin_ms < 1:
            raise ValueError("clock_hz and bin_ms must be positive")
        if self.output_width_bits < 1:
            raise ValueError("output_width_bits must be positive")
        if self.grace_cycles >= self.bin_len:
            raise ValueError(
                f"bin length {self.bin_len} cycles is shorter than the "
                f"pipeline grace window ({self.grace_cycles}); bins would "
                "close out of order")

    @property
    def n_groups(self) -> int:
        return self.n_channels // self.group_size

    @property
    def bin_len(self) -> int:
        """Samples (= cycles) per accumulator bin."""
        return int(round(self.clock_hz * self.bin_ms / 1000.0))

    @property
    def grace_cycles(self) -> int:
        """How long a bin's accumulator bank stays open past its edge.

        Upper bound on pipeline latency between a window's first sample and
        its arrival at the accumulator: window completion (31), worst-case
        insertion stall plus tap-to-head travel (covered by two conveyor
        lengths), decoder buffer wait, plus slack. Tokens are attributed to
        their detection-time bin, so the bank must outlive every in-flight
        token of that bin.
        """
        return (WINDOW_LEN - 1 + 2 * self.conveyor_slots
                + self.decoder_buffer_depth + 4)


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False}


def parse_sim_config(text: str) -> SimConfig:
    """Parse the flat ``key = value`` simulator config format.

    Blank lines and ``#`` comments are ignored; unknown keys are rejected.
    """
    known = {f.name: f.type for f in fields(SimConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PayloadError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise PayloadError(f"line {lineno}: unknown config key {key!r}")
        if key == "channel_gating":
            if val.lower() not in _BOOL_WORDS:
                raise PayloadError(f"line {lineno}: expected a boolean, got {val!r}")
            values[key] = _BOOL_WORDS[val.lower()]
        else:
            try:
                values[key] = int(val)
            except ValueError as exc:
                raise PayloadError(f"line {lineno}: expected an integer, got {val!r}") from exc
    cfg = SimConfig(**values)
    cfg.validate()
    return cfg


def serialize_sim_config(config: SimConfig) -> str:
    lines = []
    for f in fields(SimConfig):
        v = getattr(config, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


@dataclass
class SimCounters:
    cycles: int = 0
    detections: int = 0
    gated_tokens: int = 0
    sorts: int = 0
    decoder_accepts: int = 0
    stall_cycles: int = 0
    decoder_collisions: int = 0
    tokens_lost: int = 0
    late_tokens: int = 0
    edge_crossings: int = 0
    bins_emitted: int = 0
    input_bits: int = 0
    output_bits: int = 0

    def as_dict(self) -> dict:
        return {f.name: int(getattr(self, f.name)) for f in fields(self)}


@dataclass
class Completion:
    """A detector finishing its window: ready for queue insertion this cycle."""

    cycle: int
    channel: int
    t: int          # window start sample; travels with the token for binning
    f1: int
    f2: int


class Simulator:
    """One fabric instance. Feed it a completion schedule, then step cycles.

    *classifiers* maps channel -> callable(f1, f2) -> cluster label;
    *ensemble* defines the accumulated (channel, cluster) columns. Channels
    absent from the ensemble selection are gated out after detection when
    ``config.channel_gating`` is set.
    """

    def __init__(self, config: SimConfig, ensemble: EnsembleModel,
                 classifiers: dict, schedule: list, n_bins: int):
        config.validate()
        self.config = config
        self.counters = SimCounters()
        self.ensemble = ensemble
        self.classifiers = classifiers
        self.schedule = sorted(schedule, key=lambda c: (c.cycle, c.channel))
        for comp in self.schedule:
            if not 0 <= comp.channel < config.n_channels:
                raise ConfigMismatchError(
                    f"completion on channel {comp.channel} outside the "
                    f"configured {config.n_channels} channels")
        self.n_bins = n_bins
        self.cycle = 0
        self._next_comp = 0
        self._rings = [[None] * config.conveyor_slots for _ in range(config.n_groups)]
        self._ring_count = 0
        self._held = {}
        self._fifo = deque()
        self._selected_channels = {ch for ch, _ in ensemble.selected}
        self._colmap = {pair: j for j, pair in enumerate(ensemble.selected)}
        d = ensemble.E.shape[0]
        self._banks = np.zeros((n_bins, len(ensemble.selected)), dtype=np.int64)
        self._ez = np.zeros((n_bins, d), dtype=np.float64)
        self._next_emit = 0
        self.sorts_by_channel = np.zeros(config.n_channels, dtype=np.int64)
        self.accepted_events = []

    # -- state inspection ---------------------------------------------------

    @property
    def pipeline_empty(self) -> bool:
        return not self._held and self._ring_count == 0 and not self._fifo

    @property
    def done(self) -> bool:
        return (self._next_comp >= len(self.schedule) and self.pipeline_empty
                and self._next_emit >= self.n_bins)

    def _bank_close_cycle(self, k: int) -> int:
        return (k + 1) * self.config.bin_len + self.config.grace_cycles

    def in_flight(self) -> int:
        return len(self._held) + self._ring_count + len(self._fifo)

    def check_conservation(self) -> None:
        c = self.counters
        accounted = (c.gated_tokens + self.in_flight()
                     + c.decoder_accepts + c.tokens_lost)
        if c.detections != accounted:
            raise AssertionError(
                f"token conservation violated at cycle {self.cycle}: "
                f"{c.detections} generated vs {accounted} accounted")

    # -- the clock ----------------------------------------------------------

    def step(self) -> "Simulator":
        """Advance one clock cycle through all pipeline stages."""
        cfg = self.config
        cyc = self.cycle

        # (a) detector completions for this cycle
        fresh = []
        while (self._next_comp < len(self.schedule)
               and self.schedule[self._next_comp].cycle <= cyc):
            comp = self.schedule[self._next_comp]
            self._next_comp += 1
            self.counters.detections += 1
            if cfg.channel_gating and comp.channel not in self._selected_channels:
                self.counters.gated_tokens += 1
                continue
            if comp.channel in self._held:
                raise AssertionError(
                    f"channel {comp.channel} completed a window while a prior "
                    "token is still stalled; detector re-arm should prevent this")
            fresh.append(comp)

        # (b) queue insertion: stalled tokens retry first, then new completions;
        # taps are distinct per channel so same-cycle inserters never conflict
        waiting = sorted(self._held.values(), key=lambda c: c.channel) + fresh
        self._held = {}
        for comp in waiting:
            group = comp.channel // cfg.group_size
            tap = comp.channel % cfg.group_size
            if self._rings[group][tap] is None:
                self._rings[group][tap] = comp
                self._ring_count += 1
            else:
                self._held[comp.channel] = comp
                self.counters.stall_cycles += 1

        # (c) each conveyor advances one slot toward its sorter
        heads = []
        for ring in self._rings:
            out = ring[0]
            ring[0:-1] = ring[1:]
            ring[-1] = None
            if out is not None:
                self._ring_count -= 1
                heads.append(out)

        # (d) one sort per group per cycle
        arrivals = []
        for comp in heads:
            label = self.classifiers[comp.channel](comp.f1, comp.f2)
            self.counters.sorts += 1
            self.sorts_by_channel[comp.channel] += 1
            arrivals.append((comp, int(label)))

        # (e) decoder buffer: accept one queued event, then admit this cycle's
        # arrivals in group order; a full buffer drops the remainder
        if self._fifo:
            self._accept(*self._fifo.popleft())
        if len(arrivals) > 1:
            self.counters.decoder_collisions += len(arrivals) - 1
        for comp, label in arrivals:
            if len(self._fifo) < cfg.decoder_buffer_depth:
                self._fifo.append((comp, label))
            else:
                self.counters.tokens_lost += 1

        # (f) close any accumulator bank whose grace window ends this cycle
        while (self._next_emit < self.n_bins
               and self._bank_close_cycle(self._next_emit) <= cyc):
            self._emit_bank()

        self.cycle = cyc + 1
        self.counters.cycles = max(self.counters.cycles, self.cycle)
        self.check_conservation()
        return self

    def _accept(self, comp: Completion, label: int) -> None:
        cfg = self.config
        self.counters.decoder_accepts += 1
        k = comp.t // cfg.bin_len
        if self.cycle > (k + 1) * cfg.bin_len:
            self.counters.edge_crossings += 1
        if k >= self.n_bins:
            k = self.n_bins - 1          # tail event of a truncated final bin
        if k < self._next_emit:
            # its bank is already emitted: flag it and spill into the oldest
            # bank still open, mirroring a single hardware accumulator
            self.counters.late_tokens += 1
            if self._next_emit >= self.n_bins:
                return
            k = self._next_emit
        col = self._colmap.get((comp.channel, label))
        if col is not None:
            self._banks[k, col] += 1
        self.accepted_events.append((comp.t, comp.channel, label))

    def _emit_bank(self) -> None:
        k = self._next_emit
        self._ez[k] = self.ensemble.E @ self._banks[k].astype(np.float64)
        self._next_emit = k + 1
        self.counters.bins_emitted += 1
        self.counters.output_bits += self.ensemble.E.shape[0] * self.config.output_width_bits

    def run(self) -> "Simulator":
        """Step until the schedule is drained and every bank has been emitted."""
        while not self.done:
            if (self.pipeline_empty
                    and (self._next_comp >= len(self.schedule)
                         or self.schedule[self._next_comp].cycle > self.cycle)):
                jumps = []
                if self._next_comp < len(self.schedule):
                    jumps.append(self.schedule[self._next_comp].cycle)
                if self._next_emit < self.n_bins:
                    jumps.append(self._bank_close_cycle(self._next_emit))
                nxt = min(jumps)
                if nxt > self.cycle:
                    self.cycle = nxt
                    self.counters.cycles = max(self.counters.cycles, self.cycle)
            self.step()
        return self


def step(sim: Simulator) -> Simulator:
    """Advance the simulator one clock cycle (module-level convenience)."""
    return sim.step()


@dataclass
class SimResult:
    ez: np.ndarray                 # (n_bins, state_dim) per-bin reduced observation
    counts: np.ndarray             # (n_bins, n_selected) accumulated event counts
    counters: SimCounters
    sorts_by_channel: np.ndarray   # (n_channels,) int64
    accepted_events: np.ndarray    # (n, 3) rows (t, channel, label)
    config: SimConfig = field(repr=False, default=None)

    @property
    def n_bins(self) -> int:
        return self.ez.shape[0]


def _classifier_for(model):
    """Adapt a sorter model to a plain (f1, f2) -> label callable."""
    if isinstance(model, ChannelSorterModel):
        return lambda f1, f2: classify_spike(model, f1, f2)
    if hasattr(model, "classify"):
        return model.classify
    if callable(model):
        return model
    raise TypeError(f"cannot use {type(model).__name__} as a channel sorter")


def build_schedule(trace: RawTrace, models: dict, config: SimConfig,
                   thresholds: dict | None = None) -> list:
    """Detect every modeled channel of *trace* into a completion schedule.

    A window spanning [t0, t0+31] completes (and may enter the queue) at
    cycle t0+31. Channels without a model are left silent.
    """
    schedule = []
    for ch in sorted(models):
        row = trace.data[ch]
        thr = (thresholds[ch] if thresholds is not None
               else estimate_threshold(row, DEFAULT_K))
        spec = getattr(models[ch], "feature_spec", None) or FeatureSpec()
        for w in detect_spikes(row, thr, config.pre_samples, channel=ch):
            tok = extract_features(w, spec)
            schedule.append(Completion(cycle=w.t0 + WINDOW_LEN - 1, channel=ch,
                                       t=tok.t, f1=tok.f1, f2=tok.f2))
    return schedule


def run_simulation(trace: RawTrace, models: dict, ensemble: EnsembleModel,
                   config: SimConfig | None = None,
                   thresholds: dict | None = None) -> SimResult:
    """Drive the fabric over a full trace and return outputs plus counters.

    Whenever ``tokens_lost == 0`` and no token was flagged late, the per-bin
    ``ez`` equals the reference computed outside the simulator (count the
    sorted events into bins, multiply by the ensemble matrix once per bin).
    """
    config = config or SimConfig()
    config.validate()
    if trace.data.shape[0] != config.n_channels:
        raise ConfigMismatchError(
            f"trace has {trace.data.shape[0]} channels but the config "
            f"expects {config.n_channels}")
    n_samples = trace.data.shape[1]
    n_bins = max(1, math.ceil(n_samples / config.bin_len))
    schedule = build_schedule(trace, models, config, thresholds)
    classifiers = {ch: _classifier_for(m) for ch, m in models.items()}
    sim = Simulator(config, ensemble, classifiers, schedule, n_bins).run()
    sim.counters.input_bits = config.n_channels * n_samples * SAMPLE_BITS
    return SimResult(ez=sim._ez, counts=sim._banks, counters=sim.counters,
                     sorts_by_channel=sim.sorts_by_channel,
                     accepted_events=np.array(sim.accepted_events,
                                              dtype=np.int64).reshape(-1, 3),
                     config=config)


def reference_ez(events, ensemble: EnsembleModel, n_bins: int, bin_len: int) -> np.ndarray:
    """The order-free pipeline output the simulator must reproduce.

    Computed with the same per-bin matrix-vector product the simulator uses,
    so equality with a lossless run is bit-exact, not approximate.
    """
    from .decode import bin_spikes

    counts = bin_spikes(events, n_bins, bin_len, ensemble.selected)
    return np.stack([ensemble.E @ row.astype(np.float64) for row in counts])


def linear_fit_r2(x, y) -> float:
    """R-squared of an ordinary least-squares line through (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.allclose(y, y[0]):
        return 1.0
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - ss_res / ss_tot


SWEEP_STAGES = ("detections", "sorts", "decoder_accepts")


def sweep_spike_rate(rates, n_channels: int = 8, duration_s: float = 2.0,
                     seed: int = 0, config: SimConfig | None = None) -> dict:
    """Activity counters vs input spike rate at a fixed configuration.

    Sorter models are trained once on a reference-rate trace (ground-truth
    matched features); each rate then gets its own trace and simulator run.
    Returns per-rate counter rows and the per-stage linear-fit R².
    """
    from .evaluation import channel_feature_dataset
    from .sort_offline import train_channel_model
    from .synthdata import TraceConfig, gen_spike_trace

    rates = [float(r) for r in rates]
    if any(r < 0 for r in rates):
        raise ValueError("rates must be non-negative")
    config = config or SimConfig(n_channels=n_channels, group_size=n_channels,
                                 conveyor_slots=max(n_channels, 8))
    config.validate()

    def cfg_for(rate: float) -> "TraceConfig":
        return TraceConfig(n_channels=n_channels, duration_s=duration_s,
                           neurons_per_channel=3, firing_rate_hz=rate,
                           snr_db=24.0, amp_spread=(0.5, 1.0))

    train_trace, train_labels = gen_spike_trace(cfg_for(30.0), seed=seed)
    models = {}
    for ch in range(n_channels):
        feats, labs, _, _ = channel_feature_dataset(
            train_trace, train_labels, ch, pre_samples=config.pre_samples)
        models[ch] = train_channel_model(feats, labs)

    selected = [(ch, u) for ch in range(n_channels) for u in range(3)]
    rng = np.random.default_rng(seed)
    E = rng.normal(0.0, 0.05, size=(2, len(selected)))
    ensemble = EnsembleModel(E=E, Qe=np.eye(2) * 0.1, selected=selected)

    rows = []
    for i, rate in enumerate(rates):
        trace, _ = gen_spike_trace(cfg_for(rate), seed=seed + 1 + i)
        res = run_simulation(trace, models, ensemble, config)
        row = {"rate_hz": rate}
        row.update(res.counters.as_dict())
        rows.append(row)
    r2 = {stage: linear_fit_r2([r["rate_hz"] for r in rows],
                               [r[stage] for r in rows])
          for stage in SWEEP_STAGES}
    return {"rows": rows, "r2": r2}
