"""Unsupervised on-line spike sorter.

Training is streaming and per channel: per-feature histograms accumulate until
a spike budget is reached, smoothed local minima become axis boundaries, the
boundaries induce a small grid of feature-space partitions, and a 16-entry
content-addressable memory (CAM) tracks a 2-bit confidence status per occupied
partition (00 vacant, 01 outlier, 10 weak, 11 strong). After training the
frozen model assigns each spike to the nearest valid partition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter1d

from ._util import atomic_write_text
from .synthdata import PayloadError

BIN_WIDTH = 2            # LSB per histogram bin
SPIKE_BUDGET = 512       # histogram-phase spikes per channel
SMOOTHING_RADIUS = 2
MAX_BOUNDARIES = 3       # per feature axis
CAM_CAPACITY = 16
DECAY_PERIOD = 64        # processed spikes per channel between global decrements
STATUS_VACANT, STATUS_OUTLIER, STATUS_WEAK, STATUS_STRONG = 0, 1, 2, 3
OUTLIER = -1


@dataclass
class FeatureHistograms:
    """Two per-feature histograms over the int8 range with 2-LSB bins."""

    lo: int = -128
    hi: int = 127
    bin_width: int = BIN_WIDTH
    spike_budget: int = SPIKE_BUDGET
    counts: np.ndarray = None
    n_spikes: int = 0
    n_clamped: int = 0

    def __post_init__(self):
        n_bins = (self.hi - self.lo + 1 + self.bin_width - 1) // self.bin_width
        if self.counts is None:
            self.counts = np.zeros((2, n_bins), dtype=np.int64)

    @property
    def n_bins(self) -> int:
        return self.counts.shape[1]

    def bin_index(self, value: int) -> tuple:
        """(clamped bin index, whether clamping happened)."""
        raw = (int(value) - self.lo) // self.bin_width
        clamped = min(max(raw, 0), self.n_bins - 1)
        return clamped, clamped != raw

    def bin_value(self, index: int) -> int:
        """Representative feature value of a bin (lower middle of its range)."""
        return self.lo + index * self.bin_width + (self.bin_width - 1) // 2


def update_histograms(hist: FeatureHistograms, f1: int, f2: int) -> None:
    """Add one spike's features; out-of-range values clamp to the edge bins."""
    for axis, value in ((0, f1), (1, f2)):
        idx, clamped = hist.bin_index(value)
        hist.counts[axis, idx] += 1
        if clamped:
            hist.n_clamped += 1
    hist.n_spikes += 1


def _valley_runs(smoothed: np.ndarray) -> list:
    """Maximal constant runs strictly below both neighbors; [(start, end, value)]."""
    n = smoothed.size
    runs = []
    i = 0
    while i < n:
        j = i
        while j + 1 < n and smoothed[j + 1] == smoothed[i]:
            j += 1
        if i > 0 and j < n - 1 and smoothed[i - 1] > smoothed[i] \
                and smoothed[j + 1] > smoothed[i]:
            runs.append((i, j, smoothed[i]))
        i = j + 1
    return runs


def _valley_depths(smoothed: np.ndarray, runs: list) -> list:
    """Depth = min(separating peak left, separating peak right) - valley value."""
    depths = []
    for k, (s, e, v) in enumerate(runs):
        left_from = runs[k - 1][1] + 1 if k > 0 else 0
        right_to = runs[k + 1][0] if k + 1 < len(runs) else smoothed.size
        left_max = smoothed[left_from:s].max()
        right_max = smoothed[e + 1:right_to].max()
        depths.append(min(left_max, right_max) - v)
    return depths


def find_boundaries(hist: FeatureHistograms,
                    smoothing_radius: int = SMOOTHING_RADIUS) -> tuple:
    """Per-axis boundary values from smoothed histogram valleys.

    Each histogram is moving-average smoothed, interior local minima (plateau
    runs counted once, positioned at their midpoint) become boundaries, and if
    more than MAX_BOUNDARIES valleys exist only the deepest ones are kept.
    Returns (boundaries_f1, boundaries_f2) as ascending int lists.
    """
    out = []
    size = 2 * smoothing_radius + 1
    for axis in (0, 1):
        smoothed = uniform_filter1d(hist.counts[axis].astype(np.float64),
                                    size=size, mode="nearest")
        runs = _valley_runs(smoothed)
        if len(runs) > MAX_BOUNDARIES:
            depths = _valley_depths(smoothed, runs)
            order = sorted(range(len(runs)), key=lambda k: (-depths[k], runs[k][0]))
            runs = sorted(runs[k] for k in order[:MAX_BOUNDARIES])
        out.append([hist.bin_value((s + e) // 2) for s, e, _ in runs])
    return out[0], out[1]


def locate_partition(f1: int, f2: int, boundaries: tuple) -> tuple:
    """Grid cell of a feature pair: index = number of boundaries <= feature.

    A feature exactly equal to a boundary therefore lands on the upper side.
    """
    b1, b2 = boundaries
    i = sum(1 for b in b1 if f1 >= b)
    j = sum(1 for b in b2 if f2 >= b)
    return i, j


@dataclass
class CamEntry:
    key: tuple = None          # partition (i, j); None when vacant
    status: int = STATUS_VACANT
    last_touch: int = 0


@dataclass
class CamState:
    """Fixed-capacity partition tracker with saturating 2-bit statuses."""

    capacity: int = CAM_CAPACITY
    decay_period: int = DECAY_PERIOD
    entries: list = field(default_factory=list)
    processed: int = 0

    def __post_init__(self):
        if not self.entries:
            self.entries = [CamEntry() for _ in range(self.capacity)]

    def lookup(self, key: tuple):
        for entry in self.entries:
            if entry.status != STATUS_VACANT and entry.key == key:
                return entry
        return None


def cam_update(cam: CamState, idx: tuple) -> CamEntry:
    """Process one spike's partition index through the CAM.

    Hit: saturating status increment. Miss: insert at outlier status into a
    vacant slot, evicting the minimum-status (ties: least recently touched)
    entry when full. Every decay_period processed spikes all statuses
    decrement one step and entries reaching vacant are freed.
    """
    cam.processed += 1
    entry = cam.lookup(idx)
    if entry is not None:
        entry.status = min(STATUS_STRONG, entry.status + 1)
        entry.last_touch = cam.processed
    else:
        entry = next((e for e in cam.entries if e.status == STATUS_VACANT), None)
        if entry is None:
            entry = min(cam.entries, key=lambda e: (e.status, e.last_touch))
        entry.key = tuple(idx)
        entry.status = STATUS_OUTLIER
        entry.last_touch = cam.processed
    if cam.processed % cam.decay_period == 0:
        for e in cam.entries:
            if e.status != STATUS_VACANT:
                e.status -= 1
                if e.status == STATUS_VACANT:
                    e.key = None
    return entry


def valid_partitions(cam: CamState) -> list:
    """Partitions with weak-or-better status, in ascending (i, j) order."""
    keys = sorted(e.key for e in cam.entries if e.status >= STATUS_WEAK)
    return keys


def assign_cluster(idx: tuple, cam: CamState) -> int:
    """Deployment-time cluster id for a partition index.

    The id is the rank of the nearest valid partition (L1 distance on grid
    indices, ties to the lexicographically smallest partition); OUTLIER when
    no partition is valid.
    """
    valid = valid_partitions(cam)
    if not valid:
        return OUTLIER
    best = min(valid, key=lambda key: (abs(key[0] - idx[0]) + abs(key[1] - idx[1]), key))
    return valid.index(best)


# ---------------------------------------------------------------------------
# two-phase trainer and frozen model
# ---------------------------------------------------------------------------


@dataclass
class OnlineSorterModel:
    """Frozen per-channel model: boundaries plus the CAM snapshot."""

    boundaries: tuple            # ([f1 cuts], [f2 cuts])
    cam_snapshot: list           # [(i, j, status)] for occupied entries
    lo: int = -128
    hi: int = 127

    def valid(self) -> list:
        return sorted((i, j) for i, j, s in self.cam_snapshot if s >= STATUS_WEAK)

    def classify(self, f1: int, f2: int) -> int:
        idx = locate_partition(f1, f2, self.boundaries)
        valid = self.valid()
        if not valid:
            return OUTLIER
        best = min(valid, key=lambda key: (abs(key[0] - idx[0]) + abs(key[1] - idx[1]), key))
        return valid.index(best)

    @property
    def n_clusters(self) -> int:
        return len(self.valid())

    def to_json(self) -> dict:
        return {"kind": "online",
                "boundaries": [list(map(int, self.boundaries[0])),
                               list(map(int, self.boundaries[1]))],
                "cam": [{"i": int(i), "j": int(j), "status": int(s)}
                        for i, j, s in self.cam_snapshot]}

    @classmethod
    def from_json(cls, obj: dict) -> "OnlineSorterModel":
        if obj.get("kind") != "online":
            raise PayloadError(f"not an online sorter model: kind={obj.get('kind')!r}")
        return cls(boundaries=(list(obj["boundaries"][0]), list(obj["boundaries"][1])),
                   cam_snapshot=[(e["i"], e["j"], e["status"]) for e in obj["cam"]])


class OnlineSorter:
    """Streaming per-channel trainer: histogram phase, then CAM phase."""

    def __init__(self, budget: int = SPIKE_BUDGET,
                 smoothing_radius: int = SMOOTHING_RADIUS,
                 decay_period: int = DECAY_PERIOD):
        self.hist = FeatureHistograms(spike_budget=budget)
        self.smoothing_radius = smoothing_radius
        self.cam = CamState(decay_period=decay_period)
        self.boundaries = None
        self._budget_tokens = []  # kept for CAM replay when the stream is short

    @property
    def in_histogram_phase(self) -> bool:
        return self.hist.n_spikes < self.hist.spike_budget

    def observe(self, f1: int, f2: int) -> None:
        if self.in_histogram_phase:
            update_histograms(self.hist, f1, f2)
            self._budget_tokens.append((f1, f2))
            if not self.in_histogram_phase:
                self.boundaries = find_boundaries(self.hist, self.smoothing_radius)
        else:
            cam_update(self.cam, locate_partition(f1, f2, self.boundaries))

    def finalize(self) -> OnlineSorterModel:
        """Freeze the model. If the stream ended before any CAM-phase spikes
        arrived, the histogram-phase spikes are replayed through the CAM once."""
        if self.boundaries is None:
            self.boundaries = find_boundaries(self.hist, self.smoothing_radius)
        if self.cam.processed == 0:
            for f1, f2 in self._budget_tokens:
                cam_update(self.cam, locate_partition(f1, f2, self.boundaries))
        snapshot = [(e.key[0], e.key[1], e.status)
                    for e in self.cam.entries if e.status != STATUS_VACANT]
        return OnlineSorterModel(boundaries=self.boundaries,
                                 cam_snapshot=sorted(snapshot))


def train_online(tokens, budget: int = SPIKE_BUDGET,
                 smoothing_radius: int = SMOOTHING_RADIUS,
                 decay_period: int = DECAY_PERIOD) -> dict:
    """Train one OnlineSorterModel per channel from a token stream."""
    sorters = {}
    for tok in tokens:
        sorter = sorters.get(tok.channel)
        if sorter is None:
            sorter = sorters[tok.channel] = OnlineSorter(
                budget=budget, smoothing_radius=smoothing_radius,
                decay_period=decay_period)
        sorter.observe(tok.f1, tok.f2)
    return {ch: sorter.finalize() for ch, sorter in sorted(sorters.items())}


def store_online_models(models: dict, path: str) -> None:
    obj = {"kind": "online-set",
           "channels": {str(ch): m.to_json() for ch, m in sorted(models.items())}}
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_online_models(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PayloadError(f"{path}: {exc}") from exc
    if obj.get("kind") != "online-set":
        raise PayloadError(f"{path}: not an online sorter model set")
    return {int(ch): OnlineSorterModel.from_json(m)
            for ch, m in obj["channels"].items()}
