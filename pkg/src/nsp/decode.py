"""Velocity decoding from sorted spike events.

Two Kalman-filter variants share one state-transition model
x_{k+1} = A x_k + w:

* the standard filter observes the raw binned rate vector through
  z_k = H x_k + q and must invert an n_neurons-sized innovation covariance
  every step;
* the ensemble-observation filter first reduces the rates to a state-space
  velocity estimate E z_k by multivariate regression, so every per-step
  matrix is state_dim-sized, and the reduction itself degenerates to one
  column-add per spike event — cheap enough to run on the implant while the
  filter runs on the prosthesis side.

All step arithmetic goes through the counted kernels in opcount, grouped into
named phases (state_predict, cov_predict, gain, state_update, cov_update,
plus the event-driven observe reduction), so complexity claims are measured,
not estimated. The explicit re-symmetrization of P after the covariance
update is numerical hygiene and is excluded from the counters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._util import atomic_write_text
from .opcount import OpCounts, inv_small, ldl_solve, mat_add, mat_mul, mat_sub
from .synthdata import PayloadError

RIDGE_EPS = 1e-6
DEFAULT_STATE_DIM = 2
MAX_UNITS_PER_CHANNEL = 3
TARGET_ENSEMBLE_RANGE = (20, 50)
MIN_INFORMATIVE_SCORE = 0.01
INT32_MAX = 2**31 - 1

PHASES = ("state_predict", "cov_predict", "gain", "state_update",
          "cov_update", "observe")


class StepOps:
    """Operation counters for one or more filter steps, split by phase.

    ``step_total`` covers the five phases of the filter step itself. The
    ``observe`` phase (reducing rates to E z) is tallied separately: the
    ensemble filter receives that reduction from the implant accumulator as
    already-computed input, one add per spike event, not per-step matrix
    work. ``total_with_observe`` folds it back in for reporting.
    """

    def __init__(self):
        self.phases = {p: OpCounts() for p in PHASES}

    def phase(self, name: str) -> OpCounts:
        return self.phases[name]

    def step_total(self) -> OpCounts:
        out = OpCounts()
        for name, c in self.phases.items():
            if name != "observe":
                out += c
        return out

    def total_with_observe(self) -> OpCounts:
        return self.step_total() + self.phases["observe"]

    def as_dict(self) -> dict:
        return {"phases": {p: c.as_dict() for p, c in self.phases.items()},
                "step_total": self.step_total().as_dict(),
                "total_with_observe": self.total_with_observe().as_dict()}


def _phase(ops: StepOps | None, name: str) -> OpCounts | None:
    return None if ops is None else ops.phase(name)


def _sym(P: np.ndarray) -> np.ndarray:
    return (P + P.T) / 2.0


# ---------------------------------------------------------------------------
# models and training
# ---------------------------------------------------------------------------


@dataclass
class StateTransitionModel:
    A: np.ndarray        # (d, d)
    W: np.ndarray        # (d, d) process covariance

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.W = np.asarray(self.W, dtype=np.float64)


@dataclass
class StandardObservationModel:
    H: np.ndarray        # (n_neurons, d)
    Q: np.ndarray        # (n_neurons, n_neurons) observation covariance

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.Q = np.asarray(self.Q, dtype=np.float64)


@dataclass
class EnsembleModel:
    E: np.ndarray        # (d, n_selected) regression weights
    Qe: np.ndarray       # (d, d) residual covariance
    selected: tuple      # ((channel, within-channel unit id), ...) per E column

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=np.float64)
        self.Qe = np.asarray(self.Qe, dtype=np.float64)
        self.selected = tuple((int(c), int(u)) for c, u in self.selected)
        if self.E.shape[1] != len(self.selected):
            raise ValueError("one selected (channel, unit) pair per E column")
        per_channel = {}
        for ch, _ in self.selected:
            per_channel[ch] = per_channel.get(ch, 0) + 1
        if per_channel and max(per_channel.values()) > MAX_UNITS_PER_CHANNEL:
            raise ValueError(f"more than {MAX_UNITS_PER_CHANNEL} units on one channel")


@dataclass
class FilterState:
    x: np.ndarray                 # (d,) velocity estimate
    P: np.ndarray                 # (d_obs-appropriate) error covariance
    K: np.ndarray | None = None   # gain from the last update

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.P = np.asarray(self.P, dtype=np.float64)


def _ridge(X: np.ndarray, Y: np.ndarray, eps: float = RIDGE_EPS) -> np.ndarray:
    """Least-squares coefficient matrix (r, out) for Y ~ X @ coef."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    gram = X.T @ X + eps * np.eye(X.shape[1])
    return np.linalg.solve(gram, X.T @ Y)


def _residual_cov(resid: np.ndarray) -> np.ndarray:
    cov = resid.T @ resid / max(1, resid.shape[0])
    return _sym(cov)


def train_transition(velocity: np.ndarray, eps: float = RIDGE_EPS) -> StateTransitionModel:
    """Fit x_{k+1} = A x_k from consecutive velocity bins; W = residual cov."""
    v = np.asarray(velocity, dtype=np.float64)
    d = v.shape[1]
    if v.shape[0] < d + 1:
        raise ValueError(f"need at least {d + 1} consecutive bins")
    X, Y = v[:-1], v[1:]
    coef = _ridge(X, Y, eps)
    return StateTransitionModel(A=coef.T, W=_residual_cov(Y - X @ coef))


def train_observation_standard(counts: np.ndarray, velocity: np.ndarray,
                               eps: float = RIDGE_EPS) -> StandardObservationModel:
    """Fit z = H x per neuron; Q = residual covariance across neurons."""
    Z = np.asarray(counts, dtype=np.float64)
    X = np.asarray(velocity, dtype=np.float64)
    if Z.shape[0] != X.shape[0] or Z.shape[0] == 0:
        raise ValueError("counts and velocity must align bin-for-bin")
    coef = _ridge(X, Z, eps)
    return StandardObservationModel(H=coef.T, Q=_residual_cov(Z - X @ coef))


def neuron_scores(counts: np.ndarray, velocity: np.ndarray,
                  eps: float = RIDGE_EPS) -> np.ndarray:
    """Encoding score per unit: R^2 of its rate regressed on velocity.

    The regression includes an intercept (a baseline rate carries no
    kinematic information and must not inflate the score). Constant-rate
    units score 0.
    """
    Z = np.asarray(counts, dtype=np.float64)
    X = np.asarray(velocity, dtype=np.float64)
    Xb = np.hstack([X, np.ones((X.shape[0], 1))])
    coef = _ridge(Xb, Z, eps)
    sse = ((Z - Xb @ coef) ** 2).sum(axis=0)
    sst = ((Z - Z.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(sst > 0, 1.0 - sse / np.where(sst > 0, sst, 1.0), 0.0)
    return np.clip(r2, 0.0, 1.0)


def within_channel_ranks(unit_channels) -> list:
    """(channel, within-channel id) for each session unit, in session order."""
    seen = {}
    out = []
    for ch in unit_channels:
        ch = int(ch)
        out.append((ch, seen.get(ch, 0)))
        seen[ch] = seen.get(ch, 0) + 1
    return out


def select_neurons(counts: np.ndarray, velocity: np.ndarray, unit_channels,
                   max_per_channel: int = MAX_UNITS_PER_CHANNEL,
                   target_range: tuple = TARGET_ENSEMBLE_RANGE,
                   state_dim: int | None = None) -> list:
    """Pick ensemble units by encoding score.

    Units are ranked by neuron_scores (ties keep session order), capped at
    max_per_channel per channel, and truncated at target_range[1]. Units
    scoring at or below MIN_INFORMATIVE_SCORE are taken only if needed to
    reach target_range[0]. Returns ascending session unit indices. Raises
    when fewer informative units exist than state dimensions.
    """
    scores = neuron_scores(counts, velocity)
    d = state_dim if state_dim is not None else np.asarray(velocity).shape[1]
    if int((scores > MIN_INFORMATIVE_SCORE).sum()) < d:
        raise ValueError("fewer informative units than state dimensions")
    order = np.argsort(-scores, kind="stable")
    channels = [int(c) for c in unit_channels]
    lo, hi = target_range
    taken, per_channel = [], {}
    for j in map(int, order):
        if scores[j] <= MIN_INFORMATIVE_SCORE and len(taken) >= lo:
            break
        ch = channels[j]
        if per_channel.get(ch, 0) >= max_per_channel:
            continue
        taken.append(j)
        per_channel[ch] = per_channel.get(ch, 0) + 1
        if len(taken) >= hi:
            break
    return sorted(taken)


def train_ensemble(counts: np.ndarray, velocity: np.ndarray, unit_channels,
                   eps: float = RIDGE_EPS,
                   max_per_channel: int = MAX_UNITS_PER_CHANNEL,
                   target_range: tuple = TARGET_ENSEMBLE_RANGE,
                   unit_indices: list | None = None) -> EnsembleModel:
    """Multivariate regression of velocity on selected units' rates.

    No intercept: the ensemble estimate must be exactly E z so the implant
    can produce it by column accumulation alone.
    """
    Z = np.asarray(counts, dtype=np.float64)
    X = np.asarray(velocity, dtype=np.float64)
    if unit_indices is None:
        unit_indices = select_neurons(Z, X, unit_channels,
                                      max_per_channel=max_per_channel,
                                      target_range=target_range,
                                      state_dim=X.shape[1])
    unit_indices = sorted(int(j) for j in unit_indices)
    Zs = Z[:, unit_indices]
    coef = _ridge(Zs, X, eps)
    ranks = within_channel_ranks(unit_channels)
    return EnsembleModel(E=coef.T, Qe=_residual_cov(X - Zs @ coef),
                         selected=tuple(ranks[j] for j in unit_indices))


def selection_columns(selected, unit_channels) -> np.ndarray:
    """Session unit index for each (channel, within-channel id) pair."""
    lookup = {pair: j for j, pair in enumerate(within_channel_ranks(unit_channels))}
    try:
        return np.array([lookup[(int(c), int(u))] for c, u in selected], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"selected unit {exc.args[0]} not present in session") from exc


# ---------------------------------------------------------------------------
# filter steps
# ---------------------------------------------------------------------------


def _predict(fs: FilterState, trans: StateTransitionModel,
             ops: StepOps | None) -> tuple:
    x = mat_mul(trans.A, fs.x, _phase(ops, "state_predict"))
    cp = _phase(ops, "cov_predict")
    P = mat_mul(mat_mul(trans.A, fs.P, cp), trans.A.T, cp)
    P = _sym(mat_add(P, trans.W, cp))
    return x, P


def kf_step(fs: FilterState, trans: StateTransitionModel,
            obs: StandardObservationModel, z: np.ndarray,
            ops: StepOps | None = None) -> FilterState:
    """One predict/update cycle of the standard filter on a raw rate vector."""
    x, P = _predict(fs, trans, ops)
    g = _phase(ops, "gain")
    PHt = mat_mul(P, obs.H.T, g)
    S = mat_add(mat_mul(obs.H, PHt, g), obs.Q, g)
    K = ldl_solve(S, PHt.T, g, name="innovation covariance (H P H' + Q)").T
    su = _phase(ops, "state_update")
    z = np.asarray(z, dtype=np.float64)
    v = mat_sub(z, mat_mul(obs.H, x, su), su)
    x = mat_add(x, mat_mul(K, v, su), su)
    cu = _phase(ops, "cov_update")
    M = mat_sub(np.eye(P.shape[0]), mat_mul(K, obs.H, cu), cu)
    P = _sym(mat_mul(M, P, cu))
    return FilterState(x=x, P=P, K=K)


def eokf_step(fs: FilterState, trans: StateTransitionModel, ens: EnsembleModel,
              ez: np.ndarray, ops: StepOps | None = None) -> FilterState:
    """One cycle of the ensemble-observation filter.

    *ez* is the already-reduced observation (the implant accumulator's bin
    emission). Every matrix here is state_dim-sized; the gain needs only a
    closed-form small inverse.
    """
    x, P = _predict(fs, trans, ops)
    g = _phase(ops, "gain")
    S = mat_add(P, ens.Qe, g)
    Sinv = inv_small(S, g, name="innovation covariance (P + Qe)")
    K = mat_mul(P, Sinv, g)
    su = _phase(ops, "state_update")
    v = mat_sub(np.asarray(ez, dtype=np.float64), x, su)
    x = mat_add(x, mat_mul(K, v, su), su)
    cu = _phase(ops, "cov_update")
    M = mat_sub(np.eye(P.shape[0]), K, cu)
    P = _sym(mat_mul(M, P, cu))
    return FilterState(x=x, P=P, K=K)


def reduce_observation(ens: EnsembleModel, z: np.ndarray,
                       ops: OpCounts | None = None) -> np.ndarray:
    """Rate vector -> state-space estimate E z (the 'observe' reduction)."""
    return mat_mul(ens.E, np.asarray(z, dtype=np.float64), ops)


def _start(state_dim: int, x0, P0) -> FilterState:
    x = np.zeros(state_dim) if x0 is None else np.asarray(x0, dtype=np.float64)
    P = np.eye(state_dim) if P0 is None else np.asarray(P0, dtype=np.float64)
    return FilterState(x=x.copy(), P=P.copy())


def run_kf(trans: StateTransitionModel, obs: StandardObservationModel,
           counts: np.ndarray, x0=None, P0=None) -> tuple:
    """Filter a whole session of raw rate vectors; returns (states, StepOps)."""
    Z = np.asarray(counts, dtype=np.float64)
    fs = _start(trans.A.shape[0], x0, P0)
    ops = StepOps()
    out = np.empty((Z.shape[0], trans.A.shape[0]))
    for k in range(Z.shape[0]):
        fs = kf_step(fs, trans, obs, Z[k], ops)
        out[k] = fs.x
    return out, ops


def run_eokf(trans: StateTransitionModel, ens: EnsembleModel,
             counts_selected: np.ndarray, x0=None, P0=None,
             fmt: "FixedPointFormat | None" = None) -> tuple:
    """Monolithic ensemble filter over per-bin selected-unit counts.

    With *fmt* given, the reduction uses the quantized weights (integer
    column sums scaled back by the format's LSB), mirroring the fixed-point
    implant datapath.
    """
    Z = np.asarray(counts_selected, dtype=np.int64)
    fs = _start(trans.A.shape[0], x0, P0)
    ops = StepOps()
    eq = fmt.quantize(ens.E) if fmt is not None else None
    out = np.empty((Z.shape[0], trans.A.shape[0]))
    ez_stream = np.empty_like(out)
    for k in range(Z.shape[0]):
        if fmt is None:
            ez = reduce_observation(ens, Z[k], ops.phase("observe"))
        else:
            ez = fmt.dequantize(eq @ Z[k])
        fs = eokf_step(fs, trans, ens, ez, ops)
        ez_stream[k] = ez
        out[k] = fs.x
    return out, ez_stream, ops


# ---------------------------------------------------------------------------
# binning and the implant-side accumulator
# ---------------------------------------------------------------------------


def bin_spikes(events, n_bins: int, bin_len: int, selected) -> np.ndarray:
    """Count sorted events into half-open bins [k*bin_len, (k+1)*bin_len).

    *events* rows are (t, channel, unit); only (channel, unit) pairs in
    *selected* are counted, in the column order of *selected*. Event order is
    irrelevant. Events outside the binned span are dropped.
    """
    ev = np.asarray(events, dtype=np.int64).reshape(-1, 3)
    out = np.zeros((n_bins, len(selected)), dtype=np.int64)
    if ev.shape[0] == 0:
        return out
    t, ch, un = ev[:, 0], ev[:, 1], ev[:, 2]
    key_of = {(c, u): j for j, (c, u) in enumerate(selected)}
    max_ch = int(ch.max())
    lut = np.full((max(max_ch + 1, 1) * 4,), -1, dtype=np.int64)
    for (c, u), j in key_of.items():
        if 0 <= u < 4 and c <= max_ch:
            lut[c * 4 + u] = j
    b = t // bin_len
    ok = (t >= 0) & (b < n_bins) & (ch >= 0) & (un >= 0) & (un < 4)
    col = np.full(ev.shape[0], -1, dtype=np.int64)
    col[ok] = lut[ch[ok] * 4 + un[ok]]
    ok &= col >= 0
    np.add.at(out, (b[ok], col[ok]), 1)
    return out


@dataclass(frozen=True)
class FixedPointFormat:
    """Signed fixed-point layout: value = integer * 2**(-frac_bits)."""

    bits: int = 16
    frac_bits: int = 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def lsb(self) -> float:
        return 2.0 ** (-self.frac_bits)

    @classmethod
    def for_matrix(cls, M: np.ndarray, bits: int = 16) -> "FixedPointFormat":
        """Largest power-of-two scale that keeps every entry in range."""
        a = float(np.abs(np.asarray(M, dtype=np.float64)).max(initial=0.0))
        if a == 0.0:
            return cls(bits=bits, frac_bits=0)
        qmax = 2 ** (bits - 1) - 1
        s = int(np.floor(np.log2(qmax / a)))
        while round(a * 2.0 ** s) > qmax:
            s -= 1
        return cls(bits=bits, frac_bits=s)

    def quantize(self, M: np.ndarray) -> np.ndarray:
        q = np.rint(np.asarray(M, dtype=np.float64) * 2.0 ** self.frac_bits)
        if np.any(q > self.qmax) or np.any(q < -self.qmax - 1):
            raise ValueError(f"values exceed the {self.bits}-bit range")
        return q.astype(np.int64)

    def dequantize(self, Q: np.ndarray) -> np.ndarray:
        return np.asarray(Q, dtype=np.float64) * self.lsb

    def to_json(self) -> dict:
        return {"bits": self.bits, "frac_bits": self.frac_bits}

    @classmethod
    def from_json(cls, obj: dict) -> "FixedPointFormat":
        return cls(bits=int(obj["bits"]), frac_bits=int(obj["frac_bits"]))


class ImplantAccumulator:
    """Implant-side half of the computation split: one add per spike event.

    In float mode the accumulator keeps exact integer per-unit counts and
    multiplies by E only at bin emission, so the emitted vector is
    bit-identical to E @ bin_counts no matter the event order. In fixed mode
    it adds the quantized 16-bit E column into a 32-bit accumulator on every
    event — the literal hardware datapath — and emission rescales by the
    format's LSB.
    """

    def __init__(self, ens: EnsembleModel, mode: str = "float",
                 fmt: FixedPointFormat | None = None):
        if mode not in ("float", "fixed"):
            raise ValueError(f"unknown accumulator mode {mode!r}")
        self.mode = mode
        self.ens = ens
        self._index = {pair: j for j, pair in enumerate(ens.selected)}
        d, s = ens.E.shape
        self.fmt = None
        if mode == "fixed":
            self.fmt = fmt if fmt is not None else FixedPointFormat.for_matrix(ens.E)
            self._eq = self.fmt.quantize(ens.E)
            self._acc = np.zeros(d, dtype=np.int64)
        else:
            self._counts = np.zeros(s, dtype=np.int64)
        self.events_accumulated = 0
        self.dropped = 0

    def accumulate(self, channel: int, unit: int) -> bool:
        """Add one spike event; returns False (and counts it) if unselected."""
        j = self._index.get((int(channel), int(unit)))
        if j is None:
            self.dropped += 1
            return False
        if self.mode == "fixed":
            self._acc += self._eq[:, j]
            if np.any(np.abs(self._acc) > INT32_MAX):
                raise ArithmeticError("implant accumulator exceeded 32-bit range")
        else:
            self._counts[j] += 1
        self.events_accumulated += 1
        return True

    def emit_bin(self) -> np.ndarray:
        """Close the bin: return the reduced observation and reset."""
        if self.mode == "fixed":
            ez = self.fmt.dequantize(self._acc)
            self._acc[:] = 0
        else:
            ez = self.ens.E @ self._counts.astype(np.float64)
            self._counts[:] = 0
        return ez


def run_eokf_split(trans: StateTransitionModel, ens: EnsembleModel, events,
                   n_bins: int, bin_len: int, mode: str = "float",
                   fmt: FixedPointFormat | None = None,
                   x0=None, P0=None) -> tuple:
    """Event-driven implant accumulation feeding the prosthesis-side filter.

    Returns (states, emitted ez per bin, StepOps, accumulator). Functionally
    interchangeable with run_eokf over bin_spikes of the same events.
    """
    ev = np.asarray(events, dtype=np.int64).reshape(-1, 3)
    acc = ImplantAccumulator(ens, mode=mode, fmt=fmt)
    fs = _start(trans.A.shape[0], x0, P0)
    ops = StepOps()
    d = trans.A.shape[0]
    out = np.empty((n_bins, d))
    ez_stream = np.empty((n_bins, d))
    b = ev[:, 0] // bin_len if ev.shape[0] else np.zeros(0, dtype=np.int64)
    order = np.argsort(b, kind="stable")
    pos = 0
    for k in range(n_bins):
        while pos < order.size and b[order[pos]] == k:
            _, ch, un = ev[order[pos]]
            acc.accumulate(int(ch), int(un))
            pos += 1
        ez = acc.emit_bin()
        fs = eokf_step(fs, trans, ens, ez, ops)
        ez_stream[k] = ez
        out[k] = fs.x
    return out, ez_stream, ops, acc


# ---------------------------------------------------------------------------
# op-count reporting
# ---------------------------------------------------------------------------


def count_ops(kind: str, n_neurons: int, state_dim: int = DEFAULT_STATE_DIM) -> dict:
    """Measured per-step operation counts for one filter at given sizes.

    Builds well-conditioned synthetic models, runs exactly one step through
    the counted kernels, and reports per-phase and total counts.
    """
    if kind not in ("kf", "eokf"):
        raise ValueError(f"unknown filter kind {kind!r}")
    rng = np.random.default_rng(12345)
    d, n = state_dim, n_neurons
    trans = StateTransitionModel(A=0.9 * np.eye(d), W=0.1 * np.eye(d))
    fs = FilterState(x=np.zeros(d), P=np.eye(d))
    z = rng.poisson(3.0, size=n).astype(np.float64)
    ops = StepOps()
    if kind == "kf":
        obs = StandardObservationModel(H=rng.standard_normal((n, d)), Q=np.eye(n))
        kf_step(fs, trans, obs, z, ops)
    else:
        ranks = [(j // MAX_UNITS_PER_CHANNEL, j % MAX_UNITS_PER_CHANNEL)
                 for j in range(n)]
        ens = EnsembleModel(E=0.1 * rng.standard_normal((d, n)),
                            Qe=0.1 * np.eye(d), selected=tuple(ranks))
        ez = reduce_observation(ens, z, ops.phase("observe"))
        eokf_step(fs, trans, ens, ez, ops)
    return {"kind": kind, "n_neurons": int(n), "state_dim": int(d),
            **ops.as_dict()}


# ---------------------------------------------------------------------------
# reconstruction evaluation
# ---------------------------------------------------------------------------


def evaluate_reconstruction(decoded: np.ndarray, truth: np.ndarray) -> dict:
    """Residual summary of a decoded velocity stream against ground truth.

    mse averages squared error over all bins and components. The residual
    norm per bin also comes back raw, keyed by the true movement direction
    and speed, for evenness analysis across reach directions.
    """
    D = np.asarray(decoded, dtype=np.float64)
    T = np.asarray(truth, dtype=np.float64)
    if D.shape != T.shape:
        raise ValueError("decoded and truth streams must align")
    res = D - T
    rnorm = np.linalg.norm(res, axis=1)
    return {"mse": float(np.mean(res ** 2)),
            "residual_std": float(rnorm.std()),
            "residual_kurtosis": float(stats.kurtosis(rnorm, fisher=False)),
            "residual_norm": rnorm,
            "direction": np.arctan2(T[:, 1], T[:, 0]),
            "speed": np.linalg.norm(T, axis=1)}


def per_direction_stats(decoded: np.ndarray, truth: np.ndarray,
                        n_sectors: int = 8) -> tuple:
    """Mean |residual| per direction sector, variance across sectors, occupancy.

    Sectors are centered on k * 2pi/n so movements along the canonical
    center-out target angles never straddle a sector edge.  Returns
    ``(means, variance, counts)`` where ``counts[s]`` is the number of bins
    that fell in sector ``s``; empty sectors contribute NaN means and are
    excluded from the variance.
    """
    ev = evaluate_reconstruction(decoded, truth)
    width = 2 * np.pi / n_sectors
    ang = np.mod(ev["direction"] + width / 2, 2 * np.pi)
    sector = np.minimum((ang / width).astype(int), n_sectors - 1)
    means = np.full(n_sectors, np.nan)
    counts = np.zeros(n_sectors, dtype=np.int64)
    for s in range(n_sectors):
        mask = sector == s
        counts[s] = int(mask.sum())
        if mask.any():
            means[s] = ev["residual_norm"][mask].mean()
    filled = means[~np.isnan(means)]
    return means, float(filled.var()), counts


def best_single_neuron_decoder(counts: np.ndarray, velocity: np.ndarray,
                               intercept: bool = True,
                               units: list | None = None) -> tuple:
    """Strongest single-unit linear decoder on the training data.

    Fits velocity ~ rate (optionally with intercept) per unit and returns
    (unit index, predictions) of the lowest-MSE unit; ties keep the lowest
    index.
    """
    Z = np.asarray(counts, dtype=np.float64)
    X = np.asarray(velocity, dtype=np.float64)
    cols = range(Z.shape[1]) if units is None else units
    best = None
    for j in cols:
        zj = Z[:, [j]]
        F = np.hstack([zj, np.ones_like(zj)]) if intercept else zj
        pred = F @ _ridge(F, X)
        mse = float(np.mean((pred - X) ** 2))
        if best is None or mse < best[0]:
            best = (mse, int(j), pred)
    if best is None:
        raise ValueError("no units to evaluate")
    return best[1], best[2]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


@dataclass
class DecoderBundle:
    """Everything needed to decode: models, start state, optional fixed point."""

    kind: str                                   # "kf" | "eokf"
    transition: StateTransitionModel
    observation: StandardObservationModel | None = None
    ensemble: EnsembleModel | None = None
    x0: np.ndarray | None = None
    P0: np.ndarray | None = None
    bin_ms: int = 100
    fixed: FixedPointFormat | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("kf", "eokf"):
            raise ValueError(f"unknown decoder kind {self.kind!r}")
        if self.kind == "kf" and self.observation is None:
            raise ValueError("standard decoder needs an observation model")
        if self.kind == "eokf" and self.ensemble is None:
            raise ValueError("ensemble decoder needs an ensemble model")
        d = self.transition.A.shape[0]
        if self.x0 is None:
            self.x0 = np.zeros(d)
        if self.P0 is None:
            self.P0 = np.eye(d)
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.P0 = np.asarray(self.P0, dtype=np.float64)

    @property
    def state_dim(self) -> int:
        return self.transition.A.shape[0]

    def to_json(self) -> dict:
        obj = {"kind": self.kind, "state_dim": self.state_dim,
               "bin_ms": int(self.bin_ms),
               "A": self.transition.A.tolist(), "W": self.transition.W.tolist(),
               "x0": self.x0.tolist(), "P0": self.P0.tolist(),
               "meta": dict(self.meta)}
        if self.observation is not None:
            obj["H"] = self.observation.H.tolist()
            obj["Q"] = self.observation.Q.tolist()
        if self.ensemble is not None:
            obj["E"] = self.ensemble.E.tolist()
            obj["Qe"] = self.ensemble.Qe.tolist()
            obj["selected"] = [[c, u] for c, u in self.ensemble.selected]
        if self.fixed is not None:
            obj["fixed_point"] = self.fixed.to_json()
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "DecoderBundle":
        try:
            trans = StateTransitionModel(A=np.array(obj["A"]), W=np.array(obj["W"]))
            obs = None
            if "H" in obj:
                obs = StandardObservationModel(H=np.array(obj["H"]),
                                               Q=np.array(obj["Q"]))
            ens = None
            if "E" in obj:
                ens = EnsembleModel(E=np.array(obj["E"]), Qe=np.array(obj["Qe"]),
                                    selected=tuple((int(c), int(u))
                                                   for c, u in obj["selected"]))
            fixed = None
            if obj.get("fixed_point") is not None:
                fixed = FixedPointFormat.from_json(obj["fixed_point"])
            return cls(kind=obj["kind"], transition=trans, observation=obs,
                       ensemble=ens, x0=np.array(obj["x0"]), P0=np.array(obj["P0"]),
                       bin_ms=int(obj.get("bin_ms", 100)), fixed=fixed,
                       meta=dict(obj.get("meta", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise PayloadError(f"bad decoder model: {exc}") from exc


def store_decoder(bundle: DecoderBundle, path: str) -> None:
    atomic_write_text(path, json.dumps(bundle.to_json(), indent=1, sort_keys=True) + "\n")


def load_decoder(path: str) -> DecoderBundle:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PayloadError(f"{path}: {exc}") from exc
    return DecoderBundle.from_json(obj)


def store_decoded(path: str, states: np.ndarray) -> None:
    """Decoded kinematics CSV: bin,vx,vy[,vz]."""
    S = np.asarray(states, dtype=np.float64)
    names = ["vx", "vy", "vz"][: S.shape[1]]
    lines = ["bin," + ",".join(names)]
    for k, row in enumerate(S):
        lines.append(f"{k}," + ",".join(repr(float(v)) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_decoded(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("bin,"):
        raise PayloadError(f"{path}: not a decoded-kinematics CSV")
    try:
        rows = [[float(v) for v in ln.split(",")[1:]] for ln in lines[1:]]
    except ValueError as exc:
        raise PayloadError(f"{path}: {exc}") from exc
    return np.array(rows, dtype=np.float64)
