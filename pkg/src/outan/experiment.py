"""Synthetic light-driven neurons and the sequence-induction analysis.

Spike times are in ms relative to the start of their trial.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ._rng import substream
from .stats import spearman, wilcoxon_signed_rank
from .exceptions import UndefinedCorrelationError
from .sequencer import Sinusoid


@dataclass(frozen=True)
class NeuronModel:
    id: str
    attached_led: str
    threshold: float = 0.1  # μW
    gain: float = 400.0  # Hz per μW above threshold
    baseline: float = 1.0  # Hz
    population_threshold: float = 0.4  # μW
    refractory: float = 2.0  # ms

    def __post_init__(self):
        if not self.threshold < self.population_threshold:
            raise ValueError("spiking threshold must be below the population threshold")
        if self.baseline < 0 or self.gain < 0 or self.refractory < 0:
            raise ValueError("baseline, gain and refractory must be non-negative")

    def rate(self, power):
        """Instantaneous firing rate (Hz) at local optical power ``power`` (μW)."""
        return self.baseline + self.gain * np.maximum(0.0, np.asarray(power, dtype=float) - self.threshold)


def make_neurons(leds, **params):
    return [NeuronModel(f"U{k + 1}", led, **params) for k, led in enumerate(leds)]


def save_neurons(neurons, path):
    with open(path, "w") as fh:
        json.dump([asdict(n) for n in neurons], fh, indent=2)
        fh.write("\n")


def load_neurons(path):
    with open(path) as fh:
        return [NeuronModel(**d) for d in json.load(fh)]


@dataclass
class SpikeTrains:
    """``trains[neuron_id][trial]`` is a sorted array of spike times (ms)."""

    trains: dict = field(default_factory=dict)
    n_trials: int = 0
    population_flags: dict = field(default_factory=dict)

    @property
    def neuron_ids(self):
        return list(self.trains)

    def total_spikes(self):
        return sum(t.size for trials in self.trains.values() for t in trials)


def _apply_refractory(times, refractory):
    if refractory <= 0 or times.size < 2:
        return times
    keep = []
    last = -math.inf
    for t in times:
        if t - last >= refractory:
            keep.append(t)
            last = t
    return np.array(keep)


def _inhomogeneous_poisson(rate_fn, rate_max, window_ms, rng):
    """Thinning: homogeneous candidates at ``rate_max`` kept with prob rate/rate_max."""
    if rate_max <= 0:
        return np.empty(0)
    n = rng.poisson(rate_max * window_ms * 1e-3)
    cand = np.sort(rng.uniform(0.0, window_ms, n))
    keep = rng.uniform(0.0, rate_max, n) < rate_fn(cand)
    return cand[keep]


class _PowerSeries:
    """ZOH optical power of one channel, looked up by absolute time (ms)."""

    def __init__(self, trace, channel):
        rows = trace.for_channel(channel)
        self.t_ms = rows["time_us"] / 1e3
        self.p = rows["power_uw"]

    def at(self, t_ms):
        if self.t_ms.size == 0:
            return np.zeros(np.shape(t_ms))
        idx = np.searchsorted(self.t_ms, t_ms, side="right") - 1
        return np.where(idx >= 0, self.p[np.clip(idx, 0, None)], 0.0)

    def max_between(self, a, b):
        lo = np.searchsorted(self.t_ms, a, side="right") - 1
        hi = np.searchsorted(self.t_ms, b, side="left")
        vals = self.p[max(lo, 0):hi]
        return float(vals.max()) if vals.size else 0.0


def generate_spikes(neurons, trace, probe, trial_starts_ms, window_ms, seed=0):
    """Draw spike trains driven by each neuron's μLED power in ``trace``.

    Each neuron fires as an inhomogeneous Poisson process with rate
    ``baseline + gain·max(0, P(t) − threshold)``; spikes closer than the
    refractory period to the previous kept spike are dropped.
    """
    out = SpikeTrains(n_trials=len(trial_starts_ms))
    for nrn in neurons:
        rng = substream(seed, f"spikes/{nrn.id}")
        series = _PowerSeries(trace, probe.channel_of(nrn.attached_led))
        trials, flags = [], []
        for start in trial_starts_ms:
            p_max = series.max_between(start, start + window_ms)
            spikes = _inhomogeneous_poisson(
                lambda t, s=start: nrn.rate(series.at(s + t)),
                float(nrn.rate(p_max)),
                window_ms,
                rng,
            )
            trials.append(_apply_refractory(spikes, nrn.refractory))
            flags.append(p_max >= nrn.population_threshold)
        out.trains[nrn.id] = trials
        out.population_flags[nrn.id] = np.array(flags)
    return out


def shuffle_spikes(trains, window_ms, seed=0):
    """Null control: each trial's spikes redrawn uniformly over the window, counts kept."""
    rng = substream(seed, "shuffle")
    out = SpikeTrains(n_trials=trains.n_trials, population_flags=dict(trains.population_flags))
    for nid, trials in trains.trains.items():
        out.trains[nid] = [np.sort(rng.uniform(0.0, window_ms, t.size)) for t in trials]
    return out


def write_spikes(trains, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["trial", "neuron", "spike_time_ms"])
    for k in range(trains.n_trials):
        for nid in trains.neuron_ids:
            for t in trains.trains[nid][k].tolist():
                w.writerow([k, nid, repr(t)])


def read_spikes(fh, n_trials=None, neuron_ids=()):
    reader = csv.reader(fh)
    if next(reader, None) != ["trial", "neuron", "spike_time_ms"]:
        raise ValueError("expected header trial,neuron,spike_time_ms")
    rows = [(int(r[0]), r[1], float(r[2])) for r in reader]
    if n_trials is None:
        n_trials = max((r[0] for r in rows), default=-1) + 1
    ids = list(dict.fromkeys(list(neuron_ids) + [r[1] for r in rows]))
    buckets = {nid: [[] for _ in range(n_trials)] for nid in ids}
    for trial, nid, t in rows:
        buckets[nid][trial].append(t)
    return SpikeTrains({nid: [np.array(sorted(b)) for b in tr] for nid, tr in buckets.items()}, n_trials)


def psth(trains, event_times_ms=(0.0,), bin_ms=5.0, window_ms=100.0, scale=False):
    """Spike counts per bin after each event, averaged over events and trials.

    ``trains`` maps neuron id to per-trial spike-time arrays (a
    :class:`SpikeTrains` works too); ``event_times_ms`` are trial-relative.
    With ``scale`` each histogram is divided by its own maximum.
    """
    if isinstance(trains, SpikeTrains):
        trains = trains.trains
    events = np.atleast_1d(np.asarray(event_times_ms, dtype=float))
    if events.size == 0:
        raise ValueError("need at least one event")
    if not window_ms > 0 or not bin_ms > 0 or bin_ms > window_ms:
        raise ValueError("window must be positive and hold at least one bin")
    n_bins = int(round(window_ms / bin_ms))
    edges = np.arange(n_bins + 1) * bin_ms
    out = {}
    for nid, trials in trains.items():
        counts = np.zeros(n_bins)
        for spikes in trials:
            for ev in events:
                counts += np.histogram(np.asarray(spikes) - ev, bins=edges)[0]
        counts /= events.size * max(len(trials), 1)
        if scale and counts.max() > 0:
            counts = counts / counts.max()
        out[nid] = counts
    return out, edges


def smooth_rate(train, sigma_ms=5.0, t_start=0.0, t_stop=None, dt=1.0):
    """Gaussian-kernel rate (spikes per ms) on the grid ``t_start + k·dt``.

    Each spike contributes a unit-mass Gaussian, so the sum over the grid
    times ``dt`` is the spike count for spikes well inside the grid.
    """
    if not sigma_ms > 0:
        raise ValueError("sigma must be positive")
    spikes = np.asarray(train, dtype=float)
    if t_stop is None:
        t_stop = (spikes.max() if spikes.size else t_start) + 5 * sigma_ms
    grid = t_start + dt * np.arange(int(math.ceil((t_stop - t_start) / dt - 1e-9)))
    if spikes.size == 0:
        return grid, np.zeros(grid.size)
    z = (grid[:, None] - spikes[None, :]) / sigma_ms
    rate = np.exp(-0.5 * z * z).sum(axis=1) / (sigma_ms * math.sqrt(2 * math.pi))
    return grid, rate


def illumination_pattern(meta, table=None, dt=1.0):
    """Commanded power (μW) of each sequence channel on a trial-relative grid.

    Returns ``(grid, {channel: power})``. With a table the powers are
    quantized to the calibration rows the controller actually sends.
    """
    grid = dt * np.arange(int(math.ceil(meta.window_ms / dt - 1e-9)))
    wave = Sinusoid(1e3 / meta.per_led_ms, meta.peak_power)
    out = {}
    for j, ch in enumerate(meta.channels):
        t = grid - j * meta.per_led_ms
        on = (t >= 0) & (t < meta.per_led_ms)
        p = np.where(on, wave.sample(np.clip(t, 0, None) * 1e3), 0.0)
        if table is not None:
            p = np.array([table.row_for(v) for v in p]) * table.lsb
        out[ch] = p
    return grid, out


@dataclass
class SequenceResult:
    rhos: np.ndarray
    excluded: int
    median: float
    statistic: float
    pvalue: float
    method: str

    def to_dict(self):
        return {
            "rho": [float(r) for r in self.rhos],
            "median_rho": self.median,
            "signed_rank_w": self.statistic,
            "p_value": self.pvalue,
            "method": self.method,
            "excluded_trials": self.excluded,
        }


def unit_order(neurons, meta, probe):
    """Neurons sorted by the slot of their μLED in the sequence; others dropped."""
    slot = {ch: j for j, ch in enumerate(meta.channels)}
    ranked = []
    for nrn in neurons:
        ch = probe.channel_of(nrn.attached_led)
        if ch in slot:
            ranked.append((slot[ch], nrn))
    return [n for _, n in sorted(ranked, key=lambda x: x[0])]


def score_sequence(trains, meta, neurons, probe, table=None, sigma_ms=5.0, method="auto"):
    """Per-trial Spearman rho between the illumination pattern and unit rates.

    Units are concatenated in the order of their μLEDs in the sequence; the
    pattern vector is each unit's μLED power on the same 1 ms grid. Trials
    where rho is undefined (e.g. no spikes at all) are excluded and counted.
    """
    if trains.n_trials < 2:
        raise ValueError("need at least 2 trials")
    grid, pattern = illumination_pattern(meta, table)
    units = unit_order(neurons, meta, probe)
    if not units:
        raise ValueError("no neuron is driven by a μLED in the sequence")
    x = np.concatenate([pattern[probe.channel_of(n.attached_led)] for n in units])
    rhos = []
    excluded = 0
    for k in range(trains.n_trials):
        y = np.concatenate([
            smooth_rate(trains.trains[n.id][k], sigma_ms, 0.0, meta.window_ms)[1] for n in units
        ])
        try:
            rhos.append(spearman(x, y))
        except UndefinedCorrelationError:
            excluded += 1
    rhos = np.array(rhos)
    test = wilcoxon_signed_rank(rhos, 0.0, method=method)
    return SequenceResult(rhos, excluded, float(np.median(rhos)), test.statistic, test.pvalue, test.method)


def peak_order(hist, ids):
    """``ids`` sorted by the bin of their PSTH maximum."""
    return sorted(ids, key=lambda nid: int(np.argmax(hist[nid])))
